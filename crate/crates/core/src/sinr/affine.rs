use nalgebra::{DMatrix, DVector};

use super::model::{recon_weights, FieldSnapshot, FilterBasis, LatentState, SinrNet, SinrParams};
use super::{Result, SinrError};
use crate::sphere::SamplingSet;

/// Default relative singular-value cutoff of the encoder subspace.
pub const ENCODE_RCOND: f64 = 1e-1;

/// The decoder on a fixed sampling set in its exact form `vec(out) = J z + o`,
/// with rows ordered point-major (`p·c + channel`).
///
/// Encoders search the span of the leading right singular vectors of the
/// cos-latitude weighted `J`, those with singular value at least `rcond`
/// times the largest.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDecoder {
    pub set: SamplingSet,
    pub channels: usize,
    pub jac: DMatrix<f64>,
    pub offset: DVector<f64>,
    /// `m × k` orthonormal basis of the encoder subspace.
    pub basis: DMatrix<f64>,
}

/// Scales row `i` of `a` by the root weight of `picks[i]` and returns the factors.
fn weighted_rows(set: &SamplingSet, picks: &[(usize, usize)], a: &mut DMatrix<f64>) -> Vec<f64> {
    let w = recon_weights(set, 1);
    picks
        .iter()
        .enumerate()
        .map(|(i, &(p, _))| {
            let s = w[(p, 0)].sqrt();
            a.row_mut(i).scale_mut(s);
            s
        })
        .collect()
}

impl AffineDecoder {
    pub fn new(sp: &SinrParams, set: &SamplingSet) -> Self {
        let net = SinrNet::new(sp);
        let g = net.filters(&FilterBasis::for_dims(set, &sp.dims));
        let jac = net.jacobian(&g);
        let base = net.eval(&g, &DVector::zeros(sp.dims.latent));
        let c = sp.dims.channels;
        let offset = DVector::from_fn(set.len() * c, |i, _| base[(i / c, i % c)]);
        let m = jac.ncols();
        Self {
            set: set.clone(),
            channels: c,
            jac,
            offset,
            basis: DMatrix::identity(m, m),
        }
        .with_rcond(ENCODE_RCOND)
    }

    /// Rebuilds the encoder subspace with cutoff `rcond`; 0 keeps every direction.
    pub fn with_rcond(mut self, rcond: f64) -> Self {
        let m = self.jac.ncols();
        if rcond <= 0.0 || m == 0 {
            self.basis = DMatrix::identity(m, m);
            return self;
        }
        let picks: Vec<(usize, usize)> = (0..self.set.len())
            .flat_map(|p| (0..self.channels).map(move |ch| (p, ch)))
            .collect();
        let mut a = self.jac.clone();
        weighted_rows(&self.set, &picks, &mut a);
        let gram = a.tr_mul(&a);
        let eig = gram.symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        let mut order: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > (rcond * rcond) * top).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let mut basis = DMatrix::zeros(m, order.len());
        for (c, &i) in order.iter().enumerate() {
            basis.set_column(c, &eig.eigenvectors.column(i));
        }
        self.basis = basis;
        self
    }

    /// Dimension of the encoder subspace.
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn latent(&self) -> usize {
        self.jac.ncols()
    }

    /// `|S| × c` field for one latent.
    pub fn decode(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let v = &self.jac * z + &self.offset;
        DMatrix::from_fn(self.set.len(), self.channels, |p, ch| v[p * self.channels + ch])
    }

    pub fn snapshot(&self, z: &DVector<f64>) -> FieldSnapshot {
        FieldSnapshot {
            set: self.set.clone(),
            values: self.decode(z),
            channel_names: super::channel_labels(self.channels),
        }
    }

    /// Decoded values of the `(point, channel)` entries in `picks`.
    pub fn rows(&self, picks: &[(usize, usize)]) -> (DMatrix<f64>, DVector<f64>) {
        let idx: Vec<usize> = picks.iter().map(|&(p, ch)| p * self.channels + ch).collect();
        (self.jac.select_rows(&idx), self.offset.select_rows(&idx))
    }

    /// Minimum-norm weighted least-squares latent within the encoder
    /// subspace for values observed at `picks`, weighted by cos-latitude.
    pub fn encode_picks(&self, picks: &[(usize, usize)], y: &DVector<f64>) -> Result<DVector<f64>> {
        if picks.is_empty() {
            return Err(SinrError::EmptySnapshot);
        }
        if picks.len() != y.len() {
            return Err(SinrError::Dimension(format!("{} picks for {} values", picks.len(), y.len())));
        }
        let (a, o) = self.rows(picks);
        let mut a = a * &self.basis;
        let mut rhs = y - o;
        for (r, s) in rhs.iter_mut().zip(weighted_rows(&self.set, picks, &mut a)) {
            *r *= s;
        }
        let z = &self.basis * solve_min_norm(&a, &rhs);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SinrError::NonFinite("least-squares latent".into()));
        }
        Ok(z)
    }

    /// Exact encoding of a full snapshot on this decoder's set.
    pub fn encode(&self, values: &DMatrix<f64>, time_index: f64) -> Result<LatentState> {
        let picks: Vec<(usize, usize)> = (0..self.set.len())
            .flat_map(|p| (0..self.channels).map(move |ch| (p, ch)))
            .collect();
        let y = DVector::from_iterator(picks.len(), picks.iter().map(|&(p, ch)| values[(p, ch)]));
        Ok(LatentState::new(self.encode_picks(&picks, &y)?, time_index))
    }
}

pub(crate) fn solve_min_norm(a: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if a.nrows() > a.ncols() {
        let qr = a.clone().qr();
        let qtb = qr.q().tr_mul(rhs);
        crate::linalg::pinv(&qr.r(), 1e-10) * qtb
    } else {
        crate::linalg::pinv(a, 1e-10) * rhs
    }
}
