use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SinrError};
use crate::autograd::{Bound, Layout, ParamVector, Tape, Var};
use crate::ltsr::{NamedTensors, Tensor};
use crate::sphere::{HarmonicEvaluator, SamplingSet};

/// Network sizes: `depth` L, filter `degree` D, `hidden` h, `latent` m and `channels` c.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinrDims {
    pub depth: usize,
    pub degree: usize,
    pub hidden: usize,
    pub latent: usize,
    pub channels: usize,
}

impl Default for SinrDims {
    fn default() -> Self {
        Self {
            depth: 8,
            degree: 8,
            hidden: 128,
            latent: 400,
            channels: 1,
        }
    }
}

impl SinrDims {
    pub fn filter_width(&self) -> usize {
        2 * self.degree + 1
    }

    /// Highest harmonic degree any filter touches.
    pub fn max_filter_degree(&self) -> usize {
        self.degree + self.depth
    }

    /// Degree bound `(2D+L)(L+1)/2` on the decoded field.
    pub fn output_degree_bound(&self) -> usize {
        (2 * self.degree + self.depth) * (self.depth + 1) / 2
    }

    pub fn layout(&self) -> Layout {
        let (h, m, c, k) = (self.hidden, self.latent, self.channels, self.filter_width());
        let mut l = Layout::new();
        for i in 0..=self.depth {
            l.push(format!("xi{i}"), h, k);
            if i > 0 {
                l.push(format!("w{i}"), h, h);
                l.push(format!("b{i}"), 1, h);
                l.push(format!("a{i}"), h, m);
                l.push(format!("c{i}"), 1, h);
            }
            l.push(format!("wout{i}"), c, h);
            l.push(format!("bout{i}"), 1, c);
        }
        l
    }
}

/// The coefficient matrix `Ξ` of one spherical filter with its degree and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalFilterParams {
    pub xi: DMatrix<f64>,
    pub degree: usize,
    pub shift: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinrParams {
    pub dims: SinrDims,
    pub skip: bool,
    pub params: ParamVector,
}

/// A latent vector with its time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: DVector<f64>,
    pub time_index: f64,
}

impl LatentState {
    pub fn new(z: DVector<f64>, time_index: f64) -> Self {
        Self { z, time_index }
    }

    pub fn zeros(m: usize) -> Self {
        Self::new(DVector::zeros(m), 0.0)
    }
}

/// `|S| × c` samples of a multi-channel field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshot {
    pub set: SamplingSet,
    pub values: DMatrix<f64>,
    pub channel_names: Vec<String>,
}

impl FieldSnapshot {
    pub fn new(set: SamplingSet, values: DMatrix<f64>, channel_names: Vec<String>) -> Result<Self> {
        if values.nrows() != set.len() || values.ncols() != channel_names.len() {
            return Err(SinrError::Dimension(format!(
                "{}x{} values for {} points and {} channels",
                values.nrows(),
                values.ncols(),
                set.len(),
                channel_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SinrError::NonFinite("snapshot values".into()));
        }
        Ok(Self {
            set,
            values,
            channel_names,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], tag: &str) -> Self {
        Self {
            set: self.set.subset(indices, tag),
            values: self.values.select_rows(indices),
            channel_names: self.channel_names.clone(),
        }
    }
}

/// Default channel labels `ch0, ch1, …`.
pub fn channel_labels(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i}")).collect()
}

/// Harmonic values `Y_{|m|+l}^m(p)` for every point, layer and order.
#[derive(Debug, Clone)]
pub struct FilterBasis {
    pub mats: Vec<DMatrix<f64>>,
}

impl FilterBasis {
    pub fn new(set: &SamplingSet, degree: usize, depth: usize) -> Self {
        let k = 2 * degree + 1;
        let mut mats = vec![DMatrix::zeros(set.len(), k); depth + 1];
        for (row, p) in set.points().iter().enumerate() {
            let ev = HarmonicEvaluator::new(degree + depth, degree, p);
            for (l, mat) in mats.iter_mut().enumerate() {
                for j in 0..k {
                    let m = j as isize - degree as isize;
                    mat[(row, j)] = ev.eval(m.unsigned_abs() + l, m);
                }
            }
        }
        Self { mats }
    }

    pub fn for_dims(set: &SamplingSet, dims: &SinrDims) -> Self {
        Self::new(set, dims.degree, dims.depth)
    }

    pub fn points(&self) -> usize {
        self.mats[0].nrows()
    }
}

/// Unpacked weights for repeated evaluation outside a tape.
#[derive(Debug, Clone)]
pub struct SinrNet {
    pub dims: SinrDims,
    pub skip: bool,
    xi: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
    shift: Vec<RowDVector<f64>>,
    a: Vec<DMatrix<f64>>,
    wout: Vec<DMatrix<f64>>,
    bout: Vec<RowDVector<f64>>,
}

fn row(p: &ParamVector, name: &str) -> RowDVector<f64> {
    RowDVector::from_row_slice(p.slice(name).expect("segment exists"))
}

impl SinrNet {
    pub fn new(sp: &SinrParams) -> Self {
        let p = &sp.params;
        let mat = |n: String| p.matrix(&n).expect("segment exists");
        let l = sp.dims.depth;
        Self {
            dims: sp.dims,
            skip: sp.skip,
            xi: (0..=l).map(|i| mat(format!("xi{i}"))).collect(),
            w: (1..=l).map(|i| mat(format!("w{i}"))).collect(),
            shift: (1..=l)
                .map(|i| row(p, &format!("b{i}")) + row(p, &format!("c{i}")))
                .collect(),
            a: (1..=l).map(|i| mat(format!("a{i}"))).collect(),
            wout: (0..=l).map(|i| mat(format!("wout{i}"))).collect(),
            bout: (0..=l).map(|i| row(p, &format!("bout{i}"))).collect(),
        }
    }

    /// Filter values `G_l = B_l Ξ_lᵀ`, `|S| × h` per layer.
    pub fn filters(&self, basis: &FilterBasis) -> Vec<DMatrix<f64>> {
        basis
            .mats
            .iter()
            .zip(&self.xi)
            .map(|(b, xi)| b * xi.transpose())
            .collect()
    }

    fn emits(&self, l: usize) -> bool {
        self.skip || l == self.dims.depth
    }

    /// Decoded values, `|S| × c`.
    pub fn eval(&self, g: &[DMatrix<f64>], z: &DVector<f64>) -> DMatrix<f64> {
        let n = g[0].nrows();
        let mut gamma = g[0].clone();
        let mut out = DMatrix::zeros(n, self.dims.channels);
        if self.emits(0) {
            self.add_output(&mut out, &gamma, 0);
        }
        for l in 1..=self.dims.depth {
            let q = (&self.a[l - 1] * z).transpose() + &self.shift[l - 1];
            let mut pre = &gamma * self.w[l - 1].transpose();
            for mut r in pre.row_iter_mut() {
                r += &q;
            }
            gamma = pre.component_mul(&g[l]);
            if self.emits(l) {
                self.add_output(&mut out, &gamma, l);
            }
        }
        out
    }

    fn add_output(&self, out: &mut DMatrix<f64>, gamma: &DMatrix<f64>, l: usize) {
        out.gemm(1.0, gamma, &self.wout[l].transpose(), 1.0);
        for mut r in out.row_iter_mut() {
            r += &self.bout[l];
        }
    }

    /// `∂ vec(out) / ∂z` with rows ordered point-major (`p·c + channel`).
    ///
    /// Tangents obey `dγ_l = (W_l dγ_{l-1} + A_l e_i) ⊙ g_l`, which does not
    /// involve `z`; all `m` directions are pushed through at once by stacking
    /// them as extra columns.
    pub fn jacobian(&self, g: &[DMatrix<f64>]) -> DMatrix<f64> {
        let (n, h, m, c) = (
            g[0].nrows(),
            self.dims.hidden,
            self.dims.latent,
            self.dims.channels,
        );
        let mut jac = DMatrix::zeros(n * c, m);
        // dgamma[i] is the n × h tangent for direction e_i
        let mut dgamma: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, h); m];
        for l in 1..=self.dims.depth {
            let wt = self.w[l - 1].transpose();
            for (i, dg) in dgamma.iter_mut().enumerate() {
                let ai = self.a[l - 1].column(i).transpose();
                let mut pre = &*dg * &wt;
                for mut r in pre.row_iter_mut() {
                    r += &ai;
                }
                *dg = pre.component_mul(&g[l]);
            }
            if self.emits(l) {
                let wot = self.wout[l].transpose();
                for (i, dg) in dgamma.iter().enumerate() {
                    let d = dg * &wot;
                    for p in 0..n {
                        for ch in 0..c {
                            jac[(p * c + ch, i)] += d[(p, ch)];
                        }
                    }
                }
            }
        }
        jac
    }

    /// Records the decoder on `tape`; `z_row` is a `1 × m` node.
    pub fn forward_on_tape(
        tape: &mut Tape,
        bound: &Bound,
        dims: &SinrDims,
        skip: bool,
        basis: &FilterBasis,
        z_row: Var,
    ) -> Result<Var> {
        record(tape, bound, dims, skip, &basis.mats, z_row, None)
    }

    /// Decodes every row of the `B × m` node `z` on the points of `basis`.
    ///
    /// Output rows are snapshot-major: row `b·P + p` is point `p` of latent `b`.
    pub fn forward_batch_on_tape(
        tape: &mut Tape,
        bound: &Bound,
        dims: &SinrDims,
        skip: bool,
        basis: &FilterBasis,
        z: Var,
    ) -> Result<Var> {
        let b = tape.value(z).nrows();
        if b == 1 {
            return Self::forward_on_tape(tape, bound, dims, skip, basis, z);
        }
        let p = basis.points();
        let tiled: Vec<DMatrix<f64>> = basis
            .mats
            .iter()
            .map(|m| DMatrix::from_fn(b * p, m.ncols(), |r, c| m[(r % p, c)]))
            .collect();
        let expand = tape.constant(DMatrix::from_fn(b * p, b, |r, c| if r / p == c { 1.0 } else { 0.0 }));
        record(tape, bound, dims, skip, &tiled, z, Some(expand))
    }
}

fn record(
    tape: &mut Tape,
    bound: &Bound,
    dims: &SinrDims,
    skip: bool,
    mats: &[DMatrix<f64>],
    z: Var,
    expand: Option<Var>,
) -> Result<Var> {
    let emits = |l: usize| skip || l == dims.depth;
    let filter = |tape: &mut Tape, l: usize| -> Result<Var> {
        let b = tape.constant(mats[l].clone());
        let xi = bound.get(&format!("xi{l}"))?;
        let xit = tape.transpose(xi);
        Ok(tape.matmul(b, xit))
    };
    let output = |tape: &mut Tape, gamma: Var, l: usize| -> Result<Var> {
        let wout = bound.get(&format!("wout{l}"))?;
        let wt = tape.transpose(wout);
        let o = tape.matmul(gamma, wt);
        Ok(tape.add_row(o, bound.get(&format!("bout{l}"))?))
    };
    let mut gamma = filter(tape, 0)?;
    let mut out = if emits(0) {
        Some(output(tape, gamma, 0)?)
    } else {
        None
    };
    for l in 1..=dims.depth {
        let g = filter(tape, l)?;
        let w = bound.get(&format!("w{l}"))?;
        let wt = tape.transpose(w);
        let pre = tape.matmul(gamma, wt);
        let a = bound.get(&format!("a{l}"))?;
        let at = tape.transpose(a);
        let az = tape.matmul(z, at);
        let bc = tape.add(bound.get(&format!("b{l}"))?, bound.get(&format!("c{l}"))?);
        let pre = match expand {
            None => {
                let q = tape.add(az, bc);
                tape.add_row(pre, q)
            }
            Some(e) => {
                let q = tape.add_row(az, bc);
                let q = tape.matmul(e, q);
                tape.add(pre, q)
            }
        };
        gamma = tape.mul(pre, g);
        if emits(l) {
            let o = output(tape, gamma, l)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, o),
                None => o,
            });
        }
    }
    Ok(out.expect("the last layer always emits"))
}

impl SinrParams {
    pub fn zeros(dims: SinrDims, skip: bool) -> Self {
        Self {
            dims,
            skip,
            params: ParamVector::zeros(dims.layout()),
        }
    }

    /// Random initialization.
    ///
    /// `Ξ` is uniform on `±1/√(2D+1)`, weight matrices use fan-in scaling and
    /// `c_l` starts at zero. `A_l` also gets a fan-in draw, scaled by 0.1:
    /// with both `A_l` and the latents at zero the gradients with respect to
    /// each of them vanish identically.
    pub fn init<R: Rng + ?Sized>(dims: SinrDims, skip: bool, rng: &mut R) -> Self {
        let mut sp = Self::zeros(dims, skip);
        let p = &mut sp.params;
        let mut fill = |p: &mut ParamVector, name: String, bound: f64| {
            for v in p.slice_mut(&name).expect("segment exists") {
                *v = rng.random_range(-bound..bound);
            }
        };
        let k = dims.filter_width() as f64;
        let h = dims.hidden as f64;
        let m = dims.latent as f64;
        for l in 0..=dims.depth {
            fill(p, format!("xi{l}"), 1.0 / k.sqrt());
            if l > 0 {
                fill(p, format!("w{l}"), 1.0 / h.sqrt());
                fill(p, format!("b{l}"), 1.0 / h.sqrt());
                fill(p, format!("a{l}"), 0.1 / m.sqrt());
            }
            fill(p, format!("wout{l}"), 1.0 / h.sqrt());
        }
        sp
    }

    pub fn filter(&self, l: usize) -> SphericalFilterParams {
        SphericalFilterParams {
            xi: self.params.matrix(&format!("xi{l}")).expect("segment exists"),
            degree: self.dims.degree,
            shift: l,
        }
    }

    pub fn net(&self) -> SinrNet {
        SinrNet::new(self)
    }

    pub fn check_latent(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dims.latent {
            return Err(SinrError::Dimension(format!(
                "latent has {} entries, model expects {}",
                z.len(),
                self.dims.latent
            )));
        }
        Ok(())
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut n = NamedTensors::new();
        for s in self.params.layout().segments() {
            let t = Tensor::new(vec![s.rows, s.cols], self.params.values[s.range()].to_vec())
                .expect("segment shape");
            n.push(s.name.clone(), t);
        }
        n.set_attr("kind", "sinr");
        n.set_attr("dims", self.dims);
        n.set_attr("skip", self.skip);
        n
    }

    pub fn from_named(n: &NamedTensors) -> Result<Self> {
        let dims: SinrDims = n.attr("dims")?;
        let skip: bool = n.attr("skip")?;
        let mut sp = Self::zeros(dims, skip);
        for s in sp.params.layout().segments().to_vec() {
            let t = n.get(&s.name)?;
            if t.dims != [s.rows, s.cols] {
                return Err(SinrError::Dimension(format!("segment {} has shape {:?}", s.name, t.dims)));
            }
            sp.params.values[s.range()].copy_from_slice(&t.data);
        }
        Ok(sp)
    }
}

/// Decodes `z` on `set`.
pub fn sinr_forward(sp: &SinrParams, z: &LatentState, set: &SamplingSet) -> Result<FieldSnapshot> {
    sp.check_latent(&z.z)?;
    let net = sp.net();
    let basis = FilterBasis::for_dims(set, &sp.dims);
    let values = net.eval(&net.filters(&basis), &z.z);
    Ok(FieldSnapshot {
        set: set.clone(),
        values,
        channel_names: channel_labels(sp.dims.channels),
    })
}

/// Same map as [`sinr_forward`].
pub fn sinr_decode(sp: &SinrParams, z: &LatentState, set: &SamplingSet) -> Result<FieldSnapshot> {
    sinr_forward(sp, z, set)
}

/// Normalized cos-latitude weights broadcast over `c` channels.
pub fn recon_weights(set: &SamplingSet, c: usize) -> DMatrix<f64> {
    let mut w = set.latitude_weights();
    let mut total: f64 = w.iter().sum();
    if total <= 0.0 {
        w.iter_mut().for_each(|v| *v = 1.0);
        total = w.len() as f64;
    }
    DMatrix::from_fn(set.len(), c, |r, _| w[r] / total)
}
