use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{FilterError, ModelNoise, Result};
use crate::dynamics::Dynamics;

/// `N` latent members held as a mean plus row deviations, so operations that
/// only touch the spread leave the mean bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    mean: DVector<f64>,
    /// `N × m`, member minus mean.
    dev: DMatrix<f64>,
}

impl Ensemble {
    /// From members as rows.
    pub fn from_members(members: &DMatrix<f64>) -> Result<Self> {
        let n = members.nrows();
        if n < 2 {
            return Err(FilterError::TooFewMembers(n));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("ensemble members".into()));
        }
        let mean = members.row_mean().transpose();
        let mut dev = members.clone();
        for mut r in dev.row_iter_mut() {
            r -= mean.transpose();
        }
        Ok(Self { mean, dev })
    }

    /// From a mean and deviations whose rows already sum to zero.
    pub fn from_parts(mean: DVector<f64>, dev: DMatrix<f64>) -> Result<Self> {
        if dev.nrows() < 2 {
            return Err(FilterError::TooFewMembers(dev.nrows()));
        }
        if dev.ncols() != mean.len() {
            return Err(FilterError::Dimension(format!(
                "mean has {} entries, deviations {} columns",
                mean.len(),
                dev.ncols()
            )));
        }
        if mean.iter().chain(dev.iter()).any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinite("ensemble".into()));
        }
        Ok(Self { mean, dev })
    }

    /// Draws `n` members from `N(mean, cov)`; `cov` only needs to be PSD.
    pub fn sample<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, rng: &mut R) -> Result<Self> {
        let m = mean.len();
        if cov.shape() != (m, m) {
            return Err(FilterError::Dimension(format!("covariance is {:?}, mean has {m} entries", cov.shape())));
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let noise = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut members = noise * root.transpose();
        for mut r in members.row_iter_mut() {
            r += mean.transpose();
        }
        Self::from_members(&members)
    }

    /// Draws `n` members from `N(mean, σ² I)`.
    pub fn sample_isotropic<R: Rng + ?Sized>(mean: &DVector<f64>, sigma: f64, n: usize, rng: &mut R) -> Result<Self> {
        let m = mean.len();
        let mut members = DMatrix::from_fn(n, m, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        for mut r in members.row_iter_mut() {
            r += mean.transpose();
        }
        Self::from_members(&members)
    }

    pub fn size(&self) -> usize {
        self.dev.nrows()
    }

    pub fn latent(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn deviations(&self) -> &DMatrix<f64> {
        &self.dev
    }

    pub fn members(&self) -> DMatrix<f64> {
        let mut z = self.dev.clone();
        for mut r in z.row_iter_mut() {
            r += self.mean.transpose();
        }
        z
    }

    /// `X` with rows `(z_j − z̄)/√(N−1)`.
    pub fn anomalies(&self) -> DMatrix<f64> {
        &self.dev / ((self.size() - 1) as f64).sqrt()
    }

    /// `Xᵀ X`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let x = self.anomalies();
        x.tr_mul(&x)
    }

    /// Root mean ensemble variance.
    pub fn spread(&self) -> f64 {
        let n = self.size() as f64 - 1.0;
        (self.dev.norm_squared() / n / self.latent() as f64).sqrt()
    }
}

/// Multiplies the deviations by `factor`; the mean is untouched.
pub fn apply_inflation(ens: &Ensemble, factor: f64) -> Result<Ensemble> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(FilterError::Config(format!("inflation {factor} is below 1")));
    }
    Ok(Ensemble {
        mean: ens.mean.clone(),
        dev: &ens.dev * factor,
    })
}

/// Propagates every member one step and adds independent model noise.
pub fn forecast<R: Rng + ?Sized>(
    ens: &Ensemble,
    dynamics: &Dynamics,
    noise: &ModelNoise,
    rng: &mut R,
) -> Result<Ensemble> {
    let m = ens.latent();
    let stepped = dynamics.step_batch(&ens.members().transpose())?.transpose();
    let members = if noise.is_zero() {
        stepped
    } else {
        stepped + noise.sample(ens.size(), m, rng)
    };
    if members.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinite("forecast members".into()));
    }
    Ensemble::from_members(&members)
}
