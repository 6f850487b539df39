//! Ensemble Kalman filters acting on latent states.
//!
//! Members are stored as rows. Every analysis works from the ensemble
//! statistics `X` (state anomalies) and `Y` (observed anomalies), so the
//! observation operator may be any map, in particular `H ∘ D`.

mod analysis;
mod cycle;
mod ensemble;
mod rotation;

pub use analysis::{
    analyze, analyze_denkf, analyze_enkf, analyze_etkf, analyze_etkfq, analyze_senkf, augment_etkfq,
    etkfq_transform,
};
pub use cycle::{run_cycles, CycleInput, CycleRecord, CycleRun};
pub use ensemble::{apply_inflation, forecast, Ensemble};
pub use rotation::{DeviationBasis, MeanPreservingRotation};

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DynamicsError;
use crate::sphere::SamplingSet;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("ensemble needs at least two members, got {0}")]
    TooFewMembers(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("invalid filter configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("observation operator failed: {0}")]
    Observation(String),
}

pub type Result<T> = std::result::Result<T, FilterError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMethod {
    Enkf,
    Senkf,
    Denkf,
    Etkf,
    Etkfq,
}

impl FilterMethod {
    pub const ALL: [FilterMethod; 5] = [
        FilterMethod::Enkf,
        FilterMethod::Senkf,
        FilterMethod::Denkf,
        FilterMethod::Etkf,
        FilterMethod::Etkfq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterMethod::Enkf => "enkf",
            FilterMethod::Senkf => "senkf",
            FilterMethod::Denkf => "denkf",
            FilterMethod::Etkf => "etkf",
            FilterMethod::Etkfq => "etkfq",
        }
    }
}

impl std::fmt::Display for FilterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterMethod {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("etkf-q") && *m == FilterMethod::Etkfq))
            .ok_or_else(|| FilterError::Config(format!("unknown filter method `{s}`")))
    }
}

/// Diagonal Gaussian model error added during the forecast.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelNoise {
    Scalar(f64),
    /// Per-coordinate standard deviations.
    Diagonal(DVector<f64>),
}

impl ModelNoise {
    pub fn none() -> Self {
        ModelNoise::Scalar(0.0)
    }

    pub fn std(&self, m: usize) -> DVector<f64> {
        match self {
            ModelNoise::Scalar(s) => DVector::from_element(m, *s),
            ModelNoise::Diagonal(d) => d.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ModelNoise::Scalar(s) => *s == 0.0,
            ModelNoise::Diagonal(d) => d.iter().all(|v| *v == 0.0),
        }
    }

    pub fn variances(&self, m: usize) -> DVector<f64> {
        self.std(m).map(|s| s * s)
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, n: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
        let s = self.std(m);
        DMatrix::from_fn(n, m, |_, j| s[j] * rng.sample::<f64, _>(StandardNormal))
    }
}

/// Initial latent background covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum BackgroundCov {
    Isotropic(f64),
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflationStage {
    #[default]
    BeforeAnalysis,
    BeforeForecast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub method: FilterMethod,
    pub members: usize,
    pub inflation: f64,
    pub inflation_stage: InflationStage,
    pub model_noise: ModelNoise,
    pub sigma_o: f64,
    pub background: BackgroundCov,
    pub seed: u64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(FilterError::TooFewMembers(self.members));
        }
        if !(self.inflation >= 1.0) {
            return Err(FilterError::Config(format!("inflation {} is below 1", self.inflation)));
        }
        if !(self.sigma_o > 0.0 && self.sigma_o.is_finite()) {
            return Err(FilterError::Config(format!("sigma_o {} must be positive", self.sigma_o)));
        }
        Ok(())
    }
}

/// Observed values `y` with isotropic noise `σ^o`, optionally tied to the
/// sampled locations and channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub set: Option<SamplingSet>,
    /// `(row of set, channel)` for each entry of `y`.
    pub picks: Vec<(usize, usize)>,
    pub y: DVector<f64>,
    pub noise_std: f64,
}

impl ObservationBatch {
    pub fn new(y: DVector<f64>, noise_std: f64) -> Self {
        Self {
            set: None,
            picks: Vec::new(),
            y,
            noise_std,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Maps members (rows, `N × m`) to their observed values (`N × p`).
pub trait ObservationOperator: Sync {
    fn observe(&self, members: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

impl<F> ObservationOperator for F
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64> + Sync,
{
    fn observe(&self, members: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self(members))
    }
}

/// `h(z) = M z + o`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineObservation {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineObservation {
    pub fn linear(matrix: DMatrix<f64>) -> Self {
        let offset = DVector::zeros(matrix.nrows());
        Self { matrix, offset }
    }
}

impl ObservationOperator for AffineObservation {
    fn observe(&self, members: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if members.ncols() != self.matrix.ncols() {
            return Err(FilterError::Dimension(format!(
                "members have {} coordinates, operator expects {}",
                members.ncols(),
                self.matrix.ncols()
            )));
        }
        let mut out = members * self.matrix.transpose();
        for mut r in out.row_iter_mut() {
            r += self.offset.transpose();
        }
        Ok(out)
    }
}
