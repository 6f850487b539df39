//! Datasets, grids, observation operators, metrics and experiment runs.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod galewsky;
pub mod grid;
pub mod metrics;
pub mod observe;
pub mod synthetic;

pub use config::{
    DatasetSection, DynamicsSection, ExperimentConfig, ExperimentSection, FilterSection, GridMode, SinrSection,
    DEFAULT_INFLATION, DEFAULT_SIGMA_M, DEFAULT_SIGMA_Z_B,
};
pub use dataset::{Dataset, Normalization};
pub use experiment::{
    free_run, load_dataset, load_models, masked_reconstruction, obs_count_for, run_cell, run_experiment,
    run_experiment_with, single_config, sweep, sweep_cells, truth_for, write_diagnostics_csv, write_failures_csv,
    write_free_run_csv, write_results_csv, Cell, CellOutcome, DiagnosticRow, FailureRow, MaskedRow, ModelContext,
    ResultRow, Scenario, SweepResult, TruthFrames, RESULTS_HEADER,
};
pub use galewsky::gen_galewsky_ic;
pub use grid::{make_latlon_grid, make_staggered_grid};
pub use metrics::{multi_step_pred_rmse, weighted_rmse, weighted_rmse_values, write_curve_csv};
pub use observe::{random_obs_operator, ObsTemplate};
pub use synthetic::{gen_synthetic_rotation, rotate_coeffs, SyntheticRotation, SyntheticSpec};

use thiserror::Error;

use crate::ltsr::LtsrError;
use crate::sinr::SinrError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ltsr(#[from] LtsrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sinr(#[from] SinrError),
    #[error(transparent)]
    Filter(#[from] crate::filters::FilterError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
