use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use super::{HarnessError, Result};
use crate::filters::{FilterMethod, InflationStage};
use crate::sinr::SinrDims;
use crate::trainer::TrainConfig;

/// Default sweep grid.
pub const DEFAULT_SIGMA_Z_B: [f64; 3] = [0.01, 0.003, 0.001];
pub const DEFAULT_SIGMA_M: [f64; 7] = [0.1, 0.03, 0.01, 0.003, 0.001, 0.0003, 0.0001];
pub const DEFAULT_INFLATION: [f64; 3] = [1.02, 1.05, 1.10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub sinr: SinrSection,
    pub dynamics: DynamicsSection,
    pub filter: FilterSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Dataset file; the synthetic generator runs when absent.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub normalize: bool,
    /// Trajectories used for training; the rest are held out.
    pub train_trajectories: usize,
    /// Steps of each training trajectory fed to the trainer.
    pub train_steps: Option<usize>,
    /// Held-out trajectory providing the truth for assimilation.
    pub test_trajectory: usize,
    pub start_step: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SyntheticSpec::default(),
            normalize: true,
            train_trajectories: 18,
            train_steps: None,
            test_trajectory: 18,
            start_step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinrSection {
    pub path: Option<PathBuf>,
    pub latents_path: Option<PathBuf>,
    pub depth: usize,
    pub degree: usize,
    pub hidden: usize,
    pub latent: usize,
    pub skip: bool,
    pub train: TrainConfig,
}

impl Default for SinrSection {
    fn default() -> Self {
        Self {
            path: None,
            latents_path: None,
            depth: 4,
            degree: 4,
            hidden: 32,
            latent: 64,
            skip: true,
            train: TrainConfig::default(),
        }
    }
}

impl SinrSection {
    pub fn dims(&self, channels: usize) -> SinrDims {
        SinrDims {
            depth: self.depth,
            degree: self.degree,
            hidden: self.hidden,
            latent: self.latent,
            channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub path: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub substeps: usize,
    pub dt: f64,
    pub out_scale: f64,
    pub train: TrainConfig,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            path: None,
            hidden: vec![128],
            substeps: 4,
            dt: 1.0,
            out_scale: 0.1,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub methods: Vec<String>,
    pub members: usize,
    pub sigma_o: f64,
    pub sigma_z_b: Vec<f64>,
    pub sigma_m: Vec<f64>,
    pub inflation: Vec<f64>,
    pub inflation_stage: InflationStage,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            methods: FilterMethod::ALL.iter().map(|m| m.name().to_string()).collect(),
            members: 64,
            sigma_o: 0.1,
            sigma_z_b: DEFAULT_SIGMA_Z_B.to_vec(),
            sigma_m: DEFAULT_SIGMA_M.to_vec(),
            inflation: DEFAULT_INFLATION.to_vec(),
            inflation_stage: InflationStage::BeforeAnalysis,
        }
    }
}

impl FilterSection {
    pub fn parsed_methods(&self) -> Result<Vec<FilterMethod>> {
        self.methods
            .iter()
            .map(|s| FilterMethod::from_str(s).map_err(|e| HarnessError::Config(e.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    #[default]
    OnGrid,
    Staggered,
    RandomMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Observed values per cycle, `|S_obs|`.
    pub obs_count: usize,
    pub sigma_x_b: f64,
    pub grid_mode: GridMode,
    /// Observed fraction of all values in random-mask mode.
    pub mask_ratio: f64,
    pub cycles: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            obs_count: 128,
            sigma_x_b: 0.1,
            grid_mode: GridMode::OnGrid,
            mask_ratio: 0.0625,
            cycles: 40,
            seed: 0,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.filter;
        for (name, list) in [("sigma_z_b", &f.sigma_z_b), ("sigma_m", &f.sigma_m), ("inflation", &f.inflation)] {
            if list.is_empty() {
                return Err(HarnessError::Config(format!("filter.{name} must not be empty")));
            }
            if list.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(HarnessError::Config(format!("filter.{name} holds invalid values")));
            }
        }
        if f.inflation.iter().any(|v| *v < 1.0) {
            return Err(HarnessError::Config("inflation factors must be at least 1".into()));
        }
        if f.methods.is_empty() {
            return Err(HarnessError::Config("filter.methods must not be empty".into()));
        }
        f.parsed_methods()?;
        if f.members < 2 {
            return Err(HarnessError::Config("filter.members must be at least 2".into()));
        }
        if !(f.sigma_o > 0.0) {
            return Err(HarnessError::Config("filter.sigma_o must be positive".into()));
        }
        let e = &self.experiment;
        if !(e.mask_ratio > 0.0 && e.mask_ratio <= 1.0) {
            return Err(HarnessError::Config(format!("mask_ratio {} is outside (0, 1]", e.mask_ratio)));
        }
        if e.cycles == 0 {
            return Err(HarnessError::Config("experiment.cycles must be positive".into()));
        }
        if e.obs_count == 0 {
            return Err(HarnessError::Config("experiment.obs_count must be positive".into()));
        }
        if !(e.sigma_x_b >= 0.0) {
            return Err(HarnessError::Config("experiment.sigma_x_b must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of sweep cells per method.
    pub fn cells(&self) -> usize {
        self.filter.sigma_z_b.len() * self.filter.sigma_m.len() * self.filter.inflation.len()
    }
}
