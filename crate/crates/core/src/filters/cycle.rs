use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::analysis::analyze;
use super::ensemble::{apply_inflation, forecast, Ensemble};
use super::{BackgroundCov, FilterConfig, FilterMethod, InflationStage, ModelNoise, ObservationBatch, ObservationOperator, Result};
use crate::dynamics::Dynamics;
use crate::sinr::LatentState;

/// Observations for one cycle and the operator producing their model
/// counterpart from latent members.
pub struct CycleInput<'a> {
    pub obs: ObservationBatch,
    pub op: &'a dyn ObservationOperator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub background_mean: DVector<f64>,
    pub analysis: LatentState,
    pub spread: f64,
    pub background_rmse: Option<f64>,
    pub analysis_rmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CycleRun {
    pub initial: LatentState,
    pub initial_spread: f64,
    pub initial_rmse: Option<f64>,
    pub records: Vec<CycleRecord>,
    pub final_ensemble: Option<Ensemble>,
    /// Set when a stage failed; `records` then holds the completed cycles.
    pub failure: Option<String>,
}

impl CycleRun {
    pub fn analysis_rmse(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.analysis_rmse).collect()
    }
}

pub(crate) fn initial_ensemble(z_b: &DVector<f64>, cfg: &FilterConfig, rng: &mut ChaCha8Rng) -> Result<Ensemble> {
    match &cfg.background {
        BackgroundCov::Isotropic(s) => Ensemble::sample_isotropic(z_b, *s, cfg.members, rng),
        BackgroundCov::Full(c) => Ensemble::sample(z_b, c, cfg.members, rng),
    }
}

/// Seeds an ensemble around `z_b` and runs forecast and analysis for each
/// entry of `cycles`. `score(k, mean)` measures a latent mean at cycle `k`
/// (0 is the background) against the truth.
pub fn run_cycles(
    z_b: &DVector<f64>,
    cfg: &FilterConfig,
    dynamics: &Dynamics,
    cycles: &[CycleInput<'_>],
    score: Option<&dyn Fn(usize, &DVector<f64>) -> f64>,
) -> CycleRun {
    let mut run = CycleRun {
        initial: LatentState::new(z_b.clone(), 0.0),
        initial_spread: 0.0,
        initial_rmse: score.map(|f| f(0, z_b)),
        records: Vec::with_capacity(cycles.len()),
        final_ensemble: None,
        failure: None,
    };
    if let Err(e) = cfg.validate() {
        run.failure = Some(e.to_string());
        return run;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ens = match initial_ensemble(z_b, cfg, &mut rng) {
        Ok(e) => e,
        Err(e) => {
            run.failure = Some(e.to_string());
            return run;
        }
    };
    run.initial_spread = ens.spread();
    let dt = dynamics.dt();
    let forecast_noise = if cfg.method == FilterMethod::Etkfq {
        ModelNoise::none()
    } else {
        cfg.model_noise.clone()
    };
    for (i, input) in cycles.iter().enumerate() {
        let k = i + 1;
        let step = || -> Result<(DVector<f64>, Ensemble)> {
            let mut e = ens.clone();
            if cfg.inflation_stage == InflationStage::BeforeForecast {
                e = apply_inflation(&e, cfg.inflation)?;
            }
            let mut local = rng.clone();
            e = forecast(&e, dynamics, &forecast_noise, &mut local)?;
            if cfg.inflation_stage == InflationStage::BeforeAnalysis {
                e = apply_inflation(&e, cfg.inflation)?;
            }
            let bg = e.mean().clone();
            let a = analyze(cfg.method, &e, &input.obs, input.op, &cfg.model_noise, &mut local)?;
            rng = local;
            Ok((bg, a))
        };
        let mut step = step;
        match step() {
            Ok((bg, a)) => {
                ens = a;
                run.records.push(CycleRecord {
                    cycle: k,
                    background_rmse: score.map(|f| f(k, &bg)),
                    analysis_rmse: score.map(|f| f(k, ens.mean())),
                    background_mean: bg,
                    analysis: LatentState::new(ens.mean().clone(), k as f64 * dt),
                    spread: ens.spread(),
                });
            }
            Err(e) => {
                log::warn!("assimilation stopped at cycle {k}: {e}");
                run.failure = Some(format!("cycle {k}: {e}"));
                break;
            }
        }
    }
    run.final_ensemble = Some(ens);
    run
}
