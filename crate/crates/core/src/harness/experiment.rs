use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::config::{ExperimentConfig, FilterSection, GridMode};
use super::dataset::Dataset;
use super::grid::make_staggered_grid;
use super::metrics::weighted_rmse_values;
use super::observe::{random_obs_operator, ObsTemplate};
use super::synthetic::{gen_synthetic_rotation, rotate_coeffs};
use super::{HarnessError, Result};
use crate::dynamics::Dynamics;
use crate::filters::{
    run_cycles, AffineObservation, BackgroundCov, CycleInput, CycleRun, FilterConfig, FilterMethod, InflationStage,
    ModelNoise, ObservationBatch,
};
use crate::ltsr::NamedTensors;
use crate::sinr::{AffineDecoder, SinrParams};
use crate::sphere::{synthesize_field, SamplingSet, SphCoeffs};

/// Truth on the scoring grid and on the observed grid for cycles `0..=cycles`.
#[derive(Debug, Clone)]
pub struct TruthFrames {
    pub score_grid: SamplingSet,
    pub score: Vec<DMatrix<f64>>,
    pub obs_grid: SamplingSet,
    pub obs: Vec<DMatrix<f64>>,
}

fn check_window(ds: &Dataset, traj: usize, start: usize, cycles: usize) -> Result<()> {
    if traj >= ds.trajectories() {
        return Err(HarnessError::Config(format!(
            "trajectory {traj} outside the {} available",
            ds.trajectories()
        )));
    }
    if start + cycles >= ds.steps() {
        return Err(HarnessError::Config(format!(
            "{cycles} cycles from step {start} need more than {} steps",
            ds.steps()
        )));
    }
    Ok(())
}

impl TruthFrames {
    /// Observations and scores both on the dataset grid.
    pub fn on_grid(ds: &Dataset, traj: usize, start: usize, cycles: usize) -> Result<Self> {
        check_window(ds, traj, start, cycles)?;
        let frames: Vec<DMatrix<f64>> = (0..=cycles).map(|k| ds.frame(traj, start + k)).collect();
        Ok(Self {
            score_grid: ds.grid.clone(),
            score: frames.clone(),
            obs_grid: ds.grid.clone(),
            obs: frames,
        })
    }

    /// Observations on the staggered grid, evaluated from the exact
    /// spherical-harmonic coefficients of a synthetic rotation dataset.
    pub fn staggered_synthetic(
        ds: &Dataset,
        initial: &[Vec<SphCoeffs>],
        omega: f64,
        traj: usize,
        start: usize,
        cycles: usize,
    ) -> Result<Self> {
        check_window(ds, traj, start, cycles)?;
        let stag = make_staggered_grid(ds.shape[2], ds.shape[3]);
        let c = ds.channels();
        let norm = &ds.normalization;
        let obs = (0..=cycles)
            .map(|k| {
                let alpha = omega * ds.dt * (start + k) as f64;
                let mut m = DMatrix::zeros(stag.len(), c);
                for ch in 0..c {
                    let v = synthesize_field(&rotate_coeffs(&initial[traj][ch], alpha), &stag);
                    for (p, x) in v.into_iter().enumerate() {
                        m[(p, ch)] = (x - norm.mean[ch]) / norm.std[ch];
                    }
                }
                m
            })
            .collect();
        let mut t = Self::on_grid(ds, traj, start, cycles)?;
        t.obs_grid = stag;
        t.obs = obs;
        Ok(t)
    }

    /// Observations on the staggered grid as the mean of the four
    /// surrounding cells, for datasets known only on their grid.
    pub fn staggered_average(ds: &Dataset, traj: usize, start: usize, cycles: usize) -> Result<Self> {
        check_window(ds, traj, start, cycles)?;
        let (nlon, nlat) = (ds.shape[2], ds.shape[3]);
        let stag = make_staggered_grid(nlon, nlat);
        let c = ds.channels();
        let obs = (0..=cycles)
            .map(|k| {
                let f = ds.frame(traj, start + k);
                let mut m = DMatrix::zeros(stag.len(), c);
                for i in 0..nlon {
                    let il = (i + nlon - 1) % nlon;
                    for j in 1..nlat {
                        let row = i * (nlat - 1) + (j - 1);
                        for ch in 0..c {
                            let cells = [(il, j - 1), (il, j), (i, j - 1), (i, j)];
                            m[(row, ch)] = cells.iter().map(|&(a, b)| f[(a * nlat + b, ch)]).sum::<f64>() / 4.0;
                        }
                    }
                }
                m
            })
            .collect();
        let mut t = Self::on_grid(ds, traj, start, cycles)?;
        t.obs_grid = stag;
        t.obs = obs;
        Ok(t)
    }

    pub fn cycles(&self) -> usize {
        self.score.len() - 1
    }
}

/// Everything an assimilation run shares across sweep cells: truth, fixed
/// observation locations, the noisy observations and the initial background.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub truth: TruthFrames,
    pub template: ObsTemplate,
    /// Observations for cycles `1..=cycles`.
    pub obs: Vec<ObservationBatch>,
    pub z_b: DVector<f64>,
}

/// Decoders and dynamics used by every cell of a sweep.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub dynamics: Dynamics,
    pub score_decoder: AffineDecoder,
    pub op: AffineObservation,
}

impl ModelContext {
    pub fn new(sinr: &SinrParams, dynamics: &Dynamics, scn: &Scenario) -> Result<Self> {
        let score_decoder = AffineDecoder::new(sinr, &scn.truth.score_grid);
        let obs_decoder = AffineDecoder::new(sinr, &scn.truth.obs_grid);
        Ok(Self {
            dynamics: dynamics.clone(),
            score_decoder,
            op: scn.template.operator(&obs_decoder)?,
        })
    }

    /// Weighted RMSE of the decoded latent against the truth of cycle `k`.
    pub fn score(&self, scn: &Scenario, k: usize, z: &DVector<f64>) -> f64 {
        let decoded = self.score_decoder.decode(z);
        weighted_rmse_values(&scn.truth.score_grid, &decoded, &scn.truth.score[k]).unwrap_or(f64::NAN)
    }
}

impl Scenario {
    /// Draws observation locations and noise from `seed`; the background is
    /// the encoding of the initial truth observed with noise `σ_x^b`.
    pub fn build(
        truth: TruthFrames,
        sinr: &SinrParams,
        obs_count: usize,
        sigma_o: f64,
        sigma_x_b: f64,
        seed: u64,
    ) -> Result<Self> {
        let c = sinr.dims.channels;
        let template = random_obs_operator(&truth.obs_grid, c, obs_count, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x0b5e_7ed));
        let normal = Normal::new(0.0, sigma_x_b.max(0.0)).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut y0 = template.mask(&truth.obs[0]);
        if sigma_x_b > 0.0 {
            y0.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let obs_decoder = AffineDecoder::new(sinr, &truth.obs_grid);
        let z_b = obs_decoder.encode_picks(&template.picks, &y0)?;
        let obs = (1..=truth.cycles())
            .map(|k| template.observe(&truth.obs[k], sigma_o, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            truth,
            template,
            obs,
            z_b,
        })
    }

    pub fn cycles(&self) -> usize {
        self.obs.len()
    }
}

/// RMSE of the background propagated without assimilation, cycles `0..=cycles`.
pub fn free_run(scn: &Scenario, ctx: &ModelContext) -> Result<Vec<f64>> {
    let mut z = scn.z_b.clone();
    let mut out = vec![ctx.score(scn, 0, &z)];
    for k in 1..=scn.cycles() {
        z = ctx
            .dynamics
            .step(&crate::sinr::LatentState::new(z, 0.0))
            .map_err(|e| HarnessError::Config(format!("free run failed: {e}")))?
            .z;
        out.push(ctx.score(scn, k, &z));
    }
    Ok(out)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config_id: String,
    pub method: String,
    pub sigma_z_b: f64,
    pub sigma_m: f64,
    pub inflation: f64,
    pub mean_analysis_rmse: f64,
    pub final_rmse: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub row: ResultRow,
    pub run: CycleRun,
}

/// Runs one filter configuration on the scenario.
pub fn run_cell(scn: &Scenario, ctx: &ModelContext, cfg: &FilterConfig, config_id: &str) -> CellOutcome {
    let start = Instant::now();
    let inputs: Vec<CycleInput<'_>> = scn
        .obs
        .iter()
        .map(|o| CycleInput {
            obs: o.clone(),
            op: &ctx.op,
        })
        .collect();
    let score = |k: usize, z: &DVector<f64>| ctx.score(scn, k, z);
    let run = run_cycles(&scn.z_b, cfg, &ctx.dynamics, &inputs, Some(&score));
    let rmse = run.analysis_rmse();
    let initial = run.initial_rmse.unwrap_or(f64::NAN);
    let mean = if rmse.is_empty() {
        initial
    } else {
        rmse.iter().sum::<f64>() / rmse.len() as f64
    };
    let (sigma_z_b, sigma_m) = describe(cfg);
    let row = ResultRow {
        config_id: config_id.to_string(),
        method: cfg.method.name().to_string(),
        sigma_z_b,
        sigma_m,
        inflation: cfg.inflation,
        mean_analysis_rmse: mean,
        final_rmse: rmse.last().copied().unwrap_or(initial),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    CellOutcome { row, run }
}

/// Scalar summaries of the background and model-error settings.
fn describe(cfg: &FilterConfig) -> (f64, f64) {
    let sz = match &cfg.background {
        BackgroundCov::Isotropic(s) => *s,
        BackgroundCov::Full(c) => (c.trace() / c.nrows().max(1) as f64).sqrt(),
    };
    let sm = match &cfg.model_noise {
        ModelNoise::Scalar(s) => *s,
        ModelNoise::Diagonal(d) => (d.norm_squared() / d.len().max(1) as f64).sqrt(),
    };
    (sz, sm)
}

/// One configuration of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub config_id: String,
    pub index: usize,
    pub method: FilterMethod,
    pub sigma_z_b: f64,
    pub sigma_m: f64,
    pub inflation: f64,
}

/// The grid in order: method, then `σ_z^b`, `σ^m` and inflation.
pub fn sweep_cells(f: &FilterSection) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for method in f.parsed_methods()? {
        let mut index = 0;
        for &sz in &f.sigma_z_b {
            for &sm in &f.sigma_m {
                for &inf in &f.inflation {
                    cells.push(Cell {
                        config_id: format!("c{index:03}"),
                        index,
                        method,
                        sigma_z_b: sz,
                        sigma_m: sm,
                        inflation: inf,
                    });
                    index += 1;
                }
            }
        }
    }
    Ok(cells)
}

impl Cell {
    pub fn filter_config(&self, f: &FilterSection, base_seed: u64) -> FilterConfig {
        FilterConfig {
            method: self.method,
            members: f.members,
            inflation: self.inflation,
            inflation_stage: f.inflation_stage,
            model_noise: ModelNoise::Scalar(self.sigma_m),
            sigma_o: f.sigma_o,
            background: BackgroundCov::Isotropic(self.sigma_z_b),
            seed: base_seed.wrapping_add(self.index as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub config_id: String,
    pub method: String,
    pub cycle: usize,
    pub background_rmse: f64,
    pub analysis_rmse: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRow {
    pub config_id: String,
    pub method: String,
    pub cycles_completed: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub rows: Vec<ResultRow>,
    pub diagnostics: Vec<DiagnosticRow>,
    pub failures: Vec<FailureRow>,
    pub free_run: Vec<f64>,
}

impl SweepResult {
    /// Row with the lowest mean analysis RMSE.
    pub fn best(&self) -> Option<&ResultRow> {
        self.rows
            .iter()
            .filter(|r| r.mean_analysis_rmse.is_finite())
            .min_by(|a, b| a.mean_analysis_rmse.total_cmp(&b.mean_analysis_rmse))
    }

    /// Per-cycle analysis RMSE of one cell.
    pub fn curve(&self, config_id: &str, method: &str) -> Vec<f64> {
        self.diagnostics
            .iter()
            .filter(|d| d.config_id == config_id && d.method == method)
            .map(|d| d.analysis_rmse)
            .collect()
    }
}

/// Runs every cell on a pool of `workers` threads; results keep grid order.
pub fn sweep(scn: &Scenario, ctx: &ModelContext, f: &FilterSection, base_seed: u64, workers: usize) -> Result<SweepResult> {
    let cells = sweep_cells(f)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(scn, ctx, &c.filter_config(f, base_seed), &c.config_id))
            .collect()
    });
    let mut out = SweepResult {
        free_run: free_run(scn, ctx)?,
        ..SweepResult::default()
    };
    for o in outcomes {
        for r in &o.run.records {
            out.diagnostics.push(DiagnosticRow {
                config_id: o.row.config_id.clone(),
                method: o.row.method.clone(),
                cycle: r.cycle,
                background_rmse: r.background_rmse.unwrap_or(f64::NAN),
                analysis_rmse: r.analysis_rmse.unwrap_or(f64::NAN),
                spread: r.spread,
            });
        }
        if let Some(msg) = &o.run.failure {
            out.failures.push(FailureRow {
                config_id: o.row.config_id.clone(),
                method: o.row.method.clone(),
                cycles_completed: o.run.records.len(),
                message: msg.clone(),
            });
        }
        out.rows.push(o.row);
    }
    Ok(out)
}

pub const RESULTS_HEADER: &str = "config_id,method,sigma_z_b,sigma_m,inflation,mean_analysis_rmse,final_rmse,wall_time_s";

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:e},{:e},{:.6}",
            r.config_id, r.method, r.sigma_z_b, r.sigma_m, r.inflation, r.mean_analysis_rmse, r.final_rmse, r.wall_time_s
        )?;
    }
    Ok(())
}

pub fn write_diagnostics_csv(path: impl AsRef<Path>, rows: &[DiagnosticRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "config_id,method,cycle,background_rmse,analysis_rmse,spread")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{:e},{:e},{:e}",
            r.config_id, r.method, r.cycle, r.background_rmse, r.analysis_rmse, r.spread
        )?;
    }
    Ok(())
}

pub fn write_failures_csv(path: impl AsRef<Path>, rows: &[FailureRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "config_id,method,cycles_completed,message")?;
    for r in rows {
        writeln!(f, "{},{},{},\"{}\"", r.config_id, r.method, r.cycles_completed, r.message.replace('"', "'"))?;
    }
    Ok(())
}

pub fn write_free_run_csv(path: impl AsRef<Path>, rmse: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "cycle,rmse")?;
    for (k, v) in rmse.iter().enumerate() {
        writeln!(f, "{k},{v:e}")?;
    }
    Ok(())
}

/// Full-grid reconstruction error after encoding from a random subset of values.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedRow {
    pub count: usize,
    pub ratio: f64,
    pub rmse: f64,
    pub non_finite: usize,
}

/// Encodes `snapshots` of `ds` from `count` observed values each and scores
/// the decoded full field, for every entry of `counts`.
pub fn masked_reconstruction(
    ds: &Dataset,
    sinr: &SinrParams,
    snapshots: &[(usize, usize)],
    counts: &[usize],
    seed: u64,
) -> Result<Vec<MaskedRow>> {
    let dec = AffineDecoder::new(sinr, &ds.grid);
    let total = ds.grid.len() * ds.channels();
    counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let mut sum = 0.0;
            let mut non_finite = 0;
            for (j, &(k, t)) in snapshots.iter().enumerate() {
                let tpl = random_obs_operator(&ds.grid, ds.channels(), count, seed.wrapping_add((i * 7919 + j) as u64))?;
                let frame = ds.frame(k, t);
                let decoded = match dec.encode_picks(&tpl.picks, &tpl.mask(&frame)) {
                    Ok(z) => dec.decode(&z),
                    Err(_) => {
                        non_finite += 1;
                        continue;
                    }
                };
                if decoded.iter().any(|v| !v.is_finite()) {
                    non_finite += 1;
                    continue;
                }
                sum += weighted_rmse_values(&ds.grid, &decoded, &frame)?;
            }
            let ok = snapshots.len() - non_finite;
            Ok(MaskedRow {
                count,
                ratio: count as f64 / total as f64,
                rmse: if ok > 0 { sum / ok as f64 } else { f64::NAN },
                non_finite,
            })
        })
        .collect()
}

/// Loads or generates the dataset named by the config, normalized when asked.
/// Returns the synthetic coefficients too when the generator ran.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Vec<Vec<SphCoeffs>>>)> {
    let (mut ds, initial) = match &cfg.dataset.path {
        Some(p) => (Dataset::load(p)?, None),
        None => {
            let s = gen_synthetic_rotation(&cfg.dataset.synthetic)?;
            (s.dataset, Some(s.initial))
        }
    };
    if cfg.dataset.normalize && cfg.dataset.path.is_none() {
        ds.normalize();
    }
    Ok((ds, initial))
}

fn load_named(path: &Option<PathBuf>, what: &str) -> Result<NamedTensors> {
    let p = path
        .as_ref()
        .ok_or_else(|| HarnessError::Config(format!("{what} path is not set")))?;
    Ok(NamedTensors::load(p)?)
}

pub fn load_models(cfg: &ExperimentConfig) -> Result<(SinrParams, Dynamics)> {
    let sinr = SinrParams::from_named(&load_named(&cfg.sinr.path, "sinr")?)?;
    let dynamics = Dynamics::from_named(&load_named(&cfg.dynamics.path, "dynamics")?)
        .map_err(|e| HarnessError::Config(format!("dynamics file: {e}")))?;
    Ok((sinr, dynamics))
}

/// Truth frames for the configured grid mode.
pub fn truth_for(cfg: &ExperimentConfig, ds: &Dataset, initial: Option<&[Vec<SphCoeffs>]>) -> Result<TruthFrames> {
    let d = &cfg.dataset;
    let e = &cfg.experiment;
    let truth = match e.grid_mode {
        GridMode::OnGrid | GridMode::RandomMask => TruthFrames::on_grid(ds, d.test_trajectory, d.start_step, e.cycles)?,
        GridMode::Staggered => match initial {
            Some(init) => TruthFrames::staggered_synthetic(
                ds,
                init,
                d.synthetic.omega,
                d.test_trajectory,
                d.start_step,
                e.cycles,
            )?,
            None => TruthFrames::staggered_average(ds, d.test_trajectory, d.start_step, e.cycles)?,
        },
    };
    if e.grid_mode == GridMode::Staggered && truth.obs_grid.intersects(&truth.score_grid, 1e-9) {
        return Err(HarnessError::Config("staggered observation grid meets the training grid".into()));
    }
    Ok(truth)
}

/// Observed values per cycle under the configured grid mode.
pub fn obs_count_for(cfg: &ExperimentConfig, truth: &TruthFrames, channels: usize) -> usize {
    match cfg.experiment.grid_mode {
        GridMode::RandomMask => {
            let total = truth.obs_grid.len() * channels;
            ((cfg.experiment.mask_ratio * total as f64).round() as usize).clamp(1, total)
        }
        _ => cfg.experiment.obs_count,
    }
}

/// Loads data and models, runs the sweep and writes `results.csv`,
/// `diagnostics.csv`, `failures.csv` and `free_run.csv` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SweepResult> {
    cfg.validate()?;
    let (ds, initial) = load_dataset(cfg)?;
    let (sinr, dynamics) = load_models(cfg)?;
    run_experiment_with(cfg, &ds, initial.as_deref(), &sinr, &dynamics, out)
}

/// [`run_experiment`] with data and models already in memory.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    initial: Option<&[Vec<SphCoeffs>]>,
    sinr: &SinrParams,
    dynamics: &Dynamics,
    out: Option<&Path>,
) -> Result<SweepResult> {
    cfg.validate()?;
    let truth = truth_for(cfg, ds, initial)?;
    let count = obs_count_for(cfg, &truth, sinr.dims.channels);
    let e = &cfg.experiment;
    let scn = Scenario::build(truth, sinr, count, cfg.filter.sigma_o, e.sigma_x_b, e.seed)?;
    let ctx = ModelContext::new(sinr, dynamics, &scn)?;
    let result = sweep(&scn, &ctx, &cfg.filter, e.seed, e.workers)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_results_csv(dir.join("results.csv"), &result.rows)?;
        write_diagnostics_csv(dir.join("diagnostics.csv"), &result.diagnostics)?;
        write_failures_csv(dir.join("failures.csv"), &result.failures)?;
        write_free_run_csv(dir.join("free_run.csv"), &result.free_run)?;
    }
    Ok(result)
}

/// A filter configuration with the stage left at its default; handy for
/// one-off runs outside the sweep.
pub fn single_config(
    method: FilterMethod,
    members: usize,
    sigma_o: f64,
    background: BackgroundCov,
    model_noise: ModelNoise,
    inflation: f64,
    seed: u64,
) -> FilterConfig {
    FilterConfig {
        method,
        members,
        inflation,
        inflation_stage: InflationStage::BeforeAnalysis,
        model_noise,
        sigma_o,
        background,
        seed,
    }
}
