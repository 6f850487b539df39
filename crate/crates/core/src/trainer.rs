//! Losses and the two training stages: pre-training of the decoder with its
//! latent table, then fine-tuning of the latent dynamics.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{
    value_and_grad, AutogradError, GradReport, OptimError, Optimizer, OptimizerKind, Tape,
};
use crate::dynamics::{Dynamics, DynamicsError};
use crate::harness::Dataset;
use crate::ltsr::{LtsrError, NamedTensors, Tensor};
use crate::sinr::{recon_weights, FieldSnapshot, FilterBasis, LatentState, SinrError, SinrNet, SinrParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} is too short for horizon {s}")]
    ShortSequence { len: usize, s: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("snapshot has no points")]
    EmptySnapshot,
    #[error("loss became {loss} at epoch {epoch}{}", checkpoint.as_ref().map(|p| format!("; checkpoint at {}", p.display())).unwrap_or_default())]
    Divergence {
        epoch: usize,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Sinr(#[from] SinrError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Ltsr(#[from] LtsrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Snapshots recorded on one tape when the parameter update is full-batch.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub lr_latent: f64,
    /// Rate for the dynamics parameters; `lr_finetune` when absent.
    pub lr_dynamics: Option<f64>,
    /// Prediction horizon.
    pub s: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables it.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub optimizer: OptimizerKind,
    /// Snapshots per parameter update; `None` updates once per epoch.
    pub batch_size: Option<usize>,
    /// Random points drawn per snapshot and batch; `None` uses the whole grid.
    pub points_per_snapshot: Option<usize>,
    /// Parameter rates shrink geometrically to this fraction by the last epoch.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_pretrain: 1e-3,
            lr_finetune: 1e-4,
            lr_latent: 1e-2,
            lr_dynamics: None,
            s: 1,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            optimizer: OptimizerKind::Adam,
            batch_size: None,
            points_per_snapshot: None,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_finetune", self.lr_finetune),
            ("lr_latent", self.lr_latent),
            ("lr_dynamics", self.lr_dynamics.unwrap_or(self.lr_finetune)),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.s == 0 {
            return Err(TrainError::Config("prediction horizon s must be at least 1".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "final_lr_fraction must lie in (0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        if self.batch_size == Some(0) || self.points_per_snapshot == Some(0) {
            return Err(TrainError::Config("batch and point counts must be positive".into()));
        }
        Ok(())
    }

    fn lr_dynamics(&self) -> f64 {
        self.lr_dynamics.unwrap_or(self.lr_finetune)
    }

    /// Multiplier on the parameter rates at `epoch`.
    fn decay(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return 1.0;
        }
        self.final_lr_fraction.powf(epoch as f64 / (self.epochs - 1) as f64)
    }
}

/// One latent per training snapshot, stored as an `m × T` matrix per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    latent: usize,
    tables: Vec<DMatrix<f64>>,
}

impl LatentTable {
    pub fn zeros(trajectories: usize, steps: usize, latent: usize) -> Self {
        Self {
            latent,
            tables: vec![DMatrix::zeros(latent, steps); trajectories],
        }
    }

    pub fn for_dataset(ds: &Dataset, latent: usize) -> Self {
        Self::zeros(ds.trajectories(), ds.steps(), latent)
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn trajectories(&self) -> usize {
        self.tables.len()
    }

    pub fn steps(&self) -> usize {
        self.tables.first().map_or(0, |t| t.ncols())
    }

    pub fn len(&self) -> usize {
        self.trajectories() * self.steps()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, traj: usize, t: usize) -> LatentState {
        LatentState::new(self.tables[traj].column(t).into_owned(), t as f64)
    }

    pub fn set(&mut self, traj: usize, t: usize, z: &DVector<f64>) {
        self.tables[traj].set_column(t, z);
    }

    /// All latents of trajectory `traj`, one per column.
    pub fn sequence(&self, traj: usize) -> &DMatrix<f64> {
        &self.tables[traj]
    }

    /// Every `(z_t, z_{t+s})` within a trajectory.
    pub fn pairs(&self, s: usize) -> Vec<(DVector<f64>, DVector<f64>)> {
        self.tables
            .iter()
            .flat_map(|tab| {
                (0..tab.ncols().saturating_sub(s))
                    .map(move |t| (tab.column(t).into_owned(), tab.column(t + s).into_owned()))
            })
            .collect()
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if self.trajectories() != ds.trajectories() || self.steps() != ds.steps() {
            return Err(TrainError::Dimension(format!(
                "latent table is {}x{}, dataset {}x{}",
                self.trajectories(),
                self.steps(),
                ds.trajectories(),
                ds.steps()
            )));
        }
        Ok(())
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut n = NamedTensors::new();
        let mut data = Vec::with_capacity(self.len() * self.latent);
        for t in &self.tables {
            for col in t.column_iter() {
                data.extend(col.iter());
            }
        }
        let dims = vec![self.trajectories(), self.steps(), self.latent];
        n.push("latents", Tensor::new(dims, data).expect("table shape"));
        n.set_attr("kind", "latent_table");
        n
    }

    pub fn from_named(n: &NamedTensors) -> Result<Self> {
        let t = n.get("latents")?;
        let [k, steps, m]: [usize; 3] = t
            .dims
            .clone()
            .try_into()
            .map_err(|_| TrainError::Dimension(format!("latent tensor has dims {:?}", t.dims)))?;
        let tables = (0..k)
            .map(|i| DMatrix::from_column_slice(m, steps, &t.data[i * steps * m..(i + 1) * steps * m]))
            .collect();
        Ok(Self { latent: m, tables })
    }
}

/// Cos-latitude weighted mean squared error summed over channels.
pub fn recon_loss(snapshot: &FieldSnapshot, decoded: &FieldSnapshot) -> Result<f64> {
    if snapshot.set.is_empty() {
        return Err(TrainError::EmptySnapshot);
    }
    if snapshot.set != decoded.set || snapshot.values.shape() != decoded.values.shape() {
        return Err(TrainError::Dimension("snapshots live on different sampling sets".into()));
    }
    let w = recon_weights(&snapshot.set, snapshot.channels());
    Ok(w.iter()
        .zip(snapshot.values.iter().zip(decoded.values.iter()))
        .map(|(w, (a, b))| w * (a - b).powi(2))
        .sum())
}

/// Mean of `‖z_{k+s} − G^s(z_k)‖²` over a sequence stored one latent per column.
pub fn pred_loss(z_seq: &DMatrix<f64>, model: &Dynamics, s: usize) -> Result<f64> {
    let n = z_seq.ncols();
    if s == 0 || n <= s {
        return Err(TrainError::ShortSequence { len: n, s });
    }
    let mut x = z_seq.columns(0, n - s).into_owned();
    for _ in 0..s {
        x = model.step_batch(&x)?;
    }
    let target = z_seq.columns(s, n - s);
    Ok((x - target).norm_squared() / (n - s) as f64)
}

/// [`pred_loss`] with its gradient with respect to the dynamics parameters.
pub fn pred_loss_on_tape(z_seq: &DMatrix<f64>, model: &Dynamics, s: usize) -> Result<GradReport> {
    let n = z_seq.ncols();
    if s == 0 || n <= s {
        return Err(TrainError::ShortSequence { len: n, s });
    }
    let params = model
        .params()
        .ok_or_else(|| TrainError::Config("dynamics has no trainable parameters".into()))?;
    let mut dyn_err = None;
    let report = value_and_grad(params, |tape, bound| {
        let x0 = tape.constant(z_seq.columns(0, n - s).into_owned());
        let y = tape.constant(z_seq.columns(s, n - s).into_owned());
        let x = match model.steps_on_tape(tape, bound, x0, s) {
            Ok(x) => x,
            Err(e) => {
                dyn_err = Some(e);
                return Err(AutogradError::Shape("dynamics failed on tape".into()));
            }
        };
        let d = tape.sub(x, y);
        let d2 = tape.square(d);
        let total = tape.sum(d2);
        Ok(tape.scale(total, 1.0 / (n - s) as f64))
    });
    match (report, dyn_err) {
        (_, Some(e)) => Err(e.into()),
        (r, None) => Ok(r?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub recon: f64,
    pub pred: Option<f64>,
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,recon,pred")?;
    for r in rows {
        match r.pred {
            Some(p) => writeln!(f, "{},{:e},{:e}", r.epoch, r.recon, p)?,
            None => writeln!(f, "{},{:e},", r.epoch, r.recon)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub sinr: SinrParams,
    pub table: LatentTable,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub sinr: SinrParams,
    pub table: LatentTable,
    pub dynamics: Dynamics,
    pub trace: Vec<TraceRow>,
}

/// Decoder, latent and rate settings for one pass of reconstruction updates.
struct ReconPass<'a> {
    ds: &'a Dataset,
    basis: &'a FilterBasis,
    lr_latent: f64,
    batch_size: Option<usize>,
    points: Option<usize>,
}

impl ReconPass<'_> {
    /// One epoch of latent steps and decoder updates; returns the mean loss
    /// over snapshots before their latent step.
    fn epoch(
        &self,
        sp: &mut SinrParams,
        table: &mut LatentTable,
        opt: &mut Optimizer,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut order: Vec<(usize, usize)> = (0..self.ds.trajectories())
            .flat_map(|k| (0..self.ds.steps()).map(move |t| (k, t)))
            .collect();
        if self.batch_size.is_some() {
            order.shuffle(rng);
        }
        let n = order.len();
        let chunk = self.batch_size.unwrap_or(CHUNK);
        let mut total = 0.0;
        let mut acc = vec![0.0; sp.params.len()];
        for batch in order.chunks(chunk) {
            let (loss, grad) = self.batch(sp, table, batch, rng)?;
            if !loss.is_finite() {
                return Ok(loss);
            }
            total += loss;
            if self.batch_size.is_some() {
                opt.step(&mut sp.params.values, &grad)?;
            } else {
                acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g);
            }
        }
        if self.batch_size.is_none() && n > 0 {
            opt.step(&mut sp.params.values, &acc)?;
        }
        Ok(total / n.max(1) as f64)
    }

    /// Summed loss over `batch` and its decoder gradient; latents take their
    /// step in place.
    fn batch(
        &self,
        sp: &SinrParams,
        table: &mut LatentTable,
        batch: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let full = self.ds.grid.len();
        let idx: Vec<usize> = match self.points {
            Some(p) if p < full => {
                let mut v = rand::seq::index::sample(rng, full, p).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..full).collect(),
        };
        let p = idx.len();
        let c = self.ds.channels();
        let basis = FilterBasis {
            mats: self.basis.mats.iter().map(|m| m.select_rows(&idx)).collect(),
        };
        let w1 = recon_weights(&self.ds.grid.subset(&idx, "batch"), c);
        let b = batch.len();
        let w = DMatrix::from_fn(b * p, c, |r, ch| w1[(r % p, ch)]);
        let mut y = DMatrix::zeros(b * p, c);
        let mut z = DMatrix::zeros(b, table.latent());
        for (i, &(k, t)) in batch.iter().enumerate() {
            let frame = self.ds.frame(k, t);
            for (r, &pt) in idx.iter().enumerate() {
                for ch in 0..c {
                    y[(i * p + r, ch)] = frame[(pt, ch)];
                }
            }
            z.set_row(i, &table.sequence(k).column(t).transpose());
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&sp.params);
        let zv = tape.input(z.clone());
        let out = SinrNet::forward_batch_on_tape(&mut tape, &bound, &sp.dims, sp.skip, &basis, zv)?;
        let yv = tape.constant(y);
        let loss = tape.weighted_sq_error(out, yv, &w);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss);
        let gz = grads.wrt(zv, &tape);
        for (i, &(k, t)) in batch.iter().enumerate() {
            let zi = (z.row(i) - gz.row(i) * self.lr_latent).transpose();
            table.set(k, t, &zi);
        }
        Ok((value, grads.flatten(sp.params.layout())))
    }
}

fn check_model(ds: &Dataset, sp: &SinrParams, table: &LatentTable) -> Result<()> {
    table.check(ds)?;
    if sp.dims.channels != ds.channels() {
        return Err(TrainError::Dimension(format!(
            "dataset has {} channels, decoder {}",
            ds.channels(),
            sp.dims.channels
        )));
    }
    if table.latent() != sp.dims.latent {
        return Err(TrainError::Dimension(format!(
            "latent table holds {} entries per latent, decoder {}",
            table.latent(),
            sp.dims.latent
        )));
    }
    Ok(())
}

fn save_checkpoint(
    dir: &Path,
    epoch: usize,
    sp: &SinrParams,
    table: &LatentTable,
    dynamics: Option<&Dynamics>,
) -> Result<PathBuf> {
    let path = dir.join(format!("epoch_{epoch:06}"));
    std::fs::create_dir_all(&path)?;
    sp.to_named().save(path.join("sinr.ltsr"))?;
    table.to_named().save(path.join("latents.ltsr"))?;
    if let Some(d) = dynamics {
        d.to_named().save(path.join("dynamics.ltsr"))?;
    }
    Ok(path)
}

fn diverged(
    cfg: &TrainConfig,
    epoch: usize,
    loss: f64,
    sp: &SinrParams,
    table: &LatentTable,
    dynamics: Option<&Dynamics>,
) -> TrainError {
    let checkpoint = cfg
        .checkpoint_dir
        .as_deref()
        .and_then(|d| save_checkpoint(d, epoch, sp, table, dynamics).ok());
    TrainError::Divergence {
        epoch,
        loss,
        checkpoint,
    }
}

fn maybe_checkpoint(
    cfg: &TrainConfig,
    epoch: usize,
    sp: &SinrParams,
    table: &LatentTable,
    dynamics: Option<&Dynamics>,
) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(dir, epoch + 1, sp, table, dynamics)?;
        }
    }
    Ok(())
}

/// Pre-training: each epoch moves every latent one gradient step and updates
/// the decoder on the summed reconstruction loss.
pub fn pretrain(ds: &Dataset, sinr: &SinrParams, table: &LatentTable, cfg: &TrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    check_model(ds, sinr, table)?;
    let mut sp = sinr.clone();
    let mut table = table.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(PretrainOutput { sinr: sp, table, trace });
    }
    let basis = FilterBasis::for_dims(&ds.grid, &sp.dims);
    let pass = ReconPass {
        ds,
        basis: &basis,
        lr_latent: cfg.lr_latent,
        batch_size: cfg.batch_size,
        points: cfg.points_per_snapshot,
    };
    let mut opt = Optimizer::new(cfg.optimizer, sp.params.len(), cfg.lr_pretrain);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr_pretrain * cfg.decay(epoch));
        let recon = pass.epoch(&mut sp, &mut table, &mut opt, &mut rng)?;
        if !recon.is_finite() || !sp.params.is_finite() {
            return Err(diverged(cfg, epoch, recon, &sp, &table, None));
        }
        log::debug!("pretrain epoch {epoch}: recon {recon:e}");
        trace.push(TraceRow { epoch, recon, pred: None });
        maybe_checkpoint(cfg, epoch, &sp, &table, None)?;
    }
    Ok(PretrainOutput { sinr: sp, table, trace })
}

/// Fine-tuning: the dynamics parameters follow the prediction loss on the
/// latent table while decoder and latents keep their reconstruction updates
/// at the fine-tuning rate.
pub fn finetune(
    ds: &Dataset,
    sinr: &SinrParams,
    table: &LatentTable,
    dynamics: &Dynamics,
    cfg: &TrainConfig,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    check_model(ds, sinr, table)?;
    if dynamics.latent() != table.latent() {
        return Err(TrainError::Dimension(format!(
            "dynamics acts on {} entries, latents have {}",
            dynamics.latent(),
            table.latent()
        )));
    }
    if ds.steps() <= cfg.s {
        return Err(TrainError::ShortSequence { len: ds.steps(), s: cfg.s });
    }
    let mut sp = sinr.clone();
    let mut table = table.clone();
    let mut dynamics = dynamics.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(FinetuneOutput { sinr: sp, table, dynamics, trace });
    }
    let basis = FilterBasis::for_dims(&ds.grid, &sp.dims);
    let pass = ReconPass {
        ds,
        basis: &basis,
        lr_latent: cfg.lr_latent * cfg.lr_finetune / cfg.lr_pretrain,
        batch_size: cfg.batch_size,
        points: cfg.points_per_snapshot,
    };
    let mut opt = Optimizer::new(cfg.optimizer, sp.params.len(), cfg.lr_finetune);
    let n_dyn = dynamics.params().map_or(0, |p| p.len());
    let mut dyn_opt = Optimizer::new(cfg.optimizer, n_dyn, cfg.lr_dynamics());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f1e7);
    let s = cfg.s;
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr_finetune * cfg.decay(epoch));
        dyn_opt.set_lr(cfg.lr_dynamics() * cfg.decay(epoch));
        let recon = pass.epoch(&mut sp, &mut table, &mut opt, &mut rng)?;
        if !recon.is_finite() || !sp.params.is_finite() {
            return Err(diverged(cfg, epoch, recon, &sp, &table, Some(&dynamics)));
        }
        let pred = if n_dyn > 0 {
            pred_epoch(&table, &mut dynamics, &mut dyn_opt, s, cfg.batch_size, &mut rng)?
        } else {
            mean_pred(&table, &dynamics, s)?
        };
        if !pred.is_finite() {
            return Err(diverged(cfg, epoch, pred, &sp, &table, Some(&dynamics)));
        }
        log::debug!("finetune epoch {epoch}: recon {recon:e} pred {pred:e}");
        trace.push(TraceRow {
            epoch,
            recon,
            pred: Some(pred),
        });
        maybe_checkpoint(cfg, epoch, &sp, &table, Some(&dynamics))?;
    }
    Ok(FinetuneOutput { sinr: sp, table, dynamics, trace })
}

/// Mean prediction loss over every trajectory of the table.
pub fn mean_pred(table: &LatentTable, dynamics: &Dynamics, s: usize) -> Result<f64> {
    let k = table.trajectories();
    let mut total = 0.0;
    for i in 0..k {
        total += pred_loss(table.sequence(i), dynamics, s)?;
    }
    Ok(total / k.max(1) as f64)
}

/// Latent pairs `(z_t, z_{t+s})` of every trajectory, as two column blocks.
fn pairs(table: &LatentTable, s: usize, picks: &[(usize, usize)]) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = table.latent();
    let mut x = DMatrix::zeros(m, picks.len());
    let mut y = DMatrix::zeros(m, picks.len());
    for (j, &(k, t)) in picks.iter().enumerate() {
        x.set_column(j, &table.sequence(k).column(t));
        y.set_column(j, &table.sequence(k).column(t + s));
    }
    (x, y)
}

/// One pass of dynamics updates; returns the mean loss before each update.
fn pred_epoch(
    table: &LatentTable,
    dynamics: &mut Dynamics,
    opt: &mut Optimizer,
    s: usize,
    batch_size: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut picks: Vec<(usize, usize)> = (0..table.trajectories())
        .flat_map(|k| (0..table.steps() - s).map(move |t| (k, t)))
        .collect();
    if batch_size.is_some() {
        picks.shuffle(rng);
    }
    let n = picks.len();
    let chunk = batch_size.unwrap_or(n.max(1));
    let mut total = 0.0;
    for batch in picks.chunks(chunk) {
        let (x, y) = pairs(table, s, batch);
        let rep = pair_loss_and_grad(dynamics, &x, &y, s)?;
        total += rep.loss * batch.len() as f64;
        let p = dynamics.params_mut().expect("trainable dynamics");
        opt.step(&mut p.values, &rep.grad.values)?;
    }
    Ok(total / n.max(1) as f64)
}

/// Mean over columns of `‖y − G^s(x)‖²` and its gradient in the dynamics parameters.
fn pair_loss_and_grad(dynamics: &Dynamics, x: &DMatrix<f64>, y: &DMatrix<f64>, s: usize) -> Result<GradReport> {
    let params = dynamics
        .params()
        .ok_or_else(|| TrainError::Config("dynamics has no trainable parameters".into()))?;
    let n = x.ncols() as f64;
    let mut dyn_err = None;
    let report = value_and_grad(params, |tape, bound| {
        let x0 = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let out = match dynamics.steps_on_tape(tape, bound, x0, s) {
            Ok(v) => v,
            Err(e) => {
                dyn_err = Some(e);
                return Err(AutogradError::Shape("dynamics failed on tape".into()));
            }
        };
        let d = tape.sub(out, yv);
        let d2 = tape.square(d);
        let total = tape.sum(d2);
        Ok(tape.scale(total, 1.0 / n))
    });
    match (report, dyn_err) {
        (_, Some(e)) => Err(e.into()),
        (r, None) => Ok(r?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::make_latlon_grid;
    use crate::sinr::{channel_labels, represent_subspace, sinr_decode, SinrDims};
    use crate::sphere::SphCoeffs;

    fn single_snapshot_dataset(sp: &SinrParams, z: &DVector<f64>) -> Dataset {
        let grid = make_latlon_grid(16, 8);
        let field = sinr_decode(sp, &LatentState::new(z.clone(), 0.0), &grid).unwrap();
        Dataset::new([1, 1, 16, 8, 1], field.values.iter().copied().collect(), 1.0, channel_labels(1)).unwrap()
    }

    #[test]
    fn constant_offset_costs_its_square() {
        let grid = make_latlon_grid(8, 4);
        let a = FieldSnapshot::new(grid.clone(), DMatrix::from_element(32, 1, 0.3), channel_labels(1)).unwrap();
        let mut b = a.clone();
        b.values.add_scalar_mut(0.25);
        assert!((recon_loss(&a, &b).unwrap() - 0.0625).abs() < 1e-15);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn identity_model_pred_loss() {
        let dynamics = Dynamics::Identity { latent: 3 };
        let constant = DMatrix::from_element(3, 5, 0.7);
        assert_eq!(pred_loss(&constant, &dynamics, 1).unwrap(), 0.0);
        let drift = DMatrix::from_fn(3, 5, |r, c| if r == 0 { c as f64 } else { 0.2 });
        assert!((pred_loss(&drift, &dynamics, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            pred_loss(&drift, &dynamics, 5),
            Err(TrainError::ShortSequence { len: 5, s: 5 })
        ));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = SinrDims {
            depth: 1,
            degree: 1,
            hidden: 4,
            latent: 2,
            channels: 1,
        };
        let sp = SinrParams::init(dims, true, &mut rng);
        let ds = single_snapshot_dataset(&sp, &DVector::from_vec(vec![0.3, -0.2]));
        let table = LatentTable::for_dataset(&ds, 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = pretrain(&ds, &sp, &table, &cfg).unwrap();
        assert_eq!(out.sinr, sp);
        assert_eq!(out.table, table);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn representable_snapshot_is_fitted() {
        // ℓ ≤ 1 fits inside D = 1, L = 1 with h ≥ 3
        let mut coeffs = SphCoeffs::new();
        for (i, (ell, m)) in [(0usize, 0isize), (1, -1), (1, 0), (1, 1)].into_iter().enumerate() {
            coeffs.set(ell, m, 0.4 - 0.25 * i as f64).unwrap();
        }
        let dims = SinrDims {
            depth: 1,
            degree: 1,
            hidden: 4,
            latent: 2,
            channels: 1,
        };
        let exact = represent_subspace(&coeffs, dims).unwrap();
        let z = DVector::zeros(2);
        let ds = single_snapshot_dataset(&exact, &z);
        let table = LatentTable::for_dataset(&ds, 2);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let out = pretrain(&ds, &exact, &table, &cfg).unwrap();
        let decoded = sinr_decode(&out.sinr, &out.table.get(0, 0), &ds.grid).unwrap();
        assert!(recon_loss(&ds.snapshot(0, 0), &decoded).unwrap() < 1e-8);
        assert!(out.trace.iter().all(|r| r.recon < 1e-8));
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = SinrDims {
            depth: 2,
            degree: 1,
            hidden: 6,
            latent: 3,
            channels: 1,
        };
        let truth = SinrParams::init(dims, true, &mut rng);
        let grid = make_latlon_grid(8, 4);
        let mut values = Vec::new();
        for t in 0..4 {
            let z = DVector::from_fn(3, |i, _| (t as f64 * 0.5 + i as f64).sin());
            let f = sinr_decode(&truth, &LatentState::new(z, 0.0), &grid).unwrap();
            values.extend(f.values.iter().copied());
        }
        let ds = Dataset::new([1, 4, 8, 4, 1], values, 1.0, channel_labels(1)).unwrap();
        let start = SinrParams::init(dims, true, &mut rng);
        let table = LatentTable::for_dataset(&ds, 3);
        let cfg = TrainConfig {
            epochs: 200,
            lr_pretrain: 1e-2,
            lr_latent: 0.5,
            seed: 9,
            batch_size: Some(2),
            points_per_snapshot: Some(20),
            ..TrainConfig::default()
        };
        let a = pretrain(&ds, &start, &table, &cfg).unwrap();
        let b = pretrain(&ds, &start, &table, &cfg).unwrap();
        assert_eq!(a.sinr, b.sinr);
        assert_eq!(a.table, b.table);
        let first = a.trace[0].recon;
        let last = a.trace.last().unwrap().recon;
        assert!(last < 0.2 * first, "{first} -> {last}");
    }

    #[test]
    fn latent_steps_leave_decoder_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = SinrDims {
            depth: 1,
            degree: 1,
            hidden: 4,
            latent: 2,
            channels: 1,
        };
        let sp = SinrParams::init(dims, true, &mut rng);
        let ds = single_snapshot_dataset(&sp, &DVector::from_vec(vec![0.5, -0.5]));
        let mut table = LatentTable::for_dataset(&ds, 2);
        let basis = FilterBasis::for_dims(&ds.grid, &dims);
        let pass = ReconPass {
            ds: &ds,
            basis: &basis,
            lr_latent: 0.1,
            batch_size: None,
            points: None,
        };
        let before = sp.params.values.clone();
        let (_, grad) = pass.batch(&sp, &mut table, &[(0, 0)], &mut rng).unwrap();
        assert_eq!(sp.params.values, before);
        assert!(grad.iter().any(|g| *g != 0.0));
        assert_ne!(table.get(0, 0).z, DVector::zeros(2));
    }

    #[test]
    fn table_round_trips() {
        let mut t = LatentTable::zeros(2, 3, 4);
        t.set(1, 2, &DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let back = LatentTable::from_named(&NamedTensors::from_bytes(&t.to_named().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            s: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_latent: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
