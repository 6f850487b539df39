use nalgebra::{DMatrix, DVector};

use super::model::{recon_weights, FieldSnapshot, FilterBasis, LatentState, SinrNet, SinrParams};
use super::{Result, SinrError};
use crate::autograd::{value_and_grad, Adam, AdamConfig, GradReport, Layout, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncodeOptions {
    pub steps: usize,
    pub lr: f64,
    /// Stop once one step improves the loss by less than this.
    pub tol: f64,
    /// Return the initial latent untouched when its gradient norm is below this.
    pub grad_tol: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached geometrically.
    pub final_lr_fraction: f64,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            tol: 1e-8,
            grad_tol: 1e-12,
            final_lr_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeResult {
    pub state: LatentState,
    pub loss: f64,
    pub steps: usize,
}

/// The reconstruction loss as a quadratic in `z`, assembled from the decoder's
/// affine form `vec(out) = J z + o`.
pub(crate) struct AffineLoss {
    jac: DMatrix<f64>,
    /// `o − y`
    offset: DVector<f64>,
    weights: DVector<f64>,
}

impl AffineLoss {
    pub(crate) fn new(sp: &SinrParams, snapshot: &FieldSnapshot) -> Result<Self> {
        if snapshot.set.is_empty() {
            return Err(SinrError::EmptySnapshot);
        }
        let c = sp.dims.channels;
        if snapshot.channels() != c {
            return Err(SinrError::Dimension(format!(
                "snapshot has {} channels, model {}",
                snapshot.channels(),
                c
            )));
        }
        let net = SinrNet::new(sp);
        let g = net.filters(&FilterBasis::for_dims(&snapshot.set, &sp.dims));
        let jac = net.jacobian(&g);
        let base = net.eval(&g, &DVector::zeros(sp.dims.latent));
        let n = snapshot.set.len();
        let w = recon_weights(&snapshot.set, c);
        let offset = DVector::from_fn(n * c, |i, _| {
            base[(i / c, i % c)] - snapshot.values[(i / c, i % c)]
        });
        let weights = DVector::from_fn(n * c, |i, _| w[(i / c, i % c)]);
        Ok(Self {
            jac,
            offset,
            weights,
        })
    }

    pub(crate) fn value_and_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let r = &self.jac * z + &self.offset;
        let wr = r.component_mul(&self.weights);
        let loss = wr.dot(&r);
        let grad = self.jac.tr_mul(&wr) * 2.0;
        (loss, grad)
    }
}

/// Minimizes the weighted reconstruction loss over `z` with Adam, keeping
/// the decoder frozen.
pub fn sinr_encode(
    sp: &SinrParams,
    snapshot: &FieldSnapshot,
    init: &LatentState,
    opts: &EncodeOptions,
) -> Result<EncodeResult> {
    sp.check_latent(&init.z)?;
    let problem = AffineLoss::new(sp, snapshot)?;
    let mut z = init.z.clone();
    let (mut loss, mut grad) = problem.value_and_grad(&z);
    if !loss.is_finite() {
        return Err(SinrError::NonFinite(format!("initial encode loss {loss}")));
    }
    let mut steps = 0;
    if grad.norm() >= opts.grad_tol {
        let mut adam = Adam::new(z.len(), AdamConfig::with_lr(opts.lr));
        let decay = opts.final_lr_fraction.powf(1.0 / opts.steps.max(1) as f64);
        for k in 0..opts.steps {
            adam.cfg.lr = opts.lr * decay.powi(k as i32);
            adam.step(z.as_mut_slice(), grad.as_slice())
                .expect("latent and gradient share a length");
            let (next, g) = problem.value_and_grad(&z);
            if !next.is_finite() {
                return Err(SinrError::NonFinite(format!("encode loss {next} at step {k}")));
            }
            steps = k + 1;
            let improvement = loss - next;
            loss = next;
            grad = g;
            if improvement.abs() < opts.tol {
                break;
            }
        }
    }
    Ok(EncodeResult {
        state: LatentState::new(z, init.time_index),
        loss,
        steps,
    })
}

/// The encoding loss recorded on a tape with `z` as the only trainable leaf.
pub fn encode_loss_on_tape(
    sp: &SinrParams,
    snapshot: &FieldSnapshot,
    z: &DVector<f64>,
) -> Result<GradReport> {
    sp.check_latent(z)?;
    let mut layout = Layout::new();
    layout.push("z", 1, z.len());
    let zp = ParamVector::from_values(layout, z.iter().copied().collect())?;
    let basis = FilterBasis::for_dims(&snapshot.set, &sp.dims);
    let w = recon_weights(&snapshot.set, sp.dims.channels);
    let report = value_and_grad(&zp, |tape, zb| {
        let frozen = tape.bind_frozen(&sp.params);
        let zr = zb.get("z")?;
        let out = SinrNet::forward_on_tape(tape, &frozen, &sp.dims, sp.skip, &basis, zr)
            .map_err(|e| match e {
                SinrError::Autograd(a) => a,
                other => crate::autograd::AutogradError::Shape(other.to_string()),
            })?;
        let y = tape.constant(snapshot.values.clone());
        Ok(tape.weighted_sq_error(out, y, &w))
    })?;
    Ok(report)
}

/// The exact minimizer of the encoding loss; the minimum-norm one when the
/// decoder Jacobian is rank deficient on `snapshot`'s points.
pub fn sinr_encode_lstsq(sp: &SinrParams, snapshot: &FieldSnapshot, time_index: f64) -> Result<EncodeResult> {
    let problem = AffineLoss::new(sp, snapshot)?;
    let sw = problem.weights.map(f64::sqrt);
    let mut a = problem.jac.clone();
    for (mut row, w) in a.row_iter_mut().zip(sw.iter()) {
        row *= *w;
    }
    let rhs = -problem.offset.component_mul(&sw);
    let z = super::affine::solve_min_norm(&a, &rhs);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(SinrError::NonFinite("least-squares latent".into()));
    }
    let (loss, _) = problem.value_and_grad(&z);
    Ok(EncodeResult {
        state: LatentState::new(z, time_index),
        loss,
        steps: 0,
    })
}
