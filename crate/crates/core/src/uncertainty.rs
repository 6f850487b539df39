//! Data-driven error covariances: the maximum-likelihood model-error
//! estimator and the decoder-Jacobian latent background covariance.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{value_and_grad, Adam, AdamConfig, AutogradError, GradReport, Layout, ParamVector};
use crate::dynamics::{Dynamics, DynamicsError};
use crate::filters::ModelNoise;
use crate::linalg;
use crate::ltsr::{LtsrError, NamedTensors, Tensor};
use crate::sinr::{FilterBasis, LatentState, SinrError, SinrParams};
use crate::sphere::SamplingSet;

pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const PINV_RCOND: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("need at least two latent pairs, got {0}")]
    TooFewPairs(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Sinr(#[from] SinrError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Ltsr(#[from] LtsrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UncertaintyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Scalar,
    Diagonal,
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "scalar" => Ok(EstimatorKind::Scalar),
            "diagonal" => Ok(EstimatorKind::Diagonal),
            other => Err(format!("unknown estimator kind `{other}`")),
        }
    }
}

/// `Σ^L = diag(exp(2d))`, with one shared entry for the scalar kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelErrorEstimator {
    pub kind: EstimatorKind,
    pub d: DVector<f64>,
}

impl ModelErrorEstimator {
    pub fn std(&self) -> DVector<f64> {
        self.d.map(f64::exp)
    }

    pub fn to_model_noise(&self) -> ModelNoise {
        match self.kind {
            EstimatorKind::Scalar => ModelNoise::Scalar(self.d[0].exp()),
            EstimatorKind::Diagonal => ModelNoise::Diagonal(self.std()),
        }
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut n = NamedTensors::new();
        n.set_attr("kind", "model-error");
        n.set_attr("estimator", self.kind);
        n.push("d", Tensor::new(vec![self.d.len()], self.d.as_slice().to_vec()).expect("vector dims"));
        n
    }

    pub fn from_named(n: &NamedTensors) -> Result<Self> {
        let kind: EstimatorKind = n.attr("estimator")?;
        let d = DVector::from_vec(n.get("d")?.data.clone());
        if kind == EstimatorKind::Scalar && d.len() != 1 {
            return Err(UncertaintyError::Dimension("scalar estimator with several entries".into()));
        }
        Ok(Self { kind, d })
    }
}

/// Residuals `G(z_k) − z_{k+1}`, one pair per row.
pub fn mle_residuals(pairs: &[(DVector<f64>, DVector<f64>)], dynamics: &Dynamics) -> Result<DMatrix<f64>> {
    let m = dynamics.latent();
    let k = pairs.len();
    let mut from = DMatrix::zeros(m, k);
    let mut to = DMatrix::zeros(m, k);
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.len() != m || b.len() != m {
            return Err(UncertaintyError::Dimension(format!("pair {i} is not {m}-dimensional")));
        }
        from.set_column(i, a);
        to.set_column(i, b);
    }
    Ok((dynamics.step_batch(&from)? - to).transpose())
}

/// Per-entry counts and squared-residual sums: the loss is
/// `∑_j count_j d_j + ½ ∑_j sum_j exp(−2 d_j)`.
fn sufficient_stats(residuals: &DMatrix<f64>, kind: EstimatorKind) -> (DVector<f64>, DVector<f64>) {
    let (k, m) = residuals.shape();
    match kind {
        EstimatorKind::Scalar => (
            DVector::from_element(1, (k * m) as f64),
            DVector::from_element(1, residuals.norm_squared()),
        ),
        EstimatorKind::Diagonal => (
            DVector::from_element(m, k as f64),
            DVector::from_fn(m, |j, _| residuals.column(j).norm_squared()),
        ),
    }
}

/// `∑_k (∑_j D_jj + ½‖exp(−D) r_k‖²)`.
pub fn mle_loss(d: &DVector<f64>, residuals: &DMatrix<f64>, kind: EstimatorKind) -> f64 {
    let (count, sum) = sufficient_stats(residuals, kind);
    count.dot(d) + 0.5 * sum.iter().zip(d.iter()).map(|(s, d)| s * (-2.0 * d).exp()).sum::<f64>()
}

/// The MLE loss and its gradient in `d` from the tape.
pub fn mle_loss_on_tape(d: &DVector<f64>, residuals: &DMatrix<f64>, kind: EstimatorKind) -> Result<GradReport> {
    let (count, sum) = sufficient_stats(residuals, kind);
    if d.len() != count.len() {
        return Err(UncertaintyError::Dimension(format!("d has {} entries, expected {}", d.len(), count.len())));
    }
    let mut layout = Layout::new();
    layout.push("d", 1, d.len());
    let p = ParamVector::from_values(layout, d.as_slice().to_vec())?;
    Ok(value_and_grad(&p, |tape, b| {
        let dv = b.get("d")?;
        let c = tape.constant(DMatrix::from_row_slice(1, count.len(), count.as_slice()));
        let s = tape.constant(DMatrix::from_row_slice(1, sum.len(), sum.as_slice()));
        let cd = tape.mul(c, dv);
        let lin = tape.sum(cd);
        let neg = tape.scale(dv, -2.0);
        let e = tape.exp(neg);
        let se = tape.mul(s, e);
        let quad = tape.sum(se);
        let quad = tape.scale(quad, 0.5);
        Ok(tape.add(lin, quad))
    })?)
}

fn closed_form(residuals: &DMatrix<f64>, kind: EstimatorKind) -> DVector<f64> {
    let (count, sum) = sufficient_stats(residuals, kind);
    DVector::from_fn(count.len(), |j, _| 0.5 * (sum[j] / count[j]).max(VARIANCE_FLOOR).ln())
}

/// Fits the estimator in closed form: `exp(2 d_j)` is the mean squared residual.
pub fn fit_mle(pairs: &[(DVector<f64>, DVector<f64>)], dynamics: &Dynamics, kind: EstimatorKind) -> Result<ModelErrorEstimator> {
    if pairs.len() < 2 {
        return Err(UncertaintyError::TooFewPairs(pairs.len()));
    }
    let r = mle_residuals(pairs, dynamics)?;
    Ok(ModelErrorEstimator {
        kind,
        d: closed_form(&r, kind),
    })
}

/// Minimizes the same loss by gradient descent from `d = 0`.
pub fn fit_mle_gd(residuals: &DMatrix<f64>, kind: EstimatorKind, steps: usize, lr: f64) -> Result<ModelErrorEstimator> {
    let (count, _) = sufficient_stats(residuals, kind);
    let mut d = DVector::zeros(count.len());
    let mut adam = Adam::new(d.len(), AdamConfig::with_lr(lr));
    let decay = 1e-3f64.powf(1.0 / steps.max(1) as f64);
    for k in 0..steps {
        let g = mle_loss_on_tape(&d, residuals, kind)?;
        // scale-free step: divide by the per-entry count
        let grad: Vec<f64> = g.grad.values.iter().zip(count.iter()).map(|(g, c)| g / c).collect();
        adam.cfg.lr = lr * decay.powi(k as i32);
        adam.step(d.as_mut_slice(), &grad).expect("lengths agree");
    }
    let floor = 0.5 * VARIANCE_FLOOR.ln();
    d.iter_mut().for_each(|v| *v = v.max(floor));
    Ok(ModelErrorEstimator { kind, d })
}

/// Latent background covariance and the physical noise it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSpec {
    pub sigma_x_b: f64,
    pub cov_z_b: DMatrix<f64>,
    /// Numerical rank of the Jacobian used.
    pub rank: usize,
}

impl BackgroundSpec {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in self.cov_z_b.row_iter() {
            let line: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// `σ² J⁺ J⁺ᵀ`, symmetrized, for a decoder Jacobian `J` (observed values × latent).
pub fn background_cov_from_jacobian(jac: &DMatrix<f64>, sigma_x_b: f64) -> BackgroundSpec {
    let svd = linalg::svd(jac);
    let rank = svd.rank(PINV_RCOND);
    if rank < jac.ncols() {
        log::warn!("decoder Jacobian has rank {rank} < latent size {}", jac.ncols());
    }
    let jp = svd.pinv(PINV_RCOND);
    let c = &jp * jp.transpose() * (sigma_x_b * sigma_x_b);
    BackgroundSpec {
        sigma_x_b,
        cov_z_b: (&c + c.transpose()) * 0.5,
        rank,
    }
}

/// Propagates isotropic physical noise `σ_x^b` on `set` to the latent space
/// through the pseudoinverse of the decoder Jacobian at `z_b`.
pub fn latent_background_cov(sp: &SinrParams, z_b: &LatentState, set: &SamplingSet, sigma_x_b: f64) -> Result<BackgroundSpec> {
    sp.check_latent(&z_b.z)?;
    let net = sp.net();
    let jac = net.jacobian(&net.filters(&FilterBasis::for_dims(set, &sp.dims)));
    Ok(background_cov_from_jacobian(&jac, sigma_x_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn zero_residuals_hit_the_floor() {
        let z = DVector::from_vec(vec![1.0, 2.0]);
        let pairs = vec![(z.clone(), z.clone()); 3];
        let dynamics = Dynamics::Identity { latent: 2 };
        for kind in [EstimatorKind::Scalar, EstimatorKind::Diagonal] {
            let est = fit_mle(&pairs, &dynamics, kind).unwrap();
            for v in est.std().iter() {
                assert!((v * v - VARIANCE_FLOOR).abs() < 1e-20);
            }
        }
    }

    #[test]
    fn needs_two_pairs() {
        let z = DVector::from_vec(vec![1.0]);
        let err = fit_mle(&[(z.clone(), z)], &Dynamics::Identity { latent: 1 }, EstimatorKind::Scalar);
        assert!(matches!(err, Err(UncertaintyError::TooFewPairs(1))));
    }

    #[test]
    fn closed_form_matches_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sig = [0.05, 0.3, 1.0, 2.5];
        let r = DMatrix::from_fn(500, 4, |_, j| Normal::new(0.0, sig[j]).unwrap().sample(&mut rng));
        for kind in [EstimatorKind::Scalar, EstimatorKind::Diagonal] {
            let cf = closed_form(&r, kind);
            let gd = fit_mle_gd(&r, kind, 3000, 0.05).unwrap();
            assert!((cf - &gd.d).amax() < 1e-6, "{kind:?}");
        }
    }

    #[test]
    fn loss_is_minimal_at_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = DMatrix::from_fn(50, 3, |_, _| Normal::new(0.0, 0.7).unwrap().sample(&mut rng));
        let d = closed_form(&r, EstimatorKind::Diagonal);
        let best = mle_loss(&d, &r, EstimatorKind::Diagonal);
        let g = mle_loss_on_tape(&d, &r, EstimatorKind::Diagonal).unwrap();
        assert!((g.loss - best).abs() < 1e-9 * best.abs());
        assert!(g.grad.values.iter().all(|v| v.abs() < 1e-9));
        for j in 0..3 {
            for h in [-1e-3, 1e-3] {
                let mut e = d.clone();
                e[j] += h;
                assert!(mle_loss(&e, &r, EstimatorKind::Diagonal) > best);
            }
        }
    }

    #[test]
    fn estimator_round_trips() {
        let est = ModelErrorEstimator {
            kind: EstimatorKind::Diagonal,
            d: DVector::from_vec(vec![-1.0, 0.5]),
        };
        let back = ModelErrorEstimator::from_named(&NamedTensors::from_bytes(&est.to_named().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, est);
        assert_eq!(est.to_model_noise(), ModelNoise::Diagonal(est.std()));
    }
}
