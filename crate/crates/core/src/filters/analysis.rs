use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::ensemble::Ensemble;
use super::rotation::{DeviationBasis, MeanPreservingRotation};
use crate::linalg;
use super::{FilterError, FilterMethod, ModelNoise, ObservationBatch, ObservationOperator, Result};

const RCOND: f64 = 1e-10;

fn observe(ens: &Ensemble, obs: &ObservationBatch, op: &dyn ObservationOperator) -> Result<DMatrix<f64>> {
    if !(obs.noise_std > 0.0) {
        return Err(FilterError::Config(format!("observation noise {} must be positive", obs.noise_std)));
    }
    let hz = op.observe(&ens.members())?;
    if hz.shape() != (ens.size(), obs.len()) {
        return Err(FilterError::Dimension(format!(
            "observation operator returned {:?}, expected {:?}",
            hz.shape(),
            (ens.size(), obs.len())
        )));
    }
    if hz.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinite("observed members".into()));
    }
    Ok(hz)
}

/// Column means and rows `(a_j − ā)/√(N−1)`.
fn row_anomalies(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = a.row_mean().transpose();
    let mut x = a.clone();
    for mut r in x.row_iter_mut() {
        r -= mean.transpose();
    }
    let scale = ((a.nrows() - 1) as f64).sqrt();
    (mean, x / scale)
}

/// Solves `a x = b` for symmetric positive (semi)definite `a`.
fn solve_symmetric(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (&a + a.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(top > 0.0) || !top.is_finite() {
        return Err(FilterError::Factorization("innovation covariance is zero or non-finite".into()));
    }
    let inv = eig.eigenvalues.map(|l| if l > RCOND * top { 1.0 / l } else { 0.0 });
    let v = &eig.eigenvectors;
    let x = v * DMatrix::from_diagonal(&inv) * v.tr_mul(b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::Factorization("symmetric solve produced non-finite values".into()));
    }
    Ok(x)
}

fn pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = linalg::pinv(a, RCOND);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::Factorization("pseudoinverse produced non-finite values".into()));
    }
    Ok(x)
}

fn gaussian<R: Rng + ?Sized>(n: usize, p: usize, sigma: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Observation perturbations with zero sample mean, made orthogonal to the
/// columns of `against` whenever the ensemble has room for it, and rescaled
/// so that their sample covariance stays `σ² I` in expectation.
fn decorrelated_perturbations<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    sigma: f64,
    against: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut e = gaussian(n, p, sigma, rng);
    let mean = e.row_mean();
    for mut r in e.row_iter_mut() {
        r -= &mean;
    }
    let basis = linalg::svd(against).range_basis(RCOND);
    let r = basis.ncols();
    if n - 1 >= r + p && r > 0 {
        let proj = &basis * basis.tr_mul(&e);
        e -= proj;
        e *= ((n - 1) as f64 / (n - 1 - r) as f64).sqrt();
    }
    e
}

/// Stochastic EnKF: `K = P_xy (P_yy + Σ^o)⁻¹`, perturbed observations per member.
pub fn analyze_enkf<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationBatch,
    op: &dyn ObservationOperator,
    rng: &mut R,
) -> Result<Ensemble> {
    let hz = observe(ens, obs, op)?;
    let (n, p) = hz.shape();
    let x = ens.anomalies();
    let (_, y) = row_anomalies(&hz);
    let pxy = x.tr_mul(&y);
    let mut s = y.tr_mul(&y);
    for i in 0..p {
        s[(i, i)] += obs.noise_std * obs.noise_std;
    }
    let kt = solve_symmetric(s, &pxy.transpose())?;
    let eps = gaussian(n, p, obs.noise_std, rng);
    let mut d = eps - hz;
    for mut r in d.row_iter_mut() {
        r += obs.y.transpose();
    }
    Ensemble::from_members(&(ens.members() + d * kt))
}

/// Stochastic-gain EnKF: `K = X Y_pᵀ (Y_p Y_pᵀ)⁻¹` with `Y_p` the anomalies of
/// `H(z_j) − ε_j`; the inverse is a pseudoinverse when `Y_p` is rank deficient.
pub fn analyze_senkf<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationBatch,
    op: &dyn ObservationOperator,
    rng: &mut R,
) -> Result<Ensemble> {
    let hz = observe(ens, obs, op)?;
    let (n, p) = hz.shape();
    let x = ens.anomalies();
    let (_, y) = row_anomalies(&hz);
    let mut span = DMatrix::zeros(n, x.ncols() + p);
    span.columns_mut(0, x.ncols()).copy_from(&x);
    span.columns_mut(x.ncols(), p).copy_from(&y);
    let eps = decorrelated_perturbations(n, p, obs.noise_std, &span, rng);
    let yp_members = &hz - &eps;
    let (_, yp) = row_anomalies(&yp_members);
    let kt = pinv(&yp)? * &x;
    let mut d = -yp_members;
    for mut r in d.row_iter_mut() {
        r += obs.y.transpose();
    }
    Ensemble::from_members(&(ens.members() + d * kt))
}

/// Deterministic EnKF: full gain on the mean, half gain on the anomalies.
pub fn analyze_denkf(ens: &Ensemble, obs: &ObservationBatch, op: &dyn ObservationOperator) -> Result<Ensemble> {
    let hz = observe(ens, obs, op)?;
    let p = hz.ncols();
    let x = ens.anomalies();
    let (ybar, y) = row_anomalies(&hz);
    let pxy = x.tr_mul(&y);
    let mut s = y.tr_mul(&y);
    for i in 0..p {
        s[(i, i)] += obs.noise_std * obs.noise_std;
    }
    let kt = solve_symmetric(s, &pxy.transpose())?;
    let innovation = &obs.y - ybar;
    let mean = ens.mean() + kt.tr_mul(&innovation);
    let xa = x - (&y * &kt) * 0.5;
    let scale = ((ens.size() - 1) as f64).sqrt();
    Ensemble::from_parts(mean, xa * scale)
}

/// `T = (I + S Sᵀ)⁻¹` for `S` with rows indexing members, held through the
/// thin SVD of `S` so it is never formed.
struct Transform {
    basis: DMatrix<f64>,
    shrink: DVector<f64>,
    root: DVector<f64>,
}

impl Transform {
    fn new(s: &DMatrix<f64>) -> Self {
        let svd = linalg::svd(s);
        let basis = svd.u;
        let sv2 = svd.s.map(|v| v * v);
        Self {
            basis,
            shrink: sv2.map(|v| v / (1.0 + v)),
            root: sv2.map(|v| 1.0 / (1.0 + v).sqrt() - 1.0),
        }
    }

    fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.basis.tr_mul(v);
        let c = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] * self.shrink[i]);
        v - &self.basis * c
    }

    fn apply_sqrt(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.basis.tr_mul(v);
        let c = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] * self.root[i]);
        v + &self.basis * c
    }
}

/// The transform step shared by ETKF and ETKF-Q: returns the weights
/// `w = T Sᵀ δ` and `T^{1/2} X`.
fn transform_update(x: &DMatrix<f64>, y: &DMatrix<f64>, innovation: &DVector<f64>, sigma: f64) -> (DVector<f64>, DMatrix<f64>) {
    let s = y / sigma;
    let delta = innovation / sigma;
    let t = Transform::new(&s);
    let sd = &s * delta;
    let w = t.apply(&DMatrix::from_column_slice(sd.len(), 1, sd.as_slice()));
    (DVector::from_column_slice(w.as_slice()), t.apply_sqrt(x))
}

/// Ensemble transform Kalman filter with anomaly update `X T^{1/2} U`.
pub fn analyze_etkf(
    ens: &Ensemble,
    obs: &ObservationBatch,
    op: &dyn ObservationOperator,
    rotation: &MeanPreservingRotation,
) -> Result<Ensemble> {
    let hz = observe(ens, obs, op)?;
    if rotation.size() != ens.size() {
        return Err(FilterError::Dimension("rotation size differs from ensemble size".into()));
    }
    let x = ens.anomalies();
    let (ybar, y) = row_anomalies(&hz);
    let (w, mut xa) = transform_update(&x, &y, &(&obs.y - ybar), obs.noise_std);
    let mean = ens.mean() + x.tr_mul(&w);
    rotation.apply_left(&mut xa);
    let scale = ((ens.size() - 1) as f64).sqrt();
    Ensemble::from_parts(mean, xa * scale)
}

/// Forecast-stage augmentation of ETKF-Q: replaces the deviations by the
/// `N−1` leading eigenpairs of `Δ Δᵀ + Σ^M`.
pub fn augment_etkfq(ens: &Ensemble, noise: &ModelNoise) -> Result<Ensemble> {
    let n = ens.size();
    let m = ens.latent();
    let basis = DeviationBasis::new(n);
    let (_, dev) = basis.decompose(&ens.deviations().clone());
    let mut c = dev.tr_mul(&dev);
    let var = noise.variances(m);
    if var.len() != m {
        return Err(FilterError::Dimension(format!("model noise has {} entries for {m} latents", var.len())));
    }
    for i in 0..m {
        c[(i, i)] += var[i];
    }
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::Factorization("ETKF-Q eigen decomposition".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut new_dev = DMatrix::zeros(n - 1, m);
    for (row, &k) in order.iter().take(n - 1).enumerate() {
        let scale = eig.eigenvalues[k].max(0.0).sqrt();
        for j in 0..m {
            new_dev[(row, j)] = eig.eigenvectors[(j, k)] * scale;
        }
    }
    let rows = basis.compose(&DVector::zeros(m), &new_dev);
    Ensemble::from_parts(ens.mean().clone(), rows)
}

/// Analysis half of ETKF-Q, in the deviation coordinates of the fixed basis.
pub fn etkfq_transform(ens: &Ensemble, obs: &ObservationBatch, op: &dyn ObservationOperator) -> Result<Ensemble> {
    let hz = observe(ens, obs, op)?;
    let n = ens.size();
    let basis = DeviationBasis::new(n);
    let (_, dx) = basis.decompose(&ens.deviations().clone());
    let (ybar, dy) = basis.decompose(&hz);
    let (w, dxa) = transform_update(&dx, &dy, &(&obs.y - ybar), obs.noise_std);
    let mean = ens.mean() + dx.tr_mul(&w);
    let rows = basis.compose(&DVector::zeros(ens.latent()), &dxa);
    Ensemble::from_parts(mean, rows)
}

/// ETKF-Q: augmentation with `Σ^M` followed by the transform analysis.
pub fn analyze_etkfq(
    ens: &Ensemble,
    obs: &ObservationBatch,
    op: &dyn ObservationOperator,
    noise: &ModelNoise,
) -> Result<Ensemble> {
    etkfq_transform(&augment_etkfq(ens, noise)?, obs, op)
}

/// Dispatches on `method`. ETKF draws its rotation from `rng`; ETKF-Q expects
/// a deterministic forecast and adds `noise` itself.
pub fn analyze<R: Rng + ?Sized>(
    method: FilterMethod,
    ens: &Ensemble,
    obs: &ObservationBatch,
    op: &dyn ObservationOperator,
    noise: &ModelNoise,
    rng: &mut R,
) -> Result<Ensemble> {
    match method {
        FilterMethod::Enkf => analyze_enkf(ens, obs, op, rng),
        FilterMethod::Senkf => analyze_senkf(ens, obs, op, rng),
        FilterMethod::Denkf => analyze_denkf(ens, obs, op),
        FilterMethod::Etkf => {
            let rot = MeanPreservingRotation::random(ens.size(), rng);
            analyze_etkf(ens, obs, op, &rot)
        }
        FilterMethod::Etkfq => analyze_etkfq(ens, obs, op, noise),
    }
}
