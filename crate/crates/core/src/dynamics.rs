//! Latent surrogate models: a neural ODE integrated with RK4 and a ReZero
//! residual baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::autograd::{Activation, AutogradError, Bound, Layout, ParamVector, Tape, Var};
use crate::ltsr::{LtsrError, NamedTensors, Tensor};
use crate::sinr::LatentState;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite latent state after step {0}")]
    NonFinite(usize),
    #[error("invalid time interval [{t0}, {t1}] or substeps {substeps}")]
    BadInterval { t0: f64, t1: f64, substeps: usize },
    #[error("latent has {got} entries, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("rollout length must be at least 1")]
    EmptyRollout,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Ltsr(#[from] LtsrError),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

pub const REZERO_BLOCKS: usize = 5;

/// The vector field `f_ψ`: an MLP `m → hidden… → m`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeFuncParams {
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub params: ParamVector,
}

impl OdeFuncParams {
    fn widths(latent: usize, hidden: &[usize]) -> Vec<usize> {
        let mut w = vec![latent];
        w.extend_from_slice(hidden);
        w.push(latent);
        w
    }

    fn layout(latent: usize, hidden: &[usize]) -> Layout {
        let w = Self::widths(latent, hidden);
        let mut l = Layout::new();
        for i in 0..w.len() - 1 {
            l.push(format!("w{i}"), w[i + 1], w[i]);
            l.push(format!("b{i}"), w[i + 1], 1);
        }
        l
    }

    pub fn zeros(latent: usize, hidden: Vec<usize>) -> Self {
        let layout = Self::layout(latent, &hidden);
        Self {
            latent,
            hidden,
            slope: 0.2,
            params: ParamVector::zeros(layout),
        }
    }

    /// Fan-in uniform weights; the output layer is scaled by `out_scale`.
    pub fn init<R: Rng + ?Sized>(latent: usize, hidden: Vec<usize>, out_scale: f64, rng: &mut R) -> Self {
        let mut f = Self::zeros(latent, hidden);
        let w = Self::widths(latent, &f.hidden);
        let n = w.len() - 1;
        for i in 0..n {
            let bound = 1.0 / (w[i] as f64).sqrt() * if i + 1 == n { out_scale } else { 1.0 };
            for v in f.params.slice_mut(&format!("w{i}")).unwrap() {
                *v = rng.random_range(-bound..bound);
            }
            for v in f.params.slice_mut(&format!("b{i}")).unwrap() {
                *v = rng.random_range(-bound..bound);
            }
        }
        f
    }

    fn layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `f(Z)` for each column of `Z`.
    pub fn eval(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z.clone();
        for i in 0..self.layers() {
            let w = self.params.matrix(&format!("w{i}")).unwrap();
            let b = self.params.slice(&format!("b{i}")).unwrap();
            let mut y = &w * &x;
            for mut col in y.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            if i + 1 < self.layers() {
                let s = self.slope;
                y.apply(|v| *v = if *v >= 0.0 { *v } else { s * *v });
            }
            x = y;
        }
        x
    }

    pub fn eval_on_tape(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let mut x = z;
        for i in 0..self.layers() {
            let w = bound.get(&format!("w{i}"))?;
            let y = tape.matmul(w, x);
            let y = tape.add_col(y, bound.get(&format!("b{i}"))?);
            x = if i + 1 < self.layers() {
                tape.leaky_relu(y, self.slope)
            } else {
                y
            };
        }
        Ok(x)
    }
}

/// Five residual blocks `z ← z + α_b act_b(W_b z + b_b)`; the last block is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct RezeroParams {
    pub latent: usize,
    pub slope: f64,
    pub params: ParamVector,
}

impl RezeroParams {
    fn layout(latent: usize) -> Layout {
        let mut l = Layout::new();
        for b in 0..REZERO_BLOCKS {
            l.push(format!("w{b}"), latent, latent);
            l.push(format!("b{b}"), latent, 1);
            l.push(format!("alpha{b}"), 1, 1);
        }
        l
    }

    pub fn zeros(latent: usize) -> Self {
        Self {
            latent,
            slope: 0.2,
            params: ParamVector::zeros(Self::layout(latent)),
        }
    }

    /// Fan-in weights with every gate `α` at zero.
    pub fn init<R: Rng + ?Sized>(latent: usize, rng: &mut R) -> Self {
        let mut r = Self::zeros(latent);
        let bound = 1.0 / (latent as f64).sqrt();
        for b in 0..REZERO_BLOCKS {
            for name in [format!("w{b}"), format!("b{b}")] {
                for v in r.params.slice_mut(&name).unwrap() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        r
    }

    fn activation(&self, block: usize) -> Activation {
        if block + 1 == REZERO_BLOCKS {
            Activation::Identity
        } else {
            Activation::LeakyRelu(self.slope)
        }
    }

    pub fn eval(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z.clone();
        for blk in 0..REZERO_BLOCKS {
            let alpha = self.params.slice(&format!("alpha{blk}")).unwrap()[0];
            if alpha == 0.0 {
                continue;
            }
            let w = self.params.matrix(&format!("w{blk}")).unwrap();
            let b = self.params.slice(&format!("b{blk}")).unwrap();
            let mut y = &w * &x;
            for mut col in y.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            let act = self.activation(blk);
            y.apply(|v| *v = act.apply(*v));
            x += y * alpha;
        }
        x
    }

    pub fn step_on_tape(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let mut x = z;
        let cols = tape.value(z).ncols();
        for blk in 0..REZERO_BLOCKS {
            let w = bound.get(&format!("w{blk}"))?;
            let y = tape.matmul(w, x);
            let y = tape.add_col(y, bound.get(&format!("b{blk}"))?);
            let y = tape.activate(y, self.activation(blk));
            // α is 1 × 1; spread it over the columns as a 1 × cols row
            let alpha = bound.get(&format!("alpha{blk}"))?;
            let ones = tape.constant(DMatrix::from_element(1, cols, 1.0));
            let arow = tape.matmul(alpha, ones);
            let ones_col = tape.constant(DMatrix::from_element(self.latent, 1, 1.0));
            let afull = tape.matmul(ones_col, arow);
            let gated = tape.mul(y, afull);
            x = tape.add(x, gated);
        }
        Ok(x)
    }
}

/// A latent step operator.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    NeuralOde {
        f: OdeFuncParams,
        dt: f64,
        substeps: usize,
    },
    Rezero(RezeroParams),
    Linear(DMatrix<f64>),
    Identity { latent: usize },
}

/// Classic RK4 from `t0` to `t1` in `substeps` equal steps, on every column of `z`.
pub fn rk4<F>(f: F, z: &DMatrix<f64>, t0: f64, t1: f64, substeps: usize) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    if substeps == 0 || !(t1 - t0).is_finite() || t1 == t0 {
        return Err(DynamicsError::BadInterval { t0, t1, substeps });
    }
    let h = (t1 - t0) / substeps as f64;
    let mut x = z.clone();
    for s in 0..substeps {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (h / 2.0)));
        let k3 = f(&(&x + &k2 * (h / 2.0)));
        let k4 = f(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite(s));
        }
    }
    Ok(x)
}

/// RK4 for `f_ψ` over `[t0, t1]`.
pub fn ode_step(
    f: &OdeFuncParams,
    z: &LatentState,
    t0: f64,
    t1: f64,
    substeps: usize,
) -> Result<LatentState> {
    if !(t1 > t0) {
        return Err(DynamicsError::BadInterval { t0, t1, substeps });
    }
    check_len(f.latent, z.z.len())?;
    let zm = DMatrix::from_column_slice(z.z.len(), 1, z.z.as_slice());
    let out = rk4(|x| f.eval(x), &zm, t0, t1, substeps)?;
    Ok(LatentState::new(
        DVector::from_column_slice(out.as_slice()),
        z.time_index + (t1 - t0),
    ))
}

/// One ReZero update.
pub fn rezero_step(r: &RezeroParams, z: &LatentState) -> Result<LatentState> {
    check_len(r.latent, z.z.len())?;
    let zm = DMatrix::from_column_slice(z.z.len(), 1, z.z.as_slice());
    let out = r.eval(&zm);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite(0));
    }
    Ok(LatentState::new(
        DVector::from_column_slice(out.as_slice()),
        z.time_index + 1.0,
    ))
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::Dimension { expected, got })
    }
}

/// RK4 recorded on a tape, so gradients flow through every stage.
pub fn rk4_on_tape(
    f: &OdeFuncParams,
    tape: &mut Tape,
    bound: &Bound,
    z: Var,
    dt: f64,
    substeps: usize,
) -> Result<Var> {
    let h = dt / substeps as f64;
    let mut x = z;
    for _ in 0..substeps {
        let k1 = f.eval_on_tape(tape, bound, x)?;
        let s1 = tape.scale(k1, h / 2.0);
        let x2 = tape.add(x, s1);
        let k2 = f.eval_on_tape(tape, bound, x2)?;
        let s2 = tape.scale(k2, h / 2.0);
        let x3 = tape.add(x, s2);
        let k3 = f.eval_on_tape(tape, bound, x3)?;
        let s3 = tape.scale(k3, h);
        let x4 = tape.add(x, s3);
        let k4 = f.eval_on_tape(tape, bound, x4)?;
        let k23 = tape.add(k2, k3);
        let k23 = tape.scale(k23, 2.0);
        let sum = tape.add(k1, k23);
        let sum = tape.add(sum, k4);
        let inc = tape.scale(sum, h / 6.0);
        x = tape.add(x, inc);
    }
    Ok(x)
}

impl Dynamics {
    pub fn neural_ode(f: OdeFuncParams) -> Self {
        Dynamics::NeuralOde {
            f,
            dt: 1.0,
            substeps: 4,
        }
    }

    pub fn latent(&self) -> usize {
        match self {
            Dynamics::NeuralOde { f, .. } => f.latent,
            Dynamics::Rezero(r) => r.latent,
            Dynamics::Linear(a) => a.nrows(),
            Dynamics::Identity { latent } => *latent,
        }
    }

    pub fn params(&self) -> Option<&ParamVector> {
        match self {
            Dynamics::NeuralOde { f, .. } => Some(&f.params),
            Dynamics::Rezero(r) => Some(&r.params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamVector> {
        match self {
            Dynamics::NeuralOde { f, .. } => Some(&mut f.params),
            Dynamics::Rezero(r) => Some(&mut r.params),
            _ => None,
        }
    }

    /// One step for every column of `z`.
    pub fn step_batch(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len(self.latent(), z.nrows())?;
        let out = match self {
            Dynamics::NeuralOde { f, dt, substeps } => rk4(|x| f.eval(x), z, 0.0, *dt, *substeps)?,
            Dynamics::Rezero(r) => r.eval(z),
            Dynamics::Linear(a) => a * z,
            Dynamics::Identity { .. } => z.clone(),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite(0));
        }
        Ok(out)
    }

    pub fn step(&self, z: &LatentState) -> Result<LatentState> {
        let zm = DMatrix::from_column_slice(z.z.len(), 1, z.z.as_slice());
        let out = self.step_batch(&zm)?;
        Ok(LatentState::new(
            DVector::from_column_slice(out.as_slice()),
            z.time_index + self.dt(),
        ))
    }

    pub fn dt(&self) -> f64 {
        match self {
            Dynamics::NeuralOde { dt, .. } => *dt,
            _ => 1.0,
        }
    }

    /// `s` steps on a tape; `z` holds one latent per column.
    pub fn steps_on_tape(&self, tape: &mut Tape, bound: &Bound, z: Var, s: usize) -> Result<Var> {
        let mut x = z;
        for _ in 0..s {
            x = match self {
                Dynamics::NeuralOde { f, dt, substeps } => rk4_on_tape(f, tape, bound, x, *dt, *substeps)?,
                Dynamics::Rezero(r) => r.step_on_tape(tape, bound, x)?,
                Dynamics::Linear(a) => {
                    let av = tape.constant(a.clone());
                    tape.matmul(av, x)
                }
                Dynamics::Identity { .. } => x,
            };
        }
        Ok(x)
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut n = NamedTensors::new();
        n.set_attr("kind", "dynamics");
        let push_params = |n: &mut NamedTensors, p: &ParamVector| {
            for s in p.layout().segments() {
                n.push(
                    s.name.clone(),
                    Tensor::new(vec![s.rows, s.cols], p.values[s.range()].to_vec()).unwrap(),
                );
            }
        };
        match self {
            Dynamics::NeuralOde { f, dt, substeps } => {
                n.set_attr("model", "neural_ode");
                n.set_attr("latent", f.latent);
                n.set_attr("hidden", &f.hidden);
                n.set_attr("slope", f.slope);
                n.set_attr("dt", dt);
                n.set_attr("substeps", substeps);
                push_params(&mut n, &f.params);
            }
            Dynamics::Rezero(r) => {
                n.set_attr("model", "rezero");
                n.set_attr("latent", r.latent);
                n.set_attr("slope", r.slope);
                push_params(&mut n, &r.params);
            }
            Dynamics::Linear(a) => {
                n.set_attr("model", "linear");
                n.set_attr("latent", a.nrows());
                let rows: Vec<f64> = a.transpose().iter().copied().collect();
                n.push("a", Tensor::new(vec![a.nrows(), a.ncols()], rows).unwrap());
            }
            Dynamics::Identity { latent } => {
                n.set_attr("model", "identity");
                n.set_attr("latent", latent);
            }
        }
        n
    }

    pub fn from_named(n: &NamedTensors) -> Result<Self> {
        let model: String = n.attr("model")?;
        let latent: usize = n.attr("latent")?;
        let fill = |p: &mut ParamVector| -> Result<()> {
            for s in p.layout().segments().to_vec() {
                let t = n.get(&s.name)?;
                if t.data.len() != s.len() {
                    return Err(LtsrError::Footer(format!("segment {} has wrong size", s.name)).into());
                }
                p.values[s.range()].copy_from_slice(&t.data);
            }
            Ok(())
        };
        match model.as_str() {
            "neural_ode" => {
                let mut f = OdeFuncParams::zeros(latent, n.attr("hidden")?);
                f.slope = n.attr("slope")?;
                fill(&mut f.params)?;
                Ok(Dynamics::NeuralOde {
                    f,
                    dt: n.attr("dt")?,
                    substeps: n.attr("substeps")?,
                })
            }
            "rezero" => {
                let mut r = RezeroParams::zeros(latent);
                r.slope = n.attr("slope")?;
                fill(&mut r.params)?;
                Ok(Dynamics::Rezero(r))
            }
            "linear" => {
                let t = n.get("a")?;
                Ok(Dynamics::Linear(DMatrix::from_row_slice(latent, latent, &t.data)))
            }
            "identity" => Ok(Dynamics::Identity { latent }),
            other => Err(LtsrError::Footer(format!("unknown dynamics model `{other}`")).into()),
        }
    }
}

/// `s` successive states starting after `z0`.
pub fn rollout(model: &Dynamics, z0: &LatentState, s: usize) -> Result<Vec<LatentState>> {
    if s == 0 {
        return Err(DynamicsError::EmptyRollout);
    }
    let mut out = Vec::with_capacity(s);
    let mut z = z0.clone();
    for _ in 0..s {
        z = model.step(&z)?;
        out.push(z.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        // scaling and squaring with a long Taylor series
        let n = a.nrows();
        let s = 10;
        let b = a / 2f64.powi(s);
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    fn linear_field(a: &DMatrix<f64>) -> OdeFuncParams {
        // no hidden layers, so f(z) = A z
        let mut f = OdeFuncParams::zeros(a.nrows(), vec![]);
        f.params.set_matrix("w0", a).unwrap();
        f
    }

    #[test]
    fn zero_field_is_identity_flow() {
        let f = OdeFuncParams::zeros(4, vec![8, 8]);
        let z = LatentState::new(DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]), 0.0);
        let out = ode_step(&f, &z, 0.0, 1.0, 4).unwrap();
        assert_eq!(out.z, z.z);
        assert_eq!(out.time_index, 1.0);
    }

    #[test]
    fn linear_flow_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        a *= 0.1 / a.norm();
        let z = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let out = ode_step(&linear_field(&a), &LatentState::new(z.clone(), 0.0), 0.0, 1.0, 10).unwrap();
        assert!((out.z - expm(&a) * z).amax() < 1e-8);
    }

    #[test]
    fn rk4_error_shrinks_fourth_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            // stable: skew part plus a negative shift
            let a = (&b - b.transpose()) * 0.8 - DMatrix::identity(3, 3) * 0.3;
            let z = DMatrix::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
            let exact = expm(&a) * &z;
            let e1 = (rk4(|x| &a * x, &z, 0.0, 1.0, 2).unwrap() - &exact).norm();
            let e2 = (rk4(|x| &a * x, &z, 0.0, 1.0, 4).unwrap() - &exact).norm();
            assert!(e1 / e2 >= 12.0, "ratio {}", e1 / e2);
        }
    }

    #[test]
    fn reversing_the_field_returns_home() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = OdeFuncParams::init(3, vec![6], 0.05, &mut rng);
        let mut neg = f.clone();
        let last = format!("w{}", f.hidden.len());
        let lastb = format!("b{}", f.hidden.len());
        for name in [last, lastb] {
            for v in neg.params.slice_mut(&name).unwrap() {
                *v = -*v;
            }
        }
        let z = LatentState::new(DVector::from_vec(vec![0.3, -0.1, 0.7]), 0.0);
        let fwd = ode_step(&f, &z, 0.0, 1.0, 10).unwrap();
        let back = ode_step(&neg, &fwd, 1.0, 2.0, 10).unwrap();
        assert!((back.z - z.z).amax() < 1e-10);
    }

    #[test]
    fn rezero_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = RezeroParams::init(5, &mut rng);
        let z = LatentState::new(DVector::from_fn(5, |i, _| i as f64 - 2.0), 0.0);
        assert_eq!(rezero_step(&r, &z).unwrap().z, z.z);

        let mut r = RezeroParams::zeros(3);
        let a = DMatrix::from_row_slice(3, 3, &[0.1, 0.2, 0.0, -0.3, 0.0, 0.5, 0.0, 0.1, 0.2]);
        r.params.set_matrix("w4", &a).unwrap();
        r.params.slice_mut("alpha4").unwrap()[0] = 1.0;
        let z = LatentState::new(DVector::from_vec(vec![1.0, -2.0, 0.5]), 0.0);
        let out = rezero_step(&r, &z).unwrap();
        assert!((out.z - (&z.z + &a * &z.z)).amax() < 1e-15);
    }

    #[test]
    fn rollout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = OdeFuncParams::init(3, vec![4], 0.5, &mut rng);
        let d = Dynamics::neural_ode(f);
        let z = LatentState::new(DVector::from_vec(vec![0.1, 0.2, 0.3]), 0.0);
        let one = rollout(&d, &z, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], d.step(&z).unwrap());
        let id = Dynamics::Identity { latent: 3 };
        assert!(rollout(&id, &z, 4).unwrap().iter().all(|s| s.z == z.z));
        assert!(matches!(rollout(&id, &z, 0), Err(DynamicsError::EmptyRollout)));
    }

    #[test]
    fn bad_interval_rejected() {
        let f = OdeFuncParams::zeros(2, vec![]);
        let z = LatentState::zeros(2);
        assert!(ode_step(&f, &z, 1.0, 1.0, 4).is_err());
        assert!(ode_step(&f, &z, 0.0, 1.0, 0).is_err());
    }

    #[test]
    fn tape_rk4_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = OdeFuncParams::init(4, vec![8, 8], 1.0, &mut rng);
        let z = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let direct = rk4(|x| f.eval(x), &z, 0.0, 1.0, 4).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&f.params);
        let zv = tape.input(z);
        let out = rk4_on_tape(&f, &mut tape, &b, zv, 1.0, 4).unwrap();
        assert!((tape.value(out) - direct).amax() < 1e-13);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in [
            Dynamics::neural_ode(OdeFuncParams::init(3, vec![5], 1.0, &mut rng)),
            Dynamics::Rezero(RezeroParams::init(3, &mut rng)),
            Dynamics::Linear(DMatrix::from_fn(3, 3, |r, c| (r * 3 + c) as f64)),
            Dynamics::Identity { latent: 3 },
        ] {
            let bytes = d.to_named().to_bytes();
            let back = Dynamics::from_named(&NamedTensors::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, d);
        }
    }
}
