use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

use super::params::{Layout, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("loss is not finite ({value}) {context}")]
    NonFiniteLoss { value: f64, context: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),
    #[error("segment `{0}` breaks layout contiguity")]
    BadLayout(String),
}

type Mat = DMatrix<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearities that can be named in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Sin,
    Cos,
    Exp,
    Log,
    Square,
}

impl FromStr for Activation {
    type Err = AutogradError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu(0.2)),
            "sin" => Ok(Activation::Sin),
            "cos" => Ok(Activation::Cos),
            "exp" => Ok(Activation::Exp),
            "log" => Ok(Activation::Log),
            "square" => Ok(Activation::Square),
            other => Err(AutogradError::UnsupportedPrimitive(other.to_string())),
        }
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Sin => x.sin(),
            Activation::Cos => x.cos(),
            Activation::Exp => x.exp(),
            Activation::Log => x.ln(),
            Activation::Square => x * x,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    LeakyRelu(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    param_offset: Option<usize>,
    needs_grad: bool,
}

/// Records a matrix program for one reverse sweep.
///
/// Shapes are checked eagerly; a mismatched call panics with the offending
/// shapes, since it is a programming error rather than a data error.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    aux: BTreeMap<String, Var>,
}

/// Reverse-mode adjoints for every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Mat>>,
    offsets: Vec<(usize, Var)>,
}

impl Gradients {
    /// Adjoint of `v`, zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var, like: &Tape) -> Mat {
        self.adj[v.0].clone().unwrap_or_else(|| {
            let x = &like.nodes[v.0].value;
            Mat::zeros(x.nrows(), x.ncols())
        })
    }

    /// Sums adjoints of every bound parameter leaf into a flat vector.
    pub fn flatten(&self, layout: &Layout) -> Vec<f64> {
        let mut out = vec![0.0; layout.len()];
        for &(offset, v) in &self.offsets {
            if let Some(g) = &self.adj[v.0] {
                let cols = g.ncols();
                for r in 0..g.nrows() {
                    for c in 0..cols {
                        out[offset + r * cols + c] += g[(r, c)];
                    }
                }
            }
        }
        out
    }
}

macro_rules! unary {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(&mut self, a: Var) -> Var {
            let v = self.nodes[a.0].value.map($f);
            self.push(v, Op::$op(a))
        }
    };
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b) => self.needs(a) || self.needs(b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::LeakyRelu(a, _) => self.needs(a),
        };
        self.nodes.push(Node {
            value,
            op,
            param_offset: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.nrows(), m.ncols()), (1, 1), "not a scalar node");
        m[(0, 0)]
    }

    /// A value the loss is differentiated against but that belongs to no layout.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Fixed data; no adjoint is propagated into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = false;
        v
    }

    /// Leaf bound to segment `name` of `params`.
    pub fn param(&mut self, params: &ParamVector, name: &str) -> Result<Var, AutogradError> {
        let seg = params.layout().segment(name)?;
        let offset = seg.offset;
        let v = self.push(params.matrix(name)?, Op::Leaf);
        self.nodes[v.0].param_offset = Some(offset);
        Ok(v)
    }

    /// Binds every segment of `params` as a leaf.
    pub fn bind(&mut self, params: &ParamVector) -> Bound {
        let vars = params
            .layout()
            .segments()
            .iter()
            .map(|s| {
                let v = self.param(params, &s.name).expect("segment from own layout");
                (s.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Binds every segment of `params` as a constant: no gradient flows into it.
    pub fn bind_frozen(&mut self, params: &ParamVector) -> Bound {
        let vars = params
            .layout()
            .segments()
            .iter()
            .map(|s| {
                let m = params.matrix(&s.name).expect("segment from own layout");
                (s.name.clone(), self.constant(m))
            })
            .collect();
        Bound { vars }
    }

    pub fn record_aux(&mut self, name: impl Into<String>, v: Var) {
        self.aux.insert(name.into(), v);
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.nrows(), m.ncols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} by {br}x{bc}");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.nodes[a.0].value.component_mul(&self.nodes[b.0].value);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1 × n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (_, ac) = self.shape(a);
        assert_eq!(self.shape(r), (1, ac), "add_row: row has wrong shape");
        let mut v = self.nodes[a.0].value.clone();
        let row = self.nodes[r.0].value.row(0).clone_owned();
        for mut vr in v.row_iter_mut() {
            vr += &row;
        }
        self.push(v, Op::AddRow(a, r))
    }

    /// Adds the `n × 1` column `c` to every column of `a`.
    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        let (ar, _) = self.shape(a);
        assert_eq!(self.shape(c), (ar, 1), "add_col: column has wrong shape");
        let mut v = self.nodes[a.0].value.clone();
        let col = self.nodes[c.0].value.column(0).clone_owned();
        for mut vc in v.column_iter_mut() {
            vc += &col;
        }
        self.push(v, Op::AddCol(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_element(1, 1, self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Mat::from_element(1, 1, self.nodes[a.0].value.mean());
        self.push(v, Op::Mean(a))
    }

    unary!(sin, Sin, f64::sin);
    unary!(cos, Cos, f64::cos);
    unary!(exp, Exp, f64::exp);
    unary!(log, Log, f64::ln);
    unary!(square, Square, |x| x * x);

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0]
            .value
            .map(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Identity => a,
            Activation::LeakyRelu(s) => self.leaky_relu(a, s),
            Activation::Sin => self.sin(a),
            Activation::Cos => self.cos(a),
            Activation::Exp => self.exp(a),
            Activation::Log => self.log(a),
            Activation::Square => self.square(a),
        }
    }

    /// `∑ w ⊙ (a − b)²` with a constant weight matrix.
    pub fn weighted_sq_error(&mut self, a: Var, b: Var, w: &Mat) -> Var {
        let d = self.sub(a, b);
        let d2 = self.square(d);
        let wv = self.constant(w.clone());
        let wd = self.mul(d2, wv);
        self.sum(wd)
    }

    /// Reverse sweep seeded with `d loss = 1`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Mat>> = vec![None; n];
        adj[loss.0] = Some(Mat::from_element(1, 1, 1.0));
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(x) => *x += g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs(a) {
                        let ga = &g * self.nodes[b.0].value.transpose();
                        acc(&mut adj, a, ga);
                    }
                    if needs(b) {
                        let gb = self.nodes[a.0].value.tr_mul(&g);
                        acc(&mut adj, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if needs(b) {
                        acc(&mut adj, b, g.clone());
                    }
                    if needs(a) {
                        acc(&mut adj, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(b) {
                        acc(&mut adj, b, -g.clone());
                    }
                    if needs(a) {
                        acc(&mut adj, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        acc(&mut adj, a, g.component_mul(&self.nodes[b.0].value));
                    }
                    if needs(b) {
                        acc(&mut adj, b, g.component_mul(&self.nodes[a.0].value));
                    }
                }
                Op::AddRow(a, r) => {
                    if needs(r) {
                        let gr = Mat::from_fn(1, g.ncols(), |_, c| g.column(c).sum());
                        acc(&mut adj, r, gr);
                    }
                    if needs(a) {
                        acc(&mut adj, a, g);
                    }
                }
                Op::AddCol(a, c) => {
                    if needs(c) {
                        let gc = Mat::from_fn(g.nrows(), 1, |r, _| g.row(r).sum());
                        acc(&mut adj, c, gc);
                    }
                    if needs(a) {
                        acc(&mut adj, a, g);
                    }
                }
                Op::Transpose(a) => acc(&mut adj, a, g.transpose()),
                Op::Scale(a, k) => acc(&mut adj, a, g * k),
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    acc(&mut adj, a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(a);
                    let k = g[(0, 0)] / (r * c) as f64;
                    acc(&mut adj, a, Mat::from_element(r, c, k));
                }
                Op::Sin(a) => {
                    let d = self.nodes[a.0].value.map(f64::cos);
                    acc(&mut adj, a, g.component_mul(&d));
                }
                Op::Cos(a) => {
                    let d = self.nodes[a.0].value.map(|x| -x.sin());
                    acc(&mut adj, a, g.component_mul(&d));
                }
                Op::Exp(a) => acc(&mut adj, a, g.component_mul(&node.value)),
                Op::Log(a) => {
                    let d = self.nodes[a.0].value.map(|x| 1.0 / x);
                    acc(&mut adj, a, g.component_mul(&d));
                }
                Op::Square(a) => {
                    let d = self.nodes[a.0].value.map(|x| 2.0 * x);
                    acc(&mut adj, a, g.component_mul(&d));
                }
                Op::LeakyRelu(a, s) => {
                    let d = self.nodes[a.0]
                        .value
                        .map(|x| if x >= 0.0 { 1.0 } else { s });
                    acc(&mut adj, a, g.component_mul(&d));
                }
            }
        }
        let offsets = self.nodes[..n]
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param_offset.map(|o| (o, Var(i))))
            .collect();
        Gradients { adj, offsets }
    }

    fn aux_values(&self) -> BTreeMap<String, f64> {
        self.aux
            .iter()
            .map(|(k, &v)| (k.clone(), self.nodes[v.0].value.sum()))
            .collect()
    }
}

/// Leaves created by [`Tape::bind`], addressed by segment name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, AutogradError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutogradError::UnknownSegment(name.to_string()))
    }
}

/// Loss, flat gradient and named auxiliary scalars of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub loss: f64,
    pub grad: ParamVector,
    pub aux: BTreeMap<String, f64>,
}

/// Evaluates `program` on a fresh tape and differentiates its scalar output
/// with respect to every segment of `params`.
pub fn value_and_grad<F>(params: &ParamVector, program: F) -> Result<GradReport, AutogradError>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var, AutogradError>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = program(&mut tape, &bound)?;
    let (r, c) = tape.shape(loss);
    if (r, c) != (1, 1) {
        return Err(AutogradError::Shape(format!("loss must be 1x1, got {r}x{c}")));
    }
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(AutogradError::NonFiniteLoss {
            value,
            context: format!("after {} tape nodes", tape.len()),
        });
    }
    let grads = tape.backward(loss);
    let flat = grads.flatten(params.layout());
    Ok(GradReport {
        loss: value,
        grad: ParamVector::from_values(params.layout().clone(), flat)?,
        aux: tape.aux_values(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(shapes: &[(&str, usize, usize)]) -> Layout {
        let mut l = Layout::new();
        for &(n, r, c) in shapes {
            l.push(n, r, c);
        }
        l
    }

    fn random_params(l: Layout, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = l.len();
        ParamVector::from_values(l, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn fd_check<F>(p: &ParamVector, f: F)
    where
        F: Fn(&mut Tape, &Bound) -> Result<Var, AutogradError> + Copy,
    {
        let rep = value_and_grad(p, f).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values[i] += h;
            let mut minus = p.clone();
            minus.values[i] -= h;
            let fp = value_and_grad(&plus, f).unwrap().loss;
            let fm = value_and_grad(&minus, f).unwrap().loss;
            let fd = (fp - fm) / (2.0 * h);
            let g = rep.grad.values[i];
            assert!(
                (g - fd).abs() <= 1e-5 * g.abs().max(fd.abs()).max(1.0),
                "coordinate {i}: {g} vs {fd}"
            );
        }
    }

    #[test]
    fn half_norm_squared_gradient_is_identity() {
        let p = random_params(layout(&[("x", 3, 2)]), 1);
        let rep = value_and_grad(&p, |t, b| {
            let x = b.get("x")?;
            let s = t.square(x);
            let s = t.sum(s);
            Ok(t.scale(s, 0.5))
        })
        .unwrap();
        assert!((rep.loss - p.norm_sq() / 2.0).abs() < 1e-14);
        assert_eq!(rep.grad.values, p.values);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = random_params(layout(&[("x", 2, 2)]), 2);
        let rep = value_and_grad(&p, |t, _| Ok(t.constant(Mat::from_element(1, 1, 3.0)))).unwrap();
        assert_eq!(rep.loss, 3.0);
        assert!(rep.grad.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let p = random_params(
            layout(&[("a", 3, 4), ("b", 4, 2), ("r", 1, 2), ("c", 3, 1)]),
            3,
        );
        fd_check(&p, |t, bd| {
            let a = bd.get("a")?;
            let b = bd.get("b")?;
            let ab = t.matmul(a, b);
            let ab = t.add_row(ab, bd.get("r")?);
            let ab = t.add_col(ab, bd.get("c")?);
            let s = t.sin(ab);
            let c = t.cos(ab);
            let m = t.mul(s, c);
            let l = t.leaky_relu(m, 0.2);
            let e = t.exp(l);
            let sq = t.square(ab);
            let one = t.constant(Mat::from_element(3, 2, 1.0));
            let sq1 = t.add(sq, one);
            let lg = t.log(sq1);
            let d = t.sub(e, lg);
            let tr = t.transpose(d);
            let back = t.matmul(tr, ab);
            let sc = t.scale(back, 0.3);
            let mn = t.mean(sc);
            let sm = t.sum(e);
            Ok(t.add(mn, sm))
        });
    }

    #[test]
    fn weighted_error_matches_direct_sum() {
        let p = random_params(layout(&[("x", 4, 2)]), 5);
        let target = Mat::from_fn(4, 2, |r, c| (r + 2 * c) as f64 * 0.1);
        let w = Mat::from_fn(4, 2, |r, _| 1.0 + r as f64);
        let rep = value_and_grad(&p, |t, b| {
            let y = t.constant(target.clone());
            Ok(t.weighted_sq_error(b.get("x")?, y, &w))
        })
        .unwrap();
        let x = p.matrix("x").unwrap();
        let direct: f64 = (0..4)
            .flat_map(|r| (0..2).map(move |c| (r, c)))
            .map(|(r, c)| w[(r, c)] * (x[(r, c)] - target[(r, c)]).powi(2))
            .sum();
        assert!((rep.loss - direct).abs() < 1e-13);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = ParamVector::from_values(layout(&[("x", 1, 1)]), vec![-1.0]).unwrap();
        let err = value_and_grad(&p, |t, b| Ok(t.log(b.get("x")?))).unwrap_err();
        assert!(matches!(err, AutogradError::NonFiniteLoss { .. }));
    }

    #[test]
    fn unknown_activation_is_unsupported() {
        assert_eq!(
            "softplus".parse::<Activation>(),
            Err(AutogradError::UnsupportedPrimitive("softplus".into()))
        );
        assert_eq!("LeakyReLU".parse::<Activation>(), Ok(Activation::LeakyRelu(0.2)));
    }

    #[test]
    fn reports_are_deterministic() {
        let p = random_params(layout(&[("a", 5, 5)]), 9);
        let f = |t: &mut Tape, b: &Bound| {
            let a = b.get("a")?;
            let aa = t.matmul(a, a);
            let s = t.sin(aa);
            t.record_aux("half", s);
            Ok(t.sum(s))
        };
        assert_eq!(value_and_grad(&p, f).unwrap(), value_and_grad(&p, f).unwrap());
    }

    #[test]
    fn shared_leaf_accumulates() {
        let p = ParamVector::from_values(layout(&[("x", 1, 1)]), vec![3.0]).unwrap();
        let rep = value_and_grad(&p, |t, b| {
            let x = b.get("x")?;
            let y = t.mul(x, x);
            let y = t.mul(y, x);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!((rep.grad.values[0] - 27.0).abs() < 1e-12);
    }
}
