use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

const MAX_REFLECTIONS: usize = 32;

fn reflect_rows(v: &DVector<f64>, a: &mut DMatrix<f64>) {
    let vv = v.norm_squared();
    if vv == 0.0 {
        return;
    }
    // a ← (I − 2 v vᵀ / vᵀv) a
    let proj = a.tr_mul(v) * (2.0 / vv);
    a.ger(-1.0, v, &proj, 1.0);
}

/// A random orthogonal `U` with `U 1 = 1`, stored as a product of
/// Householder reflections whose normals are orthogonal to `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPreservingRotation {
    n: usize,
    normals: Vec<DVector<f64>>,
}

impl MeanPreservingRotation {
    pub fn identity(n: usize) -> Self {
        Self { n, normals: Vec::new() }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let k = n.saturating_sub(1).min(MAX_REFLECTIONS);
        let normals = (0..k)
            .map(|_| {
                let mut v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mean = v.mean();
                v.add_scalar_mut(-mean);
                v
            })
            .collect();
        Self { n, normals }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// `a ← U a` for an `n × k` matrix.
    pub fn apply_left(&self, a: &mut DMatrix<f64>) {
        assert_eq!(a.nrows(), self.n, "rotation size");
        for v in self.normals.iter().rev() {
            reflect_rows(v, a);
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut u = DMatrix::identity(self.n, self.n);
        self.apply_left(&mut u);
        u
    }
}

/// The orthonormal complement `U ∈ R^{N×(N−1)}` of `1/√N`, realised as the
/// trailing columns of one Householder reflection `P` with `P e₀ = 1/√N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationBasis {
    n: usize,
    normal: DVector<f64>,
}

impl DeviationBasis {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "deviation basis needs two members");
        let mut normal = DVector::from_element(n, -1.0 / (n as f64).sqrt());
        normal[0] += 1.0;
        Self { n, normal }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Mean and deviations `Δ = Uᵀ Z / √(N−1)` of members `Z` (rows).
    pub fn decompose(&self, members: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mean = members.row_mean().transpose();
        let mut pz = members.clone();
        reflect_rows(&self.normal, &mut pz);
        let k = members.ncols();
        let dev = pz.rows(1, self.n - 1).into_owned() / ((self.n - 1) as f64).sqrt();
        debug_assert_eq!(dev.ncols(), k);
        (mean, dev)
    }

    /// Members `1 meanᵀ + √(N−1) U Δ`.
    pub fn compose(&self, mean: &DVector<f64>, dev: &DMatrix<f64>) -> DMatrix<f64> {
        let k = mean.len();
        let mut z = DMatrix::zeros(self.n, k);
        z.rows_mut(1, self.n - 1).copy_from(&(dev * ((self.n - 1) as f64).sqrt()));
        reflect_rows(&self.normal, &mut z);
        for mut r in z.row_iter_mut() {
            r += mean.transpose();
        }
        z
    }

    pub fn u_matrix(&self) -> DMatrix<f64> {
        let mut p = DMatrix::identity(self.n, self.n);
        reflect_rows(&self.normal, &mut p);
        p.columns(1, self.n - 1).into_owned()
    }
}
