//! Dense helpers shared by the filters and the uncertainty estimators.

use nalgebra::{DMatrix, DVector};

/// Thin singular value decomposition `a = U diag(s) Vᵀ` with `s` descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

const MAX_SWEEPS: usize = 80;

fn jacobi_tall(a: &DMatrix<f64>) -> Svd {
    let (n, p) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(p, p);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..n {
                    let (x, y) = (w[(r, i)], w[(r, j)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..n {
                    let (x, y) = (w[(r, i)], w[(r, j)]);
                    w[(r, i)] = c * x - s * y;
                    w[(r, j)] = s * x + c * y;
                }
                for r in 0..p {
                    let (x, y) = (v[(r, i)], v[(r, j)]);
                    v[(r, i)] = c * x - s * y;
                    v[(r, j)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..p).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut u = DMatrix::zeros(n, p);
    let mut vs = DMatrix::zeros(p, p);
    let mut s = DVector::zeros(p);
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        if norms[j] > 0.0 {
            u.set_column(k, &(w.column(j) / norms[j]));
        }
        vs.set_column(k, &v.column(j));
    }
    Svd { u, s, v: vs }
}

/// One-sided Jacobi SVD; accurate for rank-deficient inputs.
pub fn svd(a: &DMatrix<f64>) -> Svd {
    if a.nrows() >= a.ncols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose());
        Svd { u: t.v, s: t.s, v: t.u }
    }
}

impl Svd {
    /// Singular values above `rcond · s_max`.
    pub fn rank(&self, rcond: f64) -> usize {
        let top = self.s.iter().copied().fold(0.0, f64::max);
        self.s.iter().filter(|&&v| top > 0.0 && v > rcond * top).count()
    }

    /// Moore–Penrose pseudoinverse, dropping singular values below `rcond · s_max`.
    pub fn pinv(&self, rcond: f64) -> DMatrix<f64> {
        let k = self.rank(rcond);
        let mut out = DMatrix::zeros(self.v.nrows(), self.u.nrows());
        for i in 0..k {
            out.ger(1.0 / self.s[i], &self.v.column(i), &self.u.column(i), 1.0);
        }
        out
    }

    /// Leading `rank` left singular vectors.
    pub fn range_basis(&self, rcond: f64) -> DMatrix<f64> {
        self.u.columns(0, self.rank(rcond)).into_owned()
    }
}

pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    svd(a).pinv(rcond)
}
