#![allow(dead_code)]

use lainr_core::dynamics::Dynamics;
use lainr_core::filters::{analyze, forecast, AffineObservation, Ensemble, FilterMethod, ModelNoise, ObservationBatch};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A 2-D linear Gaussian state space model and its observation record.
pub struct LinearGaussian {
    pub a: Matrix2<f64>,
    pub h: Matrix2<f64>,
    pub q: f64,
    pub r: f64,
    pub m0: Vector2<f64>,
    pub p0: Matrix2<f64>,
    pub ys: Vec<Vector2<f64>>,
}

impl LinearGaussian {
    pub fn standard(cycles: usize) -> Self {
        let (s, c) = 0.2f64.sin_cos();
        let a = Matrix2::new(c, -s, s, c) * 0.99;
        let h = Matrix2::new(1.0, 0.5, 0.0, 1.0);
        let (q, r): (f64, f64) = (0.05, 2.0);
        let m0 = Vector2::new(4.0, -3.0);
        let p0 = Matrix2::new(0.5, 0.1, 0.1, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut x = m0 + Vector2::new(n() * 0.5f64.sqrt(), n() * 0.3f64.sqrt());
        let mut ys = Vec::with_capacity(cycles);
        for _ in 0..cycles {
            x = a * x + Vector2::new(n(), n()) * q.sqrt();
            ys.push(h * x + Vector2::new(n(), n()) * r.sqrt());
        }
        Self { a, h, q, r, m0, p0, ys }
    }

    /// The exact Kalman filter analyses `(mean, cov)` per cycle.
    pub fn kalman(&self) -> Vec<(Vector2<f64>, Matrix2<f64>)> {
        let mut m = self.m0;
        let mut p = self.p0;
        let mut out = Vec::new();
        for y in &self.ys {
            m = self.a * m;
            p = self.a * p * self.a.transpose() + Matrix2::identity() * self.q;
            let s = self.h * p * self.h.transpose() + Matrix2::identity() * self.r;
            let k = p * self.h.transpose() * s.try_inverse().unwrap();
            m += k * (y - self.h * m);
            p = (Matrix2::identity() - k * self.h) * p;
            out.push((m, p));
        }
        out
    }

    /// Seed-averaged ensemble analyses `(mean, cov)` per cycle.
    pub fn ensemble(&self, method: FilterMethod, members: usize, seeds: u64) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let dynamics = Dynamics::Linear(DMatrix::from_column_slice(2, 2, self.a.as_slice()));
        let op = AffineObservation::linear(DMatrix::from_column_slice(2, 2, self.h.as_slice()));
        let noise = ModelNoise::Scalar(self.q.sqrt());
        let fc_noise = if method == FilterMethod::Etkfq { ModelNoise::none() } else { noise.clone() };
        let mut acc = vec![(DVector::zeros(2), DMatrix::zeros(2, 2)); self.ys.len()];
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let m0 = DVector::from_column_slice(self.m0.as_slice());
            let p0 = DMatrix::from_column_slice(2, 2, self.p0.as_slice());
            let mut ens = Ensemble::sample(&m0, &p0, members, &mut rng).unwrap();
            for (k, y) in self.ys.iter().enumerate() {
                ens = forecast(&ens, &dynamics, &fc_noise, &mut rng).unwrap();
                let obs = ObservationBatch::new(DVector::from_column_slice(y.as_slice()), self.r.sqrt());
                ens = analyze(method, &ens, &obs, &op, &noise, &mut rng).unwrap();
                acc[k].0 += ens.mean();
                acc[k].1 += ens.covariance();
            }
        }
        acc.into_iter()
            .map(|(m, c)| (m / seeds as f64, c / seeds as f64))
            .collect()
    }
}

/// Largest relative mean and covariance errors over all cycles.
pub fn kf_errors(method: FilterMethod, members: usize, cycles: usize, seeds: u64) -> (f64, f64) {
    let sys = LinearGaussian::standard(cycles);
    let exact = sys.kalman();
    let ens = sys.ensemble(method, members, seeds);
    let mut worst = (0.0f64, 0.0f64);
    for ((m, p), (em, ec)) in exact.iter().zip(&ens) {
        let dm = ((em[0] - m[0]).powi(2) + (em[1] - m[1]).powi(2)).sqrt() / m.norm();
        let pd = DMatrix::from_column_slice(2, 2, p.as_slice());
        let dc = (ec - &pd).norm() / pd.norm();
        worst = (worst.0.max(dm), worst.1.max(dc));
    }
    worst
}
