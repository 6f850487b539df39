use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::grid::make_latlon_grid;
use super::HarnessError;
use crate::sphere::{harmonic_index, HarmonicEvaluator, SphCoeffs};

/// Solid-body rotation `f(λ, φ, t) = f₀(λ − ωt, φ)` of random band-limited fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_traj: usize,
    pub n_steps: usize,
    pub ell_max: usize,
    /// Angular speed in radians per time unit.
    pub omega: f64,
    pub dt: f64,
    pub nlon: usize,
    pub nlat: usize,
    pub channels: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_traj: 20,
            n_steps: 240,
            ell_max: 6,
            omega: 2.0 * std::f64::consts::PI / 120.0,
            dt: 1.0,
            nlon: 64,
            nlat: 32,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticRotation {
    pub dataset: Dataset,
    /// Initial coefficients per trajectory and channel.
    pub initial: Vec<Vec<SphCoeffs>>,
}

/// Coefficients of `f(λ − α, φ)` given those of `f`.
pub fn rotate_coeffs(c: &SphCoeffs, alpha: f64) -> SphCoeffs {
    let mut out = SphCoeffs::new();
    for ((ell, m), _) in c.iter() {
        if m == 0 {
            out.set(ell, 0, c.get(ell, 0)).unwrap();
            continue;
        }
        let am = m.unsigned_abs() as isize;
        let (a, b) = (c.get(ell, am), c.get(ell, -am));
        let (s, co) = (am as f64 * alpha).sin_cos();
        out.set(ell, am, a * co - b * s).unwrap();
        out.set(ell, -am, a * s + b * co).unwrap();
    }
    out
}

pub fn gen_synthetic_rotation(spec: &SyntheticSpec) -> Result<SyntheticRotation, HarnessError> {
    if spec.n_traj == 0 || spec.n_steps == 0 || spec.channels == 0 {
        return Err(HarnessError::Config("synthetic dataset needs non-empty dimensions".into()));
    }
    let grid = make_latlon_grid(spec.nlon, spec.nlat);
    let nc = (spec.ell_max + 1).pow(2);
    let mut basis = DMatrix::zeros(grid.len(), nc);
    for (r, p) in grid.points().iter().enumerate() {
        let ev = HarmonicEvaluator::new(spec.ell_max, spec.ell_max, p);
        for ell in 0..=spec.ell_max {
            for m in -(ell as isize)..=ell as isize {
                basis[(r, harmonic_index(ell, m))] = ev.eval(ell, m);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let shape = [spec.n_traj, spec.n_steps, spec.nlon, spec.nlat, spec.channels];
    let names = (0..spec.channels).map(|i| format!("f{i}")).collect();
    let mut ds = Dataset::new(shape, vec![0.0; shape.iter().product()], spec.dt, names)?;
    let mut initial = Vec::with_capacity(spec.n_traj);
    for k in 0..spec.n_traj {
        let per_channel: Vec<SphCoeffs> = (0..spec.channels)
            .map(|_| {
                let mut c = SphCoeffs::new();
                for ell in 0..=spec.ell_max {
                    let s = 1.0 / (1.0 + ell as f64);
                    for m in -(ell as isize)..=ell as isize {
                        c.set(ell, m, s * normal.sample(&mut rng)).unwrap();
                    }
                }
                c
            })
            .collect();
        for t in 0..spec.n_steps {
            let alpha = spec.omega * spec.dt * t as f64;
            let mut coef = DMatrix::zeros(nc, spec.channels);
            for (ch, c0) in per_channel.iter().enumerate() {
                for ((ell, m), v) in rotate_coeffs(c0, alpha).iter() {
                    coef[(harmonic_index(ell, m), ch)] = v;
                }
            }
            ds.set_frame(k, t, &(&basis * coef));
        }
        initial.push(per_channel);
    }
    Ok(SyntheticRotation {
        dataset: ds,
        initial,
    })
}
