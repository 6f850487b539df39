use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::dataset::Dataset;
use super::{HarnessError, Result};
use crate::dynamics::Dynamics;
use crate::sinr::{recon_weights, AffineDecoder, FieldSnapshot, SinrParams};
use crate::trainer::LatentTable;

/// `√(∑ cosφ ‖a − b‖² / ∑ cosφ)`, the norm taken over channels.
pub fn weighted_rmse(a: &FieldSnapshot, b: &FieldSnapshot) -> Result<f64> {
    if a.set != b.set || a.values.shape() != b.values.shape() {
        return Err(HarnessError::Shape("snapshots live on different sampling sets".into()));
    }
    weighted_rmse_values(&a.set, &a.values, &b.values)
}

/// [`weighted_rmse`] for raw `|S| × c` values on `set`.
pub fn weighted_rmse_values(set: &crate::sphere::SamplingSet, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if set.is_empty() {
        return Err(HarnessError::Shape("empty sampling set".into()));
    }
    if a.shape() != b.shape() || a.nrows() != set.len() {
        return Err(HarnessError::Shape(format!(
            "{:?} and {:?} values on {} points",
            a.shape(),
            b.shape(),
            set.len()
        )));
    }
    let w = recon_weights(set, a.ncols());
    let total: f64 = w
        .iter()
        .zip(a.iter().zip(b.iter()))
        .map(|(w, (x, y))| w * (x - y).powi(2))
        .sum();
    Ok(total.sqrt())
}

/// Mean weighted RMSE of `D(G^s(z_k))` against `x_{k+s}` for `s = 0..=s_max`.
///
/// `z_k` comes from `table` when given, otherwise from the exact encoder.
pub fn multi_step_pred_rmse(
    ds: &Dataset,
    sinr: &SinrParams,
    table: Option<&LatentTable>,
    dynamics: &Dynamics,
    s_max: usize,
) -> Result<Vec<f64>> {
    if s_max >= ds.steps() {
        return Err(HarnessError::Config(format!(
            "horizon {s_max} needs more than {} steps",
            ds.steps()
        )));
    }
    let dec = AffineDecoder::new(sinr, &ds.grid);
    let m = sinr.dims.latent;
    let steps = ds.steps();
    let mut sums = vec![0.0; s_max + 1];
    let mut counts = vec![0usize; s_max + 1];
    for k in 0..ds.trajectories() {
        let mut z = DMatrix::zeros(m, steps);
        for t in 0..steps {
            let zt = match table {
                Some(tab) => tab.get(k, t).z,
                None => dec.encode(&ds.frame(k, t), t as f64)?.z,
            };
            z.set_column(t, &zt);
        }
        let mut cur = z.columns(0, steps - s_max).into_owned();
        for s in 0..=s_max {
            if s > 0 {
                cur = dynamics
                    .step_batch(&cur)
                    .map_err(|e| HarnessError::Config(format!("dynamics failed: {e}")))?;
            }
            for j in 0..cur.ncols() {
                let pred = dec.decode(&cur.column(j).into_owned());
                sums[s] += weighted_rmse_values(&ds.grid, &pred, &ds.frame(k, j + s))?;
                counts[s] += 1;
            }
        }
    }
    Ok(sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect())
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "s,rmse")?;
    for (s, v) in curve.iter().enumerate() {
        writeln!(f, "{s},{v:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::make_latlon_grid;
    use crate::sinr::channel_labels;
    use crate::trainer::recon_loss;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snapshot(values: DMatrix<f64>) -> FieldSnapshot {
        let c = values.ncols();
        FieldSnapshot::new(make_latlon_grid(8, 4), values, channel_labels(c)).unwrap()
    }

    #[test]
    fn constant_offset_is_the_offset() {
        let a = snapshot(DMatrix::from_fn(32, 1, |r, _| r as f64 * 0.1));
        let mut b = a.clone();
        b.values.add_scalar_mut(0.7);
        assert!((weighted_rmse(&a, &b).unwrap() - 0.7).abs() < 1e-14);
        assert_eq!(weighted_rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = snapshot(DMatrix::from_fn(32, 2, |_, _| rng.random_range(-1.0..1.0)));
        let b = snapshot(DMatrix::from_fn(32, 2, |_, _| rng.random_range(-1.0..1.0)));
        let (mut num, mut den) = (0.0, 0.0);
        for (p, pt) in a.set.points().iter().enumerate() {
            let w = pt.lat().cos();
            den += w;
            num += w * ((a.values[(p, 0)] - b.values[(p, 0)]).powi(2) + (a.values[(p, 1)] - b.values[(p, 1)]).powi(2));
        }
        let direct = (num / den).sqrt();
        let r = weighted_rmse(&a, &b).unwrap();
        assert!((r - direct).abs() < 1e-14);
        assert!((r * r - recon_loss(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_sets() {
        let a = snapshot(DMatrix::zeros(32, 1));
        let b = FieldSnapshot::new(make_latlon_grid(4, 2), DMatrix::zeros(8, 1), channel_labels(1)).unwrap();
        assert!(weighted_rmse(&a, &b).is_err());
    }
}
