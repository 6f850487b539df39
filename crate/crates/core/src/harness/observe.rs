use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{HarnessError, Result};
use crate::filters::{AffineObservation, ObservationBatch};
use crate::sinr::{AffineDecoder, SinrParams};
use crate::sphere::SamplingSet;

/// A fixed set of observed `(point, channel)` entries on a sampling set.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsTemplate {
    pub set: SamplingSet,
    pub channels: usize,
    pub picks: Vec<(usize, usize)>,
}

/// Samples `count` of the `|grid| · channels` values uniformly without
/// replacement; picks are sorted.
pub fn random_obs_operator(grid: &SamplingSet, channels: usize, count: usize, seed: u64) -> Result<ObsTemplate> {
    let total = grid.len() * channels;
    if count == 0 || count > total {
        return Err(HarnessError::Config(format!(
            "cannot observe {count} of {total} values"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, total, count).into_vec();
    idx.sort_unstable();
    Ok(ObsTemplate {
        set: grid.clone(),
        channels,
        picks: idx.into_iter().map(|i| (i / channels, i % channels)).collect(),
    })
}

impl ObsTemplate {
    pub fn len(&self) -> usize {
        self.picks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.picks.is_empty()
    }

    /// Fraction of all values that is observed.
    pub fn coverage(&self) -> f64 {
        self.picks.len() as f64 / (self.set.len() * self.channels) as f64
    }

    /// The picked entries of a `|S| × c` field.
    pub fn mask(&self, values: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(self.picks.len(), self.picks.iter().map(|&(p, ch)| values[(p, ch)]))
    }

    /// Masked values with additive `N(0, σ²)` noise.
    pub fn observe<R: Rng + ?Sized>(&self, truth: &DMatrix<f64>, sigma_o: f64, rng: &mut R) -> Result<ObservationBatch> {
        if truth.nrows() != self.set.len() || truth.ncols() != self.channels {
            return Err(HarnessError::Shape(format!(
                "truth is {}x{}, template expects {}x{}",
                truth.nrows(),
                truth.ncols(),
                self.set.len(),
                self.channels
            )));
        }
        let normal = Normal::new(0.0, sigma_o).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut y = self.mask(truth);
        y.iter_mut().for_each(|v| *v += normal.sample(rng));
        Ok(ObservationBatch {
            set: Some(self.set.clone()),
            picks: self.picks.clone(),
            y,
            noise_std: sigma_o,
        })
    }

    /// `H ∘ D` as an affine map of the latent.
    pub fn operator(&self, decoder: &AffineDecoder) -> Result<AffineObservation> {
        if decoder.set != self.set || decoder.channels != self.channels {
            return Err(HarnessError::Shape("decoder and template use different sampling sets".into()));
        }
        let (matrix, offset) = decoder.rows(&self.picks);
        Ok(AffineObservation { matrix, offset })
    }

    /// Builds the decoder on this template's set and returns `H ∘ D`.
    pub fn operator_for(&self, sinr: &SinrParams) -> Result<AffineObservation> {
        self.operator(&AffineDecoder::new(sinr, &self.set))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::make_latlon_grid;

    #[test]
    fn full_count_observes_everything() {
        let g = make_latlon_grid(8, 4);
        let t = random_obs_operator(&g, 2, 64, 3).unwrap();
        assert_eq!(t.picks.len(), 64);
        let values = DMatrix::from_fn(32, 2, |p, c| (p * 2 + c) as f64);
        assert_eq!(t.mask(&values).as_slice(), values.transpose().as_slice());
    }

    #[test]
    fn one_in_sixteen_coverage() {
        let g = make_latlon_grid(128, 64);
        let t = random_obs_operator(&g, 2, 1024, 0).unwrap();
        assert_eq!(t.coverage(), 0.0625);
    }

    #[test]
    fn seeded_sampling_repeats() {
        let g = make_latlon_grid(16, 8);
        let a = random_obs_operator(&g, 1, 20, 11).unwrap();
        let b = random_obs_operator(&g, 1, 20, 11).unwrap();
        let c = random_obs_operator(&g, 1, 20, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.picks, c.picks);
        assert!(random_obs_operator(&g, 1, 0, 1).is_err());
        assert!(random_obs_operator(&g, 1, 129, 1).is_err());
    }
}
