use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::grid::make_latlon_grid;
use super::HarnessError;
use crate::ltsr::{NamedTensors, Tensor};
use crate::sinr::FieldSnapshot;
use crate::sphere::SamplingSet;

/// Per-channel affine normalization `x ↦ (x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    }
}

/// Trajectories of fields on a lat/lon grid, stored as a
/// `trajectories × time × lon × lat × channels` row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 5],
    pub values: Vec<f64>,
    pub grid: SamplingSet,
    pub dt: f64,
    /// Statistics applied by [`Dataset::normalize`]; identity while raw.
    pub normalization: Normalization,
    pub channel_names: Vec<String>,
}

impl Dataset {
    pub fn new(shape: [usize; 5], values: Vec<f64>, dt: f64, channel_names: Vec<String>) -> Result<Self, HarnessError> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(HarnessError::Shape(format!(
                "{} values for shape {:?}",
                values.len(),
                shape
            )));
        }
        if channel_names.len() != shape[4] {
            return Err(HarnessError::Shape("one name per channel required".into()));
        }
        Ok(Self {
            grid: make_latlon_grid(shape[2], shape[3]),
            shape,
            values,
            dt,
            normalization: Normalization::identity(shape[4]),
            channel_names,
        })
    }

    pub fn trajectories(&self) -> usize {
        self.shape[0]
    }

    pub fn steps(&self) -> usize {
        self.shape[1]
    }

    pub fn points(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn channels(&self) -> usize {
        self.shape[4]
    }

    fn frame_offset(&self, traj: usize, t: usize) -> usize {
        (traj * self.shape[1] + t) * self.points() * self.channels()
    }

    /// `points × channels` matrix of one frame.
    pub fn frame(&self, traj: usize, t: usize) -> DMatrix<f64> {
        let (p, c) = (self.points(), self.channels());
        let off = self.frame_offset(traj, t);
        DMatrix::from_row_slice(p, c, &self.values[off..off + p * c])
    }

    pub fn set_frame(&mut self, traj: usize, t: usize, frame: &DMatrix<f64>) {
        let (p, c) = (self.points(), self.channels());
        let off = self.frame_offset(traj, t);
        for r in 0..p {
            for ch in 0..c {
                self.values[off + r * c + ch] = frame[(r, ch)];
            }
        }
    }

    pub fn snapshot(&self, traj: usize, t: usize) -> FieldSnapshot {
        FieldSnapshot {
            set: self.grid.clone(),
            values: self.frame(traj, t),
            channel_names: self.channel_names.clone(),
        }
    }

    /// Keeps trajectories `range` only.
    pub fn select_trajectories(&self, range: std::ops::Range<usize>) -> Self {
        let per = self.shape[1] * self.points() * self.channels();
        let mut out = self.clone();
        out.shape[0] = range.len();
        out.values = self.values[range.start * per..range.end * per].to_vec();
        out
    }

    /// Keeps the first `n` steps of every trajectory.
    pub fn truncate_steps(&self, n: usize) -> Self {
        let n = n.min(self.steps());
        let frame = self.points() * self.channels();
        let mut out = self.clone();
        out.shape[1] = n;
        out.values = (0..self.trajectories())
            .flat_map(|k| {
                let off = self.frame_offset(k, 0);
                self.values[off..off + n * frame].iter().copied()
            })
            .collect();
        out
    }

    /// Computes per-channel mean and std and rescales to zero mean, unit std.
    pub fn normalize(&mut self) {
        self.denormalize();
        let c = self.channels();
        let count = (self.values.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for (i, v) in self.values.iter().enumerate() {
            mean[i % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for (i, v) in self.values.iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2);
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        for (i, v) in self.values.iter_mut().enumerate() {
            *v = (*v - mean[i % c]) / std[i % c];
        }
        self.normalization = Normalization { mean, std };
    }

    /// Restores raw units.
    pub fn denormalize(&mut self) {
        let c = self.channels();
        let n = &self.normalization;
        for (i, v) in self.values.iter_mut().enumerate() {
            *v = *v * n.std[i % c] + n.mean[i % c];
        }
        self.normalization = Normalization::identity(c);
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut n = NamedTensors::new();
        n.push("values", Tensor::new(self.shape.to_vec(), self.values.clone()).expect("shape"));
        n.set_attr("kind", "dataset");
        n.set_attr("dt", self.dt);
        n.set_attr("normalization", &self.normalization);
        n.set_attr("channel_names", &self.channel_names);
        n
    }

    pub fn from_named(n: &NamedTensors) -> Result<Self, HarnessError> {
        let t = n.get("values")?;
        let shape: [usize; 5] = t
            .dims
            .clone()
            .try_into()
            .map_err(|_| HarnessError::Shape(format!("dataset tensor has dims {:?}", t.dims)))?;
        let channel_names = n
            .attr::<Vec<String>>("channel_names")
            .unwrap_or_else(|_| (0..shape[4]).map(|i| format!("ch{i}")).collect());
        let mut d = Self::new(shape, t.data.clone(), n.attr("dt").unwrap_or(1.0), channel_names)?;
        if let Ok(norm) = n.attr::<Normalization>("normalization") {
            d.normalization = norm;
        }
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        Ok(self.to_named().save(path)?)
    }

    /// Reads a named dataset file, or a bare 5-d tensor.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path)?;
        match NamedTensors::from_bytes(&bytes) {
            Ok(n) => Self::from_named(&n),
            Err(_) => {
                let t = crate::ltsr::from_bytes(&bytes)?;
                let shape: [usize; 5] = t
                    .dims
                    .clone()
                    .try_into()
                    .map_err(|_| HarnessError::Shape(format!("dataset tensor has dims {:?}", t.dims)))?;
                let names = (0..shape[4]).map(|i| format!("ch{i}")).collect();
                Self::new(shape, t.data, 1.0, names)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: [usize; 5]) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = shape.iter().product();
        let vals = (0..n).map(|i| rng.random::<f64>() * 10.0 + (i % shape[4]) as f64 * 50.0).collect();
        Dataset::new(shape, vals, 1.0, (0..shape[4]).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn normalization_round_trip() {
        let mut d = random([2, 3, 4, 2, 2]);
        let raw = d.values.clone();
        d.normalize();
        for ch in 0..2 {
            let xs: Vec<f64> = d.values.iter().skip(ch).step_by(2).copied().collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-3);
        }
        d.denormalize();
        assert!(d.values.iter().zip(&raw).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn frames_address_the_right_slice() {
        let d = random([2, 3, 4, 2, 2]);
        let f = d.frame(1, 2);
        let off = ((3 + 2) * 8) * 2;
        assert_eq!(f[(0, 0)], d.values[off]);
        assert_eq!(f[(3, 1)], d.values[off + 7]);
        let sub = d.select_trajectories(1..2);
        assert_eq!(sub.frame(0, 2), f);
        let short = d.truncate_steps(2);
        assert_eq!(short.frame(1, 1), d.frame(1, 1));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = random([1, 2, 4, 2, 1]);
        d.normalize();
        let path = dir.path().join("d.ltsr");
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
    }
}
