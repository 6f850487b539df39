//! Real spherical harmonics, associated Legendre functions and quadrature
//! on the unit sphere.
//!
//! Every harmonic in this crate is evaluated through fully normalized
//! associated Legendre values `P̄_ℓ^m(cos θ)`, built by the standard upward
//! recurrence. The real basis is
//!
//! ```text
//! Y_ℓ^0  = P̄_ℓ^0(cos θ)
//! Y_ℓ^m  = √2 P̄_ℓ^m(cos θ) cos(mφ)      m > 0
//! Y_ℓ^-m = √2 P̄_ℓ^m(cos θ) sin(mφ)      m > 0
//! ```
//!
//! which is what the complex-to-real map produces once the Condon–Shortley
//! phase carried by `P_ℓ^m` cancels against the `(-1)^m` of the map.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SphereError {
    #[error("argument {x} outside [-1, 1]")]
    OutOfDomain { x: f64 },
    #[error("order m={m} not admissible for degree ell={ell}")]
    BadOrder { ell: usize, m: isize },
    #[error("polar angle {0} outside [0, pi]")]
    BadPolarAngle(f64),
    #[error("points {0} and {1} coincide")]
    DuplicatePoint(usize, usize),
    #[error("quadrature weight {value} at point {index} is not strictly positive")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("sampling set has no quadrature weights")]
    MissingWeights,
}

pub type Result<T> = std::result::Result<T, SphereError>;

/// A point on the unit sphere given by polar angle `theta` and azimuth `phi_az`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SphericalPoint {
    theta: f64,
    phi_az: f64,
}

impl SphericalPoint {
    pub fn new(theta: f64, phi_az: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) || !theta.is_finite() {
            return Err(SphereError::BadPolarAngle(theta));
        }
        Ok(Self {
            theta,
            phi_az: wrap_azimuth(phi_az),
        })
    }

    /// Latitude and longitude in radians.
    pub fn from_lat_lon(lat: f64, lon: f64) -> Result<Self> {
        Self::new(PI / 2.0 - lat, lon)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi_az(&self) -> f64 {
        self.phi_az
    }

    pub fn lat(&self) -> f64 {
        PI / 2.0 - self.theta
    }

    pub fn lon(&self) -> f64 {
        self.phi_az
    }

    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi_az.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// Great-circle distance in radians.
    pub fn angular_distance(&self, other: &SphericalPoint) -> f64 {
        let a = self.to_unit_vector();
        let b = other.to_unit_vector();
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let sin = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
        let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        sin.atan2(cos)
    }
}

fn wrap_azimuth(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// An ordered set of sample locations, optionally with quadrature weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplingSet {
    points: Vec<SphericalPoint>,
    quad_weights: Option<Vec<f64>>,
    pub grid_tag: String,
}

const DUPLICATE_TOL: f64 = 1e-12;

impl SamplingSet {
    pub fn new(
        points: Vec<SphericalPoint>,
        quad_weights: Option<Vec<f64>>,
        grid_tag: impl Into<String>,
    ) -> Result<Self> {
        if let Some(w) = &quad_weights {
            if w.len() != points.len() {
                return Err(SphereError::LengthMismatch {
                    expected: points.len(),
                    got: w.len(),
                });
            }
            if let Some((index, &value)) = w.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
                return Err(SphereError::NonPositiveWeight { index, value });
            }
        }
        check_duplicates(&points)?;
        Ok(Self {
            points,
            quad_weights,
            grid_tag: grid_tag.into(),
        })
    }

    pub fn points(&self) -> &[SphericalPoint] {
        &self.points
    }

    pub fn quad_weights(&self) -> Option<&[f64]> {
        self.quad_weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset in the order given by `indices`.
    pub fn subset(&self, indices: &[usize], grid_tag: impl Into<String>) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            quad_weights: self
                .quad_weights
                .as_ref()
                .map(|w| indices.iter().map(|&i| w[i]).collect()),
            grid_tag: grid_tag.into(),
        }
    }

    /// cos(latitude) of every point, clamped at zero for the poles.
    pub fn latitude_weights(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lat().cos().max(0.0)).collect()
    }

    /// True when some point of `self` lies within `tol` radians of a point of `other`.
    pub fn intersects(&self, other: &SamplingSet, tol: f64) -> bool {
        let mut tagged: Vec<([f64; 3], bool)> = self
            .points
            .iter()
            .map(|p| (p.to_unit_vector(), false))
            .chain(other.points.iter().map(|p| (p.to_unit_vector(), true)))
            .collect();
        tagged.sort_by(|a, b| a.0[2].total_cmp(&b.0[2]));
        for i in 0..tagged.len() {
            for j in i + 1..tagged.len() {
                if tagged[j].0[2] - tagged[i].0[2] > tol {
                    break;
                }
                if tagged[i].1 != tagged[j].1 && chord(&tagged[i].0, &tagged[j].0) <= tol {
                    return true;
                }
            }
        }
        false
    }
}

fn chord(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_duplicates(points: &[SphericalPoint]) -> Result<()> {
    let mut idx: Vec<(usize, [f64; 3])> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.to_unit_vector()))
        .collect();
    idx.sort_by(|a, b| a.1[2].total_cmp(&b.1[2]));
    for i in 0..idx.len() {
        for j in i + 1..idx.len() {
            if idx[j].1[2] - idx[i].1[2] > DUPLICATE_TOL {
                break;
            }
            if chord(&idx[i].1, &idx[j].1) <= DUPLICATE_TOL {
                let (a, b) = (idx[i].0.min(idx[j].0), idx[i].0.max(idx[j].0));
                return Err(SphereError::DuplicatePoint(a, b));
            }
        }
    }
    Ok(())
}

/// Real spherical-harmonic coefficients keyed by `(ell, m)`; absent keys are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SphCoeffs {
    entries: BTreeMap<(usize, isize), f64>,
}

impl SphCoeffs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, ell: usize, m: isize, value: f64) -> Result<()> {
        check_order(ell, m)?;
        self.entries.insert((ell, m), value);
        Ok(())
    }

    pub fn get(&self, ell: usize, m: isize) -> f64 {
        self.entries.get(&(ell, m)).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, isize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_degree(&self) -> Option<usize> {
        self.entries.keys().map(|&(l, _)| l).max()
    }

    /// Sum of squared coefficients with degree above `ell`.
    pub fn energy_above(&self, ell: usize) -> f64 {
        self.entries
            .iter()
            .filter(|(&(l, _), _)| l > ell)
            .map(|(_, v)| v * v)
            .sum()
    }

    pub fn energy(&self) -> f64 {
        self.entries.values().map(|v| v * v).sum()
    }
}

impl FromIterator<((usize, isize), f64)> for SphCoeffs {
    fn from_iter<I: IntoIterator<Item = ((usize, isize), f64)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

fn check_order(ell: usize, m: isize) -> Result<()> {
    if m.unsigned_abs() > ell {
        Err(SphereError::BadOrder { ell, m })
    } else {
        Ok(())
    }
}

/// Fully normalized `P̄_ℓ^m(x)` (no Condon–Shortley phase) for all
/// `m ≤ mmax`, `m ≤ ℓ ≤ lmax`, stored in a triangular layout.
#[derive(Debug, Clone)]
pub struct NormalizedLegendre {
    lmax: usize,
    mmax: usize,
    values: Vec<f64>,
}

impl NormalizedLegendre {
    pub fn new(lmax: usize, mmax: usize, x: f64) -> Self {
        let mmax = mmax.min(lmax);
        let sin_t = (1.0 - x * x).max(0.0).sqrt();
        let mut values = vec![0.0; (mmax + 1) * (lmax + 1)];
        let at = |ell: usize, m: usize| m * (lmax + 1) + ell;
        let mut pmm = (1.0 / (4.0 * PI)).sqrt();
        for m in 0..=mmax {
            if m > 0 {
                pmm *= ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * sin_t;
            }
            values[at(m, m)] = pmm;
            if m < lmax {
                values[at(m + 1, m)] = ((2 * m + 3) as f64).sqrt() * x * pmm;
            }
            for ell in m + 2..=lmax {
                let (lf, mf) = (ell as f64, m as f64);
                let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
                let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
                values[at(ell, m)] = a * (x * values[at(ell - 1, m)] - b * values[at(ell - 2, m)]);
            }
        }
        Self { lmax, mmax, values }
    }

    pub fn get(&self, ell: usize, m: usize) -> f64 {
        debug_assert!(ell <= self.lmax && m <= self.mmax && m <= ell);
        self.values[m * (self.lmax + 1) + ell]
    }
}

/// `ln((ℓ+m)!/(ℓ-m)!)` for `0 ≤ m ≤ ℓ`, summed term by term.
fn ln_factorial_ratio(ell: usize, m: usize) -> f64 {
    (ell - m + 1..=ell + m).map(|k| (k as f64).ln()).sum()
}

/// Associated Legendre function `P_ℓ^m(x)` with the Condon–Shortley phase,
/// extended to negative orders by `P_ℓ^{-m} = (-1)^m (ℓ-m)!/(ℓ+m)! P_ℓ^m`.
pub fn assoc_legendre(ell: usize, m: isize, x: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(SphereError::OutOfDomain { x });
    }
    check_order(ell, m)?;
    let am = m.unsigned_abs();
    let q = semi_normalized_legendre(ell, am, x);
    if am == 0 {
        return Ok(q);
    }
    let half_ln_ratio = 0.5 * ln_factorial_ratio(ell, am);
    if m > 0 {
        let sign = if am % 2 == 1 { -1.0 } else { 1.0 };
        Ok(sign * q * half_ln_ratio.exp())
    } else {
        Ok(q * (-half_ln_ratio).exp())
    }
}

/// `√((ℓ−m)!/(ℓ+m)!) P_ℓ^m(x)` without the Condon–Shortley sign.
fn semi_normalized_legendre(ell: usize, m: usize, x: f64) -> f64 {
    let sin_t = (1.0 - x * x).max(0.0).sqrt();
    let mut qmm = 1.0;
    for k in 1..=m {
        qmm *= ((2 * k - 1) as f64 / (2 * k) as f64).sqrt() * sin_t;
    }
    if ell == m {
        return qmm;
    }
    let mut prev = qmm;
    let mut cur = ((2 * m + 1) as f64).sqrt() * x * qmm;
    for l in m + 2..=ell {
        let (lf, mf) = (l as f64, m as f64);
        let next = ((2.0 * lf - 1.0) * x * cur - ((lf - 1.0).powi(2) - mf * mf).sqrt() * prev)
            / (lf * lf - mf * mf).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Real orthonormal spherical harmonic `Y_ℓ^m` at `p`.
pub fn real_sph_harm(ell: usize, m: isize, p: &SphericalPoint) -> Result<f64> {
    check_order(ell, m)?;
    let am = m.unsigned_abs();
    let table = NormalizedLegendre::new(ell, am, p.theta.cos());
    Ok(real_from_table(&table, ell, m, p.phi_az))
}

fn real_from_table(table: &NormalizedLegendre, ell: usize, m: isize, phi: f64) -> f64 {
    let am = m.unsigned_abs();
    let pbar = table.get(ell, am);
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => pbar,
        std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * pbar * (am as f64 * phi).cos(),
        std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * pbar * (am as f64 * phi).sin(),
    }
}

/// Evaluates many harmonics at one point, reusing a single Legendre table.
#[derive(Debug, Clone)]
pub struct HarmonicEvaluator {
    table: NormalizedLegendre,
    phi: f64,
}

impl HarmonicEvaluator {
    pub fn new(lmax: usize, mmax: usize, p: &SphericalPoint) -> Self {
        Self {
            table: NormalizedLegendre::new(lmax, mmax, p.theta.cos()),
            phi: p.phi_az,
        }
    }

    pub fn eval(&self, ell: usize, m: isize) -> f64 {
        real_from_table(&self.table, ell, m, self.phi)
    }
}

fn gauss_legendre_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            x = 0.0;
            dp = 1.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        weights[i] = w;
        nodes[n - 1 - i] = -x;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss–Legendre latitudes times uniform longitudes, with area weights
/// summing to 4π. Exact for products of fields band-limited below `nlat`
/// when `nlon ≥ 2·nlat`.
pub fn gauss_legendre_grid(nlat: usize, nlon: usize) -> SamplingSet {
    assert!(nlat >= 1 && nlon >= 1, "grid needs at least one node per axis");
    let (nodes, weights) = gauss_legendre_nodes(nlat);
    let dphi = TAU / nlon as f64;
    let mut points = Vec::with_capacity(nlat * nlon);
    let mut quad = Vec::with_capacity(nlat * nlon);
    for (x, w) in nodes.iter().zip(&weights) {
        let theta = x.clamp(-1.0, 1.0).acos();
        for j in 0..nlon {
            points.push(SphericalPoint {
                theta,
                phi_az: j as f64 * dphi,
            });
            quad.push(w * dphi);
        }
    }
    SamplingSet {
        points,
        quad_weights: Some(quad),
        grid_tag: format!("gauss-legendre-{nlat}x{nlon}"),
    }
}

/// Quadrature projection of a scalar field onto all `Y_ℓ^m` with `ℓ ≤ ell_max`.
pub fn project_field(values: &[f64], set: &SamplingSet, ell_max: usize) -> Result<SphCoeffs> {
    let weights = set.quad_weights().ok_or(SphereError::MissingWeights)?;
    if values.len() != set.len() {
        return Err(SphereError::LengthMismatch {
            expected: set.len(),
            got: values.len(),
        });
    }
    let mut acc = vec![0.0; (ell_max + 1) * (ell_max + 1)];
    for ((p, &w), &f) in set.points().iter().zip(weights).zip(values) {
        if f == 0.0 {
            continue;
        }
        let eval = HarmonicEvaluator::new(ell_max, ell_max, p);
        for ell in 0..=ell_max {
            for m in -(ell as isize)..=ell as isize {
                acc[harmonic_index(ell, m)] += w * f * eval.eval(ell, m);
            }
        }
    }
    let mut out = SphCoeffs::new();
    for ell in 0..=ell_max {
        for m in -(ell as isize)..=ell as isize {
            out.entries.insert((ell, m), acc[harmonic_index(ell, m)]);
        }
    }
    Ok(out)
}

/// Pointwise `∑ c_{ℓ,m} Y_ℓ^m(p)` over the set.
pub fn synthesize_field(coeffs: &SphCoeffs, set: &SamplingSet) -> Vec<f64> {
    let Some(lmax) = coeffs.max_degree() else {
        return vec![0.0; set.len()];
    };
    set.points()
        .iter()
        .map(|p| {
            let eval = HarmonicEvaluator::new(lmax, lmax, p);
            coeffs.iter().map(|((l, m), c)| c * eval.eval(l, m)).sum()
        })
        .collect()
}

/// Flat index `ℓ² + ℓ + m` of `(ℓ, m)`.
pub fn harmonic_index(ell: usize, m: isize) -> usize {
    ((ell * ell + ell) as isize + m) as usize
}
