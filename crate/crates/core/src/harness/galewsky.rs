use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::HarnessError;
use crate::sinr::FieldSnapshot;
use crate::sphere::SamplingSet;

pub const EARTH_RADIUS: f64 = 6.37122e6;
pub const EARTH_OMEGA: f64 = 7.292e-5;
pub const GRAVITY: f64 = 9.80616;
pub const MEAN_DEPTH: f64 = 1.0e4;

const PHI0: f64 = PI / 7.0;
const PHI1: f64 = PI / 2.0 - PI / 7.0;
const BUMP_HEIGHT: f64 = 120.0;
const BUMP_ALPHA: f64 = 1.0 / 3.0;
const BUMP_BETA: f64 = 1.0 / 15.0;
const BUMP_LAT: f64 = PI / 4.0;
const SIMPSON_INTERVALS: usize = 4096;

/// Zonal wind of the twin jets at latitude `phi`.
pub fn jet_wind(u_m: f64, phi: f64) -> f64 {
    let a = phi.abs();
    if a <= PHI0 || a >= PHI1 {
        return 0.0;
    }
    let en = (-4.0 / (PHI1 - PHI0).powi(2)).exp();
    u_m / en * (1.0 / ((a - PHI0) * (a - PHI1))).exp()
}

fn balance_integrand(u_m: f64, phi: f64) -> f64 {
    let u = jet_wind(u_m, phi);
    if u == 0.0 {
        return 0.0;
    }
    let f = 2.0 * EARTH_OMEGA * phi.sin();
    EARTH_RADIUS * u * (f + u * phi.tan() / EARTH_RADIUS)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `∫_{-π/2}^{φ} a u (f + u tan φ' / a) dφ'`.
fn balance_integral(u_m: f64, phi: f64) -> f64 {
    if phi <= -PI / 2.0 {
        return 0.0;
    }
    simpson(|p| balance_integrand(u_m, p), -PI / 2.0, phi, SIMPSON_INTERVALS)
}

/// Balanced depth profile `h(φ)` whose area-weighted global mean is `10⁴`.
pub struct BalancedDepth {
    u_m: f64,
    h0: f64,
}

impl BalancedDepth {
    pub fn new(u_m: f64) -> Self {
        // ∫ I cos = I(π/2) − ∫ I' sin, by parts
        let total = balance_integral(u_m, PI / 2.0);
        let moment = simpson(
            |p| balance_integrand(u_m, p) * p.sin(),
            -PI / 2.0,
            PI / 2.0,
            SIMPSON_INTERVALS,
        );
        let mean_integral = (total - moment) / 2.0;
        Self {
            u_m,
            h0: MEAN_DEPTH + mean_integral / GRAVITY,
        }
    }

    pub fn at(&self, phi: f64) -> f64 {
        self.h0 - balance_integral(self.u_m, phi) / GRAVITY
    }
}

/// Localized bump added to the balanced depth.
pub fn depth_bump(lat: f64, lon: f64) -> f64 {
    let mut lam = lon.rem_euclid(2.0 * PI);
    if lam > PI {
        lam -= 2.0 * PI;
    }
    BUMP_HEIGHT * (-(lam / BUMP_ALPHA).powi(2) - ((BUMP_LAT - lat) / BUMP_BETA).powi(2)).exp() * lat.cos()
}

/// Twin-jet initial zonal wind `u` and perturbed balanced depth `h` on `grid`.
pub fn gen_galewsky_ic(u_m: f64, grid: &SamplingSet) -> Result<FieldSnapshot, HarnessError> {
    if !(u_m > 60.0 && u_m < 80.0) {
        return Err(HarnessError::Config(format!("jet speed {u_m} outside (60, 80)")));
    }
    let depth = BalancedDepth::new(u_m);
    let mut cache: Vec<(f64, f64)> = Vec::new();
    let mut values = DMatrix::zeros(grid.len(), 2);
    for (r, p) in grid.points().iter().enumerate() {
        let lat = p.lat();
        let h = match cache.iter().find(|(l, _)| *l == lat) {
            Some(&(_, h)) => h,
            None => {
                let h = depth.at(lat);
                cache.push((lat, h));
                h
            }
        };
        values[(r, 0)] = jet_wind(u_m, lat);
        values[(r, 1)] = h + depth_bump(lat, p.lon());
    }
    Ok(FieldSnapshot {
        set: grid.clone(),
        values,
        channel_names: vec!["u".into(), "h".into()],
    })
}
