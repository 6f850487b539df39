use super::model::{SinrDims, SinrParams};
use super::{Result, SinrError};
use crate::sphere::SphCoeffs;

/// Whether `Y_ℓ^m` is reachable by a single filter: `|m| ≤ D` and `0 ≤ ℓ − |m| ≤ L`.
pub fn admissible(ell: usize, m: isize, degree: usize, depth: usize) -> bool {
    let am = m.unsigned_abs();
    am <= degree && ell >= am && ell - am <= depth
}

/// Parameters whose decoded field is exactly `∑ a_{ℓ,m} Y_ℓ^m` in every channel,
/// independent of the latent.
///
/// Each filter passes its harmonics through unchanged (`Ξ_l = [I; 0]`), the
/// hidden recursion is cut (`W_l = 0`, `b_l = 1`, no modulation) and the
/// output heads pick the wanted coefficients.
pub fn represent_subspace(coeffs: &SphCoeffs, dims: SinrDims) -> Result<SinrParams> {
    let k = dims.filter_width();
    if dims.hidden < k {
        return Err(SinrError::HiddenTooSmall {
            hidden: dims.hidden,
            needed: k,
        });
    }
    for ((ell, m), _) in coeffs.iter() {
        if !admissible(ell, m, dims.degree, dims.depth) {
            return Err(SinrError::OutsideIndexSet { ell, m });
        }
    }
    let mut sp = SinrParams::zeros(dims, true);
    let (h, c, d) = (dims.hidden, dims.channels, dims.degree as isize);
    for l in 0..=dims.depth {
        let xi = sp.params.slice_mut(&format!("xi{l}"))?;
        for j in 0..k {
            xi[j * k + j] = 1.0;
        }
        if l > 0 {
            sp.params.slice_mut(&format!("b{l}"))?.fill(1.0);
        }
        let wout = sp.params.slice_mut(&format!("wout{l}"))?;
        for j in 0..k {
            let m = j as isize - d;
            let a = coeffs.get(m.unsigned_abs() + l, m);
            for ch in 0..c {
                wout[ch * h + j] = a;
            }
        }
    }
    Ok(sp)
}
