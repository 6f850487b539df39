//! Spherical implicit neural representation: decoder, encoder and the exact
//! representation constructor.
//!
//! Layer `l` multiplies its hidden state by a spherical filter
//! `g_l(p) = Ξ_l [Y_{|m|+l}^m(p)]_{m=-D..D}` after adding a latent shift
//! `A_l z + c_l`:
//!
//! ```text
//! γ_0 = g_0(p)
//! γ_l = (W_l γ_{l-1} + b_l + A_l z + c_l) ⊙ g_l(p)
//! out = ∑_l (W̃_l γ_l + b̃_l)
//! ```
//!
//! Nothing in the recursion multiplies two latent-dependent terms, so the
//! decoded field is affine in `z`. The encoder and the Jacobian exploit this.

mod affine;
mod encode;
mod model;
mod represent;

pub use affine::AffineDecoder;
pub use encode::{encode_loss_on_tape, sinr_encode, sinr_encode_lstsq, EncodeOptions, EncodeResult};
pub use model::{
    channel_labels, recon_weights, sinr_decode, sinr_forward, FieldSnapshot, FilterBasis, LatentState, SinrDims,
    SinrNet, SinrParams, SphericalFilterParams,
};
pub use represent::{admissible, represent_subspace};

use thiserror::Error;

use crate::autograd::AutogradError;
use crate::ltsr::LtsrError;

#[derive(Debug, Error)]
pub enum SinrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("coefficient ({ell},{m}) lies outside the representable index set")]
    OutsideIndexSet { ell: usize, m: isize },
    #[error("hidden width {hidden} is below the {needed} filter columns")]
    HiddenTooSmall { hidden: usize, needed: usize },
    #[error("snapshot has no points")]
    EmptySnapshot,
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Ltsr(#[from] LtsrError),
}

pub type Result<T> = std::result::Result<T, SinrError>;
