//! Latent data assimilation on the sphere.
//!
//! The crate is organised bottom-up: [`sphere`] evaluates harmonics and
//! quadrature, [`autograd`] differentiates matrix programs, [`sinr`] is the
//! spherical implicit representation used as encoder and decoder, [`dynamics`]
//! advances latent states, [`trainer`] fits both, [`uncertainty`] estimates
//! error covariances, [`filters`] holds the ensemble Kalman filters and
//! [`harness`] wires datasets, metrics and experiments together.

pub mod autograd;
pub mod dynamics;
pub mod filters;
pub mod linalg;
pub mod ltsr;
pub mod sphere;
pub mod sinr;
pub mod trainer;
pub mod uncertainty;
pub mod harness;
