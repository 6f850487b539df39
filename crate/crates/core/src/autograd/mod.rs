//! Reverse-mode differentiation over dense matrices, plus first-order optimizers.

mod optim;
mod params;
mod tape;

pub use optim::{Adam, AdamConfig, OptimError, Optimizer, OptimizerKind, Sgd};
pub use params::{Layout, ParamVector, Segment};
pub use tape::{value_and_grad, Activation, AutogradError, Bound, GradReport, Gradients, Tape, Var};
