//! Dual-stage Kolmogorov-Arnold networks.
//!
//! The layer model decouples a configurable pre-linear input transformation
//! from a configurable post-linear output activation. Both stages choose a
//! function-sharing strategy (none, fixed, one global learnable function,
//! one per dimension, or — input side only — one per connection) and a
//! basis family (standard or orthogonal polynomials, B-splines, Gaussian
//! RBFs, sinusoids, rationals). Dropout and batch normalization slot in at
//! the pre- and/or post-activation positions in configurable order.
//!
//! The crate ships its own reverse-mode tape so every learnable scalar gets
//! an exact analytic gradient, plus dataset generators, a deterministic
//! training loop, and the explainability instruments (activation
//! decomposition, magnitude-pruning sweeps, symbolic extraction, attention
//! reporting, gradient-field evaluation).

// Index-based loops over small dense tensors read clearer here than
// iterator chains; the indices are the math.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod basis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod model;
pub mod optim;
pub mod reg;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use basis::{BankLayout, BasisFamily, BasisSpec, CoefficientBank, DomainMap};
pub use error::{Error, Result};
pub use layer::{
    FixedFn, ForwardCtx, InputStrategy, LayerConfig, LayerParams, OutputStrategy, ParamBreakdown,
};
pub use model::{AttentionInit, Model, ModelConfig};
pub use optim::{Optimizer, SplitIndices, TrainConfig, TrainHistory};
pub use reg::{BatchNormState, Mode, RegConfig, RegOrder, RegPlacement};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
