//! Nes2Net, Nes2Net-X and Res2Net back-ends on a small reverse-mode tensor core.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod profile;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use models::{FusionNorm, Model, ModelConfig, Variant};
pub use tape::{GradFault, Gradients, OpKind, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
