//! Back-end architectures.

mod config;
mod model;
mod nested;

pub use config::{FusionNorm, ModelConfig, Variant};
pub use model::{outer_forward, Model, Trunk};
pub use nested::{Fusion, Group, NestedLayer, Res2NetBlock};
