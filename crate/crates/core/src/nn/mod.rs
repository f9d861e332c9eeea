//! Parameterised layers built on the tape.

mod aggregate;
mod linear;
mod norm;
mod params;
mod pool;
mod se;

pub use aggregate::LayerAggregator;
pub use linear::{Conv1dLayer, Linear};
pub use norm::{BatchNorm1d, BN_EPS, BN_MOMENTUM};
pub use params::{
    apply_stat_updates, Init, Mode, Param, ParamId, ParamKind, ParamStore, Session, StatUpdate,
};
pub use pool::{AttStatsPool, POOL_EPS};
pub use se::SEBlock;

/// Analytic cost of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    /// Trainable scalars.
    pub params: u64,
    /// Non-trainable scalars (running statistics).
    pub buffers: u64,
    pub macs: u64,
}

impl LayerCost {
    pub fn new(name: &str, params: usize, buffers: usize, macs: usize) -> Self {
        Self {
            name: name.to_string(),
            params: params as u64,
            buffers: buffers as u64,
            macs: macs as u64,
        }
    }
}
