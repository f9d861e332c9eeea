use crate::error::{Error, Result};
use crate::nn::{Init, LayerCost, Linear, Session};
use crate::tape::{ReduceOp, Var};
use crate::tensor::Scalar;

/// Variance floor inside the pooled standard deviation.
pub const POOL_EPS: f64 = 1e-9;

/// Attentive statistics pooling. A frame-level score
/// `e_t = vᵀ tanh(W x_t + b) + k` is softmax-normalised over time and used
/// to weight the mean and standard deviation of every channel.
#[derive(Debug, Clone)]
pub struct AttStatsPool {
    pub name: String,
    pub channels: usize,
    pub bottleneck: usize,
    pub attention: Linear,
    pub score: Linear,
    pub eps: f64,
}

impl AttStatsPool {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, bottleneck: usize) -> Result<Self> {
        if bottleneck == 0 {
            return Err(Error::config("pool bottleneck must be >= 1"));
        }
        Ok(Self {
            name: name.to_string(),
            channels,
            bottleneck,
            attention: Linear::new(init, &format!("{name}.attn"), channels, bottleneck)?,
            score: Linear::new(init, &format!("{name}.score"), bottleneck, 1)?,
            eps: POOL_EPS,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.channels
    }

    /// Frame weights, shape `[1, T]`.
    pub fn frame_weights<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::shape(
                "att_stats_pool",
                format!("{}: input {shape:?}, expected [{}, T]", self.name, self.channels),
            ));
        }
        let h = self.attention.forward(s, x)?;
        let h = s.tape.tanh(h)?;
        let e = self.score.forward(s, h)?;
        s.tape.softmax(e, 1)
    }

    /// `x: [C, T] -> [2C]` (weighted mean ‖ weighted std).
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let alpha = self.frame_weights(s, x)?;
        let c = self.channels;
        let wx = s.tape.mul(x, alpha)?;
        let mean = s.tape.reduce(ReduceOp::Sum, wx, 1)?;
        let mean_col = s.tape.reshape(mean, &[c, 1])?;
        let centered = s.tape.sub(x, mean_col)?;
        let sq = s.tape.mul(centered, centered)?;
        let wsq = s.tape.mul(sq, alpha)?;
        let var = s.tape.reduce(ReduceOp::Sum, wsq, 1)?;
        let var = s.tape.offset(var, self.eps)?;
        let std = s.tape.sqrt(var)?;
        s.tape.concat_channels(&[mean, std])
    }

    pub fn cost(&self, frames: usize) -> Vec<LayerCost> {
        vec![self.attention.cost(frames), self.score.cost(frames)]
    }
}
