use crate::error::{Error, Result};
use crate::nn::{Init, LayerCost, Mode, ParamId, Session, StatUpdate};
use crate::tape::{ReduceOp, Var};
use crate::tensor::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalisation over the time axis of a `[C, T]` feature map.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            channels,
            gamma: init.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            running_mean: init.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: init.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::shape(
                "batchnorm",
                format!("{}: input {shape:?}, expected [{}, T]", self.name, self.channels),
            ));
        }
        let c = self.channels;
        let (mean, var) = match s.mode {
            Mode::Train => {
                let mean = s.tape.reduce(ReduceOp::Mean, x, 1)?;
                let var = s.tape.reduce(ReduceOp::Var, x, 1)?;
                let update = StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    batch_mean: s.tape.value(mean).data().to_vec(),
                    batch_var: s.tape.value(var).data().to_vec(),
                };
                s.push_stat_update(update);
                (mean, var)
            }
            Mode::Eval => (s.var(self.running_mean), s.var(self.running_var)),
        };
        let mean = s.tape.reshape(mean, &[c, 1])?;
        let var = s.tape.reshape(var, &[c, 1])?;
        let centered = s.tape.sub(x, mean)?;
        let denom = s.tape.offset(var, self.eps)?;
        let denom = s.tape.sqrt(denom)?;
        let xhat = s.tape.div(centered, denom)?;
        let gamma = s.tape.reshape(s.var(self.gamma), &[c, 1])?;
        let beta = s.tape.reshape(s.var(self.beta), &[c, 1])?;
        let y = s.tape.mul(xhat, gamma)?;
        s.tape.add(y, beta)
    }

    pub fn cost(&self) -> LayerCost {
        LayerCost::new(&self.name, 2 * self.channels, 2 * self.channels, 0)
    }
}
