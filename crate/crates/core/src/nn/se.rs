use crate::error::{Error, Result};
use crate::nn::{Init, LayerCost, Linear, Session};
use crate::tape::{ReduceOp, Var};
use crate::tensor::Scalar;

/// Squeeze-and-excitation: `y = x ⊙ σ(W₂·relu(W₁·mean_t(x)))`.
#[derive(Debug, Clone)]
pub struct SEBlock {
    pub name: String,
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SEBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::config(format!(
                "{name}: SE reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            name: name.to_string(),
            channels,
            reduction,
            fc1: Linear::new(init, &format!("{name}.fc1"), channels, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, channels)?,
        })
    }

    /// Channel gates in (0, 1), shape `[C, 1]`.
    pub fn gates<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::shape(
                "se",
                format!("{}: input {shape:?}, expected [{}, T]", self.name, self.channels),
            ));
        }
        let squeeze = s.tape.reduce(ReduceOp::Mean, x, 1)?;
        let squeeze = s.tape.reshape(squeeze, &[self.channels, 1])?;
        let h = self.fc1.forward(s, squeeze)?;
        let h = s.tape.relu(h)?;
        let e = self.fc2.forward(s, h)?;
        s.tape.sigmoid(e)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = self.gates(s, x)?;
        s.tape.mul(x, g)
    }

    /// Both FC layers run once per utterance.
    pub fn cost(&self) -> Vec<LayerCost> {
        vec![self.fc1.cost(1), self.fc2.cost(1)]
    }
}
