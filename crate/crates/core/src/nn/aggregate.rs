use crate::error::{Error, Result};
use crate::nn::{Init, LayerCost, ParamId, Session};
use crate::tape::Var;
use crate::tensor::Scalar;

/// Softmax-weighted sum over stacked front-end layers, `[L, C, T] -> [C, T]`.
#[derive(Debug, Clone)]
pub struct LayerAggregator {
    pub name: String,
    pub layers: usize,
    pub logits: ParamId,
}

impl LayerAggregator {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, layers: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            layers,
            logits: init.constant(&format!("{name}.logits"), &[layers], 0.0)?,
        })
    }

    pub fn weights<T: Scalar>(&self, s: &mut Session<'_, T>) -> Result<Var> {
        s.tape.softmax(s.var(self.logits), 0)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, stack: Var) -> Result<Var> {
        let shape = s.tape.shape(stack).to_vec();
        if shape.len() != 3 || shape[0] != self.layers {
            return Err(Error::shape(
                "layer_weighted_sum",
                format!("{}: stack {shape:?}, expected [{}, C, T]", self.name, self.layers),
            ));
        }
        let w = self.weights(s)?;
        let items = (0..self.layers)
            .map(|l| {
                let slab = s.tape.slice0(stack, l, 1)?;
                s.tape.reshape(slab, &shape[1..])
            })
            .collect::<Result<Vec<_>>>()?;
        let before = s.tape.macs();
        let y = s.tape.weighted_sum(w, &items)?;
        s.record_macs(&self.name, before);
        Ok(y)
    }

    pub fn cost(&self, channels: usize, frames: usize) -> LayerCost {
        LayerCost::new(&self.name, self.layers, 0, self.layers * channels * frames)
    }
}
