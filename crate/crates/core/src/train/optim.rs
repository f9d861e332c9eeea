use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Weight decay folded into the gradient.
    Adam,
    /// Decoupled weight decay applied before the moment update.
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::AdamW, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

/// Adam / AdamW moments for every trainable parameter, kept in f64.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<T: Scalar>(config: OptimizerConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let ids = store.trainable_ids();
        let zeros = |id: &ParamId| vec![0.0; store.value(*id).numel()];
        Ok(Self {
            config,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        })
    }

    /// One update. `grads[i]` belongs to the i-th trainable parameter.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        if grads.len() != self.ids.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} gradients for {} parameters", grads.len(), self.ids.len()),
            ));
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, &id) in self.ids.iter().enumerate() {
            let value = store.value(id);
            let g = &grads[i];
            if g.len() != value.numel() {
                return Err(Error::shape(
                    "optimizer",
                    format!("{}: gradient of {} for {} values", store.get(id).name, g.len(), value.numel()),
                ));
            }
            let mut w = value.to_f64_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                let mut gj = g[j];
                match c.kind {
                    OptimizerKind::Adam => gj += c.weight_decay * w[j],
                    OptimizerKind::AdamW => w[j] -= lr * c.weight_decay * w[j],
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
            let shape = value.shape().to_vec();
            store.set(id, Tensor::from_f64(shape, &w)?)?;
        }
        Ok(())
    }
}
