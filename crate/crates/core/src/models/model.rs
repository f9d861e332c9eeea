use crate::error::{Error, Result};
use crate::models::config::{ModelConfig, Variant};
use crate::models::nested::{NestedLayer, Res2NetBlock};
use crate::nn::{AttStatsPool, Init, LayerCost, Linear, Mode, ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Frame-level part of a model, before pooling.
#[derive(Debug, Clone)]
pub enum Trunk {
    /// Outer split into `s1` subsets, nested layers `K_2..K_{s1}`.
    Nested { s1: usize, layers: Vec<NestedLayer> },
    /// Optional dimensionality reduction followed by Res2Net blocks.
    Res2Net { dr: Option<Linear>, blocks: Vec<Res2NetBlock> },
}

/// Outer accumulate chain over `s1` channel subsets:
/// `y₁ = x₁`, `y₂ = K₂(x₂)`, `yᵢ = Kᵢ(xᵢ + yᵢ₋₁)`.
///
/// `k(s, n, x)` applies the nested layer for subset `n + 2`.
pub fn outer_forward<T, F>(s: &mut Session<'_, T>, x: Var, s1: usize, mut k: F) -> Result<Var>
where
    T: Scalar,
    F: FnMut(&mut Session<'_, T>, usize, Var) -> Result<Var>,
{
    let parts = s.tape.split_channels(x, s1)?;
    let mut outs = Vec::with_capacity(s1);
    outs.push(parts[0]);
    for i in 1..s1 {
        let input = if i == 1 { parts[1] } else { s.tape.add(parts[i], outs[i - 1])? };
        outs.push(k(s, i - 1, input)?);
    }
    s.tape.concat_channels(&outs)
}

/// A back-end: trunk, attentive statistics pooling and a linear classifier.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    trunk: Trunk,
    pool: AttStatsPool,
    classifier: Linear,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed };
        let c = config;
        let trunk = match c.variant {
            Variant::Nes2Net | Variant::Nes2NetX => {
                let fusion = (c.variant == Variant::Nes2NetX).then_some(c.fusion);
                let width = c.working_width();
                let layers = (2..=c.s1)
                    .map(|i| {
                        NestedLayer::new(
                            &mut init,
                            &format!("nested.{i}"),
                            width,
                            c.s2,
                            c.kernel,
                            c.dilation,
                            c.se_ratio,
                            fusion,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Trunk::Nested { s1: c.s1, layers }
            }
            Variant::Res2NetDr | Variant::Res2NetWoDr => {
                let dr = (c.variant == Variant::Res2NetDr)
                    .then(|| Linear::new(&mut init, "dr", c.input_dim, c.reduced_dim))
                    .transpose()?;
                let width = c.working_width();
                let blocks = (1..=c.blocks)
                    .map(|b| {
                        Res2NetBlock::new(
                            &mut init,
                            &format!("blocks.{b}"),
                            width,
                            c.scale,
                            c.kernel,
                            c.dilation,
                            c.se_ratio,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Trunk::Res2Net { dr, blocks }
            }
        };
        let pooled = c.pooled_width();
        let pool = AttStatsPool::new(&mut init, "pool", pooled, c.pool_bottleneck)?;
        let classifier = Linear::new(&mut init, "classifier", 2 * pooled, c.num_classes)?;
        Ok(Self {
            config: config.clone(),
            store,
            trunk,
            pool,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub fn pool(&self) -> &AttStatsPool {
        &self.pool
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// Nested layers in order `K_2..K_{s1}`; empty for the baselines.
    pub fn nested_layers(&self) -> &[NestedLayer] {
        match &self.trunk {
            Trunk::Nested { layers, .. } => layers,
            Trunk::Res2Net { .. } => &[],
        }
    }

    fn check_input(&self, s: &Session<'_, T>, x: Var) -> Result<()> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[0] != self.config.input_dim {
            return Err(Error::shape(
                "model",
                format!("input {shape:?}, expected [{}, T]", self.config.input_dim),
            ));
        }
        if !s.tape.value(x).all_finite() {
            return Err(Error::NonFinite { op: "model input" });
        }
        Ok(())
    }

    /// `[N, T]` features to frame-level trunk output (`[N, T]`, or `[D, T]` with DR).
    pub fn trunk_forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.check_input(s, x)?;
        match &self.trunk {
            Trunk::Nested { s1, layers } => outer_forward(s, x, *s1, |s, n, v| layers[n].forward(s, v)),
            Trunk::Res2Net { dr, blocks } => {
                let mut h = match dr {
                    Some(dr) => dr.forward(s, x)?,
                    None => x,
                };
                for b in blocks {
                    h = b.forward(s, h)?;
                }
                Ok(h)
            }
        }
    }

    /// Pooled utterance embedding, `[2C]`.
    pub fn embed(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.trunk_forward(s, x)?;
        self.pool.forward(s, h)
    }

    /// Unnormalised class logits, `[num_classes]`.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let e = self.embed(s, x)?;
        self.classifier.forward_vec(s, e)
    }

    /// Eval-mode logits without recording a tape.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut s = Session::new(&mut tape, &self.store, Mode::Eval);
        let xv = s.tape.constant(x.clone());
        let y = self.forward(&mut s, xv)?;
        Ok(s.tape.value(y).clone())
    }

    /// Detection score: `logit(bonafide) − logit(spoof)` with bonafide as class 0.
    pub fn score(&self, x: &Tensor<T>) -> Result<f64> {
        if self.config.num_classes != 2 {
            return Err(Error::invalid("scoring needs a two-class model"));
        }
        let l = self.logits(x)?;
        Ok((l.data()[0] - l.data()[1]).to_f64())
    }

    /// Analytic per-layer costs at `frames` frames, in forward order.
    pub fn cost_rows(&self, frames: usize) -> Vec<LayerCost> {
        let mut rows = Vec::new();
        match &self.trunk {
            Trunk::Nested { layers, .. } => {
                for l in layers {
                    rows.extend(l.cost(frames));
                }
            }
            Trunk::Res2Net { dr, blocks } => {
                if let Some(dr) = dr {
                    rows.push(dr.cost(frames));
                }
                for b in blocks {
                    rows.extend(b.cost(frames));
                }
            }
        }
        rows.extend(self.pool.cost(frames));
        rows.push(self.classifier.cost(1));
        rows
    }

    /// Name of the dimensionality-reduction layer, if any.
    pub fn dr_layer(&self) -> Option<&Linear> {
        match &self.trunk {
            Trunk::Res2Net { dr, .. } => dr.as_ref(),
            Trunk::Nested { .. } => None,
        }
    }

    /// The same model with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            trunk: self.trunk.clone(),
            pool: self.pool.clone(),
            classifier: self.classifier.clone(),
        }
    }
}
