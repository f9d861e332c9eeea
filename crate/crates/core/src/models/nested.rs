use crate::error::{Error, Result};
use crate::models::config::FusionNorm;
use crate::nn::{BatchNorm1d, Conv1dLayer, Init, LayerCost, ParamId, SEBlock, Session};
use crate::tape::Var;
use crate::tensor::Scalar;

/// Learnable two-way fusion of the current subset and the previous group output.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub name: String,
    pub weights: ParamId,
    pub norm: FusionNorm,
}

impl Fusion {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, norm: FusionNorm) -> Result<Self> {
        let start = match norm {
            FusionNorm::Unconstrained => 1.0,
            FusionNorm::Softmax => 0.0,
        };
        Ok(Self {
            name: name.to_string(),
            weights: init.constant(name, &[2], start)?,
            norm,
        })
    }

    /// Effective weights `[w_current, w_previous]`.
    pub fn weights<T: Scalar>(&self, s: &mut Session<'_, T>) -> Result<Var> {
        let w = s.var(self.weights);
        match self.norm {
            FusionNorm::Unconstrained => Ok(w),
            FusionNorm::Softmax => s.tape.softmax(w, 0),
        }
    }
}

/// One multi-scale group `M_j`: conv(k) + BN + ReLU, with an optional fusion.
#[derive(Debug, Clone)]
pub struct Group {
    pub conv: Conv1dLayer,
    pub bn: BatchNorm1d,
    pub fusion: Option<Fusion>,
}

impl Group {
    fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        prefix: &str,
        width: usize,
        kernel: usize,
        dilation: usize,
        fusion: Option<FusionNorm>,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv1dLayer::new(init, &format!("{prefix}.conv"), width, width, kernel, dilation)?,
            bn: BatchNorm1d::new(init, &format!("{prefix}.bn"), width)?,
            fusion: fusion
                .map(|f| Fusion::new(init, &format!("{prefix}.fusion"), f))
                .transpose()?,
        })
    }

    /// `M(x)`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        s.tape.relu(y)
    }

    /// `M(current + previous)`, or its weighted form when a fusion is present.
    ///
    /// The weighted form convolves both stacked slices and mixes the results,
    /// `w₀·conv(current) + w₁·conv(previous) + bias`, which by linearity equals
    /// `conv(w₀·current + w₁·previous)`.
    pub fn forward_pair<T: Scalar>(&self, s: &mut Session<'_, T>, current: Var, previous: Var) -> Result<Var> {
        let Some(fusion) = &self.fusion else {
            let x = s.tape.add(current, previous)?;
            return self.forward(s, x);
        };
        let a = self.conv.forward_linear(s, current)?;
        let b = self.conv.forward_linear(s, previous)?;
        let before = s.tape.macs();
        let w = fusion.weights(s)?;
        let mixed = s.tape.weighted_sum(w, &[a, b])?;
        s.record_macs(&fusion.name, before);
        let y = self.conv.add_bias(s, mixed)?;
        let y = self.bn.forward(s, y)?;
        s.tape.relu(y)
    }

    fn cost(&self, frames: usize) -> Vec<LayerCost> {
        let applications = if self.fusion.is_some() { 2 } else { 1 };
        let mut rows = vec![self.conv.cost(frames, applications), self.bn.cost()];
        if let Some(f) = &self.fusion {
            rows.push(LayerCost::new(&f.name, 2, 0, 2 * self.conv.c_out * frames));
        }
        rows
    }
}

/// Hierarchical residual-style aggregation over channel groups.
///
/// Group 1 passes through. With `chain_first`, group 2 receives `h₂ + y₁`
/// like every later group; otherwise it receives `h₂` alone.
pub(crate) fn hierarchical<T: Scalar>(
    s: &mut Session<'_, T>,
    groups: &[Group],
    parts: &[Var],
    chain_first: bool,
) -> Result<Var> {
    debug_assert_eq!(groups.len() + 1, parts.len());
    let mut outs = Vec::with_capacity(parts.len());
    outs.push(parts[0]);
    for (j, group) in groups.iter().enumerate() {
        let current = parts[j + 1];
        let y = if j == 0 && !chain_first {
            group.forward(s, current)?
        } else {
            group.forward_pair(s, current, outs[j])?
        };
        outs.push(y);
    }
    s.tape.concat_channels(&outs)
}

/// Nested layer `K_i`: 1×1 conv + BN + ReLU, multi-scale groups, SE and a residual.
#[derive(Debug, Clone)]
pub struct NestedLayer {
    pub name: String,
    pub width: usize,
    pub scale: usize,
    pub conv_in: Conv1dLayer,
    pub bn_in: BatchNorm1d,
    pub groups: Vec<Group>,
    pub se: SEBlock,
}

impl NestedLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        width: usize,
        scale: usize,
        kernel: usize,
        dilation: usize,
        se_ratio: usize,
        fusion: Option<FusionNorm>,
    ) -> Result<Self> {
        if scale == 0 || !width.is_multiple_of(scale) {
            return Err(Error::config(format!("{name}: scale {scale} does not divide width {width}")));
        }
        let gw = width / scale;
        let groups = (2..=scale)
            .map(|j| Group::new(init, &format!("{name}.groups.{j}"), gw, kernel, dilation, fusion))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            width,
            scale,
            conv_in: Conv1dLayer::new(init, &format!("{name}.conv_in"), width, width, 1, 1)?,
            bn_in: BatchNorm1d::new(init, &format!("{name}.bn_in"), width)?,
            groups,
            se: SEBlock::new(init, &format!("{name}.se"), width, se_ratio)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[0] != self.width {
            return Err(Error::shape(
                "nested_layer",
                format!("{}: input {shape:?}, expected [{}, T]", self.name, self.width),
            ));
        }
        let h = self.conv_in.forward(s, x)?;
        let h = self.bn_in.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let parts = s.tape.split_channels(h, self.scale)?;
        let y = hierarchical(s, &self.groups, &parts, true)?;
        let y = self.se.forward(s, y)?;
        s.tape.add(y, x)
    }

    pub fn cost(&self, frames: usize) -> Vec<LayerCost> {
        let mut rows = vec![self.conv_in.cost(frames, 1), self.bn_in.cost()];
        for g in &self.groups {
            rows.extend(g.cost(frames));
        }
        rows.extend(self.se.cost());
        rows
    }
}

/// Standard SE-Res2Net block: 1×1 conv, scaled k-wide groups, 1×1 conv, SE, residual.
#[derive(Debug, Clone)]
pub struct Res2NetBlock {
    pub name: String,
    pub width: usize,
    pub scale: usize,
    pub conv_in: Conv1dLayer,
    pub bn_in: BatchNorm1d,
    pub groups: Vec<Group>,
    pub conv_out: Conv1dLayer,
    pub bn_out: BatchNorm1d,
    pub se: SEBlock,
}

impl Res2NetBlock {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        width: usize,
        scale: usize,
        kernel: usize,
        dilation: usize,
        se_ratio: usize,
    ) -> Result<Self> {
        if scale == 0 || !width.is_multiple_of(scale) {
            return Err(Error::config(format!("{name}: scale {scale} does not divide width {width}")));
        }
        let gw = width / scale;
        let groups = (2..=scale)
            .map(|j| Group::new(init, &format!("{name}.groups.{j}"), gw, kernel, dilation, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            width,
            scale,
            conv_in: Conv1dLayer::new(init, &format!("{name}.conv_in"), width, width, 1, 1)?,
            bn_in: BatchNorm1d::new(init, &format!("{name}.bn_in"), width)?,
            groups,
            conv_out: Conv1dLayer::new(init, &format!("{name}.conv_out"), width, width, 1, 1)?,
            bn_out: BatchNorm1d::new(init, &format!("{name}.bn_out"), width)?,
            se: SEBlock::new(init, &format!("{name}.se"), width, se_ratio)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[0] != self.width {
            return Err(Error::shape(
                "res2net_block",
                format!("{}: input {shape:?}, expected [{}, T]", self.name, self.width),
            ));
        }
        let h = self.conv_in.forward(s, x)?;
        let h = self.bn_in.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let parts = s.tape.split_channels(h, self.scale)?;
        let y = hierarchical(s, &self.groups, &parts, false)?;
        let y = self.conv_out.forward(s, y)?;
        let y = self.bn_out.forward(s, y)?;
        let y = s.tape.relu(y)?;
        let y = self.se.forward(s, y)?;
        s.tape.add(y, x)
    }

    pub fn cost(&self, frames: usize) -> Vec<LayerCost> {
        let mut rows = vec![self.conv_in.cost(frames, 1), self.bn_in.cost()];
        for g in &self.groups {
            rows.extend(g.cost(frames));
        }
        rows.push(self.conv_out.cost(frames, 1));
        rows.push(self.bn_out.cost());
        rows.extend(self.se.cost());
        rows
    }
}
