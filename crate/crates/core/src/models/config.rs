use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Nes2Net,
    Nes2NetX,
    /// Res2Net behind a dimensionality-reduction (DR) layer.
    Res2NetDr,
    /// Res2Net applied directly at the input width.
    Res2NetWoDr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Nes2Net,
        Variant::Nes2NetX,
        Variant::Res2NetDr,
        Variant::Res2NetWoDr,
    ];

    pub fn is_nested(self) -> bool {
        matches!(self, Variant::Nes2Net | Variant::Nes2NetX)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Nes2Net => "nes2net",
            Variant::Nes2NetX => "nes2net_x",
            Variant::Res2NetDr => "res2net_dr",
            Variant::Res2NetWoDr => "res2net_wodr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// How Nes2Net-X fusion weights are parameterised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionNorm {
    /// Raw learnable weights, initialised to 1.
    Unconstrained,
    /// Softmax over learnable logits, initialised to 0.
    Softmax,
}

impl FromStr for FusionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconstrained" => Ok(FusionNorm::Unconstrained),
            "softmax" => Ok(FusionNorm::Softmax),
            _ => Err(Error::config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

impl fmt::Display for FusionNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionNorm::Unconstrained => "unconstrained",
            FusionNorm::Softmax => "softmax",
        })
    }
}

/// Declarative description of a back-end.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Input feature width N.
    pub input_dim: usize,
    /// Outer scale s1 (nested variants).
    pub s1: usize,
    /// Inner scale s2 (nested variants).
    pub s2: usize,
    /// Block count b (baselines).
    pub blocks: usize,
    /// Scale s (baselines).
    pub scale: usize,
    /// Reduced width D (res2net_dr only).
    pub reduced_dim: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub se_ratio: usize,
    pub pool_bottleneck: usize,
    pub num_classes: usize,
    pub fusion: FusionNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Nes2Net,
            input_dim: 1024,
            s1: 8,
            s2: 8,
            blocks: 4,
            scale: 4,
            reduced_dim: 128,
            kernel: 3,
            dilation: 1,
            se_ratio: 8,
            pool_bottleneck: 64,
            num_classes: 2,
            fusion: FusionNorm::Unconstrained,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Width of the features entering the trunk blocks.
    pub fn working_width(&self) -> usize {
        match self.variant {
            Variant::Nes2Net | Variant::Nes2NetX => self.input_dim / self.s1.max(1),
            Variant::Res2NetDr => self.reduced_dim,
            Variant::Res2NetWoDr => self.input_dim,
        }
    }

    /// Width at the pooling layer.
    pub fn pooled_width(&self) -> usize {
        match self.variant {
            Variant::Res2NetDr => self.reduced_dim,
            _ => self.input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.input_dim == 0 || self.num_classes == 0 || self.pool_bottleneck == 0 {
            return fail("input_dim, num_classes and pool_bottleneck must be >= 1".into());
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return fail(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.dilation == 0 {
            return fail("dilation must be >= 1".into());
        }
        if self.se_ratio == 0 {
            return fail("se_ratio must be >= 1".into());
        }
        if self.variant.is_nested() {
            if self.s1 < 2 || !self.input_dim.is_multiple_of(self.s1) {
                return fail(format!(
                    "s1 = {} must be >= 2 and divide input_dim = {}",
                    self.s1, self.input_dim
                ));
            }
            let sub = self.input_dim / self.s1;
            if self.s2 == 0 || !sub.is_multiple_of(self.s2) {
                return fail(format!("s2 = {} must divide N/s1 = {sub}", self.s2));
            }
            if !sub.is_multiple_of(self.se_ratio) {
                return fail(format!("se_ratio = {} must divide N/s1 = {sub}", self.se_ratio));
            }
        } else {
            if self.variant == Variant::Res2NetDr && self.reduced_dim == 0 {
                return fail("reduced_dim must be >= 1 for res2net_dr".into());
            }
            let width = self.working_width();
            if self.blocks == 0 {
                return fail("blocks must be >= 1".into());
            }
            if self.scale == 0 || !width.is_multiple_of(self.scale) {
                return fail(format!("scale = {} must divide width {width}", self.scale));
            }
            if !width.is_multiple_of(self.se_ratio) {
                return fail(format!("se_ratio = {} must divide width {width}", self.se_ratio));
            }
        }
        Ok(())
    }

    /// Stable 64-bit hash of the configuration, stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        crate::rng::fnv1a(self.canonical_string().as_bytes())
    }

    /// The fields that define the architecture, as `key=value` pairs.
    pub fn canonical_string(&self) -> String {
        format!(
            "variant={};input_dim={};s1={};s2={};blocks={};scale={};reduced_dim={};kernel={};dilation={};se_ratio={};pool_bottleneck={};num_classes={};fusion={}",
            self.variant,
            self.input_dim,
            self.s1,
            self.s2,
            self.blocks,
            self.scale,
            self.reduced_dim,
            self.kernel,
            self.dilation,
            self.se_ratio,
            self.pool_bottleneck,
            self.num_classes,
            self.fusion
        )
    }
}
