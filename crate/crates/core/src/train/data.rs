use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::Key;
use crate::rng::{rng_for, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// Gaussian stand-in for frame-level front-end features.
///
/// Bona fide frames are drawn from `N(+δ/2·u, σ²I)` and spoof frames from
/// `N(−δ/2·u, σ²I)` along a fixed unit direction `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataConfig {
    pub dim: usize,
    /// Length after crop/pad.
    pub frames: usize,
    pub delta: f64,
    pub sigma: f64,
    pub n_attacks: usize,
    pub bonafide_fraction: f64,
    /// Raw lengths are drawn uniformly from `frames·(1 ± length_jitter)`.
    pub length_jitter: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            frames: 200,
            delta: 1.0,
            sigma: 1.0,
            n_attacks: 4,
            bonafide_fraction: 0.5,
            length_jitter: 0.0,
            n_train: 2000,
            n_dev: 500,
            n_eval: 500,
            seed: 0,
        }
    }
}

impl SyntheticDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.frames == 0 || self.n_attacks == 0 {
            return Err(Error::config("dim, frames and n_attacks must be >= 1"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("need delta >= 0 and sigma > 0"));
        }
        if !(self.bonafide_fraction > 0.0 && self.bonafide_fraction < 1.0) {
            return Err(Error::config("bonafide_fraction must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return Err(Error::config("length_jitter must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Eval => self.n_eval,
        }
    }

    /// The class-mean direction `u`, shared by all splits.
    pub fn direction(&self) -> Vec<f64> {
        let mut rng = rng_for(self.seed, "data.direction");
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Utterance<T> {
    pub id: String,
    pub key: Key,
    /// `-` for bona fide.
    pub attack: String,
    /// `[dim, frames]`.
    pub features: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub split: Split,
    pub items: Vec<Utterance<T>>,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Crops to `frames` (at `offset`, clamped) or tiles the sequence until it is long enough.
pub fn crop_or_pad<T: Scalar>(x: &Tensor<T>, frames: usize, offset: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 2 || frames == 0 {
        return Err(Error::shape("crop_or_pad", format!("{shape:?} to {frames} frames")));
    }
    let (c, t) = (shape[0], shape[1]);
    let start = if t > frames { offset.min(t - frames) } else { 0 };
    let src = x.data();
    let mut out = Vec::with_capacity(c * frames);
    for ch in 0..c {
        let row = &src[ch * t..(ch + 1) * t];
        out.extend((0..frames).map(|i| row[(start + i) % t]));
    }
    Tensor::new([c, frames], out)
}

/// Deterministic per `(seed, split)`. Bona fide utterances come first, then
/// spoofs cycling through attack tags `A01..`; order is shuffled afterwards.
pub fn synth_generate<T: Scalar>(cfg: &SyntheticDataConfig, split: Split) -> Result<Dataset<T>> {
    cfg.validate()?;
    let n = cfg.size(split);
    let u = cfg.direction();
    let n_bona = ((n as f64) * cfg.bonafide_fraction).round() as usize;
    let mut rng = rng_for(cfg.seed, &format!("data.{split}"));
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let (key, attack, sign) = if i < n_bona {
            (Key::Bonafide, "-".to_string(), 1.0)
        } else {
            (Key::Spoof, format!("A{:02}", (i - n_bona) % cfg.n_attacks + 1), -1.0)
        };
        let raw_len = raw_length(cfg, &mut rng);
        let mut data = vec![0.0; cfg.dim * raw_len];
        for t in 0..raw_len {
            for (c, uc) in u.iter().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                data[c * raw_len + t] = sign * cfg.delta / 2.0 * uc + cfg.sigma * noise;
            }
        }
        let raw = Tensor::from_f64([cfg.dim, raw_len], &data)?;
        let offset = match split {
            Split::Train if raw_len > cfg.frames => rng.random_range(0..=raw_len - cfg.frames),
            _ => 0,
        };
        items.push(Utterance {
            id: format!("{split}_{i:05}"),
            key,
            attack,
            features: crop_or_pad(&raw, cfg.frames, offset)?,
        });
    }
    items.shuffle(&mut rng);
    Ok(Dataset { split, items })
}

fn raw_length(cfg: &SyntheticDataConfig, rng: &mut Rng) -> usize {
    if cfg.length_jitter == 0.0 {
        return cfg.frames;
    }
    let lo = ((cfg.frames as f64) * (1.0 - cfg.length_jitter)).floor().max(1.0) as usize;
    let hi = ((cfg.frames as f64) * (1.0 + cfg.length_jitter)).ceil() as usize;
    rng.random_range(lo..=hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDataConfig {
        SyntheticDataConfig {
            dim: 8,
            frames: 6,
            n_train: 20,
            n_dev: 10,
            n_eval: 10,
            delta: 4.0,
            length_jitter: 0.5,
            seed: 9,
            ..SyntheticDataConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed_and_split() {
        let a = synth_generate::<f64>(&small(), Split::Train).unwrap();
        let b = synth_generate::<f64>(&small(), Split::Train).unwrap();
        let c = synth_generate::<f64>(&small(), Split::Dev).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.features.data(), y.features.data());
        }
        assert_ne!(a.items[0].features.data(), c.items[0].features.data());
    }

    #[test]
    fn labels_and_tags() {
        let d = synth_generate::<f32>(&small(), Split::Eval).unwrap();
        let bona = d.items.iter().filter(|u| u.key == Key::Bonafide).count();
        assert_eq!(bona, 5);
        for u in &d.items {
            assert_eq!(u.features.shape(), [8, 6]);
            assert_eq!(u.key == Key::Bonafide, u.attack == "-");
        }
    }

    #[test]
    fn crop_and_pad() {
        let x = Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(crop_or_pad(&x, 7, 0).unwrap().data(), [1., 2., 3., 1., 2., 3., 1., 4., 5., 6., 4., 5., 6., 4.]);
        assert_eq!(crop_or_pad(&x, 2, 1).unwrap().data(), [2., 3., 5., 6.]);
        assert_eq!(crop_or_pad(&x, 2, 99).unwrap().data(), [2., 3., 5., 6.]);
        assert_eq!(crop_or_pad(&x, 3, 0).unwrap().data(), x.data());
    }

    #[test]
    fn direction_is_unit() {
        let u = small().direction();
        assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
