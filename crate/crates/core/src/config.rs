//! Line-oriented run configuration: `[section]` headers, `key = value` lines, `#` comments.
//!
//! Sections: `[model]` (required), `[train]`, `[data]` and `[eval]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::DcfParams;
use crate::models::{ModelConfig, Variant};
use crate::profile::REFERENCE_FRAMES;
use crate::train::{
    CosineCycleSchedule, FocalLossConfig, LossConfig, OptimizerConfig, Selection, SyntheticDataConfig, TrainConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub dcf: DcfParams,
    /// Frames used by `profile`.
    pub frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { dcf: DcfParams::default(), frames: REFERENCE_FRAMES }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Seeds inside are placeholders; callers derive them from the run seed.
    pub train: Option<TrainConfig>,
    pub data: Option<SyntheticDataConfig>,
    pub eval: EvalConfig,
}

const MODEL_KEYS: &[&str] = &[
    "variant", "input_dim", "s1", "s2", "blocks", "scale", "reduced_dim", "kernel", "dilation", "se_ratio",
    "pool_bottleneck", "num_classes", "fusion",
];
const TRAIN_KEYS: &[&str] = &[
    "epochs", "batch_size", "optimizer", "lr_max", "lr_min", "cycle_length", "weight_decay", "beta1", "beta2",
    "eps", "loss", "focal_gamma", "focal_alpha", "class_weights", "top_k", "patience", "selection",
];
const DATA_KEYS: &[&str] = &[
    "frames", "delta", "sigma", "n_attacks", "bonafide_fraction", "length_jitter", "n_train", "n_dev", "n_eval",
];
const EVAL_KEYS: &[&str] = &["p_target", "c_miss", "c_fa", "frames"];

struct Value {
    text: String,
    line: usize,
}

struct Section<'a> {
    name: &'static str,
    path: &'a Path,
    values: BTreeMap<String, Value>,
}

impl Section<'_> {
    fn err(&self, line: usize, msg: String) -> Error {
        Error::Parse { path: self.path.to_path_buf(), line, msg }
    }

    fn parse<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.values
            .get(key)
            .map(|v| {
                v.text
                    .parse()
                    .map_err(|_| self.err(v.line, format!("[{}] {key}: cannot parse {:?}", self.name, v.text)))
            })
            .transpose()
    }

    fn get<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn required<V: FromStr>(&self, key: &str) -> Result<V> {
        self.parse(key)?
            .ok_or_else(|| Error::config(format!("[{}] {key} is required", self.name)))
    }

    /// `none` maps to `None`.
    fn optional<V: FromStr>(&self, key: &str, default: Option<V>) -> Result<Option<V>> {
        match self.values.get(key) {
            Some(v) if v.text == "none" => Ok(None),
            Some(_) => self.parse(key),
            None => Ok(default),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut sections: BTreeMap<&'static str, Section> = BTreeMap::new();
        let mut current: Option<&'static str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Parse { path: PathBuf::from(path), line: line_no, msg };
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = match name.trim() {
                    "model" => "model",
                    "train" => "train",
                    "data" => "data",
                    "eval" => "eval",
                    other => return Err(err(format!("unknown section [{other}]"))),
                };
                if sections.contains_key(name) {
                    return Err(err(format!("duplicate section [{name}]")));
                }
                sections.insert(name, Section { name, path, values: BTreeMap::new() });
                current = Some(name);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let section = current.ok_or_else(|| err("key outside of a section".into()))?;
            let allowed = match section {
                "model" => MODEL_KEYS,
                "train" => TRAIN_KEYS,
                "data" => DATA_KEYS,
                _ => EVAL_KEYS,
            };
            if !allowed.contains(&k) {
                return Err(err(format!("unknown key {k:?} in [{section}]")));
            }
            if v.is_empty() {
                return Err(err(format!("empty value for {k:?}")));
            }
            let values = &mut sections.get_mut(section).expect("section registered").values;
            if values.insert(k.to_string(), Value { text: v.to_string(), line: line_no }).is_some() {
                return Err(err(format!("duplicate key {k:?} in [{section}]")));
            }
        }

        let model_sec = sections
            .get("model")
            .ok_or_else(|| Error::config(format!("{}: missing [model] section", path.display())))?;
        let model = parse_model(model_sec)?;
        let train = sections.get("train").map(parse_train).transpose()?;
        let data = sections.get("data").map(|s| parse_data(s, model.input_dim)).transpose()?;
        let eval = match sections.get("eval") {
            Some(s) => parse_eval(s)?,
            None => EvalConfig::default(),
        };
        Ok(Self { model, train, data, eval })
    }
}

fn parse_model(s: &Section) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        variant: s.required::<Variant>("variant")?,
        input_dim: s.get("input_dim", d.input_dim)?,
        s1: s.get("s1", d.s1)?,
        s2: s.get("s2", d.s2)?,
        blocks: s.get("blocks", d.blocks)?,
        scale: s.get("scale", d.scale)?,
        reduced_dim: s.get("reduced_dim", d.reduced_dim)?,
        kernel: s.get("kernel", d.kernel)?,
        dilation: s.get("dilation", d.dilation)?,
        se_ratio: s.get("se_ratio", d.se_ratio)?,
        pool_bottleneck: s.get("pool_bottleneck", d.pool_bottleneck)?,
        num_classes: s.get("num_classes", d.num_classes)?,
        fusion: s.get("fusion", d.fusion)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Pair([f64; 2]);

impl FromStr for Pair {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let (a, b) = s.split_once(',').ok_or(())?;
        Ok(Pair([a.trim().parse().map_err(|_| ())?, b.trim().parse().map_err(|_| ())?]))
    }
}

fn parse_train(s: &Section) -> Result<TrainConfig> {
    let od = OptimizerConfig::default();
    let fd = FocalLossConfig::default();
    let optimizer = OptimizerConfig {
        kind: s.get("optimizer", od.kind)?,
        beta1: s.get("beta1", od.beta1)?,
        beta2: s.get("beta2", od.beta2)?,
        eps: s.get("eps", od.eps)?,
        weight_decay: s.get("weight_decay", od.weight_decay)?,
    };
    let schedule = CosineCycleSchedule {
        eta_max: s.get("lr_max", 1e-6)?,
        eta_min: s.get("lr_min", 1e-9)?,
        cycle_length: s.required("cycle_length")?,
    };
    let loss = match s.get("loss", "focal".to_string())?.as_str() {
        "focal" => LossConfig::Focal(FocalLossConfig {
            gamma: s.get("focal_gamma", fd.gamma)?,
            alpha: s.optional("focal_alpha", fd.alpha)?,
        }),
        "weighted_ce" => LossConfig::WeightedCe(s.get("class_weights", Pair([1.0, 1.0]))?.0),
        other => return Err(Error::config(format!("[train] unknown loss {other:?}"))),
    };
    let cfg = TrainConfig {
        epochs: s.required("epochs")?,
        batch_size: s.get("batch_size", 32)?,
        optimizer,
        schedule,
        loss,
        top_k: s.get("top_k", 3)?,
        patience: s.optional("patience", None)?,
        selection: s.get("selection", Selection::BestDev)?,
        seed: 0,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_data(s: &Section, dim: usize) -> Result<SyntheticDataConfig> {
    let d = SyntheticDataConfig::default();
    let cfg = SyntheticDataConfig {
        dim,
        frames: s.get("frames", d.frames)?,
        delta: s.get("delta", d.delta)?,
        sigma: s.get("sigma", d.sigma)?,
        n_attacks: s.get("n_attacks", d.n_attacks)?,
        bonafide_fraction: s.get("bonafide_fraction", d.bonafide_fraction)?,
        length_jitter: s.get("length_jitter", d.length_jitter)?,
        n_train: s.get("n_train", d.n_train)?,
        n_dev: s.get("n_dev", d.n_dev)?,
        n_eval: s.get("n_eval", d.n_eval)?,
        seed: 0,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_eval(s: &Section) -> Result<EvalConfig> {
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        dcf: DcfParams {
            p_target: s.get("p_target", d.dcf.p_target)?,
            c_miss: s.get("c_miss", d.dcf.c_miss)?,
            c_fa: s.get("c_fa", d.dcf.c_fa)?,
        },
        frames: s.get("frames", d.frames)?,
    };
    cfg.dcf.validate().map_err(|e| Error::config(e.to_string()))?;
    if cfg.frames == 0 {
        return Err(Error::config("[eval] frames must be >= 1"));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("test.cfg"))
    }

    #[test]
    fn minimal_model_section() {
        let c = parse("[model]\nvariant = nes2net_x  # trailing comment\n").unwrap();
        assert_eq!(c.model.variant, Variant::Nes2NetX);
        assert_eq!(c.model.s1, 8);
        assert!(c.train.is_none() && c.data.is_none());
        assert_eq!(c.eval.frames, 200);
    }

    #[test]
    fn full_document() {
        let text = "\
# toy run
[model]
variant = nes2net
input_dim = 64
s1 = 4
s2 = 4
se_ratio = 4
pool_bottleneck = 16

[train]
epochs = 3
cycle_length = 5
lr_max = 1e-3
optimizer = adam
focal_alpha = none
patience = 2
selection = min_lr_window

[data]
frames = 50
delta = 3.5

[eval]
p_target = 0.01
";
        let c = parse(text).unwrap();
        let t = c.train.unwrap();
        assert_eq!(t.epochs, 3);
        assert_eq!(t.schedule.eta_max, 1e-3);
        assert_eq!(t.patience, Some(2));
        assert_eq!(t.selection, Selection::MinLrWindow);
        assert_eq!(t.loss, LossConfig::Focal(FocalLossConfig { gamma: 2.0, alpha: None }));
        let d = c.data.unwrap();
        assert_eq!((d.dim, d.frames, d.delta), (64, 50, 3.5));
        assert_eq!(c.eval.dcf.p_target, 0.01);
    }

    #[test]
    fn rejects_bad_documents() {
        for (text, needle) in [
            ("[model]\nvariant = nes2net\nwidth = 3\n", "unknown key"),
            ("[model]\nvariant = nes2net\n[extra]\n", "unknown section"),
            ("variant = nes2net\n", "outside"),
            ("[model]\nvariant = nes2net\ns1 = x\n", "cannot parse"),
            ("[model]\nvariant = nes2net\ns1 = 3\n", "s1"),
            ("[train]\nepochs = 1\n", "[model]"),
            ("[model]\nvariant = nes2net\n[train]\nepochs = 2\n", "cycle_length"),
            ("[model]\nvariant = nes2net\nvariant = nes2net\n", "duplicate"),
            ("[model]\nvariant = resnet\n", "variant"),
        ] {
            let e = parse(text).unwrap_err();
            assert!(e.is_usage(), "{e}");
            assert!(e.to_string().contains(needle), "{needle}: {e}");
        }
    }

    #[test]
    fn weighted_ce_weights() {
        let c = parse("[model]\nvariant = nes2net\n[train]\nepochs = 1\ncycle_length = 1\nloss = weighted_ce\nclass_weights = 0.9, 0.1\n")
            .unwrap();
        assert_eq!(c.train.unwrap().loss, LossConfig::WeightedCe([0.9, 0.1]));
    }
}
