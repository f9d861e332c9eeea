//! Plain-loop reference computations shared by the integration tests.
//! Nothing here touches the tape; every value is recomputed from the
//! parameter store by name.
#![allow(dead_code)]

use std::path::PathBuf;

use nes2net_core::config::RunConfig;
use nes2net_core::models::{FusionNorm, Model, ModelConfig, Variant};
use nes2net_core::nn::{ParamStore, BN_EPS, POOL_EPS};
use nes2net_core::rng::rng_for;
use nes2net_core::Tensor;
use rand::Rng;

/// Channels × frames.
pub type M = Vec<Vec<f64>>;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_config(name: &str) -> RunConfig {
    RunConfig::load(&config_path(name)).unwrap()
}

pub fn random_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = rng_for(seed, "test.vec");
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_m(c: usize, t: usize, seed: u64) -> M {
    let v = random_vec(c * t, seed, -1.0, 1.0);
    v.chunks(t).map(<[f64]>::to_vec).collect()
}

pub fn to_tensor(x: &M) -> Tensor<f64> {
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    Tensor::from_f64([x.len(), x[0].len()], &flat).unwrap()
}

pub fn from_tensor(t: &Tensor<f64>) -> M {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &M, b: &M) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Reduced nested / baseline configs (N = 64) used throughout the tests.
pub fn small_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(variant);
    c.input_dim = 64;
    c.s1 = 4;
    c.s2 = 4;
    c.se_ratio = 4;
    c.pool_bottleneck = 8;
    c.reduced_dim = 16;
    c.blocks = 2;
    c.scale = 4;
    c
}

/// Replaces every constant-initialised tensor (biases, BN affine and
/// statistics, fusion weights) with random values so that no term of the
/// forward pass is trivially zero or one.
pub fn randomize(model: &mut Model<f64>, seed: u64) {
    let store = model.params_mut();
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        if name.ends_with(".weight") {
            continue;
        }
        let mut rng = rng_for(seed, &name);
        let shape = store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let (lo, hi) = if name.ends_with("running_var") || name.ends_with("gamma") {
            (0.5, 1.5)
        } else if name.ends_with("fusion") {
            (-1.5, 1.5)
        } else {
            (-0.3, 0.3)
        };
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        store.set(id, Tensor::from_f64(shape, &data).unwrap()).unwrap();
    }
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .value
        .data()
        .to_vec()
}

/// `W·x + b` per frame, triple loop.
pub fn linear(store: &ParamStore<f64>, name: &str, x: &M) -> M {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let (out, inp, t) = (b.len(), x.len(), x[0].len());
    assert_eq!(w.len(), out * inp);
    let mut y = vec![vec![0.0; t]; out];
    for o in 0..out {
        for f in 0..t {
            let mut acc = 0.0;
            for i in 0..inp {
                acc += w[o * inp + i] * x[i][f];
            }
            y[o][f] = acc + b[o];
        }
    }
    y
}

pub fn linear_vec(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let col: M = x.iter().map(|&v| vec![v]).collect();
    linear(store, name, &col).into_iter().map(|r| r[0]).collect()
}

/// Cross-correlation with zero "same" padding.
pub fn conv_raw(w: &[f64], c_out: usize, x: &M, k: usize, dil: usize) -> M {
    let (c_in, t) = (x.len(), x[0].len());
    let pad = dil * (k - 1) / 2;
    let mut y = vec![vec![0.0; t]; c_out];
    for o in 0..c_out {
        for f in 0..t {
            let mut acc = 0.0;
            for i in 0..c_in {
                for j in 0..k {
                    let src = f as isize + (j * dil) as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += w[(o * c_in + i) * k + j] * x[i][src as usize];
                    }
                }
            }
            y[o][f] = acc;
        }
    }
    y
}

pub fn conv(store: &ParamStore<f64>, name: &str, x: &M, k: usize, dil: usize) -> M {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let mut y = conv_raw(&w, b.len(), x, k, dil);
    for (row, bias) in y.iter_mut().zip(&b) {
        row.iter_mut().for_each(|v| *v += bias);
    }
    y
}

/// Batch norm; `train` uses per-channel statistics of `x` instead of the running ones.
pub fn bn(store: &ParamStore<f64>, name: &str, x: &M, train: bool) -> M {
    let gamma = param(store, &format!("{name}.gamma"));
    let beta = param(store, &format!("{name}.beta"));
    let rm = param(store, &format!("{name}.running_mean"));
    let rv = param(store, &format!("{name}.running_var"));
    x.iter()
        .enumerate()
        .map(|(c, row)| {
            let (m, v) = if train {
                let n = row.len() as f64;
                let m = row.iter().sum::<f64>() / n;
                (m, row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n)
            } else {
                (rm[c], rv[c])
            };
            row.iter().map(|a| (a - m) / (v + BN_EPS).sqrt() * gamma[c] + beta[c]).collect()
        })
        .collect()
}

pub fn relu(x: M) -> M {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn scale(a: &M, w: f64) -> M {
    a.iter().map(|r| r.iter().map(|x| w * x).collect()).collect()
}

pub fn split(x: &M, parts: usize) -> Vec<M> {
    x.chunks(x.len() / parts).map(<[Vec<f64>]>::to_vec).collect()
}

pub fn concat(parts: &[M]) -> M {
    parts.iter().flatten().cloned().collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Squeeze by time-mean, excite through two FC layers, gate every channel.
pub fn se(store: &ParamStore<f64>, name: &str, x: &M) -> M {
    let t = x[0].len() as f64;
    let squeeze: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / t).collect();
    let h: Vec<f64> = linear_vec(store, &format!("{name}.fc1"), &squeeze)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let g: Vec<f64> = linear_vec(store, &format!("{name}.fc2"), &h).into_iter().map(sigmoid).collect();
    x.iter().zip(&g).map(|(r, gc)| r.iter().map(|v| v * gc).collect()).collect()
}

/// Attentive statistics pooling with `σ = sqrt(Σα x² − μ² + eps)`.
pub fn pool(store: &ParamStore<f64>, name: &str, x: &M) -> Vec<f64> {
    let t = x[0].len();
    let att = linear(store, &format!("{name}.attn"), x);
    let att: M = att.into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
    let e = &linear(store, &format!("{name}.score"), &att)[0];
    let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().map(|v| (v - mx).exp()).sum();
    let alpha: Vec<f64> = e.iter().map(|v| (v - mx).exp() / z).collect();
    let mut mu = Vec::with_capacity(x.len());
    let mut sd = Vec::with_capacity(x.len());
    for row in x {
        let (mut m, mut m2) = (0.0, 0.0);
        for f in 0..t {
            m += alpha[f] * row[f];
            m2 += alpha[f] * row[f] * row[f];
        }
        mu.push(m);
        sd.push((m2 - m * m + POOL_EPS).sqrt());
    }
    mu.extend(sd);
    mu
}

fn block_group(store: &ParamStore<f64>, prefix: &str, x: &M, cfg: &ModelConfig, train: bool) -> M {
    let y = conv(store, &format!("{prefix}.conv"), x, cfg.kernel, cfg.dilation);
    relu(bn(store, &format!("{prefix}.bn"), &y, train))
}

/// Fusion weights as applied: raw, or softmax of the stored logits.
pub fn fusion_weights(store: &ParamStore<f64>, prefix: &str, norm: FusionNorm) -> (f64, f64) {
    let w = param(store, &format!("{prefix}.fusion"));
    match norm {
        FusionNorm::Unconstrained => (w[0], w[1]),
        FusionNorm::Softmax => {
            let m = w[0].max(w[1]);
            let (a, b) = ((w[0] - m).exp(), (w[1] - m).exp());
            (a / (a + b), b / (a + b))
        }
    }
}

/// Nested layer written out term by term:
/// `h = ReLU(BN(conv1x1(x)))`, `y₁ = h₁`, `y_j = M_j(h_j + y_{j−1})`
/// (or `M_j(w₀·h_j + w₁·y_{j−1})` with fusion), then SE and the residual.
pub fn nested_layer(store: &ParamStore<f64>, name: &str, x: &M, cfg: &ModelConfig, train: bool) -> M {
    let h = conv(store, &format!("{name}.conv_in"), x, 1, 1);
    let h = relu(bn(store, &format!("{name}.bn_in"), &h, train));
    let parts = split(&h, cfg.s2);
    let mut ys: Vec<M> = vec![parts[0].clone()];
    for j in 2..=cfg.s2 {
        let prefix = format!("{name}.groups.{j}");
        let prev = &ys[j - 2];
        let input = if cfg.variant == Variant::Nes2NetX {
            let (w0, w1) = fusion_weights(store, &prefix, cfg.fusion);
            add(&scale(&parts[j - 1], w0), &scale(prev, w1))
        } else {
            add(&parts[j - 1], prev)
        };
        ys.push(block_group(store, &prefix, &input, cfg, train));
    }
    let y = se(store, &format!("{name}.se"), &concat(&ys));
    add(&y, x)
}

/// Standard SE-Res2Net block; group 2 sees its own subset only.
pub fn res2net_block(store: &ParamStore<f64>, name: &str, x: &M, cfg: &ModelConfig, train: bool) -> M {
    let h = conv(store, &format!("{name}.conv_in"), x, 1, 1);
    let h = relu(bn(store, &format!("{name}.bn_in"), &h, train));
    let parts = split(&h, cfg.scale);
    let mut ys: Vec<M> = vec![parts[0].clone()];
    for j in 2..=cfg.scale {
        let prefix = format!("{name}.groups.{j}");
        let input = if j == 2 { parts[1].clone() } else { add(&parts[j - 1], &ys[j - 2]) };
        ys.push(block_group(store, &prefix, &input, cfg, train));
    }
    let y = conv(store, &format!("{name}.conv_out"), &concat(&ys), 1, 1);
    let y = relu(bn(store, &format!("{name}.bn_out"), &y, train));
    let y = se(store, &format!("{name}.se"), &y);
    add(&y, x)
}

/// Trunk output before pooling.
pub fn trunk(model: &Model<f64>, x: &M, train: bool) -> M {
    let cfg = model.config();
    let store = model.params();
    match cfg.variant {
        Variant::Nes2Net | Variant::Nes2NetX => {
            let xs = split(x, cfg.s1);
            let mut ys = vec![xs[0].clone()];
            for i in 2..=cfg.s1 {
                let input = if i == 2 { xs[1].clone() } else { add(&xs[i - 1], &ys[i - 2]) };
                ys.push(nested_layer(store, &format!("nested.{i}"), &input, cfg, train));
            }
            concat(&ys)
        }
        Variant::Res2NetDr | Variant::Res2NetWoDr => {
            let mut h = if cfg.variant == Variant::Res2NetDr { linear(store, "dr", x) } else { x.clone() };
            for b in 1..=cfg.blocks {
                h = res2net_block(store, &format!("blocks.{b}"), &h, cfg, train);
            }
            h
        }
    }
}

pub fn logits(model: &Model<f64>, x: &M, train: bool) -> Vec<f64> {
    let h = trunk(model, x, train);
    let e = pool(model.params(), "pool", &h);
    linear_vec(model.params(), "classifier", &e)
}
