use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{compute_eer, ScoreSet, Trial};
use crate::models::Model;
use crate::nn::{apply_stat_updates, Mode, Session, StatUpdate};
use crate::rng::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::train::checkpoint::Checkpoint;
use crate::train::data::{Dataset, Utterance};
use crate::train::loss::LossConfig;
use crate::train::optim::{OptimizerConfig, OptimizerState};
use crate::train::schedule::CosineCycleSchedule;

/// Which retained checkpoint becomes the final model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Lowest dev EER (ties: lower dev loss, then earlier epoch).
    BestDev,
    /// Best dev EER among the lowest-rate epoch of each cycle and its two neighbours.
    MinLrWindow,
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best_dev" => Ok(Selection::BestDev),
            "min_lr_window" => Ok(Selection::MinLrWindow),
            _ => Err(Error::config(format!("unknown selection strategy {s:?}"))),
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::BestDev => "best_dev",
            Selection::MinLrWindow => "min_lr_window",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: CosineCycleSchedule,
    pub loss: LossConfig,
    /// Number of best dev checkpoints to keep.
    pub top_k: usize,
    /// Stop after this many epochs without a dev improvement.
    pub patience: Option<usize>,
    pub selection: Selection,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.top_k == 0 {
            return Err(Error::config("batch_size and top_k must be >= 1"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience must be >= 1"));
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_eer: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tlr\ttrain_loss\tdev_loss\tdev_eer";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.9}\t{:.9}\t{:.6}",
            self.epoch, self.lr, self.train_loss, self.dev_loss, self.dev_eer
        )
    }

    fn rank_key(&self) -> (f64, f64, usize) {
        (self.dev_eer, self.dev_loss, self.epoch)
    }

    fn better_than(&self, other: &EpochLog) -> bool {
        let (a, b) = (self.rank_key(), other.rank_key());
        a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
    }
}

#[derive(Debug, Clone)]
pub struct Retained {
    pub log: EpochLog,
    pub checkpoint: Checkpoint,
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    /// The selected model (unchanged input when no epoch ran).
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    /// Best dev checkpoints, best first.
    pub top: Vec<Retained>,
    pub selected_epoch: Option<usize>,
    pub stopped_early: bool,
}

struct UttResult<T> {
    loss: f64,
    grads: Vec<Vec<T>>,
    stats: Vec<StatUpdate<T>>,
}

fn utterance_step<T: Scalar>(model: &Model<T>, u: &Utterance<T>, loss: &LossConfig) -> Result<UttResult<T>> {
    let ids = model.params().trainable_ids();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, model.params(), Mode::Train);
    let x = s.tape.constant(u.features.clone());
    let logits = model.forward(&mut s, x)?;
    let l = loss.apply(s.tape, logits, u.key)?;
    let stats = s.take_stat_updates();
    let vars: Vec<Var> = ids.iter().map(|&id| s.var(id)).collect();
    drop(s);
    let value = tape.value(l).data()[0].to_f64();
    let g = tape.backward(l)?;
    Ok(UttResult {
        loss: value,
        grads: vars.iter().map(|&v| g.get(v).into_vec()).collect(),
        stats,
    })
}

/// Running-statistic update for a batch: per-utterance statistics averaged per layer.
fn mean_stats<T: Scalar>(results: &[UttResult<T>]) -> Vec<StatUpdate<T>> {
    let n = T::from_usize(results.len());
    let mut acc = results[0].stats.clone();
    for r in &results[1..] {
        for (a, u) in acc.iter_mut().zip(&r.stats) {
            a.batch_mean.iter_mut().zip(&u.batch_mean).for_each(|(x, y)| *x += *y);
            a.batch_var.iter_mut().zip(&u.batch_var).for_each(|(x, y)| *x += *y);
        }
    }
    for a in &mut acc {
        a.batch_mean.iter_mut().for_each(|x| *x = *x / n);
        a.batch_var.iter_mut().for_each(|x| *x = *x / n);
    }
    acc
}

/// Scores every utterance in eval mode; also returns the mean loss.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>, loss: &LossConfig) -> Result<(ScoreSet, f64)> {
    let rows = data
        .items
        .par_iter()
        .map(|u| {
            let mut tape = Tape::inference();
            let mut s = Session::new(&mut tape, model.params(), Mode::Eval);
            let x = s.tape.constant(u.features.clone());
            let logits = model.forward(&mut s, x)?;
            let l = loss.apply(s.tape, logits, u.key)?;
            let z = s.tape.value(logits).data();
            let score = (z[0] - z[1]).to_f64();
            Ok((Trial::new(u.id.clone(), u.attack.clone(), u.key, score), s.tape.value(l).data()[0].to_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_loss = rows.iter().map(|r| r.1).sum::<f64>() / rows.len().max(1) as f64;
    Ok((ScoreSet::new(rows.into_iter().map(|r| r.0).collect())?, mean_loss))
}

fn diverged(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged { epoch, step, loss }
}

/// Mini-batch training. Per-utterance gradients run in parallel and are
/// reduced in a fixed order, so results depend only on the seed.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &Dataset<T>,
    dev_set: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cfg.epochs > 0 && train_set.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {} training utterances",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let mut model = model;
    let initial = model.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, model.params())?;
    let mut log = Vec::new();
    let mut top: Vec<Retained> = Vec::new();
    let mut window: BTreeMap<usize, Retained> = BTreeMap::new();
    let mut best: Option<EpochLog> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let in_window = |e: usize| {
        (e.saturating_sub(1)..=e + 1).any(|m| cfg.schedule.is_cycle_minimum(m) && m < cfg.epochs)
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle.{epoch}")));
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (step, batch) in order.chunks_exact(cfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| utterance_step(&model, &train_set.items[i], &cfg.loss))
                .collect::<Vec<_>>();
            let results = results
                .into_iter()
                .map(|r| match r {
                    Err(Error::NonFinite { .. }) => Err(diverged(epoch, step, f64::NAN)),
                    other => other,
                })
                .collect::<Result<Vec<_>>>()?;
            let batch_loss: f64 = results.iter().map(|r| r.loss).sum();
            if !batch_loss.is_finite() {
                return Err(diverged(epoch, step, batch_loss));
            }
            let inv = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = results[0]
                .grads
                .iter()
                .map(|g| g.iter().map(|x| x.to_f64()).collect())
                .collect();
            for r in &results[1..] {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, x)| *a += x.to_f64());
                }
            }
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            opt.step(model.params_mut(), &grads, lr)?;
            apply_stat_updates(model.params_mut(), &mean_stats(&results));
            loss_sum += batch_loss;
            count += batch.len();
        }
        let (scores, dev_loss) = evaluate(&model, dev_set, &cfg.loss)?;
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / count.max(1) as f64,
            dev_loss,
            dev_eer: compute_eer(&scores)?.eer,
        };
        on_epoch(&entry)?;

        let retained = || {
            let mut ck = Checkpoint::from_model(&model);
            ck.metadata.insert("epoch".into(), epoch.to_string());
            ck.metadata.insert("dev_eer".into(), format!("{:.6}", entry.dev_eer));
            ck.metadata.insert("dev_loss".into(), format!("{:.9}", entry.dev_loss));
            Retained { log: entry.clone(), checkpoint: ck }
        };
        let pos = top.iter().position(|r| entry.better_than(&r.log)).unwrap_or(top.len());
        if pos < cfg.top_k {
            top.insert(pos, retained());
            top.truncate(cfg.top_k);
        }
        if cfg.selection == Selection::MinLrWindow && in_window(epoch) {
            window.insert(epoch, retained());
        }
        if best.as_ref().is_none_or(|b| entry.better_than(b)) {
            best = Some(entry.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        log.push(entry);
        if cfg.patience.is_some_and(|p| stale >= p) {
            stopped_early = true;
            break;
        }
    }

    let chosen = match cfg.selection {
        Selection::MinLrWindow if !window.is_empty() => window
            .values()
            .reduce(|a, b| if b.log.better_than(&a.log) { b } else { a }),
        _ => top.first(),
    };
    let selected_epoch = chosen.map(|r| r.log.epoch);
    let model = match chosen {
        Some(r) => {
            let mut m = initial;
            r.checkpoint.load_into(&mut m)?;
            m
        }
        None => initial,
    };
    Ok(TrainOutcome { model, log, top, selected_epoch, stopped_early })
}
