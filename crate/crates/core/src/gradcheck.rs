//! Central-difference verification of tape gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::Key;
use crate::models::Model;
use crate::nn::{Mode, Session};
use crate::tape::{GradFault, Tape, Var};
use crate::train::LossConfig;
use crate::tensor::Tensor;

pub const MIN_EPS: f64 = 1e-7;
pub const MAX_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Injected into the analytic tape only.
    pub fault: Option<GradFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Same maximum, per input tensor.
    pub per_input: Vec<f64>,
    /// (input, coordinate) of the worst error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink even at the
    /// smallest step; these have no two-sided derivative and are skipped.
    pub kink_skips: usize,
}

pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    grad_check_with(
        f,
        inputs,
        &GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    if !(MIN_EPS..=MAX_EPS).contains(&opts.eps) {
        return Err(Error::invalid(format!(
            "eps {} outside [{MIN_EPS}, {MAX_EPS}]",
            opts.eps
        )));
    }

    let mut tape = Tape::new().track_kinks().with_fault(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::invalid("grad_check needs a scalar-valued function"));
    }
    let signature = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<(f64, u64)> {
        let mut tape = Tape::inference().track_kinks();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut p = t.clone();
                    p.data_mut()[coord] += delta;
                    tape.param(p)
                } else {
                    tape.param(t.clone())
                }
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).data()[0], tape.kink_signature()))
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();

    // (input, coord, error or None when skipped at a kink)
    let results: Vec<(usize, usize, Option<f64>)> = coords
        .par_iter()
        .map(|&(i, j)| -> Result<_> {
            let a = analytic[i].data()[j];
            let mut h = opts.eps;
            loop {
                let (plus, sp) = eval(i, j, h)?;
                let (minus, sm) = eval(i, j, -h)?;
                if sp == signature && sm == signature {
                    let numeric = (plus - minus) / (2.0 * h);
                    return Ok((i, j, Some((a - numeric).abs() / a.abs().max(1.0))));
                }
                h /= 10.0;
                if h < MIN_EPS {
                    return Ok((i, j, None));
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        worst: None,
        checked: 0,
        kink_skips: 0,
    };
    for (i, j, err) in results {
        match err {
            Some(e) => {
                report.checked += 1;
                report.per_input[i] = report.per_input[i].max(e);
                if e > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(e);
                    report.worst = Some((i, j));
                }
            }
            None => report.kink_skips += 1,
        }
    }
    Ok(report)
}

/// Gradient check of a whole model: forward in training mode, then the loss.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Name of each checked tensor: trainable parameters, then `input`.
    pub names: Vec<String>,
}

impl ModelGradCheck {
    /// Maximum error per layer (parameter name without its last component), in model order.
    pub fn per_layer(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for (name, &e) in self.names.iter().zip(&self.report.per_input) {
            let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
            match out.last_mut() {
                Some((l, m)) if l == layer => *m = m.max(e),
                _ => out.push((layer.to_string(), e)),
            }
        }
        out
    }
}

pub fn model_grad_check(
    model: &Model<f64>,
    x: &Tensor<f64>,
    label: Key,
    loss: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<ModelGradCheck> {
    let store = model.params();
    let mut inputs: Vec<Tensor<f64>> = store.trainable().map(|(_, p)| p.value.clone()).collect();
    let mut names: Vec<String> = store.trainable().map(|(_, p)| p.name.clone()).collect();
    inputs.push(x.clone());
    names.push("input".into());
    let n = inputs.len() - 1;
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let mut s = Session::with_trainable(tape, store, &vars[..n], Mode::Train)?;
        let logits = model.forward(&mut s, vars[n])?;
        loss.apply(s.tape, logits, label)
    };
    let report = grad_check_with(f, &inputs, opts)?;
    Ok(ModelGradCheck { report, names })
}
