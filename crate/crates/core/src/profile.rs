//! Parameter and multiply-accumulate accounting.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::{Mode, Session};
use crate::rng::uniform_tensor;
use crate::tape::Tape;
use crate::tensor::Scalar;

/// Frame count used for the reference cost figures.
pub const REFERENCE_FRAMES: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub frames: usize,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    /// Running statistics, excluded from `total_params`.
    pub total_buffers: u64,
    pub total_macs: u64,
    /// Dimensionality-reduction layer, when the model has one.
    pub dr_layer: Option<String>,
    pub dr_params_share: f64,
    pub dr_macs_share: f64,
}

fn check_frames(frames: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::invalid("frames must be >= 1"));
    }
    Ok(())
}

/// Trainable parameter count per layer.
pub fn count_params<T: Scalar>(model: &Model<T>) -> Vec<CostRow> {
    model
        .cost_rows(1)
        .into_iter()
        .map(|c| CostRow { layer: c.name, params: c.params, macs: 0 })
        .collect()
}

/// MAC count per layer at `frames` frames.
pub fn count_macs<T: Scalar>(model: &Model<T>, frames: usize) -> Result<Vec<CostRow>> {
    check_frames(frames)?;
    Ok(model
        .cost_rows(frames)
        .into_iter()
        .map(|c| CostRow { layer: c.name, params: 0, macs: c.macs })
        .collect())
}

pub fn profile<T: Scalar>(model: &Model<T>, frames: usize) -> Result<CostReport> {
    check_frames(frames)?;
    let costs = model.cost_rows(frames);
    let total_buffers = costs.iter().map(|c| c.buffers).sum();
    let rows = costs
        .into_iter()
        .map(|c| CostRow { layer: c.name, params: c.params, macs: c.macs })
        .collect();
    let dr = model.dr_layer().map(|l| l.name.clone());
    Ok(CostReport::from_rows(frames, rows, total_buffers, dr.as_deref()))
}

impl CostReport {
    pub fn from_rows(frames: usize, rows: Vec<CostRow>, total_buffers: u64, dr_layer: Option<&str>) -> Self {
        let total_params: u64 = rows.iter().map(|r| r.params).sum();
        let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
        let (dr_p, dr_m) = dr_layer
            .and_then(|name| rows.iter().find(|r| r.layer == name))
            .map_or((0, 0), |r| (r.params, r.macs));
        let share = |part: u64, total: u64| if total == 0 { 0.0 } else { part as f64 / total as f64 };
        Self {
            frames,
            total_params,
            total_buffers,
            total_macs,
            dr_layer: dr_layer.map(str::to_string),
            dr_params_share: share(dr_p, total_params),
            dr_macs_share: share(dr_m, total_macs),
            rows,
        }
    }

    pub fn mmacs(&self) -> f64 {
        self.total_macs as f64 / 1e6
    }

    fn dr_row(&self) -> Option<&CostRow> {
        let name = self.dr_layer.as_deref()?;
        self.rows.iter().find(|r| r.layer == name)
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>14}  {:>9}", "layer", "params", "MACs", "MMACs");
        let line = |out: &mut String, name: &str, p: u64, m: u64| {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>12}  {:>14}  {:>9.4}",
                group_digits(p),
                group_digits(m),
                m as f64 / 1e6
            );
        };
        for r in &self.rows {
            line(&mut out, &r.layer, r.params, r.macs);
        }
        let _ = writeln!(out, "{}", "-".repeat(width + 43));
        line(&mut out, "total", self.total_params, self.total_macs);
        let _ = writeln!(out, "frames: {}  buffers: {}", self.frames, group_digits(self.total_buffers));
        if let Some(r) = self.dr_row() {
            let _ = writeln!(
                out,
                "DR layer {}: {:.1}% of params, {:.1}% of MACs",
                r.layer,
                100.0 * self.dr_params_share,
                100.0 * self.dr_macs_share
            );
        }
        out
    }

    /// One `layer<TAB>params<TAB>macs` line per row, after `#` header lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# frames\t{}", self.frames);
        let _ = writeln!(out, "# buffers\t{}", self.total_buffers);
        if let Some(r) = self.dr_row() {
            let _ = writeln!(out, "# dr\t{}", r.layer);
        }
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.layer, r.params, r.macs);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut frames = None;
        let mut buffers = 0;
        let mut dr = None;
        let mut rows = Vec::new();
        let bad = |line: usize, msg: String| Error::Parse { path: "<tsv>".into(), line, msg };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta.split_once('\t').ok_or_else(|| bad(i + 1, "bad header".into()))?;
                match k {
                    "frames" => frames = Some(v.parse().map_err(|e| bad(i + 1, format!("{e}")))?),
                    "buffers" => buffers = v.parse().map_err(|e| bad(i + 1, format!("{e}")))?,
                    "dr" => dr = Some(v.to_string()),
                    _ => {}
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, format!("expected 3 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| bad(i + 1, format!("{s:?}: {e}")));
            rows.push(CostRow { layer: f[0].to_string(), params: num(f[1])?, macs: num(f[2])? });
        }
        let frames = frames.ok_or_else(|| bad(0, "missing frames header".into()))?;
        Ok(Self::from_rows(frames, rows, buffers, dr.as_deref()))
    }
}

fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCheck {
    pub layer: String,
    pub analytic: u64,
    pub instrumented: u64,
}

impl LayerCheck {
    pub fn discrepancy(&self) -> u64 {
        self.analytic.abs_diff(self.instrumented)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub layers: Vec<LayerCheck>,
    pub analytic_total: u64,
    pub instrumented_total: u64,
    /// Enumerated trainable scalars in the parameter store.
    pub store_params: u64,
    pub analytic_params: u64,
}

impl VerifyReport {
    pub fn max_discrepancy(&self) -> u64 {
        self.layers
            .iter()
            .map(LayerCheck::discrepancy)
            .chain([
                self.analytic_total.abs_diff(self.instrumented_total),
                self.analytic_params.abs_diff(self.store_params),
            ])
            .max()
            .unwrap_or(0)
    }

    pub fn offending(&self) -> impl Iterator<Item = &LayerCheck> {
        self.layers.iter().filter(|l| l.discrepancy() > 0)
    }
}

/// Runs an instrumented forward pass and compares its multiply counter,
/// layer by layer, with the analytic count.
pub fn verify_counts<T: Scalar>(model: &Model<T>, frames: usize) -> Result<VerifyReport> {
    check_frames(frames)?;
    let x = uniform_tensor::<T>(&[model.config().input_dim, frames], 0x5eed, "verify_counts")?;

    let mut tape = Tape::<T>::inference();
    let mut s = Session::new(&mut tape, model.params(), Mode::Eval);
    let xv = s.tape.constant(x);
    model.forward(&mut s, xv)?;
    let measured: HashMap<&str, u64> = s.layer_macs().iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let instrumented_total = s.tape.macs();

    let costs = model.cost_rows(frames);
    let mut layers: Vec<LayerCheck> = costs
        .iter()
        .map(|c| LayerCheck {
            layer: c.name.clone(),
            analytic: c.macs,
            instrumented: measured.get(c.name.as_str()).copied().unwrap_or(0),
        })
        .collect();
    for (name, &m) in &measured {
        if !costs.iter().any(|c| c.name == *name) {
            layers.push(LayerCheck { layer: name.to_string(), analytic: 0, instrumented: m });
        }
    }
    Ok(VerifyReport {
        analytic_total: costs.iter().map(|c| c.macs).sum(),
        instrumented_total,
        store_params: model.params().num_trainable() as u64,
        analytic_params: costs.iter().map(|c| c.params).sum(),
        layers,
    })
}
