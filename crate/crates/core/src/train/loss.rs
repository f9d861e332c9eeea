use crate::error::{Error, Result};
use crate::metrics::Key;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Class index of a key; bona fide is the positive class 0.
pub fn class_index(key: Key) -> usize {
    match key {
        Key::Bonafide => 0,
        Key::Spoof => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLossConfig {
    pub gamma: f64,
    /// Weight of the bona fide class; spoof gets `1 − alpha`. `None` weights both by 1.
    pub alpha: Option<f64>,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: Some(0.25) }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config(format!("focal alpha must be in (0, 1], got {a}")));
            }
        }
        Ok(())
    }

    fn weight(&self, key: Key) -> f64 {
        match (self.alpha, key) {
            (None, _) => 1.0,
            (Some(a), Key::Bonafide) => a,
            (Some(a), Key::Spoof) => 1.0 - a,
        }
    }
}

fn check_logits<T: Scalar>(tape: &Tape<T>, logits: Var) -> Result<()> {
    if tape.shape(logits) != [2] {
        return Err(Error::shape("loss", format!("logits {:?}, expected [2]", tape.shape(logits))));
    }
    if !tape.value(logits).all_finite() {
        return Err(Error::NonFinite { op: "loss logits" });
    }
    Ok(())
}

/// `−w·(1 − p_t)^γ·log p_t` with `p_t` the softmax probability of the true class.
pub fn focal_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, label: Key, cfg: &FocalLossConfig) -> Result<Var> {
    cfg.validate()?;
    check_logits(tape, logits)?;
    let logp = tape.log_softmax(logits, 0)?;
    let log_pt = tape.slice0(logp, class_index(label), 1)?;
    let ce = if cfg.gamma == 0.0 {
        log_pt
    } else {
        let pt = tape.exp(log_pt)?;
        let miss = tape.scale(pt, -1.0)?;
        let miss = tape.offset(miss, 1.0)?;
        let modulator = tape.powf(miss, cfg.gamma)?;
        tape.mul(modulator, log_pt)?
    };
    tape.scale(ce, -cfg.weight(label))
}

/// `−w_label·log softmax(logits)_label`.
pub fn weighted_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, label: Key, weights: [f64; 2]) -> Result<Var> {
    if !weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
        return Err(Error::config(format!("class weights must be positive, got {weights:?}")));
    }
    check_logits(tape, logits)?;
    let c = class_index(label);
    let logp = tape.log_softmax(logits, 0)?;
    let lp = tape.slice0(logp, c, 1)?;
    tape.scale(lp, -weights[c])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossConfig {
    Focal(FocalLossConfig),
    WeightedCe([f64; 2]),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::Focal(FocalLossConfig::default())
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossConfig::Focal(f) => f.validate(),
            LossConfig::WeightedCe(w) if w.iter().all(|w| *w > 0.0 && w.is_finite()) => Ok(()),
            LossConfig::WeightedCe(w) => Err(Error::config(format!("class weights must be positive, got {w:?}"))),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, logits: Var, label: Key) -> Result<Var> {
        match self {
            LossConfig::Focal(f) => focal_loss(tape, logits, label, f),
            LossConfig::WeightedCe(w) => weighted_ce(tape, logits, label, *w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, logits: [f64; 2]) -> f64 {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::vector(logits.to_vec()));
        let y = f(&mut tape, l).unwrap();
        tape.value(y).data()[0]
    }

    #[test]
    fn focal_at_zero_logits() {
        let v = eval(|t, l| focal_loss(t, l, Key::Bonafide, &FocalLossConfig::default()), [0.0, 0.0]);
        let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.043321).abs() < 1e-6);
    }

    #[test]
    fn confident_prediction_costs_nothing() {
        let v = eval(|t, l| focal_loss(t, l, Key::Spoof, &FocalLossConfig::default()), [-40.0, 40.0]);
        assert!(v.abs() < 1e-30);
    }

    #[test]
    fn ce_at_zero_logits_is_ln2() {
        let v = eval(|t, l| weighted_ce(t, l, Key::Spoof, [1.0, 1.0]), [0.0, 0.0]);
        assert_eq!(v, std::f64::consts::LN_2);
    }

    #[test]
    fn invalid_configs() {
        assert!(FocalLossConfig { gamma: -1.0, alpha: None }.validate().is_err());
        assert!(FocalLossConfig { gamma: 2.0, alpha: Some(0.0) }.validate().is_err());
        assert!(LossConfig::WeightedCe([1.0, 0.0]).validate().is_err());
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::vector(vec![0.0, 0.0, 0.0]));
        assert!(focal_loss(&mut tape, l, Key::Spoof, &FocalLossConfig::default()).is_err());
    }
}
