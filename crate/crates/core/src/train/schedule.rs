use crate::error::{Error, Result};

/// Cosine annealing restarted every `cycle_length` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineCycleSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub cycle_length: usize,
}

impl CosineCycleSchedule {
    pub fn new(eta_max: f64, eta_min: f64, cycle_length: usize) -> Result<Self> {
        let s = Self { eta_max, eta_min, cycle_length };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle_length == 0 {
            return Err(Error::config("cycle_length must be >= 1"));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::config(format!(
                "need 0 <= eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let phase = (epoch % self.cycle_length) as f64 / self.cycle_length as f64;
        let lr = self.eta_min + (self.eta_max - self.eta_min) * (1.0 + (std::f64::consts::PI * phase).cos()) / 2.0;
        lr.clamp(self.eta_min, self.eta_max)
    }

    /// True for the last epoch of each cycle, where the rate is lowest.
    pub fn is_cycle_minimum(&self, epoch: usize) -> bool {
        epoch % self.cycle_length == self.cycle_length - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = CosineCycleSchedule::new(1e-6, 1e-9, 10).unwrap();
        assert_eq!(s.lr_at(0), 1e-6);
        assert_eq!(s.lr_at(10), 1e-6);
        assert!((s.lr_at(5) - (1e-6 + 1e-9) / 2.0).abs() < 1e-21);
        let long = CosineCycleSchedule::new(1e-6, 1e-9, 100_000).unwrap();
        assert!((long.lr_at(99_999) - 1e-9).abs() < 1e-15);
        assert!(s.is_cycle_minimum(9) && !s.is_cycle_minimum(10));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(CosineCycleSchedule::new(1e-3, 1e-9, 0).is_err());
        assert!(CosineCycleSchedule::new(1e-9, 1e-3, 5).is_err());
    }
}
