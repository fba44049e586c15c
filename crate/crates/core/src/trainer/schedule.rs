//! Learning-rate schedules for the network and auxiliary parameters.

use crate::error::{BicdError, Result};

/// Epochs at which the auxiliary rate drops, as fractions of the run.
pub const AUX_DROP_FRACTIONS: [f64; 2] = [90.0 / 140.0, 120.0 / 140.0];
pub const AUX_DROP_FACTOR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub aux_lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, aux_lr: f64, epochs: usize, steps_per_epoch: usize) -> Result<Self> {
        let s = Schedule {
            base_lr,
            aux_lr,
            epochs,
            steps_per_epoch,
            warmup_frac: 0.05,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.base_lr), ("aux_lr", self.aux_lr)] {
            if !v.is_finite() || v < 0.0 {
                return Err(BicdError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(BicdError::Config("epochs and steps per epoch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(BicdError::Config(format!("warmup fraction {} not in [0, 1)", self.warmup_frac)));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps() as f64).round() as usize
    }

    pub fn warmup_factor(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if warm == 0 {
            1.0
        } else {
            ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }

    /// Cosine annealing from `base_lr` at step 0 to 0 at the end of the run.
    pub fn cosine_lr(&self, step: usize) -> f64 {
        let t = step as f64 / self.total_steps() as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn theta_lr(&self, step: usize) -> f64 {
        self.cosine_lr(step) * self.warmup_factor(step)
    }

    pub fn aux_drop_epochs(&self) -> [usize; 2] {
        AUX_DROP_FRACTIONS.map(|f| (self.epochs as f64 * f).round() as usize)
    }

    /// Piecewise-constant auxiliary rate before warmup is applied.
    pub fn aux_base(&self, epoch: usize) -> f64 {
        let drops = self.aux_drop_epochs().iter().filter(|&&e| epoch >= e).count();
        self.aux_lr * AUX_DROP_FACTOR.powi(drops as i32)
    }

    pub fn eta_lr(&self, step: usize) -> f64 {
        self.aux_base(step / self.steps_per_epoch) * self.warmup_factor(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::new(5e-4, 5e-3, 140, 10).unwrap();
        assert_eq!(s.cosine_lr(0), 5e-4);
        assert!(s.cosine_lr(s.total_steps()) <= 1e-6 * 5e-4);
        assert!((0..s.total_steps()).all(|t| s.theta_lr(t) > 0.0));
    }

    #[test]
    fn aux_drops_at_scaled_epochs() {
        let s = Schedule::new(5e-4, 5e-3, 140, 1).unwrap();
        assert_eq!(s.aux_drop_epochs(), [90, 120]);
        let s = Schedule::new(5e-4, 5e-3, 20, 1).unwrap();
        assert_eq!(s.aux_drop_epochs(), [13, 17]);
        let mut changes = 0;
        for e in 1..20 {
            if s.aux_base(e) != s.aux_base(e - 1) {
                changes += 1;
                assert!((s.aux_base(e) / s.aux_base(e - 1) - 0.1).abs() < 1e-12);
            }
        }
        assert_eq!(changes, 2);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let s = Schedule::new(1.0, 1.0, 10, 10).unwrap();
        assert_eq!(s.warmup_steps(), 5);
        assert_eq!(s.warmup_factor(0), 0.2);
        assert_eq!(s.warmup_factor(4), 1.0);
        assert_eq!(s.warmup_factor(50), 1.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Schedule::new(-1.0, 0.0, 1, 1).is_err());
        assert!(Schedule::new(1.0, 0.0, 0, 1).is_err());
    }
}
