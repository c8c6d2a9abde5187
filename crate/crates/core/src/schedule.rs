use serde::{Deserialize, Serialize};

use crate::error::{CorssError, Result};

/// Forgetting-factor schedule shared by the whitening and separation recursions.
///
/// `value(n)` is the factor applied at iteration `n` (1-based). The power-decay
/// mode gives strong early adaptation that settles onto a small floor, which is
/// what a streaming recursion needs to converge and then hold steady.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ForgettingSchedule {
    /// Fixed factor for every sample.
    Constant { lambda0: f64 },
    /// `max(lambda0 / n^gamma, lambda_min)`.
    PowerDecay {
        lambda0: f64,
        gamma: f64,
        lambda_min: f64,
    },
}

impl ForgettingSchedule {
    pub const DEFAULT_LAMBDA0: f64 = 0.1;
    pub const DEFAULT_GAMMA: f64 = 0.55;
    pub const DEFAULT_LAMBDA_MIN: f64 = 0.0015;

    pub fn constant(lambda0: f64) -> Result<Self> {
        let s = ForgettingSchedule::Constant { lambda0 };
        s.validate()?;
        Ok(s)
    }

    pub fn power_decay(lambda0: f64, gamma: f64, lambda_min: f64) -> Result<Self> {
        let s = ForgettingSchedule::PowerDecay {
            lambda0,
            gamma,
            lambda_min,
        };
        s.validate()?;
        Ok(s)
    }

    /// Default streaming schedule.
    pub fn default_power_decay() -> Self {
        ForgettingSchedule::PowerDecay {
            lambda0: Self::DEFAULT_LAMBDA0,
            gamma: Self::DEFAULT_GAMMA,
            lambda_min: Self::DEFAULT_LAMBDA_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ForgettingSchedule::Constant { lambda0 } => {
                if !(0.0..1.0).contains(&lambda0) {
                    return Err(CorssError::ScheduleOutOfRange(format!(
                        "lambda0 = {lambda0} must lie in [0, 1)"
                    )));
                }
            }
            ForgettingSchedule::PowerDecay {
                lambda0,
                gamma,
                lambda_min,
            } => {
                if !(0.0..1.0).contains(&lambda0) {
                    return Err(CorssError::ScheduleOutOfRange(format!(
                        "lambda0 = {lambda0} must lie in [0, 1)"
                    )));
                }
                if gamma < 0.0 || !gamma.is_finite() {
                    return Err(CorssError::ScheduleOutOfRange(format!(
                        "gamma = {gamma} must be >= 0"
                    )));
                }
                if lambda_min < 0.0 || lambda_min > lambda0 {
                    return Err(CorssError::ScheduleOutOfRange(format!(
                        "lambda_min = {lambda_min} must lie in [0, lambda0]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forgetting factor at iteration `n` (1-based).
    pub fn value(&self, n: u64) -> f64 {
        debug_assert!(n >= 1);
        match *self {
            ForgettingSchedule::Constant { lambda0 } => lambda0,
            ForgettingSchedule::PowerDecay {
                lambda0,
                gamma,
                lambda_min,
            } => (lambda0 / (n as f64).powf(gamma)).max(lambda_min),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_flat() {
        let s = ForgettingSchedule::constant(0.01).unwrap();
        assert_eq!(s.value(1), 0.01);
        assert_eq!(s.value(1_000_000), 0.01);
    }

    #[test]
    fn power_decay_is_monotone_and_bounded() {
        let s = ForgettingSchedule::default_power_decay();
        let mut prev = f64::INFINITY;
        for n in 1..5000 {
            let v = s.value(n);
            assert!(v <= ForgettingSchedule::DEFAULT_LAMBDA0 + 1e-15);
            assert!(v >= ForgettingSchedule::DEFAULT_LAMBDA_MIN);
            assert!(v <= prev);
            prev = v;
        }
        // hits the floor eventually
        assert_eq!(s.value(1_000_000), ForgettingSchedule::DEFAULT_LAMBDA_MIN);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(ForgettingSchedule::constant(1.2).is_err());
        assert!(ForgettingSchedule::constant(-0.1).is_err());
        assert!(ForgettingSchedule::power_decay(0.05, -1.0, 0.0).is_err());
        assert!(ForgettingSchedule::power_decay(0.05, 0.6, 0.1).is_err());
    }
}
