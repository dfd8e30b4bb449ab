use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::NeuralError;

fn default_power() -> f64 {
    1.0
}

/// Learning-rate schedules. Step-based kinds take an update count; the
/// cosine kind takes a (fractional) epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    PolynomialDecay {
        warmup_steps: u64,
        peak_lr: f64,
        total_steps: u64,
        #[serde(default = "default_power")]
        power: f64,
        #[serde(default)]
        end_lr: f64,
    },
    InverseSqrt {
        warmup_steps: u64,
        peak_lr: f64,
        #[serde(default)]
        frozen_prefix_steps: u64,
    },
    CosineWarmupDecay {
        peak_lr: f64,
        warmup_epochs: f64,
        decay_epochs: f64,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let problem = match *self {
            Schedule::PolynomialDecay {
                warmup_steps,
                peak_lr,
                total_steps,
                power,
                end_lr,
            } => {
                if warmup_steps > total_steps {
                    Some(format!("warmup_steps {warmup_steps} exceeds total_steps {total_steps}"))
                } else if !(peak_lr > 0.0) {
                    Some("peak_lr must be positive".into())
                } else if !(power > 0.0) || end_lr < 0.0 {
                    Some("power must be positive and end_lr non-negative".into())
                } else {
                    None
                }
            }
            Schedule::InverseSqrt { peak_lr, .. } => (!(peak_lr > 0.0)).then(|| "peak_lr must be positive".into()),
            Schedule::CosineWarmupDecay {
                peak_lr,
                warmup_epochs,
                decay_epochs,
            } => {
                if !(peak_lr > 0.0) {
                    Some("peak_lr must be positive".into())
                } else if !(warmup_epochs > 0.0 && decay_epochs > 0.0) {
                    Some("cosine phases must have positive length".into())
                } else {
                    None
                }
            }
        };
        match problem {
            Some(p) => Err(NeuralError::Config(p)),
            None => Ok(()),
        }
    }

    pub fn peak_lr(&self) -> f64 {
        match *self {
            Schedule::PolynomialDecay { peak_lr, .. }
            | Schedule::InverseSqrt { peak_lr, .. }
            | Schedule::CosineWarmupDecay { peak_lr, .. } => peak_lr,
        }
    }

    /// Learning rate at `position` (steps, or epochs for the cosine kind).
    pub fn lr(&self, position: f64) -> f64 {
        let s = position.max(0.0);
        match *self {
            Schedule::PolynomialDecay {
                warmup_steps,
                peak_lr,
                total_steps,
                power,
                end_lr,
            } => {
                let (w, t) = (warmup_steps as f64, total_steps as f64);
                if s < w {
                    peak_lr * s / w
                } else if s >= t {
                    end_lr
                } else {
                    (peak_lr - end_lr) * ((t - s) / (t - w)).powf(power) + end_lr
                }
            }
            Schedule::InverseSqrt {
                warmup_steps,
                peak_lr,
                frozen_prefix_steps,
            } => {
                let frozen = frozen_prefix_steps as f64;
                if s < frozen {
                    return 0.0;
                }
                let t = s - frozen;
                let w = warmup_steps as f64;
                if t < w {
                    peak_lr * t / w
                } else if w == 0.0 {
                    peak_lr / t.max(1.0).sqrt()
                } else {
                    peak_lr * (w / t).sqrt()
                }
            }
            Schedule::CosineWarmupDecay {
                peak_lr,
                warmup_epochs,
                decay_epochs,
            } => {
                if s <= warmup_epochs {
                    peak_lr * (1.0 - (PI * s / warmup_epochs).cos()) / 2.0
                } else if s <= warmup_epochs + decay_epochs {
                    peak_lr * (1.0 + (PI * (s - warmup_epochs) / decay_epochs).cos()) / 2.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn lr_at_step(&self, step: u64) -> f64 {
        self.lr(step as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pretraining() -> Schedule {
        Schedule::PolynomialDecay {
            warmup_steps: 10_000,
            peak_lr: 7e-4,
            total_steps: 91_075,
            power: 1.0,
            end_lr: 0.0,
        }
    }

    #[test]
    fn polynomial_values() {
        let s = pretraining();
        assert_eq!(s.lr_at_step(0), 0.0);
        assert!((s.lr_at_step(10_000) - 7e-4).abs() <= 1e-12 * 7e-4);
        let expected = 7e-4 * (91_075.0 - 50_538.0) / 81_075.0;
        assert!((s.lr_at_step(50_538) - expected).abs() < 1e-15);
        assert!((s.lr_at_step(50_538) - 3.50e-4).abs() < 1e-6);
        assert_eq!(s.lr_at_step(91_075), 0.0);
        assert_eq!(s.lr_at_step(200_000), 0.0);
    }

    #[test]
    fn inverse_sqrt_values() {
        let s = Schedule::InverseSqrt {
            warmup_steps: 6000,
            peak_lr: 6e-5,
            frozen_prefix_steps: 2000,
        };
        assert_eq!(s.lr_at_step(1999), 0.0);
        assert_eq!(s.lr_at_step(2000), 0.0);
        assert!((s.lr_at_step(5000) - 3e-5).abs() < 1e-18);
        assert!((s.lr_at_step(8000) - 6e-5).abs() < 1e-18);
        assert!((s.lr_at_step(26_000) - 3e-5).abs() < 1e-18);
    }

    #[test]
    fn cosine_values() {
        let s = Schedule::CosineWarmupDecay {
            peak_lr: 3e-5,
            warmup_epochs: 4.0,
            decay_epochs: 10.0,
        };
        assert_eq!(s.lr(0.0), 0.0);
        assert!((s.lr(4.0) - 3e-5).abs() <= 1e-12 * 3e-5);
        assert!(s.lr(14.0).abs() <= 1e-12 * 3e-5);
        assert!((s.lr(2.0) - 1.5e-5).abs() < 1e-18);
    }

    #[test]
    fn serde_round_trip() {
        let s = pretraining();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"kind\":\"polynomial_decay\""));
        assert_eq!(serde_json::from_str::<Schedule>(&json).unwrap(), s);
        let minimal: Schedule =
            serde_json::from_str(r#"{"kind":"polynomial_decay","warmup_steps":1,"peak_lr":1.0,"total_steps":2}"#)
                .unwrap();
        assert!(matches!(minimal, Schedule::PolynomialDecay { power, end_lr, .. } if power == 1.0 && end_lr == 0.0));
    }

    #[test]
    fn warmup_longer_than_total_is_rejected() {
        let s = Schedule::PolynomialDecay {
            warmup_steps: 10,
            peak_lr: 1.0,
            total_steps: 5,
            power: 1.0,
            end_lr: 0.0,
        };
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn continuous_at_phase_boundaries(
            warmup in 1u64..5000,
            extra in 1u64..100_000,
            peak in 1e-6f64..1e-2,
            power in 0.5f64..3.0,
            w_ep in 0.5f64..8.0,
            d_ep in 0.5f64..20.0,
        ) {
            let poly = Schedule::PolynomialDecay { warmup_steps: warmup, peak_lr: peak, total_steps: warmup + extra, power, end_lr: 0.0 };
            let (w, eps) = (warmup as f64, 1e-9);
            prop_assert!((poly.lr(w) - peak).abs() < 1e-12);
            // Both one-sided gaps are bounded by slope times the distance
            // actually represented, plus a few ulps of the result.
            let (below, above) = (w - eps, w + eps);
            let ulps = 4.0 * f64::EPSILON * peak;
            prop_assert!((poly.lr(below) - poly.lr(w)).abs() <= peak * (w - below) / w + ulps);
            prop_assert!((poly.lr(above) - poly.lr(w)).abs() <= peak * power * (above - w) / extra as f64 + ulps);
            let t = (warmup + extra) as f64;
            prop_assert!(poly.lr(t - 1e-9).abs() < 1e-12 || power < 1.0);

            let cos = Schedule::CosineWarmupDecay { peak_lr: peak, warmup_epochs: w_ep, decay_epochs: d_ep };
            prop_assert!((cos.lr(w_ep - 1e-12) - cos.lr(w_ep + 1e-12)).abs() < 1e-12);
            prop_assert!((cos.lr(w_ep + d_ep - 1e-12) - cos.lr(w_ep + d_ep + 1e-12)).abs() < 1e-12);
        }

        #[test]
        fn learning_rate_stays_in_range(step in 0u64..200_000) {
            let lr = pretraining().lr_at_step(step);
            prop_assert!((0.0..=7e-4).contains(&lr));
        }
    }
}
