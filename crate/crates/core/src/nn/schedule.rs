use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Cosine,
    Linear,
}

impl FromStr for DecayKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(NnError::Contract(format!(
                "unknown decay style {other:?} (expected cosine or linear)"
            ))),
        }
    }
}

impl fmt::Display for DecayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

/// Linear warmup followed by decay to exactly zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: DecayKind,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub lr_peak: f64,
}

impl ScheduleSpec {
    pub fn new(kind: DecayKind, warmup_fraction: f64, total_steps: u64, lr_peak: f64) -> Result<Self> {
        let s = Self {
            kind,
            warmup_fraction,
            total_steps,
            lr_peak,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(NnError::Contract("total_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(NnError::Contract(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.lr_peak > 0.0) {
            return Err(NnError::Contract(format!("peak lr {} must be positive", self.lr_peak)));
        }
        if self.warmup_steps() >= self.total_steps {
            return Err(NnError::Contract(format!(
                "{} warmup steps leave no decay span in {} steps",
                self.warmup_steps(),
                self.total_steps
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }
}

pub fn lr_at_step(sched: &ScheduleSpec, step: u64) -> Result<f64> {
    if step > sched.total_steps {
        return Err(NnError::Contract(format!(
            "step {step} past schedule end {}",
            sched.total_steps
        )));
    }
    let warm = sched.warmup_steps();
    if step < warm {
        return Ok(sched.lr_peak * step as f64 / warm as f64);
    }
    if step == sched.total_steps {
        return Ok(0.0);
    }
    let progress = (step - warm) as f64 / (sched.total_steps - warm) as f64;
    let scale = match sched.kind {
        DecayKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        DecayKind::Linear => 1.0 - progress,
    };
    Ok(sched.lr_peak * scale.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pythia() -> ScheduleSpec {
        ScheduleSpec::new(DecayKind::Cosine, 0.01, 14_500, 3e-4).unwrap()
    }

    #[test]
    fn warmup_start_is_zero() {
        assert_eq!(lr_at_step(&pythia(), 0).unwrap(), 0.0);
    }

    #[test]
    fn peak_at_end_of_warmup() {
        assert_eq!(pythia().warmup_steps(), 145);
        assert!((lr_at_step(&pythia(), 145).unwrap() - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_at_total() {
        assert_eq!(lr_at_step(&pythia(), 14_500).unwrap(), 0.0);
        let lin = ScheduleSpec::new(DecayKind::Linear, 0.1, 1000, 1e-5).unwrap();
        assert_eq!(lr_at_step(&lin, 1000).unwrap(), 0.0);
    }

    #[test]
    fn cosine_midpoint_is_half_peak() {
        // warmup 10, decay span 100: halfway is step 60
        let s = ScheduleSpec::new(DecayKind::Cosine, 0.0909, 110, 2.0).unwrap();
        assert_eq!(s.warmup_steps(), 10);
        assert!((lr_at_step(&s, 60).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_step() {
        assert!(lr_at_step(&pythia(), 14_501).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(ScheduleSpec::new(DecayKind::Cosine, 1.0, 10, 1.0).is_err());
        assert!(ScheduleSpec::new(DecayKind::Cosine, 0.96, 10, 1.0).is_err());
        assert!(ScheduleSpec::new(DecayKind::Cosine, 0.0, 0, 1.0).is_err());
        assert!("exponential".parse::<DecayKind>().is_err());
    }

    proptest! {
        #[test]
        fn non_negative_and_bounded(total in 2u64..5000, frac in 0.0f64..0.5, cosine in any::<bool>()) {
            let kind = if cosine { DecayKind::Cosine } else { DecayKind::Linear };
            if let Ok(s) = ScheduleSpec::new(kind, frac, total, 1e-3) {
                for step in 0..=total {
                    let lr = lr_at_step(&s, step).unwrap();
                    prop_assert!(lr >= 0.0 && lr <= 1e-3 * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn continuous_at_warmup_boundary(total in 100u64..20000, frac in 0.01f64..0.3) {
            let s = ScheduleSpec::new(DecayKind::Cosine, frac, total, 1.0).unwrap();
            let w = s.warmup_steps();
            let before = lr_at_step(&s, w - 1).unwrap();
            let at = lr_at_step(&s, w).unwrap();
            let after = lr_at_step(&s, w + 1).unwrap();
            let slope = 1.0 / w as f64;
            prop_assert!((at - before).abs() <= slope + 1e-12);
            prop_assert!((at - after).abs() <= slope + 1e-12);
        }
    }
}
