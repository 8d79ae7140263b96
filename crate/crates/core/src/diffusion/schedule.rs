use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind '{other}' (expected linear|cosine)"))),
        }
    }
}

/// Per-step noise tables. Index `t` runs `0..steps`; `alpha_bar[t]` is the
/// signal fraction after `t + 1` noising steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|t| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * t as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (0..steps)
                    .map(|t| {
                        let b = 1.0 - f((t + 1) as f64 / steps as f64) / f(t as f64 / steps as f64);
                        b.min(MAX_BETA)
                    })
                    .collect()
            }
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { kind, beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(format!("timestep {t} out of range 0..{}", self.steps())));
        }
        Ok(())
    }
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(kind, steps)
}

/// `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
pub fn q_sample_with_alpha_bar(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Closed-form forward noising to timestep `t`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    q_sample_with_alpha_bar(x0, schedule.alpha_bar[t], eps)
}
