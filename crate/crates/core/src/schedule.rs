//! Noise schedules `sigma(t)` (fraction of tokens still masked at time `t`)
//! and the integer mask-count plan derived from them.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_POW_UP_RHO: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDesc", into = "ScheduleDesc")]
pub enum Schedule {
    /// `cos(pi t / 2)`, the training-time default.
    Cosine,
    /// `(1 - t)^rho`
    PowDown(f64),
    /// `1 - t^rho`
    PowUp(f64),
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Cosine
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Cosine => Ok(()),
            Schedule::PowDown(rho) | Schedule::PowUp(rho) => {
                if rho.is_finite() && rho > 0.0 {
                    Ok(())
                } else {
                    invalid(format!("rho must be positive and finite, got {rho}"))
                }
            }
        }
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return invalid(format!("t must lie in [0, 1], got {t}"));
        }
        self.validate()?;
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        let s = match *self {
            // cos(pi/2) is 6e-17 in floating point; pin the endpoint.
            Schedule::Cosine if t >= 1.0 => 0.0,
            Schedule::Cosine => (FRAC_PI_2 * t).cos(),
            Schedule::PowDown(rho) => (1.0 - t).powf(rho),
            Schedule::PowUp(rho) => 1.0 - t.powf(rho),
        };
        s.clamp(0.0, 1.0)
    }

    /// Short human-readable descriptor, e.g. `pow_up(0.6)`.
    pub fn descriptor(&self) -> String {
        match *self {
            Schedule::Cosine => "cosine".to_string(),
            Schedule::PowDown(rho) => format!("pow_down({rho})"),
            Schedule::PowUp(rho) => format!("pow_up({rho})"),
        }
    }
}

/// Config form: `{"kind": "cosine" | "pow_down" | "pow_up", "rho": number}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDesc {
    pub kind: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    PowDown,
    PowUp,
}

impl TryFrom<ScheduleDesc> for Schedule {
    type Error = Error;

    fn try_from(d: ScheduleDesc) -> Result<Self> {
        let s = match d.kind {
            ScheduleKind::Cosine => Schedule::Cosine,
            ScheduleKind::PowDown => Schedule::PowDown(d.rho.unwrap_or(1.0)),
            ScheduleKind::PowUp => Schedule::PowUp(d.rho.unwrap_or(DEFAULT_POW_UP_RHO)),
        };
        s.validate()?;
        Ok(s)
    }
}

impl From<Schedule> for ScheduleDesc {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Cosine => ScheduleDesc { kind: ScheduleKind::Cosine, rho: None },
            Schedule::PowDown(rho) => ScheduleDesc { kind: ScheduleKind::PowDown, rho: Some(rho) },
            Schedule::PowUp(rho) => ScheduleDesc { kind: ScheduleKind::PowUp, rho: Some(rho) },
        }
    }
}

/// Rounds half away from zero on every platform.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Per-step masked-token counts `m_0 = K > m_1 > ... > m_N = 0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    steps: usize,
    tokens: usize,
    masked: Vec<usize>,
}

impl StepPlan {
    /// Discretizes `schedule` over `steps` steps of a `tokens`-token grid.
    ///
    /// Each count starts as `round(sigma(i/N) * K)`, is capped at `K - i`, and
    /// is then repaired from the end backwards so every step unmasks at least
    /// one token.
    pub fn new(schedule: &Schedule, steps: usize, tokens: usize) -> Result<Self> {
        schedule.validate()?;
        if steps == 0 || tokens == 0 {
            return invalid(format!("steps and tokens must be positive, got N={steps} K={tokens}"));
        }
        if steps > tokens {
            return invalid(format!(
                "steps N={steps} exceeds tokens K={tokens}: cannot unmask at least one token per step"
            ));
        }
        let mut masked: Vec<usize> = (0..=steps)
            .map(|i| {
                let sigma = schedule.sigma_unchecked(i as f64 / steps as f64);
                let m = round_half_away(sigma * tokens as f64) as usize;
                m.min(tokens - i)
            })
            .collect();
        masked[0] = tokens;
        masked[steps] = 0;
        for i in (0..steps).rev() {
            masked[i] = masked[i].max(masked[i + 1] + 1);
        }
        Ok(Self { steps, tokens, masked })
    }

    /// Builds a plan from explicit counts, checking the plan invariants.
    pub fn from_counts(tokens: usize, masked: Vec<usize>) -> Result<Self> {
        if masked.len() < 2 || masked[0] != tokens || *masked.last().unwrap() != 0 {
            return invalid("plan must start at K and end at 0");
        }
        if masked.windows(2).any(|w| w[1] >= w[0]) {
            return invalid("plan counts must strictly decrease");
        }
        Ok(Self { steps: masked.len() - 1, tokens, masked })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn masked_counts(&self) -> &[usize] {
        &self.masked
    }

    pub fn masked_at(&self, i: usize) -> usize {
        self.masked[i]
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    /// Tokens committed by step `i` (from `m_i` down to `m_{i+1}`).
    pub fn commits_at(&self, i: usize) -> usize {
        self.masked[i] - self.masked[i + 1]
    }

    /// Realized masked fraction `m_i / K`.
    pub fn realized_sigma(&self, i: usize) -> f64 {
        self.masked[i] as f64 / self.tokens as f64
    }
}
