//! Gaussian logit noise with a time-dependent standard deviation `I(t)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseCurve {
    /// `|cos(pi t)|`
    AbsCos,
    /// `0.5 |cos(pi t)|`
    HalfAbsCos,
    /// Half strength for `t < 0.5`, full strength after.
    PiecewiseHalfLo,
    /// Full strength for `t < 0.5`, half strength after.
    PiecewiseHalfHi,
    Constant { c: f64 },
    Zero,
}

impl NoiseCurve {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseCurve::Constant { c } if !(c.is_finite() && *c >= 0.0) => {
                invalid(format!("constant noise level must be finite and non-negative, got {c}"))
            }
            _ => Ok(()),
        }
    }

    /// Standard deviation at time `t`; always non-negative.
    pub fn std(&self, t: f64) -> f64 {
        let full = (PI * t).cos().abs();
        match *self {
            NoiseCurve::AbsCos => full,
            NoiseCurve::HalfAbsCos => 0.5 * full,
            NoiseCurve::PiecewiseHalfLo => {
                if t < 0.5 {
                    0.5 * full
                } else {
                    full
                }
            }
            NoiseCurve::PiecewiseHalfHi => {
                if t < 0.5 {
                    full
                } else {
                    0.5 * full
                }
            }
            NoiseCurve::Constant { c } => c,
            NoiseCurve::Zero => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRegConfig {
    pub curve: NoiseCurve,
}

impl Default for NoiseRegConfig {
    fn default() -> Self {
        Self { curve: NoiseCurve::AbsCos }
    }
}

/// `v + g` with `g_k ~ N(0, I(t)^2)` i.i.d.; a zero std returns `v` untouched
/// without consuming randomness.
pub fn noise_regularize(logits: &[f64], t: f64, curve: &NoiseCurve, rng: &mut RngStream) -> Result<Vec<f64>> {
    curve.validate()?;
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return invalid(format!("non-finite logit at index {i}"));
    }
    let mut out = logits.to_vec();
    add_noise(&mut out, curve.std(t), rng);
    Ok(out)
}

pub(crate) fn add_noise(logits: &mut [f64], std: f64, rng: &mut RngStream) {
    if std == 0.0 {
        return;
    }
    for v in logits {
        *v += std * rng.normal();
    }
}
