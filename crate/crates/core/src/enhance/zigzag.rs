//! Forward, invert, forward: a step is taken, partially undone by
//! re-masking, and taken again.
//!
//! The re-mask pool is every unmasked position after the first forward, so
//! the ranking modes can reopen tokens committed at earlier steps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{ProbField, TokenGrid};
use crate::predictor::Counted;
use crate::rng::{tags, RngStream};
use crate::sampler::{pass_step, InversionRecord, SamplerConfig, StepRecord, LOG_FLOOR};
use crate::schedule::StepPlan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZigzagMode {
    /// Re-mask the lowest log-probability tokens under an inversion forward.
    #[default]
    Masked,
    /// Restore the mask the step started from.
    Recover,
    /// Re-mask uniformly at random.
    VanillaRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZigzagConfig {
    pub mode: ZigzagMode,
    /// Guidance scale of the inversion forward; 0 is one conditional pass.
    pub inversion_scale: f64,
    /// First zigzag step.
    pub first: usize,
    /// Number of consecutive zigzag steps; `None` runs to the last step.
    pub count: Option<usize>,
}

impl Default for ZigzagConfig {
    fn default() -> Self {
        Self { mode: ZigzagMode::Masked, inversion_scale: 0.0, first: 0, count: None }
    }
}

impl ZigzagConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !self.inversion_scale.is_finite() {
            return invalid("inversion_scale must be finite");
        }
        if self.first > steps {
            return invalid(format!("zigzag range starts at {} beyond {steps} steps", self.first));
        }
        if let Some(c) = self.count {
            if self.first + c > steps {
                return invalid(format!("zigzag range {}..{} exceeds {steps} steps", self.first, self.first + c));
            }
        }
        Ok(())
    }

    pub fn covers(&self, step: usize) -> bool {
        step >= self.first && self.count.map_or(true, |c| step < self.first + c)
    }

    pub fn is_empty(&self, steps: usize) -> bool {
        !(0..steps).any(|i| self.covers(i))
    }
}

/// Positions to re-mask after the first forward of the triple.
fn inversion_set(
    after_a: &TokenGrid,
    first: &StepRecord,
    plan: &StepPlan,
    i: usize,
    zz: &ZigzagConfig,
    predictor: &Counted<'_>,
    cfg: &SamplerConfig,
    root: &RngStream,
) -> Result<Vec<usize>> {
    let count = plan.commits_at(i);
    let mut set = match zz.mode {
        ZigzagMode::Recover => first.committed.clone(),
        ZigzagMode::Masked => {
            let out = predictor.guided(after_a, cfg.condition, plan.time(i + 1), zz.inversion_scale)?;
            let probs = out.softmax();
            let mut pool: Vec<(f64, usize)> = after_a
                .committed_positions()
                .into_iter()
                .map(|pos| {
                    let tok = after_a.token(pos).expect("committed position") as usize;
                    (probs.row(pos)[tok].max(LOG_FLOOR).ln(), pos)
                })
                .collect();
            pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            pool.into_iter().take(count).map(|(_, pos)| pos).collect()
        }
        ZigzagMode::VanillaRandom => {
            let mut pool = after_a.committed_positions();
            let mut rng = root.derive_path(&[tags::ZIGZAG, i as u64]);
            for k in 0..count {
                let j = k + rng.index(pool.len() - k);
                pool.swap(k, j);
            }
            pool.truncate(count);
            pool
        }
    };
    set.sort_unstable();
    Ok(set)
}

/// One zigzag triple at step `i`. The record describes the final forward;
/// its `nfe` covers all three passes.
pub fn zigzag_step(
    grid: &TokenGrid,
    plan: &StepPlan,
    i: usize,
    zz: &ZigzagConfig,
    predictor: &Counted<'_>,
    cfg: &SamplerConfig,
    root: &RngStream,
    p_prev: Option<&ProbField>,
) -> Result<(TokenGrid, StepRecord)> {
    let nfe0 = predictor.nfe();
    let (after_a, first) = pass_step(grid, plan, i, predictor, cfg, root, p_prev, 0)?;
    let remasked = inversion_set(&after_a, &first, plan, i, zz, predictor, cfg, root)?;
    let mut inverted = after_a;
    for &pos in &remasked {
        inverted.mask(pos);
    }
    let mask_after = inverted.masked_positions();
    let (next, mut rec) = pass_step(&inverted, plan, i, predictor, cfg, root, p_prev, 1)?;
    rec.masked_before = grid.masked_positions();
    rec.nfe = predictor.nfe() - nfe0;
    rec.inversion = Some(InversionRecord { first_chosen: first.chosen, remasked, mask_after });
    Ok((next, rec))
}
