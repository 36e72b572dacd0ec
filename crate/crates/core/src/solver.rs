//! Large-stride steps that keep a `sigma_t / sigma_s` share of the masked set
//! and commit the rest from the current prediction.
//!
//! Fractions are taken over the masked set of `z_s`, with `sigma` read off the
//! realized plan (`m / K`), so a stride-1 first-order run commits exactly the
//! plan's counts. The second-order variant moves a share `lambda` of the
//! commit budget onto the difference distribution of the last two points.

use serde::{Deserialize, Serialize};

use crate::enhance::differential::difference_distribution;
use crate::error::{invalid, state, Result};
use crate::grid::{ProbField, TokenGrid};
use crate::predictor::Counted;
use crate::rng::{tags, RngStream};
use crate::sampler::{
    build_record, check_masked, commit_top, confidence_order, gumbel_select, propose, SamplerConfig, StepRecord,
};
use crate::schedule::{round_half_away, StepPlan};

pub const LAMBDA_MAX: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub order: u8,
    /// Base-plan steps per solver step.
    pub stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { order: 1, stride: 1 }
    }
}

impl SolverConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.order != 1 && self.order != 2 {
            return invalid(format!("solver order must be 1 or 2, got {}", self.order));
        }
        if self.stride == 0 || self.stride > steps {
            return invalid(format!("stride must lie in [1, {steps}], got {}", self.stride));
        }
        Ok(())
    }

    /// Base-plan indices visited: `0, stride, 2 stride, ..., N`.
    pub fn points(&self, steps: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..steps).step_by(self.stride.max(1)).collect();
        p.push(steps);
        p
    }
}

/// `(sigma_t / sigma_s, (sigma_s - sigma_t) / sigma_s)`: kept and committed shares.
pub fn fractions(sigma_s: f64, sigma_t: f64) -> Result<(f64, f64)> {
    if !(sigma_s > 0.0 && sigma_s <= 1.0 && sigma_t >= 0.0 && sigma_t < sigma_s) {
        return invalid(format!("need 0 <= sigma_t < sigma_s <= 1, got s={sigma_s} t={sigma_t}"));
    }
    Ok((sigma_t / sigma_s, (sigma_s - sigma_t) / sigma_s))
}

/// `round((sigma_s - sigma_t) / sigma_s * masked)`.
pub fn commit_count(sigma_s: f64, sigma_t: f64, masked: usize) -> Result<usize> {
    let (_, take) = fractions(sigma_s, sigma_t)?;
    Ok((round_half_away(take * masked as f64) as usize).min(masked))
}

/// `(sigma_t - sigma_s)^2 / (2 sigma_t (sigma_r - sigma_s))` clamped to `[0, 0.5]`.
pub fn correction_lambda(sigma_r: f64, sigma_s: f64, sigma_t: f64) -> Result<f64> {
    if !(sigma_r > sigma_s && sigma_s > sigma_t && sigma_t > 0.0) {
        return invalid(format!("need sigma_r > sigma_s > sigma_t > 0, got r={sigma_r} s={sigma_s} t={sigma_t}"));
    }
    let lambda = (sigma_t - sigma_s).powi(2) / (2.0 * sigma_t * (sigma_r - sigma_s));
    if !lambda.is_finite() {
        return invalid("correction coefficient is not finite");
    }
    Ok(lambda.clamp(0.0, LAMBDA_MAX))
}

pub fn correction_count(lambda: f64, budget: usize) -> usize {
    round_half_away(lambda * budget as f64) as usize
}

fn check_predictions(z_s: &TokenGrid, chosen: &[(usize, u32)], confidences: &[f64]) -> Result<()> {
    if chosen.len() != confidences.len() || chosen.len() != z_s.masked_count() {
        return invalid("predictions must cover exactly the masked positions");
    }
    if chosen.iter().any(|&(pos, _)| !z_s.is_masked(pos)) {
        return invalid("prediction for a committed position");
    }
    Ok(())
}

/// First-order step: commit the most confident share of the masked set.
pub fn solver_step_1(
    z_s: &TokenGrid,
    chosen: &[(usize, u32)],
    confidences: &[f64],
    sigma_s: f64,
    sigma_t: f64,
) -> Result<TokenGrid> {
    check_predictions(z_s, chosen, confidences)?;
    let n = commit_count(sigma_s, sigma_t, z_s.masked_count())?;
    let mut z_t = z_s.clone();
    commit_top(&mut z_t, chosen, confidences, n)?;
    Ok(z_t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrder {
    pub grid: TokenGrid,
    pub committed: Vec<usize>,
    /// Positions whose token came from the difference distribution.
    pub corrections: Vec<usize>,
}

/// Second-order step. The top `budget - C` confident predictions are committed
/// as in first order; the next `C` most confident positions whose two
/// distributions differ receive tokens drawn from the difference
/// distribution. Shortfalls are filled from the confidence ranking.
#[allow(clippy::too_many_arguments)]
pub fn solver_step_2(
    z_s: &TokenGrid,
    chosen: &[(usize, u32)],
    confidences: &[f64],
    p_s: &ProbField,
    p_r: &ProbField,
    sigmas: (f64, f64, f64),
    temperature: f64,
    rng: &mut RngStream,
) -> Result<SecondOrder> {
    let (sigma_r, sigma_s, sigma_t) = sigmas;
    check_predictions(z_s, chosen, confidences)?;
    let budget = commit_count(sigma_s, sigma_t, z_s.masked_count())?;
    let lambda = correction_lambda(sigma_r, sigma_s, sigma_t)?;
    let wanted = correction_count(lambda, budget);
    let order = confidence_order(chosen, confidences);
    let mut z_t = z_s.clone();
    let mut committed = Vec::with_capacity(budget);
    for &k in order.iter().take(budget - wanted) {
        z_t.set(chosen[k].0, chosen[k].1)?;
        committed.push(chosen[k].0);
    }
    let rest = &order[budget - wanted..];
    let mut used = vec![false; rest.len()];
    let mut corrections = Vec::new();
    for (idx, &k) in rest.iter().enumerate() {
        if corrections.len() == wanted {
            break;
        }
        let pos = chosen[k].0;
        if let Some(pt) = difference_distribution(p_s.row(pos), p_r.row(pos)) {
            z_t.set(pos, gumbel_select(&pt, rng, temperature)? as u32)?;
            committed.push(pos);
            corrections.push(pos);
            used[idx] = true;
        }
    }
    // Fallback keeps the commit count: fill with the next confident draws.
    let short = wanted - corrections.len();
    for (_, &k) in rest.iter().enumerate().filter(|(i, _)| !used[*i]).take(short) {
        z_t.set(chosen[k].0, chosen[k].1)?;
        committed.push(chosen[k].0);
    }
    committed.sort_unstable();
    corrections.sort_unstable();
    Ok(SecondOrder { grid: z_t, committed, corrections })
}

/// Drives the solver over the plan's stride points.
pub(crate) fn run(
    mut grid: TokenGrid,
    plan: &StepPlan,
    solver: &SolverConfig,
    predictor: &Counted<'_>,
    cfg: &SamplerConfig,
    root: &RngStream,
) -> Result<(TokenGrid, Vec<StepRecord>)> {
    let points = solver.points(plan.steps());
    let mut records: Vec<StepRecord> = Vec::with_capacity(points.len() - 1);
    let mut prev: Option<(usize, ProbField)> = None;
    for w in points.windows(2) {
        let (s, t) = (w[0], w[1]);
        check_masked(&grid, plan, s)?;
        let nfe0 = predictor.nfe();
        let time = plan.time(s);
        let p_prev = records.last().map(|r| &r.model_probs);
        let prop = propose(&grid, predictor, cfg, s, 0, time, p_prev, root)?;
        let (sigma_s, sigma_t) = (plan.realized_sigma(s), plan.realized_sigma(t));
        let (next, committed) = match &prev {
            Some((r, p_r)) if solver.order == 2 && plan.masked_at(t) > 0 => {
                let mut rng = root.derive_path(&[tags::SOLVER, s as u64]);
                let out = solver_step_2(
                    &grid,
                    &prop.chosen,
                    &prop.confidences,
                    &prop.model_probs,
                    p_r,
                    (plan.realized_sigma(*r), sigma_s, sigma_t),
                    cfg.temperature,
                    &mut rng,
                )?;
                (out.grid, out.committed)
            }
            _ => {
                let n = commit_count(sigma_s, sigma_t, grid.masked_count())?;
                let mut next = grid.clone();
                let committed = commit_top(&mut next, &prop.chosen, &prop.confidences, n)?;
                (next, committed)
            }
        };
        if next.masked_count() != plan.masked_at(t) {
            return state(format!(
                "solver step {s}->{t} left {} masked, plan expects {}",
                next.masked_count(),
                plan.masked_at(t)
            ));
        }
        prev = Some((s, prop.model_probs.clone()));
        let rec = build_record(s, time, prop, committed, grid.masked_positions(), &next, predictor.nfe() - nfe0);
        records.push(rec);
        grid = next;
    }
    Ok((grid, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::FactorizedOracle;
    use crate::sampler::sample;
    use crate::schedule::Schedule;
    use proptest::prelude::*;

    #[test]
    fn commit_count_examples() {
        assert_eq!(commit_count(0.8, 0.6, 800).unwrap(), 200);
        assert_eq!(commit_count(0.8, 0.0, 800).unwrap(), 800);
        assert!(commit_count(0.6, 0.6, 10).is_err());
        assert!(commit_count(0.6, 0.7, 10).is_err());
    }

    #[test]
    fn lambda_example() {
        let l = correction_lambda(1.0, 0.8, 0.6).unwrap();
        assert!((l - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(correction_count(l, 200), 33);
        assert!(correction_lambda(0.8, 0.8, 0.6).is_err());
        // Vanishing stride gives no correction.
        assert!(correction_lambda(1.0, 0.8, 0.8 - 1e-9).unwrap() < 1e-12);
        assert_eq!(correction_lambda(0.9, 0.8, 0.1).unwrap(), LAMBDA_MAX);
    }

    #[test]
    fn adjacent_steps_match_plan() {
        let plan = StepPlan::new(&Schedule::Cosine, 64, 1024).unwrap();
        for i in 0..64 {
            let n = commit_count(plan.realized_sigma(i), plan.realized_sigma(i + 1), plan.masked_at(i)).unwrap();
            assert_eq!(n, plan.commits_at(i));
        }
    }

    #[test]
    fn stride_one_first_order_is_vanilla() {
        let o = FactorizedOracle::synthetic(4, 4, 8, 2, 2.0, 3).unwrap();
        let base = SamplerConfig { width: 4, height: 4, steps: 8, seed: 12, cfg_scale: 2.0, ..Default::default() };
        let s = SamplerConfig { solver: Some(SolverConfig::default()), ..base.clone() };
        let (a, ta) = sample(&base, &o).unwrap();
        let (b, tb) = sample(&s, &o).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn strided_runs_complete() {
        let o = FactorizedOracle::synthetic(4, 4, 8, 2, 2.0, 3).unwrap();
        for order in [1, 2] {
            let cfg = SamplerConfig {
                width: 4,
                height: 4,
                steps: 16,
                seed: 5,
                solver: Some(SolverConfig { order, stride: 4 }),
                noise: Some(crate::enhance::noise::NoiseRegConfig::default()),
                ..Default::default()
            };
            let (g, trace) = sample(&cfg, &o).unwrap();
            assert!(g.is_complete());
            assert_eq!(trace.nfe, 4);
            let counts: Vec<usize> = trace.records.iter().map(|r| r.masked_before.len()).collect();
            assert_eq!(counts, [0, 4, 8, 12].map(|i| trace.plan.masked_at(i)).to_vec());
        }
    }

    #[test]
    fn second_order_example() {
        let k = 1000;
        let v = 2;
        let mut z_s = TokenGrid::new(k, 1, v).unwrap();
        for pos in 0..200 {
            z_s.set(pos, 0).unwrap();
        }
        let masked = z_s.masked_positions();
        let chosen: Vec<(usize, u32)> = masked.iter().map(|&p| (p, 0)).collect();
        let confidences: Vec<f64> = masked.iter().map(|&p| -(p as f64) / 1000.0).collect();
        let p_s = ProbField::new(k, v, [0.7, 0.3].repeat(k)).unwrap();
        let p_r = ProbField::new(k, v, [0.2, 0.8].repeat(k)).unwrap();
        let mut rng = RngStream::new(1, 1);
        let out = solver_step_2(&z_s, &chosen, &confidences, &p_s, &p_r, (1.0, 0.8, 0.6), 1.0, &mut rng).unwrap();
        assert_eq!(out.committed.len(), 200);
        assert_eq!(out.corrections.len(), 33);
        assert_eq!(out.grid.masked_count(), 600);
        // Corrections follow the first-order block in the confidence ranking.
        assert_eq!(out.corrections, (367..400).collect::<Vec<_>>());
        // Identical distributions disable every correction but keep the count.
        let out = solver_step_2(&z_s, &chosen, &confidences, &p_s, &p_s, (1.0, 0.8, 0.6), 1.0, &mut rng).unwrap();
        assert!(out.corrections.is_empty());
        assert_eq!(out.committed, (200..400).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn fractions_sum_to_one(s in 1e-6f64..1.0, u in 0.0f64..1.0) {
            let t = s * u;
            prop_assume!(t < s);
            let (keep, take) = fractions(s, t).unwrap();
            prop_assert!((keep + take - 1.0).abs() <= 1e-15);
        }
    }
}
