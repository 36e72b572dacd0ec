//! Diagnostics computed from sampler traces and finished grids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::enhance::differential::kl_at;
use crate::error::{invalid, state, Result};
use crate::grid::{ProbField, TokenGrid};
use crate::predictor::{FactorizedOracle, Predictor, PredictorOutput, NULL_CONDITION};
use crate::sampler::SamplerTrace;

/// Per-step mean and standard deviation of a statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub step: Vec<usize>,
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Mean of `mean` over step deciles: `(first, middle, last)`.
    pub fn deciles(&self) -> Result<(f64, f64, f64)> {
        decile_means(&self.mean)
    }
}

/// Population mean and standard deviation; `(0, 0)` when empty.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Means over the first, central and last tenth of `xs` (at least one element each).
pub fn decile_means(xs: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len();
    if n < 3 {
        return invalid(format!("decile split needs at least 3 values, got {n}"));
    }
    let w = n.div_ceil(10);
    let mid = (n - w) / 2;
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((avg(&xs[..w]), avg(&xs[mid..mid + w]), avg(&xs[n - w..])))
}

/// Shannon entropy in nats.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn require_records(trace: &SamplerTrace) -> Result<()> {
    if trace.records.is_empty() {
        return invalid("trace has no steps");
    }
    Ok(())
}

/// Entropy of the sampling distribution over positions masked before each
/// step; `std` is across positions.
pub fn entropy_trajectory(trace: &SamplerTrace) -> Result<Trajectory> {
    require_records(trace)?;
    let mut tr = Trajectory { step: vec![], t: vec![], mean: vec![], std: vec![] };
    for r in &trace.records {
        let hs: Vec<f64> = r.masked_before.iter().map(|&p| entropy(r.probs.row(p))).collect();
        let (m, s) = mean_std(&hs);
        tr.step.push(r.step);
        tr.t.push(r.t);
        tr.mean.push(m);
        tr.std.push(s);
    }
    Ok(tr)
}

/// Mean of `KL(p_i || p_{i-1})` over positions masked at both steps; the
/// first step has no predecessor and records 0.
pub fn kl_trajectory(trace: &SamplerTrace) -> Result<Trajectory> {
    require_records(trace)?;
    let mut tr = Trajectory { step: vec![], t: vec![], mean: vec![], std: vec![] };
    for (i, r) in trace.records.iter().enumerate() {
        let (m, s) = if i == 0 {
            (0.0, 0.0)
        } else {
            let prev = &trace.records[i - 1];
            let shared: Vec<usize> =
                r.masked_before.iter().copied().filter(|p| prev.masked_before.binary_search(p).is_ok()).collect();
            mean_std(&kl_at(&r.probs, &prev.probs, &shared)?)
        };
        tr.step.push(r.step);
        tr.t.push(r.t);
        tr.mean.push(m);
        tr.std.push(s);
    }
    Ok(tr)
}

/// Per-step mean and spread of per-run means across independent runs.
pub fn across_runs(trajectories: &[Trajectory]) -> Result<Trajectory> {
    let first = trajectories.first().ok_or_else(|| crate::Error::InvalidArgument("no runs".into()))?;
    if trajectories.iter().any(|t| t.len() != first.len()) {
        return invalid("runs have different step counts");
    }
    let mut tr = Trajectory { step: first.step.clone(), t: first.t.clone(), mean: vec![], std: vec![] };
    for i in 0..first.len() {
        let col: Vec<f64> = trajectories.iter().map(|t| t.mean[i]).collect();
        let (m, s) = mean_std(&col);
        tr.mean.push(m);
        tr.std.push(s);
    }
    Ok(tr)
}

/// Mean normalized absolute difference between adjacent rows and between
/// adjacent columns.
pub fn bar_stats(grid: &TokenGrid) -> Result<(f64, f64)> {
    if !grid.is_complete() {
        return state("bar statistics need a fully committed grid");
    }
    let (w, h) = (grid.width(), grid.height());
    let norm = (grid.vocab().max(2) - 1) as f64;
    let c = grid.cells();
    let diff = |a: usize, b: usize| (c[a] as f64 - c[b] as f64).abs() / norm;
    let row_diff = if h < 2 {
        0.0
    } else {
        (0..h - 1).map(|r| (0..w).map(|x| diff(r * w + x, (r + 1) * w + x)).sum::<f64>() / w as f64).sum::<f64>()
            / (h - 1) as f64
    };
    let col_diff = if w < 2 {
        0.0
    } else {
        (0..w - 1).map(|x| (0..h).map(|r| diff(r * w + x, r * w + x + 1)).sum::<f64>() / h as f64).sum::<f64>()
            / (w - 1) as f64
    };
    Ok((row_diff, col_diff))
}

/// `sum_j ln q_j(token_j)` under the oracle's marginals for `condition`.
pub fn oracle_loglik(grid: &TokenGrid, oracle: &FactorizedOracle, condition: u32) -> Result<f64> {
    if !grid.is_complete() {
        return state("log-likelihood needs a fully committed grid");
    }
    let m = oracle.marginals(condition)?;
    if m.positions() != grid.len() || m.vocab() != grid.vocab() {
        return invalid("oracle does not cover the grid");
    }
    Ok(grid.cells().iter().enumerate().map(|(j, &tok)| m.row(j)[tok as usize].ln()).sum())
}

pub fn nfe_count(trace: &SamplerTrace) -> u64 {
    trace.nfe
}

pub fn output_mse(a: &PredictorOutput, b: &PredictorOutput) -> Result<f64> {
    if a.logits().len() != b.logits().len() {
        return invalid("output shapes differ");
    }
    let n = a.logits().len() as f64;
    Ok(a.logits().iter().zip(b.logits()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn output_cosine(a: &PredictorOutput, b: &PredictorOutput) -> Result<f64> {
    if a.logits().len() != b.logits().len() {
        return invalid("output shapes differ");
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.logits().iter().zip(b.logits()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok(dot / (na.sqrt() * nb.sqrt()).max(f64::MIN_POSITIVE))
}

/// A factorized oracle whose marginals are a predictor's all-masked
/// predictions at `t = 0`, one per condition plus the null branch.
pub fn distill_oracle(
    predictor: &dyn Predictor,
    width: usize,
    height: usize,
    conditions: &[u32],
) -> Result<FactorizedOracle> {
    let grid = TokenGrid::new(width, height, predictor.vocab())?;
    let mut fields: BTreeMap<u32, ProbField> = BTreeMap::new();
    for &c in conditions {
        fields.insert(c, predictor.predict(&grid, c, 0.0)?.softmax());
    }
    let null = predictor.predict(&grid, NULL_CONDITION, 0.0)?.softmax();
    FactorizedOracle::new(width, height, fields, Some(null))
}
