//! The iterative parallel-decoding loop.
//!
//! Every step predicts all masked positions, draws a token for each with an
//! exponential race, and keeps the highest-confidence draws while re-masking
//! the rest. Randomness for step `i` comes from streams addressed by
//! `(tag, i, pass)` under the run seed, so swapping one algorithm leaves the
//! draws of every other algorithm unchanged.

use serde::{Deserialize, Serialize};

use crate::enhance::differential::{differential_resample, DifferentialConfig};
use crate::enhance::noise::{add_noise, NoiseRegConfig};
use crate::enhance::zigzag::{zigzag_step, ZigzagConfig};
use crate::error::{invalid, state, Result};
use crate::grid::{ProbField, TokenGrid};
use crate::predictor::{Counted, Predictor};
use crate::rng::{tags, RngStream};
use crate::schedule::{Schedule, StepPlan};
use crate::solver::{self, SolverConfig};

/// Lower clamp on the race's uniform draws.
pub const EPS_CLAMP: f64 = 1e-30;
/// Floor applied before taking the log of a probability.
pub const LOG_FLOOR: f64 = 1e-300;

/// Exponential race: `argmax_i ln(eps_i) / p_i^(1/tau)`.
///
/// Consumes exactly one uniform per category, including zero-mass ones.
/// Ties resolve to the lowest index.
pub fn gumbel_select(probs: &[f64], rng: &mut RngStream, temperature: f64) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return invalid(format!("temperature must be positive and finite, got {temperature}"));
    }
    if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return invalid("probabilities must be finite and non-negative");
    }
    if !probs.iter().any(|&p| p > 0.0) {
        return invalid("all probabilities are zero");
    }
    let inv = 1.0 / temperature;
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (i, &p) in probs.iter().enumerate() {
        let eps = rng.uniform().max(EPS_CLAMP);
        if p <= 0.0 {
            continue;
        }
        let w = if temperature == 1.0 { p } else { p.powf(inv) };
        let score = eps.ln() / w;
        if score > best.0 {
            best = (score, i);
        }
    }
    // Every weight underflowed: fall back to the mode.
    Ok(if best.1 == usize::MAX { argmax(probs) } else { best.1 })
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub width: usize,
    pub height: usize,
    pub schedule: Schedule,
    pub steps: usize,
    pub cfg_scale: f64,
    pub temperature: f64,
    pub condition: u32,
    pub seed: u64,
    /// Steps `>= k` choose tokens by argmax instead of the race.
    pub deterministic_from: Option<usize>,
    pub noise: Option<NoiseRegConfig>,
    pub differential: Option<DifferentialConfig>,
    pub zigzag: Option<ZigzagConfig>,
    pub solver: Option<SolverConfig>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            schedule: Schedule::Cosine,
            steps: 16,
            cfg_scale: 0.0,
            temperature: 1.0,
            condition: 0,
            seed: 0,
            deterministic_from: None,
            noise: None,
            differential: None,
            zigzag: None,
            solver: None,
        }
    }
}

impl SamplerConfig {
    pub fn tokens(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return invalid("grid dimensions must be positive");
        }
        self.schedule.validate()?;
        if self.steps == 0 || self.steps > self.tokens() {
            return invalid(format!("steps must lie in [1, {}], got {}", self.tokens(), self.steps));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        if !self.cfg_scale.is_finite() {
            return invalid("cfg_scale must be finite");
        }
        if let Some(k) = self.deterministic_from {
            if k > self.steps {
                return invalid(format!("deterministic_from {k} exceeds steps {}", self.steps));
            }
        }
        if let Some(n) = &self.noise {
            n.curve.validate()?;
        }
        if let Some(d) = &self.differential {
            d.validate()?;
        }
        if let Some(z) = &self.zigzag {
            z.validate(self.steps)?;
        }
        if let Some(s) = &self.solver {
            s.validate(self.steps)?;
            if self.zigzag.as_ref().is_some_and(|z| !z.is_empty(self.steps)) {
                return invalid("solver and zigzag cannot be combined");
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<StepPlan> {
        StepPlan::new(&self.schedule, self.steps, self.tokens())
    }

    fn deterministic_at(&self, step: usize) -> bool {
        self.deterministic_from.is_some_and(|k| step >= k)
    }
}

/// Positions re-masked by a zigzag inversion and the resulting mask.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionRecord {
    /// Tokens chosen by the first forward of the triple.
    pub first_chosen: Vec<(usize, u32)>,
    pub remasked: Vec<usize>,
    pub mask_after: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    /// Distribution each token was drawn from: the difference distribution at
    /// differentially redrawn positions, the model distribution elsewhere.
    pub probs: ProbField,
    /// Softmax of the guided (and noise-regularized) logits.
    pub model_probs: ProbField,
    /// Token drawn for every position masked before the step.
    pub chosen: Vec<(usize, u32)>,
    /// `ln p(chosen)` under `model_probs`, aligned with `chosen`.
    pub confidences: Vec<f64>,
    pub committed: Vec<usize>,
    pub redrawn: Vec<usize>,
    pub masked_before: Vec<usize>,
    pub masked_after: Vec<usize>,
    /// Forward passes consumed by this step.
    pub nfe: u64,
    pub inversion: Option<InversionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerTrace {
    pub plan: StepPlan,
    pub records: Vec<StepRecord>,
    pub nfe: u64,
}

/// The stochastic part of one step, before commit selection.
#[derive(Clone, Debug)]
pub(crate) struct Proposal {
    pub probs: ProbField,
    pub model_probs: ProbField,
    pub chosen: Vec<(usize, u32)>,
    pub confidences: Vec<f64>,
    pub redrawn: Vec<usize>,
}

pub(crate) fn propose(
    grid: &TokenGrid,
    predictor: &Counted<'_>,
    cfg: &SamplerConfig,
    step: usize,
    pass: u64,
    t: f64,
    p_prev: Option<&ProbField>,
    root: &RngStream,
) -> Result<Proposal> {
    let mut out = predictor.guided(grid, cfg.condition, t, cfg.cfg_scale)?;
    let masked = grid.masked_positions();
    if let Some(noise) = &cfg.noise {
        let std = noise.curve.std(t);
        if std != 0.0 {
            let mut rng = root.derive_path(&[tags::NOISE, step as u64, pass]);
            let v = out.vocab();
            let logits = out.logits_mut();
            for &pos in &masked {
                add_noise(&mut logits[pos * v..(pos + 1) * v], std, &mut rng);
            }
        }
    }
    let model_probs = out.softmax();
    let deterministic = cfg.deterministic_at(step);
    let mut rng = root.derive_path(&[tags::GUMBEL, step as u64, pass]);
    let mut chosen = Vec::with_capacity(masked.len());
    for &pos in &masked {
        let row = model_probs.row(pos);
        let tok = if deterministic { argmax(row) } else { gumbel_select(row, &mut rng, cfg.temperature)? };
        chosen.push((pos, tok as u32));
    }
    let mut probs = model_probs.clone();
    let mut redrawn = Vec::new();
    if let (Some(d), Some(prev)) = (&cfg.differential, p_prev) {
        if d.z > 0.0 {
            let mut rng = root.derive_path(&[tags::DIFFERENTIAL, step as u64, pass]);
            let r = differential_resample(&model_probs, prev, &chosen, d.z, cfg.temperature, &mut rng)?;
            chosen = r.chosen;
            for (pos, pt) in r.redrawn {
                probs.row_mut(pos).copy_from_slice(&pt);
                redrawn.push(pos);
            }
        }
    }
    let confidences = chosen.iter().map(|&(pos, tok)| model_probs.row(pos)[tok as usize].max(LOG_FLOOR).ln()).collect();
    Ok(Proposal { probs, model_probs, chosen, confidences, redrawn })
}

/// Indices into `confidences` sorted by descending confidence, ties by position.
pub(crate) fn confidence_order(chosen: &[(usize, u32)], confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(chosen[a].0.cmp(&chosen[b].0)));
    order
}

/// Commits the `count` most confident draws; returns the committed positions.
pub(crate) fn commit_top(
    grid: &mut TokenGrid,
    chosen: &[(usize, u32)],
    confidences: &[f64],
    count: usize,
) -> Result<Vec<usize>> {
    let order = confidence_order(chosen, confidences);
    let mut committed = Vec::with_capacity(count);
    for &k in order.iter().take(count) {
        let (pos, tok) = chosen[k];
        grid.set(pos, tok)?;
        committed.push(pos);
    }
    committed.sort_unstable();
    Ok(committed)
}

pub(crate) fn check_masked(grid: &TokenGrid, plan: &StepPlan, i: usize) -> Result<()> {
    if i >= plan.steps() {
        return invalid(format!("step {i} outside a {}-step plan", plan.steps()));
    }
    if grid.masked_count() != plan.masked_at(i) {
        return state(format!(
            "step {i} expects {} masked tokens, grid has {}",
            plan.masked_at(i),
            grid.masked_count()
        ));
    }
    Ok(())
}

pub(crate) fn build_record(
    step: usize,
    t: f64,
    prop: Proposal,
    committed: Vec<usize>,
    masked_before: Vec<usize>,
    after: &TokenGrid,
    nfe: u64,
) -> StepRecord {
    StepRecord {
        step,
        t,
        probs: prop.probs,
        model_probs: prop.model_probs,
        chosen: prop.chosen,
        confidences: prop.confidences,
        committed,
        redrawn: prop.redrawn,
        masked_before,
        masked_after: after.masked_positions(),
        nfe,
        inversion: None,
    }
}

/// One predict-draw-commit step from `m_i` to `m_{i+1}` masked tokens.
pub fn vanilla_step(
    grid: &TokenGrid,
    plan: &StepPlan,
    i: usize,
    predictor: &Counted<'_>,
    cfg: &SamplerConfig,
    root: &RngStream,
    p_prev: Option<&ProbField>,
) -> Result<(TokenGrid, StepRecord)> {
    pass_step(grid, plan, i, predictor, cfg, root, p_prev, 0)
}

pub(crate) fn pass_step(
    grid: &TokenGrid,
    plan: &StepPlan,
    i: usize,
    predictor: &Counted<'_>,
    cfg: &SamplerConfig,
    root: &RngStream,
    p_prev: Option<&ProbField>,
    pass: u64,
) -> Result<(TokenGrid, StepRecord)> {
    check_masked(grid, plan, i)?;
    let nfe0 = predictor.nfe();
    let t = plan.time(i);
    let prop = propose(grid, predictor, cfg, i, pass, t, p_prev, root)?;
    let mut next = grid.clone();
    let committed = commit_top(&mut next, &prop.chosen, &prop.confidences, plan.commits_at(i))?;
    let rec = build_record(i, t, prop, committed, grid.masked_positions(), &next, predictor.nfe() - nfe0);
    Ok((next, rec))
}

/// Runs a full sampling pass from the all-masked grid.
pub fn sample(cfg: &SamplerConfig, predictor: &dyn Predictor) -> Result<(TokenGrid, SamplerTrace)> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let root = RngStream::new(cfg.seed, 0);
    let counted = Counted::new(predictor);
    let grid = TokenGrid::new(cfg.width, cfg.height, predictor.vocab())?;
    let (grid, records) = match &cfg.solver {
        Some(s) => solver::run(grid, &plan, s, &counted, cfg, &root)?,
        None => {
            let mut grid = grid;
            let mut records: Vec<StepRecord> = Vec::with_capacity(plan.steps());
            for i in 0..plan.steps() {
                let p_prev = records.last().map(|r| &r.model_probs);
                let (next, rec) = match &cfg.zigzag {
                    Some(z) if z.covers(i) => zigzag_step(&grid, &plan, i, z, &counted, cfg, &root, p_prev)?,
                    _ => vanilla_step(&grid, &plan, i, &counted, cfg, &root, p_prev)?,
                };
                grid = next;
                records.push(rec);
            }
            (grid, records)
        }
    };
    if !grid.is_complete() {
        return state("sampling finished with masked tokens left");
    }
    Ok((grid, SamplerTrace { plan, records, nfe: counted.nfe() }))
}

/// Copy of `cfg` that picks tokens by argmax from step `k` on.
pub fn deterministic_switch(cfg: &SamplerConfig, k: usize) -> Result<SamplerConfig> {
    if k > cfg.steps {
        return invalid(format!("switch step {k} exceeds steps {}", cfg.steps));
    }
    Ok(SamplerConfig { deterministic_from: Some(k), ..cfg.clone() })
}
