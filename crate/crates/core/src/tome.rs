//! Bipartite token merging with averaged rotary matrices.
//!
//! Tokens are split by flat index parity: even indices form the source set
//! A, odd indices the destination set B. Each A token is scored by cosine
//! similarity against its best B match and the top `floor(r * |A|)` edges
//! are merged. Merged tokens are group means; unmerging copies the group
//! value back to every member.

use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::grid::TokenGrid;
use crate::predictor::{
    ForwardOptions, ForwardStats, Matrix, Predictor, PredictorOutput, TinyTransformer, TomeSettings,
};

#[derive(Clone, Debug, PartialEq)]
pub struct MergePlan {
    tokens: usize,
    ratio: f64,
    /// `(source, destination)` pairs in merge-priority order.
    pairs: Vec<(usize, usize)>,
    /// Original indices of surviving tokens, ascending.
    survivors: Vec<usize>,
    /// Reduced-sequence slot of every original token.
    slots: Vec<usize>,
    /// Group size of every reduced slot.
    multiplicities: Vec<usize>,
}

impl MergePlan {
    /// The plan that merges nothing.
    pub fn identity(tokens: usize) -> Self {
        Self {
            tokens,
            ratio: 0.0,
            pairs: Vec::new(),
            survivors: (0..tokens).collect(),
            slots: (0..tokens).collect(),
            multiplicities: vec![1; tokens],
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn merge_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn survivors(&self) -> &[usize] {
        &self.survivors
    }

    pub fn survivor_count(&self) -> usize {
        self.survivors.len()
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.multiplicities
    }

    fn check(&self, len: usize, expected: usize, dim: usize) -> Result<()> {
        if dim == 0 || len != expected * dim {
            return invalid(format!("sequence of {len} values does not hold {expected} tokens of width {dim}"));
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Builds the bipartite plan for `n` row-major tokens of width `dim`.
///
/// The split is deterministic, so no randomness is consumed.
pub fn build_merge_plan(tokens: &[f64], n: usize, dim: usize, ratio: f64) -> Result<MergePlan> {
    if !(0.0..1.0).contains(&ratio) {
        return invalid(format!("merge ratio must lie in [0, 1), got {ratio}"));
    }
    let mut plan = MergePlan::identity(n);
    plan.check(tokens.len(), n, dim)?;
    plan.ratio = ratio;
    let a: Vec<usize> = (0..n).step_by(2).collect();
    let b: Vec<usize> = (1..n).step_by(2).collect();
    let budget = (ratio * a.len() as f64).floor() as usize;
    if budget == 0 || b.is_empty() {
        return Ok(plan);
    }
    let row = |i: usize| &tokens[i * dim..(i + 1) * dim];
    let mut edges: Vec<(f64, usize, usize)> = a
        .iter()
        .map(|&ai| {
            let mut best = (f64::NEG_INFINITY, b[0]);
            for &bj in &b {
                let s = cosine(row(ai), row(bj));
                if s > best.0 {
                    best = (s, bj);
                }
            }
            (best.0, ai, best.1)
        })
        .collect();
    // Highest similarity first; ties by source index.
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    plan.pairs = edges.iter().take(budget).map(|&(_, s, d)| (s, d)).collect();

    let mut merged_into = vec![usize::MAX; n];
    for &(s, d) in &plan.pairs {
        merged_into[s] = d;
    }
    plan.survivors = (0..n).filter(|&i| merged_into[i] == usize::MAX).collect();
    let mut slot_of_survivor = vec![usize::MAX; n];
    for (slot, &i) in plan.survivors.iter().enumerate() {
        slot_of_survivor[i] = slot;
    }
    plan.slots = (0..n)
        .map(|i| if merged_into[i] == usize::MAX { slot_of_survivor[i] } else { slot_of_survivor[merged_into[i]] })
        .collect();
    plan.multiplicities = vec![0; plan.survivors.len()];
    for &s in &plan.slots {
        plan.multiplicities[s] += 1;
    }
    Ok(plan)
}

/// Reduces `tokens` to one group mean per surviving slot.
pub fn merge(tokens: &[f64], dim: usize, plan: &MergePlan) -> Result<Vec<f64>> {
    plan.check(tokens.len(), plan.tokens, dim)?;
    let mut out = vec![0.0; plan.survivor_count() * dim];
    for (i, &slot) in plan.slots.iter().enumerate() {
        for (o, v) in out[slot * dim..(slot + 1) * dim].iter_mut().zip(&tokens[i * dim..(i + 1) * dim]) {
            *o += v;
        }
    }
    for (slot, &m) in plan.multiplicities.iter().enumerate() {
        if m > 1 {
            out[slot * dim..(slot + 1) * dim].iter_mut().for_each(|v| *v /= m as f64);
        }
    }
    Ok(out)
}

/// Expands a reduced sequence back to the original token count.
pub fn unmerge(reduced: &[f64], dim: usize, plan: &MergePlan) -> Result<Vec<f64>> {
    plan.check(reduced.len(), plan.survivor_count(), dim)?;
    let mut out = Vec::with_capacity(plan.tokens * dim);
    for &slot in &plan.slots {
        out.extend_from_slice(&reduced[slot * dim..(slot + 1) * dim]);
    }
    Ok(out)
}

/// Elementwise mean of two rotary matrices. Not orthogonal in general.
pub fn merge_rope(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.dim() != b.dim() {
        return invalid(format!("cannot average {}x{} with {}x{}", a.dim(), a.dim(), b.dim(), b.dim()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect();
    Matrix::from_rows(a.dim(), data)
}

/// Forward pass with merging in the model's joint blocks.
pub fn tome_forward(
    model: &TinyTransformer,
    grid: &TokenGrid,
    condition: u32,
    t: f64,
    settings: &TomeSettings,
) -> Result<(PredictorOutput, ForwardStats)> {
    if model.config().joint_layers == 0 && !settings.force_all_layers {
        return invalid("model has no joint blocks to merge in");
    }
    model.forward_with(grid, condition, t, &mut ForwardOptions { tome: Some(settings), ..Default::default() })
}

/// A predictor that always runs the merged forward pass.
#[derive(Clone, Debug)]
pub struct TomePredictor {
    pub model: Arc<TinyTransformer>,
    pub settings: TomeSettings,
}

impl Predictor for TomePredictor {
    fn vocab(&self) -> usize {
        self.model.config().vocab
    }

    fn predict(&self, grid: &TokenGrid, condition: u32, t: f64) -> Result<PredictorOutput> {
        Ok(tome_forward(&self.model, grid, condition, t, &self.settings)?.0)
    }
}
