//! The denoising network `f_theta`: anything that maps a partially masked grid,
//! a condition and a time to per-position logits.

mod oracle;
pub mod rope;
mod transformer;

use std::sync::atomic::{AtomicU64, Ordering};

pub use oracle::FactorizedOracle;
pub use rope::{rope_matrix, rope_theta, Matrix};
pub use transformer::{
    ActivationRecorder, ForwardOptions, ForwardStats, RopeMerge, TinyTransformer, TomeSettings,
    TransformerConfig,
};

use crate::error::{invalid, Result};
use crate::grid::{ProbField, TokenGrid};

/// Reserved condition id selecting the unconditional branch.
pub const NULL_CONDITION: u32 = u32::MAX;

/// Pre-softmax logits, one row of `vocab` entries per grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorOutput {
    positions: usize,
    vocab: usize,
    logits: Vec<f64>,
}

impl PredictorOutput {
    pub fn new(positions: usize, vocab: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != positions * vocab {
            return invalid(format!(
                "expected {} logits, got {}",
                positions * vocab,
                logits.len()
            ));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite logit at flat index {i}"));
        }
        Ok(Self { positions, vocab, logits })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn softmax(&self) -> ProbField {
        ProbField::from_logits(self.positions, self.vocab, &self.logits)
    }
}

pub trait Predictor: Send + Sync {
    fn vocab(&self) -> usize;

    /// Logits for every position of `grid`, masked or not.
    fn predict(&self, grid: &TokenGrid, condition: u32, t: f64) -> Result<PredictorOutput>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn vocab(&self) -> usize {
        (**self).vocab()
    }

    fn predict(&self, grid: &TokenGrid, condition: u32, t: f64) -> Result<PredictorOutput> {
        (**self).predict(grid, condition, t)
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("t must lie in [0, 1], got {t}"));
    }
    Ok(())
}

/// Run-scoped count of predictor forward passes.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicU64);

impl NfeCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// Wraps a predictor so every `predict` call bumps an NFE counter by one.
pub struct Counted<'a> {
    inner: &'a dyn Predictor,
    nfe: NfeCounter,
}

impl<'a> Counted<'a> {
    pub fn new(inner: &'a dyn Predictor) -> Self {
        Self { inner, nfe: NfeCounter::default() }
    }

    pub fn nfe(&self) -> u64 {
        self.nfe.get()
    }

    pub fn inner(&self) -> &'a dyn Predictor {
        self.inner
    }

    /// One conditional pass when `scale == 0`, otherwise a conditional and an
    /// unconditional pass combined by [`cfg_combine`].
    pub fn guided(&self, grid: &TokenGrid, condition: u32, t: f64, scale: f64) -> Result<PredictorOutput> {
        let cond = self.predict(grid, condition, t)?;
        if scale == 0.0 {
            return Ok(cond);
        }
        let uncond = self.predict(grid, NULL_CONDITION, t)?;
        Ok(cfg_combine(cond, Some(&uncond), scale)?.output)
    }
}

impl Predictor for Counted<'_> {
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    fn predict(&self, grid: &TokenGrid, condition: u32, t: f64) -> Result<PredictorOutput> {
        self.nfe.bump();
        self.inner.predict(grid, condition, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Guided {
    pub output: PredictorOutput,
    /// Forward passes the combination consumed: 1 or 2.
    pub forwards: u32,
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
///
/// With `scale == 0` or no unconditional output the conditional logits pass
/// through untouched.
pub fn cfg_combine(cond: PredictorOutput, uncond: Option<&PredictorOutput>, scale: f64) -> Result<Guided> {
    if !scale.is_finite() {
        return invalid(format!("guidance scale must be finite, got {scale}"));
    }
    let uncond = match uncond {
        Some(u) if scale != 0.0 => u,
        _ => return Ok(Guided { output: cond, forwards: 1 }),
    };
    if uncond.positions != cond.positions || uncond.vocab != cond.vocab {
        return invalid(format!(
            "shape mismatch: cond {}x{} vs uncond {}x{}",
            cond.positions, cond.vocab, uncond.positions, uncond.vocab
        ));
    }
    let logits = cond
        .logits
        .iter()
        .zip(&uncond.logits)
        .map(|(&c, &u)| if scale == 1.0 { c } else { u + scale * (c - u) })
        .collect();
    Ok(Guided {
        output: PredictorOutput::new(cond.positions, cond.vocab, logits)?,
        forwards: 2,
    })
}
