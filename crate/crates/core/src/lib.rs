//! Sampling and efficiency algorithms for masked generative Transformers.
//!
//! A run starts from a fully masked [`TokenGrid`], repeatedly asks a
//! [`Predictor`] for per-position logits, and commits tokens along a
//! [`StepPlan`] until no mask remains.

pub mod enhance;
mod error;
pub mod grid;
pub mod metrics;
pub mod predictor;
pub mod quant;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod solver;
pub mod tome;

pub use error::{Error, Result};
pub use grid::{ProbField, TokenGrid};
pub use predictor::{FactorizedOracle, Predictor, PredictorOutput, TinyTransformer, TransformerConfig};
pub use rng::RngStream;
pub use sampler::{sample, SamplerConfig, SamplerTrace, StepRecord};
pub use schedule::{Schedule, StepPlan};
