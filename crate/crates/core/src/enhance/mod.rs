//! Inference-time refinements layered on the vanilla step.

pub mod differential;
pub mod noise;
pub mod zigzag;

pub use differential::{difference_distribution, differential_resample, kl_set, DifferentialConfig};
pub use noise::{noise_regularize, NoiseCurve, NoiseRegConfig};
pub use zigzag::{zigzag_step, ZigzagConfig, ZigzagMode};
