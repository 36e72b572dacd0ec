//! Experiment harness around `mgt-core`: JSON run configs, run manifests,
//! sweeps over a worker pool and CSV export.

pub mod config;
mod error;
pub mod harness;
pub mod presets;
pub mod sweep;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use harness::{run_to_dir, RunManifest};
pub use sweep::{run_sweep, SweepRow, SweepSpec};
