//! Cartesian sweeps over one config axis and a range of seeds.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{config_hash, parse_config, set_path, RunConfig};
use crate::error::{CliError, CliResult};
use crate::harness::execute;

/// Environment variable consulted when no worker count is given.
pub const WORKERS_ENV: &str = "MGT_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub base: RunConfig,
    /// Dotted config path, e.g. `sampler.differential.z`.
    pub axis: String,
    pub values: Vec<Value>,
    pub seeds: u64,
    pub seed_start: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { base: RunConfig::default(), axis: String::new(), values: vec![], seeds: 20, seed_start: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub axis: String,
    /// Compact JSON of the axis value.
    pub value: String,
    pub seed: u64,
    pub config_hash: String,
    pub nfe: u64,
    pub oracle_loglik: f64,
    /// Mean of `oracle_loglik` over all seeds sharing this axis value.
    pub mean_oracle_loglik: f64,
    pub mean_entropy: f64,
    pub mean_kl_prev: f64,
    pub bar_row: f64,
    pub bar_col: f64,
}

/// Expands the spec into validated configs: values outer, seeds inner.
pub fn expand(spec: &SweepSpec) -> CliResult<Vec<(Value, RunConfig)>> {
    if spec.axis.is_empty() || spec.values.is_empty() {
        return Err(CliError::config("sweep axis and values must be non-empty"));
    }
    if spec.seeds == 0 {
        return Err(CliError::config("sweep needs at least one seed"));
    }
    let base = serde_json::to_value(&spec.base).map_err(CliError::runtime)?;
    let mut out = vec![];
    for value in &spec.values {
        let mut v = base.clone();
        set_path(&mut v, &spec.axis, value.clone())?;
        for seed in spec.seed_start..spec.seed_start + spec.seeds {
            let mut s = v.clone();
            s["sampler"]["seed"] = json!(seed);
            let cfg = parse_config(s).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{} = {value}: {m}", spec.axis)),
                other => other,
            })?;
            out.push((value.clone(), cfg));
        }
    }
    Ok(out)
}

/// Worker count from the flag, then the environment, then rayon's default.
pub fn resolve_workers(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return if n == 0 { Err(CliError::config("--workers must be positive")) } else { Ok(n) };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::config(format!("{WORKERS_ENV} must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(0),
    }
}

/// Runs every configuration on a pool of `workers` threads (0 picks the
/// default). Rows come back in expansion order whatever the completion order.
pub fn run_sweep(spec: &SweepSpec, workers: usize) -> CliResult<Vec<SweepRow>> {
    let jobs = expand(spec)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(CliError::runtime)?;
    let results: Vec<CliResult<SweepRow>> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(index, (value, cfg))| {
                let o = execute(cfg)?;
                Ok(SweepRow {
                    index,
                    axis: spec.axis.clone(),
                    value: value.to_string(),
                    seed: cfg.sampler.seed,
                    config_hash: config_hash(cfg),
                    nfe: o.trace.nfe,
                    oracle_loglik: o.metrics.oracle_loglik,
                    mean_oracle_loglik: 0.0,
                    mean_entropy: o.metrics.mean_entropy,
                    mean_kl_prev: o.metrics.mean_kl_prev,
                    bar_row: o.metrics.bar_row,
                    bar_col: o.metrics.bar_col,
                })
            })
            .collect()
    });
    let mut rows = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    for chunk in rows.chunks_mut(spec.seeds as usize) {
        let m = chunk.iter().map(|r| r.oracle_loglik).sum::<f64>() / chunk.len() as f64;
        chunk.iter_mut().for_each(|r| r.mean_oracle_loglik = m);
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["index"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SweepSpec {
        let mut base = RunConfig::default();
        base.sampler.width = 4;
        base.sampler.height = 4;
        base.sampler.steps = 4;
        SweepSpec {
            base,
            axis: "sampler.differential.z".into(),
            values: [0, 25, 50, 75, 100].iter().map(|&z| json!(z as f64)).collect(),
            seeds: 20,
            seed_start: 0,
        }
    }

    #[test]
    fn cartesian_count_and_order() {
        let rows = run_sweep(&small_spec(), 3).unwrap();
        assert_eq!(rows.len(), 100);
        assert!(rows.iter().enumerate().all(|(i, r)| r.index == i));
        assert_eq!((rows[0].seed, rows[19].seed, rows[20].seed), (0, 19, 0));
        assert_eq!(rows[20].value, "25.0");
    }

    #[test]
    fn worker_count_does_not_change_rows() {
        assert_eq!(run_sweep(&small_spec(), 1).unwrap(), run_sweep(&small_spec(), 4).unwrap());
    }

    #[test]
    fn empty_axis_is_config_error() {
        let mut s = small_spec();
        s.values.clear();
        assert_eq!(run_sweep(&s, 1).unwrap_err().exit_code(), 2);
        let mut s = small_spec();
        s.axis.clear();
        assert_eq!(run_sweep(&s, 1).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn bad_value_names_axis() {
        let mut s = small_spec();
        s.values = vec![json!(150.0)];
        let e = run_sweep(&s, 1).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("sampler.differential.z"), "{e}");
    }

    #[test]
    fn per_value_mean_column() {
        let rows = run_sweep(&small_spec(), 2).unwrap();
        let first: f64 = rows[..20].iter().map(|r| r.oracle_loglik).sum::<f64>() / 20.0;
        assert!((rows[0].mean_oracle_loglik - first).abs() < 1e-12);
        assert_eq!(rows[0].mean_oracle_loglik, rows[19].mean_oracle_loglik);
    }
}
