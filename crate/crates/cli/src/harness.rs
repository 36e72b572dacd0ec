//! Builds predictors from a [`RunConfig`], executes runs and writes their
//! artifacts.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use mgt_core::metrics::{bar_stats, distill_oracle, entropy_trajectory, kl_trajectory, oracle_loglik, Trajectory};
use mgt_core::quant::{
    primary_calibrate, random_fraction_spec, secondary_calibrate, CalibInput, QuantSpec, QuantizedModel,
};
use mgt_core::rng::{tags, RngStream};
use mgt_core::tome::TomePredictor;
use mgt_core::{sample, FactorizedOracle, Predictor, SamplerTrace, TinyTransformer, TokenGrid, TransformerConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{config_hash, from_value, parse_config, read_json, Backend, QuantMethod, QuantVariant, RunConfig};
use crate::error::{CliError, CliResult};

pub const TOOL_NAME: &str = "mgt";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const GRID_FILE: &str = "grid.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A ready predictor plus the factorized teacher used for the log-likelihood
/// proxy.
pub struct BuiltBackend {
    pub predictor: Box<dyn Predictor>,
    pub teacher: FactorizedOracle,
}

/// Half-filled-on-average grids: grid `k` has `(k % 8) / 8` of its cells set
/// at random, condition `k % conditions`.
pub fn calibration_inputs(model: &TransformerConfig, seed: u64, ks: std::ops::Range<u64>) -> mgt_core::Result<Vec<CalibInput>> {
    let root = RngStream::new(seed, tags::CALIB);
    ks.map(|k| {
        let mut rng = root.derive(k);
        let mut g = TokenGrid::new(model.width as usize, model.height as usize, model.vocab as usize)?;
        let frac = (k % 8) as f64 / 8.0;
        for p in 0..g.len() {
            if rng.uniform() < frac {
                g.set(p, rng.index(model.vocab as usize) as u32)?;
            }
        }
        Ok(CalibInput::from_grid(g, (k % model.num_conditions as u64) as u32))
    })
    .collect()
}

/// The quantization spec a variant asks for, calibrated on
/// `calibration_inputs(.., q.seed, 0..q.calib_grids)`.
pub fn quant_spec(model: &TinyTransformer, q: &QuantVariant) -> mgt_core::Result<QuantSpec> {
    let calib = || -> mgt_core::Result<_> {
        let inputs = calibration_inputs(model.config(), q.seed, 0..q.calib_grids as u64)?;
        primary_calibrate(model, &inputs)
    };
    Ok(match q.method {
        QuantMethod::Identity => QuantSpec::identity(model),
        QuantMethod::WeightsOnly => QuantSpec::weights_only(model),
        QuantMethod::Scq => secondary_calibrate(&calib()?, q.fraction, q.stat)?,
        QuantMethod::RandomFraction => random_fraction_spec(&calib()?, q.fraction, q.seed)?,
    })
}

pub fn build_backend(cfg: &RunConfig) -> CliResult<BuiltBackend> {
    let s = &cfg.sampler;
    match &cfg.backend {
        Backend::Oracle(o) => {
            let oracle = FactorizedOracle::synthetic(s.width, s.height, o.vocab, o.conditions, o.sharpness, o.seed)?;
            Ok(BuiltBackend { predictor: Box::new(oracle.clone()), teacher: oracle })
        }
        Backend::Transformer(t) => {
            let model = TinyTransformer::new(t.model.clone())?;
            let conditions: Vec<u32> = (0..t.model.num_conditions).collect();
            let teacher = distill_oracle(&model, s.width, s.height, &conditions)?;
            let predictor: Box<dyn Predictor> = if let Some(q) = &cfg.quant {
                let spec = quant_spec(&model, q)?;
                Box::new(QuantizedModel::new(&model, &spec)?)
            } else if let Some(tm) = &cfg.tome {
                Box::new(TomePredictor { model: Arc::new(model), settings: tm.clone() })
            } else {
                Box::new(model)
            };
            Ok(BuiltBackend { predictor, teacher })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Log-likelihood of the final grid under the teacher oracle.
    pub oracle_loglik: f64,
    /// Mean over steps of the per-step mean entropy.
    pub mean_entropy: f64,
    /// Mean over steps after the first of the per-step mean KL to the previous step.
    pub mean_kl_prev: f64,
    pub bar_row: f64,
    pub bar_col: f64,
}

pub struct Outcome {
    pub grid: TokenGrid,
    pub trace: SamplerTrace,
    pub entropy: Trajectory,
    pub kl: Trajectory,
    pub metrics: MetricSummary,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs a validated config in memory.
pub fn execute(cfg: &RunConfig) -> CliResult<Outcome> {
    let b = build_backend(cfg)?;
    let (grid, trace) = sample(&cfg.sampler, b.predictor.as_ref())?;
    let entropy = entropy_trajectory(&trace)?;
    let kl = kl_trajectory(&trace)?;
    let (bar_row, bar_col) = bar_stats(&grid)?;
    let metrics = MetricSummary {
        oracle_loglik: oracle_loglik(&grid, &b.teacher, cfg.sampler.condition)?,
        mean_entropy: mean(&entropy.mean),
        mean_kl_prev: mean(&kl.mean[1.min(kl.mean.len())..]),
        bar_row,
        bar_col,
    };
    Ok(Outcome { grid, trace, entropy, kl, metrics })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub grid: String,
    pub trace: String,
    pub manifest: String,
}

/// Everything needed to reproduce a run; `config` is embedded in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub schedule: String,
    pub variants: Vec<String>,
    pub nfe: u64,
    pub metrics: MetricSummary,
    /// Paths relative to the manifest's directory.
    pub artifacts: Artifacts,
    pub config: RunConfig,
}

/// Accepts either a config or a manifest. A manifest's hash must match its
/// embedded config.
pub fn load_run_input(v: Value) -> CliResult<RunConfig> {
    if v.get("config_hash").is_some() {
        let m: RunManifest = from_value(v)?;
        m.config.validate()?;
        let h = config_hash(&m.config);
        if h != m.config_hash {
            return Err(CliError::config(format!("manifest config_hash {} does not match its config ({h})", m.config_hash)));
        }
        Ok(m.config)
    } else {
        parse_config(v)
    }
}

pub fn load_run_file(path: &Path) -> CliResult<RunConfig> {
    load_run_input(read_json(path)?)
}

/// Trace CSV: one row per step with the cumulative forward count.
pub fn write_trace_csv(out: &mut impl std::io::Write, o: &Outcome) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "t", "masked_before", "masked_after", "nfe_cum", "mean_entropy", "mean_kl_prev"])?;
    let mut cum = 0;
    for (i, r) in o.trace.records.iter().enumerate() {
        cum += r.nfe;
        w.write_record([
            r.step.to_string(),
            r.t.to_string(),
            r.masked_before.len().to_string(),
            r.masked_after.len().to_string(),
            cum.to_string(),
            o.entropy.mean[i].to_string(),
            o.kl.mean[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Executes `cfg` and writes grid, trace and manifest into `out_dir`.
pub fn run_to_dir(cfg: &RunConfig, out_dir: &Path) -> CliResult<RunManifest> {
    cfg.validate()?;
    let o = execute(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(GRID_FILE), o.grid.to_bytes())?;
    let mut trace = vec![];
    write_trace_csv(&mut trace, &o)?;
    fs::write(out_dir.join(TRACE_FILE), trace)?;
    let manifest = RunManifest {
        tool: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        config_hash: config_hash(cfg),
        seed: cfg.sampler.seed,
        schedule: cfg.sampler.schedule.descriptor(),
        variants: cfg.variant_flags(),
        nfe: o.trace.nfe,
        metrics: o.metrics,
        artifacts: Artifacts { grid: GRID_FILE.into(), trace: TRACE_FILE.into(), manifest: MANIFEST_FILE.into() },
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(CliError::runtime)?;
    fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

/// Writes a trajectory as `step,t,mean,std`.
pub fn write_trajectory_csv(path: &Path, tr: &Trajectory) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "mean", "std"])?;
    for i in 0..tr.len() {
        w.write_record([tr.step[i].to_string(), tr.t[i].to_string(), tr.mean[i].to_string(), tr.std[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn calibration_inputs_are_reproducible() {
        let m = TransformerConfig::default();
        let a = calibration_inputs(&m, 3, 0..8).unwrap();
        let b = calibration_inputs(&m, 3, 0..8).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.grid == y.grid && x.condition == y.condition));
        assert!(a[0].grid.masked_count() == 64 && a[0].t == 0.0);
        assert!(a[7].grid.masked_count() < 32);
    }

    #[test]
    fn manifest_hash_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(json!({"sampler": {"width": 4, "height": 4, "steps": 4}})).unwrap();
        let m = run_to_dir(&cfg, dir.path()).unwrap();
        let mut v = serde_json::to_value(&m).unwrap();
        assert_eq!(load_run_input(v.clone()).unwrap(), cfg);
        v["config"]["sampler"]["seed"] = json!(99);
        assert_eq!(load_run_input(v).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn every_backend_variant_runs() {
        for extra in [
            json!({}),
            json!({"quant": {"method": "scq"}}),
            json!({"quant": {"method": "random_fraction"}}),
            json!({"quant": {"method": "weights_only"}}),
            json!({"tome": {"ratio": 0.5}}),
        ] {
            let mut v = json!({"sampler": {"steps": 8}, "backend": {"kind": "transformer"}});
            for (k, x) in extra.as_object().unwrap() {
                v[k] = x.clone();
            }
            let o = execute(&parse_config(v).unwrap()).unwrap();
            assert!(o.grid.is_complete());
            assert!(o.metrics.oracle_loglik.is_finite() && o.metrics.oracle_loglik < 0.0);
            assert_eq!(o.trace.nfe, 8);
        }
    }
}
