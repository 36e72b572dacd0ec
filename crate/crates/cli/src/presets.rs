//! Ready-made sweeps for the named ablation subcommands, plus the
//! quantization report and trajectory export.

use std::fs;
use std::path::Path;

use mgt_core::enhance::zigzag::{ZigzagConfig, ZigzagMode};
use mgt_core::metrics::{across_runs, output_cosine, output_mse};
use mgt_core::predictor::{RopeMerge, TomeSettings};
use mgt_core::quant::{bit_footprint, QuantizedModel};
use mgt_core::{Predictor, TinyTransformer};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Backend, QuantMethod, QuantVariant, RunConfig, TransformerBackend};
use crate::error::{CliError, CliResult};
use crate::harness::{calibration_inputs, execute, quant_spec, write_trajectory_csv};
use crate::sweep::SweepSpec;

fn spec(base: RunConfig, axis: &str, values: Vec<Value>, seeds: u64) -> SweepSpec {
    SweepSpec { base, axis: axis.into(), values, seeds, seed_start: 0 }
}

/// Cosine baseline followed by every `(kind, rho)` pair.
pub fn schedule_sweep(base: RunConfig, kinds: &[&str], rhos: &[f64], seeds: u64) -> SweepSpec {
    let mut values = vec![json!({"kind": "cosine"})];
    for k in kinds {
        values.extend(rhos.iter().map(|r| json!({"kind": k, "rho": r})));
    }
    spec(base, "sampler.schedule", values, seeds)
}

/// Inversion-scale sweep for one zigzag mode over every step.
pub fn zigzag_ablation(mut base: RunConfig, mode: ZigzagMode, scales: &[f64], seeds: u64) -> SweepSpec {
    base.sampler.zigzag = Some(ZigzagConfig { mode, ..ZigzagConfig::default() });
    spec(base, "sampler.zigzag.inversion_scale", scales.iter().map(|s| json!(s)).collect(), seeds)
}

/// Every built-in noise curve, plus the no-noise baseline.
pub fn noise_reg_ablation(base: RunConfig, seeds: u64) -> SweepSpec {
    let values = vec![
        json!({"kind": "zero"}),
        json!({"kind": "abs_cos"}),
        json!({"kind": "half_abs_cos"}),
        json!({"kind": "piecewise_half_lo"}),
        json!({"kind": "piecewise_half_hi"}),
        json!({"kind": "constant", "c": 0.5}),
    ];
    spec(base, "sampler.noise.curve", values, seeds)
}

pub fn diff_ablation(base: RunConfig, zs: &[f64], seeds: u64) -> SweepSpec {
    spec(base, "sampler.differential.z", zs.iter().map(|z| json!(z)).collect(), seeds)
}

/// First and second order at each stride.
pub fn solver_bench(base: RunConfig, strides: &[usize], seeds: u64) -> SweepSpec {
    let values = strides
        .iter()
        .flat_map(|&s| [json!({"order": 1, "stride": s}), json!({"order": 2, "stride": s})])
        .collect();
    spec(base, "sampler.solver", values, seeds)
}

/// Merging-ratio sweep; forces the transformer backend.
pub fn tome_bench(mut base: RunConfig, ratios: &[f64], rope: RopeMerge, seeds: u64) -> SweepSpec {
    if !matches!(base.backend, Backend::Transformer(_)) {
        base.backend = Backend::Transformer(TransformerBackend::default());
    }
    base.quant = None;
    base.tome = Some(TomeSettings { rope, ..TomeSettings::default() });
    spec(base, "tome.ratio", ratios.iter().map(|r| json!(r)).collect(), seeds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub method: String,
    pub act_layers: usize,
    pub weight_bytes: usize,
    pub scale_bytes: usize,
    pub other_bytes: usize,
    pub total_bytes: usize,
    /// Mean over held-out inputs of the logit MSE against the float model.
    pub output_mse: f64,
    pub output_cosine: f64,
}

/// Calibrates every method on `model`, writes each spec as JSON and returns
/// one report row per method. Held-out inputs never overlap calibration ones.
pub fn quantize_report(model: &TinyTransformer, q: &QuantVariant, held_out: usize, out_dir: &Path) -> CliResult<Vec<QuantRow>> {
    if held_out == 0 {
        return Err(CliError::config("--eval-grids must be positive"));
    }
    fs::create_dir_all(out_dir)?;
    let start = q.calib_grids as u64;
    let eval = calibration_inputs(model.config(), q.seed, start..start + held_out as u64)?;
    let reference = eval.iter().map(|c| model.predict(&c.grid, c.condition, c.t)).collect::<mgt_core::Result<Vec<_>>>()?;
    let mut rows = vec![];
    for method in [QuantMethod::Identity, QuantMethod::WeightsOnly, QuantMethod::Scq, QuantMethod::RandomFraction] {
        let name = serde_json::to_value(method).map_err(CliError::runtime)?.as_str().unwrap_or_default().to_string();
        let s = quant_spec(model, &QuantVariant { method, ..q.clone() })?;
        fs::write(
            out_dir.join(format!("spec_{name}.json")),
            serde_json::to_string_pretty(&s).map_err(CliError::runtime)? + "\n",
        )?;
        let qm = QuantizedModel::new(model, &s)?;
        let (mut mse, mut cos) = (0.0, 0.0);
        for (c, r) in eval.iter().zip(&reference) {
            let o = qm.predict(&c.grid, c.condition, c.t)?;
            mse += output_mse(r, &o)?;
            cos += output_cosine(r, &o)?;
        }
        let f = bit_footprint(model, &s)?;
        rows.push(QuantRow {
            method: name,
            act_layers: s.flagged().len(),
            weight_bytes: f.weight_bytes,
            scale_bytes: f.scale_bytes,
            other_bytes: f.other_bytes,
            total_bytes: f.total(),
            output_mse: mse / held_out as f64,
            output_cosine: cos / held_out as f64,
        });
    }
    let mut w = csv::Writer::from_path(out_dir.join("quant_report.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Writes `entropy.csv` and `kl.csv` for `seeds` runs starting at the
/// config's seed. One run keeps its per-position spread; several report the
/// spread of per-run means.
pub fn trace_export(cfg: &RunConfig, seeds: u64, out_dir: &Path) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::config("--seeds must be positive"));
    }
    fs::create_dir_all(out_dir)?;
    let (mut ent, mut kl) = (vec![], vec![]);
    for k in 0..seeds {
        let mut c = cfg.clone();
        c.sampler.seed = cfg.sampler.seed + k;
        let o = execute(&c)?;
        ent.push(o.entropy);
        kl.push(o.kl);
    }
    let (e, k) = if seeds == 1 { (ent.remove(0), kl.remove(0)) } else { (across_runs(&ent)?, across_runs(&kl)?) };
    write_trajectory_csv(&out_dir.join("entropy.csv"), &e)?;
    write_trajectory_csv(&out_dir.join("kl.csv"), &k)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::expand;

    #[test]
    fn presets_expand() {
        let base = RunConfig::default();
        let n = |s: SweepSpec| expand(&s).unwrap().len();
        assert_eq!(n(schedule_sweep(base.clone(), &["pow_down", "pow_up"], &[0.5, 1.0], 2)), 10);
        assert_eq!(n(zigzag_ablation(base.clone(), ZigzagMode::Masked, &[0.0, 1.0], 2)), 4);
        assert_eq!(n(noise_reg_ablation(base.clone(), 1)), 6);
        assert_eq!(n(diff_ablation(base.clone(), &[0.0, 75.0], 3)), 6);
        assert_eq!(n(solver_bench(base.clone(), &[1, 2], 1)), 4);
        assert_eq!(n(tome_bench(base, &[0.0, 0.5], RopeMerge::Average, 2)), 4);
    }

    #[test]
    fn quant_report_rows() {
        let dir = tempfile::tempdir().unwrap();
        let model = TinyTransformer::new(Default::default()).unwrap();
        let rows = quantize_report(&model, &QuantVariant::default(), 4, dir.path()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].output_mse, 0.0);
        assert_eq!(rows[2].act_layers, rows[3].act_layers);
        assert!(rows[1].total_bytes < rows[0].total_bytes);
        assert!(dir.path().join("spec_scq.json").exists());
    }
}
