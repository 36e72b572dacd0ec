//! Run configuration: JSON ingestion with field-path diagnostics, validation
//! and the canonical hash that names a run.

use std::path::Path;

use mgt_core::predictor::TomeSettings;
use mgt_core::quant::{MagnitudeStat, DEFAULT_FRACTION};
use mgt_core::{SamplerConfig, TransformerConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleBackend {
    pub vocab: usize,
    pub conditions: u32,
    /// Std of the Gaussian logits behind each marginal row.
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for OracleBackend {
    fn default() -> Self {
        Self { vocab: 16, conditions: 4, sharpness: 2.0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerBackend {
    pub model: TransformerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Oracle(OracleBackend),
    Transformer(TransformerBackend),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Oracle(OracleBackend::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethod {
    #[default]
    Identity,
    WeightsOnly,
    /// W4 everywhere, A8 on the smallest-magnitude fraction of layers.
    Scq,
    /// W4 everywhere, A8 on a random fraction of layers.
    RandomFraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantVariant {
    pub method: QuantMethod,
    pub fraction: f64,
    pub stat: MagnitudeStat,
    pub calib_grids: usize,
    /// Seed for calibration inputs and the random layer draw.
    pub seed: u64,
}

impl Default for QuantVariant {
    fn default() -> Self {
        Self { method: QuantMethod::Identity, fraction: DEFAULT_FRACTION, stat: MagnitudeStat::Peak, calib_grids: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub backend: Backend,
    pub quant: Option<QuantVariant>,
    pub tome: Option<TomeSettings>,
}

impl RunConfig {
    /// Field-level checks first so messages name the offending fields, then
    /// the core validators.
    pub fn validate(&self) -> CliResult<()> {
        let s = &self.sampler;
        let k = s.width * s.height;
        if s.steps > k {
            return Err(CliError::config(format!(
                "sampler.steps ({}) exceeds sampler.width * sampler.height ({k})",
                s.steps
            )));
        }
        s.validate().map_err(|e| CliError::config(format!("sampler: {e}")))?;
        match &self.backend {
            Backend::Oracle(o) => {
                if o.vocab == 0 || o.conditions == 0 {
                    return Err(CliError::config("backend.vocab and backend.conditions must be positive"));
                }
                if !(o.sharpness.is_finite() && o.sharpness >= 0.0) {
                    return Err(CliError::config("backend.sharpness must be finite and non-negative"));
                }
                if s.condition >= o.conditions {
                    return Err(CliError::config(format!(
                        "sampler.condition ({}) must be below backend.conditions ({})",
                        s.condition, o.conditions
                    )));
                }
                if self.quant.is_some() || self.tome.is_some() {
                    return Err(CliError::config("quant and tome require backend.kind = transformer"));
                }
            }
            Backend::Transformer(t) => {
                let m = &t.model;
                m.validate().map_err(|e| CliError::config(format!("backend.model: {e}")))?;
                if m.width != s.width || m.height != s.height {
                    return Err(CliError::config(format!(
                        "backend.model.width/height ({}x{}) must equal sampler.width/height ({}x{})",
                        m.width, m.height, s.width, s.height
                    )));
                }
                if s.condition >= m.num_conditions {
                    return Err(CliError::config(format!(
                        "sampler.condition ({}) must be below backend.model.num_conditions ({})",
                        s.condition, m.num_conditions
                    )));
                }
                if self.quant.is_some() && self.tome.is_some() {
                    return Err(CliError::config("quant and tome cannot be combined"));
                }
                if let Some(q) = &self.quant {
                    if !(q.fraction > 0.0 && q.fraction <= 1.0) {
                        return Err(CliError::config("quant.fraction must lie in (0, 1]"));
                    }
                    if q.calib_grids == 0 {
                        return Err(CliError::config("quant.calib_grids must be positive"));
                    }
                }
                if let Some(tm) = &self.tome {
                    if !(0.0..1.0).contains(&tm.ratio) {
                        return Err(CliError::config("tome.ratio must lie in [0, 1)"));
                    }
                    if tm.ratio > 0.0 && m.joint_layers == 0 && !tm.force_all_layers {
                        return Err(CliError::config(
                            "tome.ratio > 0 needs backend.model.joint_layers > 0 or tome.force_all_layers",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Short flags naming every non-neutral variant, in a fixed order.
    pub fn variant_flags(&self) -> Vec<String> {
        let s = &self.sampler;
        let mut flags = vec![];
        if s.cfg_scale != 0.0 {
            flags.push(format!("cfg={}", s.cfg_scale));
        }
        if let Some(k) = s.deterministic_from {
            flags.push(format!("deterministic_from={k}"));
        }
        if let Some(n) = &s.noise {
            flags.push(format!("noise={}", serde_json::to_string(&n.curve).unwrap_or_default()));
        }
        if let Some(d) = &s.differential {
            flags.push(format!("differential.z={}", d.z));
        }
        if let Some(z) = &s.zigzag {
            flags.push(format!("zigzag={}", serde_json::to_string(&z.mode).unwrap_or_default()));
        }
        if let Some(sv) = &s.solver {
            flags.push(format!("solver.order={},stride={}", sv.order, sv.stride));
        }
        if let Some(q) = &self.quant {
            flags.push(format!("quant={}", serde_json::to_string(&q.method).unwrap_or_default()));
        }
        if let Some(t) = &self.tome {
            flags.push(format!("tome.ratio={}", t.ratio));
        }
        flags
    }
}

/// Recursively rebuilds every object with sorted keys.
pub fn canonicalize(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Compact canonical JSON of the fully defaulted config.
pub fn canonical_json(cfg: &RunConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    serde_json::to_string(&canonicalize(&v)).expect("value serializes")
}

/// Hex SHA-256 of [`canonical_json`].
pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(canonical_json(cfg).as_bytes()))
}

/// Deserializes `v`, reporting the JSON path of the first bad field.
pub fn from_value<T: DeserializeOwned>(v: Value) -> CliResult<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(format!("at `{path}`: {}", e.into_inner()))
    })
}

pub fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn parse_config(v: Value) -> CliResult<RunConfig> {
    let cfg: RunConfig = from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets a dotted `path` inside `root`, creating objects over null or missing
/// intermediate fields.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad axis path `{path}`")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("axis path `{path}` crosses a non-object at `{part}`")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one component")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn field_path_in_parse_errors() {
        let e = parse_config(json!({"sampler": {"steps": "many"}})).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("sampler.steps"), "{e}");
        let e = parse_config(json!({"sampler": {"stepz": 3}})).unwrap_err();
        assert!(e.to_string().contains("stepz"), "{e}");
    }

    #[test]
    fn too_many_steps_names_fields() {
        let e = parse_config(json!({"sampler": {"width": 2, "height": 2, "steps": 5}})).unwrap_err();
        let msg = e.to_string();
        assert_eq!(e.exit_code(), 2);
        assert!(msg.contains("sampler.steps") && msg.contains("sampler.width"), "{msg}");
    }

    #[test]
    fn hash_ignores_key_order_and_defaults() {
        let a = parse_config(json!({"sampler": {"seed": 3, "steps": 8}})).unwrap();
        let b = parse_config(json!({"sampler": {"steps": 8, "seed": 3}, "backend": {"kind": "oracle"}})).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = parse_config(json!({"sampler": {"seed": 4, "steps": 8}})).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn canonical_keys_sorted() {
        let s = serde_json::to_string(&canonicalize(&json!({"b": 1, "a": {"d": 2, "c": 3}}))).unwrap();
        assert_eq!(s, r#"{"a":{"c":3,"d":2},"b":1}"#);
    }

    #[test]
    fn set_path_creates_objects() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        set_path(&mut v, "sampler.differential.z", json!(25.0)).unwrap();
        let cfg = parse_config(v).unwrap();
        assert_eq!(cfg.sampler.differential.unwrap().z, 25.0);
        let mut v = json!({"a": 1});
        assert!(set_path(&mut v, "a.b", json!(1)).is_err());
        assert!(set_path(&mut v, "", json!(1)).is_err());
    }

    #[test]
    fn backend_rules() {
        let e = parse_config(json!({"tome": {"ratio": 0.5}})).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        parse_config(json!({"backend": {"kind": "transformer"}, "tome": {"ratio": 0.5}})).unwrap();
        let e = parse_config(json!({"backend": {"kind": "transformer", "model": {"width": 4}}})).unwrap_err();
        assert!(e.to_string().contains("backend.model.width"), "{e}");
    }
}
