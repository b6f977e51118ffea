//! Layered JSON configuration: defaults, then an optional file, then
//! `--set dotted.key=value` overrides on scalar leaves.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::{AffineRepr, GuidanceConfig};
use crate::sampler::UniformConfig;
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS};
use crate::score::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { n_steps: DEFAULT_STEPS, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.n_steps, self.beta_min, self.beta_max)
            .map_err(|e| Error::Config(format!("schedule: {e}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainScoreConfig {
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Applied to every training item as `(v - offset) / scale` first.
    pub data_repr: AffineRepr,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub seed: u64,
    pub snapshot_stride: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub schedule: ScheduleConfig,
    pub sampler: SamplerSection,
    pub guidance: GuidanceConfig,
    pub uniform: UniformConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplePriorConfig {
    pub schedule: ScheduleConfig,
    /// Maps chain samples to output values as `scale * v + offset`.
    pub repr: AffineRepr,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeGapConfig {
    pub schedule: ScheduleConfig,
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just created")
            }
            _ => return Err(Error::Config(format!("`{key}`: `{part}` is below a scalar"))),
        };
        if n + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Defaults, overlaid by the file, overlaid by the overrides. Unknown keys
/// are rejected.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read(path)?;
        let overlay: Value =
            serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !overlay.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut value, overlay);
    }
    for s in sets {
        set_path(&mut value, s)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// SHA-256 of the compact JSON form.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_leaves() {
        let cfg: SolveConfig = load_config(
            None,
            &["guidance.step_size=0.7".into(), "guidance.reg_kind=l0".into(), "schedule.n_steps=50".into()],
        )
        .unwrap();
        assert_eq!(cfg.guidance.step_size, 0.7);
        assert_eq!(cfg.guidance.reg_kind, crate::guidance::RegKind::L0);
        assert_eq!(cfg.schedule.n_steps, 50);
        assert_eq!(cfg.uniform, UniformConfig::default());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"guidance": {"step_size": 2.0, "reg_weight": 0.5}}"#).unwrap();
        let cfg: SolveConfig = load_config(Some(&path), &["guidance.step_size=3".into()]).unwrap();
        assert_eq!(cfg.guidance.step_size, 3.0);
        assert_eq!(cfg.guidance.reg_weight, 0.5);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let bad = |sets: &[&str]| {
            let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
            matches!(load_config::<SolveConfig>(None, &sets), Err(Error::Config(_)))
        };
        assert!(bad(&["guidance.no_such_field=1"]));
        assert!(bad(&["guidance.step_size"]));
        assert!(bad(&["guidance.step_size.x=1"]));
        assert!(bad(&["guidance.step_size=fast"]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_config::<SolveConfig>(Some(&path), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = SolveConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.sampler.seed = 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
