//! The CLI's JSON configuration: every `TrainConfig` key at the top level,
//! plus the sections below for data generation, file locations, ablation
//! rows and the gradient check.

use std::path::PathBuf;

use anyhow::{bail, Context};
use composeae::{SynthConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// CRF1 manifest used for training.
    pub train: Option<PathBuf>,
    /// CRF1 manifest used for evaluation during and after training.
    pub eval: Option<PathBuf>,
}

/// One row of an ablation table: a variant and an optional `lambda_sym`
/// override applied on top of the base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    pub variant: Variant,
    #[serde(default)]
    pub lambda_sym: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Rows in the random batch.
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { batch: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSections {
    pub synth: SynthConfig,
    /// Samples `synth` moves into a separate held-out dataset; 0 keeps all.
    pub held_out: usize,
    pub data: DataPaths,
    /// Checkpoint evaluated by `eval`.
    pub checkpoint: Option<PathBuf>,
    /// When non-empty, `train` runs every row instead of the base variant.
    pub ablation: Vec<AblationRow>,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunSections {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            held_out: 500,
            data: DataPaths::default(),
            checkpoint: None,
            ablation: Vec::new(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub run: RunSections,
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

impl RunConfig {
    /// All keys with every default materialized.
    pub fn to_json(&self) -> Value {
        let mut merged = object(serde_json::to_value(&self.train).expect("serializable"));
        merged.extend(object(serde_json::to_value(&self.run).expect("serializable")));
        Value::Object(merged)
    }

    pub fn from_json(value: Value) -> anyhow::Result<Self> {
        check_keys(&value, &Self::default().to_json(), "")?;
        let Value::Object(all) = value else { bail!("config must be a JSON object") };
        let run_keys = object(serde_json::to_value(RunSections::default())?);
        let (run, train): (Map<_, _>, Map<_, _>) = all.into_iter().partition(|(k, _)| run_keys.contains_key(k));
        Ok(Self {
            train: serde_json::from_value(Value::Object(train)).context("invalid training configuration")?,
            run: serde_json::from_value(Value::Object(run)).context("invalid run configuration")?,
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown config key: {0}")]
pub struct UnknownKey(pub String);

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Every object key in `value` must exist at the same place in `reference`.
fn check_keys(value: &Value, reference: &Value, prefix: &str) -> Result<(), UnknownKey> {
    if let (Value::Object(v), Value::Object(r)) = (value, reference) {
        for (k, child) in v {
            let path = join(prefix, k);
            match r.get(k) {
                Some(rc) => check_keys(child, rc, &path)?,
                None => return Err(UnknownKey(path)),
            }
        }
    }
    Ok(())
}

/// Checks that the dotted `key` names a setting of the default config.
pub fn validate_key(key: &str) -> Result<(), UnknownKey> {
    let mut node = &RunConfig::default().to_json();
    for part in key.split('.') {
        node = node.get(part).ok_or_else(|| UnknownKey(key.to_string()))?;
    }
    Ok(())
}

/// `value` is read as JSON when it parses, otherwise as a plain string.
pub fn parse_value(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

/// Sets the dotted `key` inside `root`, creating objects under null parents.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<(), UnknownKey> {
    validate_key(key)?;
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .ok_or_else(|| UnknownKey(key.to_string()))?
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Map::new());
    }
    node.as_object_mut()
        .ok_or_else(|| UnknownKey(key.to_string()))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
