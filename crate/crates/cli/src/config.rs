//! Run configuration: defaults, a JSON or `key = value` file on top, then
//! `XLEMBED_<SECTION>_<KEY>` environment overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use xlembed::contrastive::TrainConfig;
use xlembed::data::CorpusSpec;
use xlembed::encoder::Preset;
use xlembed::lora::LoraConfig;

use crate::CliError;

pub const ENV_PREFIX: &str = "XLEMBED_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seeds the encoder, adapter initialization and training order.
    pub seed: u64,
    pub preset: Preset,
    pub max_len: usize,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::Small,
            max_len: 32,
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusSpec::default(),
        }
    }
}

impl RunConfig {
    /// Same run with every seed set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.lora.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.max_len == 0 {
            return Err(CliError::config("max_len must be at least 1"));
        }
        self.lora.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        Ok(())
    }

    pub fn experiment(&self) -> xlembed::experiment::ExperimentConfig {
        xlembed::experiment::ExperimentConfig {
            corpus: self.corpus.clone(),
            lora: self.lora.clone(),
            train: self.train.clone(),
            max_len: self.max_len,
        }
    }
}

/// Defaults, then `path` if given, then environment overrides.
pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        overlay(&mut value, &parse_file(&text)?, "")?;
    }
    let mut env_patch = Value::Object(Map::new());
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path = env_path(&value, &key[ENV_PREFIX.len()..]).ok_or_else(|| CliError::config(format!("{key} names no config field")))?;
        set_path(&mut env_patch, &path, scalar(&raw));
    }
    overlay(&mut value, &env_patch, "")?;
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| CliError::config(format!("{}: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A JSON object, or `key = value` lines with dotted keys and `#` comments.
pub fn parse_file(text: &str) -> Result<Value, CliError> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")));
    }
    let mut patch = Value::Object(Map::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("config line {}: expected key = value", i + 1)))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::config(format!("config line {}: bad key {:?}", i + 1, key.trim())));
        }
        set_path(&mut patch, &path, scalar(raw.trim()));
    }
    Ok(patch)
}

/// JSON when it parses as JSON, otherwise a plain string.
fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &[String], v: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        let obj = cur.as_object_mut().expect("patch nodes are objects");
        cur = obj.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
    }
    cur.as_object_mut().expect("patch nodes are objects").insert(path[path.len() - 1].clone(), v);
}

/// Merges `patch` into `base`, refusing keys `base` does not have.
fn overlay(base: &mut Value, patch: &Value, prefix: &str) -> Result<(), CliError> {
    let Some(fields) = patch.as_object() else {
        return Err(CliError::config("config must be an object"));
    };
    for (k, v) in fields {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = base
            .as_object_mut()
            .and_then(|o| o.get_mut(k))
            .ok_or_else(|| CliError::config(format!("unknown config key {name}")))?;
        if slot.is_object() && v.is_object() {
            overlay(slot, v, &name)?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

/// `TRAIN_BATCH_SIZE` -> `["train", "batch_size"]`, checked against `shape`.
fn env_path(shape: &Value, name: &str) -> Option<Vec<String>> {
    let name = name.to_ascii_lowercase();
    let top = shape.as_object()?;
    if top.get(&name).is_some_and(|v| !v.is_object()) {
        return Some(vec![name]);
    }
    for (section, fields) in top.iter().filter(|(_, v)| v.is_object()) {
        if let Some(key) = name.strip_prefix(&format!("{section}_")) {
            if fields.as_object()?.contains_key(key) {
                return Some(vec![section.clone(), key.to_string()]);
            }
        }
    }
    None
}
