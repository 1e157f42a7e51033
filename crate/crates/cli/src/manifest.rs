//! One JSON manifest per run: what was run, on what, and what came out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    /// Command-specific flags that change results.
    pub options: Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub metrics: Value,
    /// Digest of command, config, seed, options and input contents.
    pub fingerprint: String,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<InputDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex_digest(&bytes),
    })
}

/// Accumulates a manifest while a command runs.
pub struct ManifestBuilder {
    command: String,
    config: Value,
    seed: Option<u64>,
    options: Value,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started: std::time::Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: Value, seed: Option<u64>, options: Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            options,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: std::time::Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(digest_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Identity of the run; paths are left out so moved inputs still match.
    pub fn fingerprint(&self) -> String {
        let digests: Vec<&str> = self.inputs.iter().map(|d| d.sha256.as_str()).collect();
        let key = serde_json::json!({
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "options": self.options,
            "inputs": digests,
        });
        hex_digest(key.to_string().as_bytes())
    }

    pub fn finish(self, metrics: Value, path: PathBuf) -> Result<RunManifest, CliError> {
        let mut m = RunManifest {
            fingerprint: self.fingerprint(),
            command: self.command,
            config: self.config,
            seed: self.seed,
            options: self.options,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            metrics,
        };
        m.outputs.push(path.display().to_string());
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(m)
    }
}
