use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_json, write_json};
use crate::{AppError, RunConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// SHA-256 over the tool version and the serialized config.
    pub fingerprint: String,
    pub seed: u64,
    pub config: RunConfig,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub checks: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<String, AppError> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn fingerprint(config: &RunConfig) -> Result<String, AppError> {
    let json = serde_json::to_string(config).map_err(|e| AppError::User(format!("cannot serialize config: {e}")))?;
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_NAME").as_bytes());
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(json.as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// Collects what a run read and wrote.
pub struct Recorder {
    inputs: Vec<String>,
    outputs: Vec<String>,
    checks: BTreeMap<String, serde_json::Value>,
}

impl Recorder {
    pub fn new() -> Self {
        Recorder {
            inputs: Vec::new(),
            outputs: Vec::new(),
            checks: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn check(&mut self, name: &str, value: serde_json::Value) {
        self.checks.insert(name.to_string(), value);
    }

    pub fn finish(self, out: &Path, config: RunConfig, seed: u64) -> Result<(), AppError> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.clone(), sha256_file(Path::new(p))?);
        }
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), sha256_file(&out.join(name))?);
        }
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint: fingerprint(&config)?,
            seed,
            config,
            inputs,
            outputs,
            checks: self.checks,
        };
        write_json(&out.join(MANIFEST), &manifest)
    }
}

pub fn load(path: &Path) -> Result<Manifest, AppError> {
    let path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    read_json(&path)
}
