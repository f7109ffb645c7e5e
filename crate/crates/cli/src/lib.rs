//! Command suite wiring phantoms, detector training, mining, FPR training,
//! inference, evaluation and the reader service into reproducible runs.

pub mod commands;
pub mod error;
pub mod server;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use aisdet::experiment::ExperimentConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_MANIFEST: &str = "run.json";
pub const SCHEMA: &str = include_str!("../../../schema/experiment.schema.json");

/// Reads and validates an experiment config; `None` gives the defaults.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::MissingArtifact(p.to_path_buf()),
                _ => e.into(),
            })?;
            let bad = |e: String| CliError::Config(format!("{}: {e}", p.display()));
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            check_schema(&value).map_err(bad)?;
            serde_json::from_value(value).map_err(|e| bad(e.to_string()))?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.phantom.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Validates a config document against the shipped schema; all violations are reported.
pub fn check_schema(value: &serde_json::Value) -> std::result::Result<(), String> {
    static VALIDATOR: OnceLock<jsonschema::Validator> = OnceLock::new();
    let v = VALIDATOR.get_or_init(|| {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).expect("shipped schema is JSON");
        jsonschema::validator_for(&schema).expect("shipped schema compiles")
    });
    let errors: Vec<String> = v.iter_errors(value).map(|e| format!("{} at '{}'", e, e.instance_path())).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join("; "))
    }
}

pub fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact(path.to_path_buf()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Output directory that records every file it writes in a run manifest.
pub struct RunDir {
    root: PathBuf,
    command: String,
    seed: u64,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    outputs: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(root)?;
        let mut dir = Self { root: root.to_path_buf(), command: command.to_string(), seed: cfg.seed, outputs: Vec::new() };
        dir.json(CONFIG_FILE, cfg)?;
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Registers a file written by other code.
    pub fn track(&mut self, rel: &str) {
        self.outputs.push(PathBuf::from(rel));
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        write_json(&p, value)?;
        self.track(rel);
        Ok(p)
    }

    pub fn bytes(&mut self, rel: &str, data: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, data)?;
        self.track(rel);
        Ok(p)
    }

    /// Writes the manifest with a hash of every tracked output.
    pub fn finish(self) -> Result<PathBuf> {
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            let data = fs::read(self.root.join(rel))?;
            outputs.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&data));
        }
        let p = self.root.join(RUN_MANIFEST);
        write_json(&p, &RunManifest { command: &self.command, seed: self.seed, outputs })?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_satisfies_schema() {
        let v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        check_schema(&v).unwrap();
    }

    #[test]
    fn schema_rejects_unknown_nested_keys() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["detector"]["window"]["level"] = 3.into();
        assert!(check_schema(&v).unwrap_err().contains("/detector/window"));
    }

    #[test]
    fn schema_accepts_omitted_optimizer_moments() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        let opt = v["detector_schedule"]["phases"][0]["optimizer"].as_object_mut().unwrap();
        opt.retain(|k, _| k == "kind" || k == "learning_rate");
        check_schema(&v).unwrap();
        serde_json::from_value::<ExperimentConfig>(v).unwrap();
    }
}
