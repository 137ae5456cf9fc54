use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use fedgen::orchestrator::ExperimentConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub out_dir: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub files: Vec<&'static str>,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, out_dir: &Path, started_unix_ms: u128, finished_unix_ms: u128) -> Self {
        Self {
            config_hash: config_hash(&config),
            config,
            out_dir: out_dir.display().to_string(),
            started_unix_ms,
            finished_unix_ms,
            files: vec!["metrics.csv", "metrics.jsonl", "checkpoint.bin", "table.json"],
        }
    }
}

/// SHA-256 over a git-style blob of the canonical JSON form, so formatting
/// and key order in the config file do not matter.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", canonical.len()).as_bytes());
    h.update(canonical.as_bytes());
    hex::encode(h.finalize())
}

pub fn unix_millis() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}
