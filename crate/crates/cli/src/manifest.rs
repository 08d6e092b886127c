//! Run manifests: enough provenance to reproduce every artifact from the
//! manifest alone (embedded config, input digests, seeds, tool version).

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub artifacts: Vec<String>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path.as_ref())?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        let config_digest =
            sha256_bytes(serde_json::to_string(&config).unwrap_or_default().as_bytes());
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            config_digest,
            inputs: BTreeMap::new(),
            seeds: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            artifacts: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        self.inputs
            .insert(p.display().to_string(), sha256_file(p)?);
        Ok(())
    }

    pub fn add_artifact(&mut self, path: impl AsRef<Path>) {
        self.artifacts.push(path.as_ref().display().to_string());
    }

    /// Finalize timestamps and write `manifest.json` into `dir`.
    pub fn write(mut self, dir: impl AsRef<Path>) -> Result<()> {
        self.finished_unix_ms = now_ms();
        let path = dir.as_ref().join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}
