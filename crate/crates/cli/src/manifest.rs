//! Output manifests: every artifact with its hash, plus the settings that
//! produced it.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the manifest's directory (outputs) or input root (inputs),
    /// `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub item: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<FileRecord>,
    pub artifacts: Vec<FileRecord>,
    pub failures: Vec<Failure>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_sha256: String) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_sha256,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            failures: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    /// Sort records, write `manifest.json` into `dir` and return its hash.
    pub fn write(&mut self, dir: &Path) -> Result<String> {
        self.inputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.failures.sort_by(|a, b| a.item.cmp(&b.item));
        let text = serde_json::to_string_pretty(self)? + "\n";
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash `root/rel`, recording it under `rel`.
pub fn record(root: &Path, rel: &Path) -> Result<FileRecord> {
    let path = root.join(rel);
    let bytes = fs::read(&path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileRecord {
        path: rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/"),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Hash a file outside any output tree, recorded under its file name.
pub fn record_input(path: &Path) -> Result<FileRecord> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().context("input path has no file name")?;
    record(parent, Path::new(name))
}
