//! Run manifests: every subcommand records its resolved configuration,
//! input/output paths, seed and the SHA-256 of every artifact it wrote, so
//! reruns can be checked for bit-identical outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    /// Artifact path -> sha256 hex digest.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub hardware: String,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
    started_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            artifacts: Vec::new(),
            started_unix: now_unix(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<&mut Self> {
        self.config = serde_json::to_value(cfg)?;
        Ok(self)
    }

    pub fn input(&mut self, key: &str, path: impl AsRef<Path>) -> &mut Self {
        self.inputs
            .insert(key.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn output(&mut self, key: &str, path: impl AsRef<Path>) -> &mut Self {
        self.outputs
            .insert(key.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    /// Register a written artifact (file, or directory hashed recursively).
    pub fn artifact(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.artifacts.push(path.into());
        self
    }

    /// Hash artifacts and write `manifest.json` under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let mut artifacts = BTreeMap::new();
        for path in &self.artifacts {
            for (file, digest) in hash_tree(path)? {
                artifacts.insert(file, digest);
            }
        }
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            seed: self.seed,
            artifacts,
            started_unix: self.started_unix,
            finished_unix: now_unix(),
            hardware: polypseg_core::report::hardware_description(),
        };
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let path = out_dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, body + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Hash a file, or every file under a directory (sorted for determinism).
fn hash_tree(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if path.is_file() {
        out.push((path.display().to_string(), sha256_file(path)?));
        return Ok(out);
    }
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for entry in entries {
            out.extend(hash_tree(&entry)?);
        }
    }
    Ok(out)
}
