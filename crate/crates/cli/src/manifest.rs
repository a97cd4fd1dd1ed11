use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coupling_core::checkpoint::write_atomic;
use coupling_core::ExperimentConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub path: String,
    pub kind: String,
    pub epoch: usize,
    /// Parameter digest; re-running with the same config and seed reproduces it.
    pub digest: String,
}

/// Everything needed to reconstruct a run directory. Commands that share a
/// directory merge into the same manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config_digest: String,
    /// Full TOML snapshot of the config.
    pub config: String,
    pub commands: Vec<String>,
    pub checkpoints: Vec<CheckpointEntry>,
    /// Every other produced file, relative to the run directory.
    pub artifacts: Vec<String>,
    pub metric_reports: Vec<String>,
    /// Network evaluations spent by the last sampling command.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nfe: Option<u64>,
    /// Wall-clock seconds per command; empty in deterministic mode.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    /// The manifest already in `dir`, or a fresh one.
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            Ok(serde_json::from_slice(&std::fs::read(&path)?)?)
        } else {
            Ok(RunManifest::default())
        }
    }

    pub fn set_config(&mut self, cfg: &ExperimentConfig, seed: u64, deterministic: bool) {
        self.code_version = env!("CARGO_PKG_VERSION").to_string();
        self.seed = seed;
        self.deterministic = deterministic;
        self.config_digest = cfg.digest();
        self.config = cfg.to_toml_string();
    }

    pub fn record_command(&mut self, name: &str, seconds: f64) {
        self.commands.push(name.to_string());
        if !self.deterministic {
            self.timings.insert(name.to_string(), seconds);
        }
    }

    pub fn add_checkpoint(&mut self, entry: CheckpointEntry) {
        self.checkpoints.retain(|c| c.path != entry.path);
        self.checkpoints.push(entry);
    }

    pub fn add_artifact(&mut self, rel: impl Into<String>) {
        let rel = rel.into();
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }

    pub fn add_metric_report(&mut self, rel: impl Into<String>) {
        let rel = rel.into();
        if !self.metric_reports.contains(&rel) {
            self.metric_reports.push(rel);
        }
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

/// `path` relative to `dir` when inside it, else as given.
pub fn relative(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}
