//! Run manifests: everything needed to reproduce an output artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use evomerge_core::MergeConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::write_atomic;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    /// Subcommand that produced the run (`merge`, `optimize`, ...).
    pub command: String,
    pub config_paths: Vec<PathBuf>,
    /// Resolved configuration after `--set` overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
    pub seeds: BTreeMap<String, u64>,
    /// RFC 3339 timestamps.
    pub started_at: String,
    pub finished_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_config: Option<MergeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluations: Option<usize>,
    pub outputs: BTreeMap<String, PathBuf>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str, started_at: String) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            config_paths: Vec::new(),
            config: None,
            seeds: BTreeMap::new(),
            started_at,
            finished_at: String::new(),
            best_config: None,
            best_fitness: None,
            holdout_fitness: None,
            generations: None,
            evaluations: None,
            outputs: BTreeMap::new(),
        }
    }

    /// Stamps the finish time and writes the manifest atomically.
    pub fn finish(&mut self, path: &Path) -> Result<()> {
        self.finished_at = now();
        self.save(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        text.push('\n');
        write_atomic(path, text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
