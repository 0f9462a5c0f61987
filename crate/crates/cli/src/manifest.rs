//! `manifest.json`, written into an output directory before any other work happens.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved settings, defaults included.
    pub config: Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub device: Option<String>,
    pub tool_version: String,
    pub timestamp_unix: u64,
    /// Filled in once the command finishes; `null` while it runs.
    pub outcome: Value,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Value, output_dir: &Path) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config,
            inputs: BTreeMap::new(),
            output_dir: output_dir.to_path_buf(),
            seed: None,
            device: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outcome: Value::Null,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn path(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_NAME)
    }

    /// Creates the output directory if needed and (over)writes the manifest.
    pub fn write(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.output_dir)
            .map_err(|e| CliError::Env(format!("cannot create {}: {e}", self.output_dir.display())))?;
        let path = self.path();
        soilseg::json::write_sorted(&path, self)
            .map_err(|e| CliError::Env(format!("cannot write {}: {e}", path.display())))
    }

    pub fn finish(&mut self, outcome: Value) -> Result<(), CliError> {
        self.outcome = outcome;
        self.write()
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Env(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Env(format!("{}: {e}", path.display())))
    }
}
