//! Experiment configuration files.
//!
//! A config is a TOML document (or the equivalent JSON) with top-level run
//! settings and a `[federation]` table. A `manifest.json` written by a
//! previous run is also accepted, in which case its embedded config is used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::report::Manifest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub label: String,
    pub output_dir: PathBuf,
    /// Fixed round for the timing report instead of the 1.05x-final rule.
    pub convergence_round: Option<usize>,
    /// Held-out rows per slice written to `attributions.csv`.
    pub report_samples: usize,
    /// When `false`, `rounds.csv` carries `wall_time_s = 0` so that reruns
    /// are byte-identical. `timing.csv` always holds measured times.
    pub record_wall_time: bool,
    pub federation: FederationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "experiment".into(),
            output_dir: PathBuf::from("runs/experiment"),
            convergence_round: None,
            report_samples: 200,
            record_wall_time: true,
            federation: FederationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(0) = self.convergence_round {
            return Err(Error::invalid("convergence_round must be >= 1"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::invalid("output_dir must not be empty"));
        }
        self.federation.validate()
    }

    /// Reads and validates a config or manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = parse_config_str(&text).map_err(|message| Error::Config {
            path: path.to_path_buf(),
            message,
        })?;
        cfg.validate().map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

/// Parses config text. JSON input may be a bare config or a run manifest;
/// anything else is read as TOML. Errors carry the parser's line and
/// column.
pub fn parse_config_str(text: &str) -> std::result::Result<ExperimentConfig, String> {
    if text.trim_start().starts_with('{') {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if value.get("format").and_then(|f| f.as_str()) == Some(crate::report::MANIFEST_FORMAT) {
            let manifest: Manifest = serde_json::from_value(value).map_err(|e| e.to_string())?;
            return Ok(manifest.config);
        }
        return serde_json::from_str(text).map_err(|e| e.to_string());
    }
    toml::from_str(text).map_err(|e| e.to_string())
}
