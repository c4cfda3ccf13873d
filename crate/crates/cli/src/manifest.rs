use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use pumpsched_core::AppConfig;
use serde::Serialize;

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    /// Effective configuration after CLI overrides.
    pub config: AppConfig,
}

impl RunManifest {
    pub fn new(subcommand: &str, config_path: Option<PathBuf>, seed: u64, config: &AppConfig) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            version: crate::VERSION.to_string(),
            config_path,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Utc::now(),
            finished: None,
            config: config.clone(),
        }
    }

    pub fn path_in(&self, out: &Path) -> PathBuf {
        out.join(format!("{}.manifest.json", self.subcommand.replace(' ', "-")))
    }

    pub fn write(&mut self, out: &Path) -> std::io::Result<PathBuf> {
        self.finished = Some(Utc::now());
        let path = self.path_in(out);
        std::fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }
}
