//! Top-level JSON configuration. Every section and field is optional; missing
//! values take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{BcConfig, TrainConfig};
use crate::dataset::{DemandProfileConfig, DEFAULT_KW_TOLERANCE};
use crate::env::{EnvConfig, RewardConfig};
use crate::hydraulics::HydraulicsConfig;
use crate::metrics::SwitchCounting;
use crate::replay::ReplayConfig;
use crate::synth::RuleConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Offline training loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Gradient updates per `train` run.
    pub train_steps: usize,
    /// Write a training-log row every this many updates.
    pub log_every: usize,
    /// Run a greedy evaluation day every this many updates (0 = never).
    pub eval_every: usize,
    /// Electrical draw above which a pump counts as running, kW.
    pub kw_tolerance: f64,
    pub switch_counting: SwitchCounting,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_steps: 500,
            log_every: 50,
            eval_every: 0,
            kw_tolerance: DEFAULT_KW_TOLERANCE,
            switch_counting: SwitchCounting::PerPump,
        }
    }
}

/// Interactive session service settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Idle sessions older than this are expired and flushed, seconds.
    pub session_ttl_secs: u64,
    /// Directory receiving flushed trajectories.
    pub flush_dir: PathBuf,
    /// Default days of synthetic demand behind a new session.
    pub scenario_days: usize,
    pub max_sessions: usize,
    /// Timed-mode default, simulated minutes per real second.
    pub minutes_per_second: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_ttl_secs: 1800,
            flush_dir: PathBuf::from("sessions"),
            scenario_days: 7,
            max_sessions: 256,
            minutes_per_second: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub hydraulics: HydraulicsConfig,
    pub reward: RewardConfig,
    pub demand: DemandProfileConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub replay: ReplayConfig,
    pub bc: BcConfig,
    pub rule: RuleConfig,
    pub pipeline: PipelineConfig,
    pub service: ServiceConfig,
}

impl AppConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.hydraulics.validate().map_err(|e| invalid(&e))?;
        self.reward.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.hydraulics
            .tank
            .check_level(self.env.initial_level)
            .map_err(|e| invalid(&e))?;
        if !(self.env.dt_minutes > 0.0) || !(self.env.demand_max > 0.0) {
            return Err(ConfigError::Invalid("env.dt_minutes and env.demand_max must be positive".into()));
        }
        let r = &self.replay;
        if r.capacity == 0 || !(r.alpha >= 0.0) || !(r.eps > 0.0) || !(0.0..=1.0).contains(&r.beta_start) || !(0.0..=1.0).contains(&r.beta_end)
        {
            return Err(ConfigError::Invalid(
                "replay needs capacity > 0, alpha ≥ 0, eps > 0 and betas in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.bc.holdout) {
            return Err(ConfigError::Invalid("bc.holdout must be in [0, 1)".into()));
        }
        if self.pipeline.log_every == 0 {
            return Err(ConfigError::Invalid("pipeline.log_every must be at least 1".into()));
        }
        if !(self.service.minutes_per_second > 0.0) {
            return Err(ConfigError::Invalid("service.minutes_per_second must be positive".into()));
        }
        Ok(())
    }
}
