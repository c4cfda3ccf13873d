//! One live plant simulation driven by an operator.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use pumpsched_core::dataset::{
    format_timestamp, parse_timestamp, synthesize_demand, write_trajectory, DemandTrace, TrajectoryRow,
};
use pumpsched_core::env::{Env, RewardVariant};
use pumpsched_core::metrics::{switches_between, SwitchCounting};
use pumpsched_core::{Action, AppConfig};
use serde::Serialize;
use uuid::Uuid;

use crate::protocol::{ClockSpec, ErrorCode, Scenario, ServerMessage, StateMessage, Totals};

#[derive(Debug, Clone, Copy, Default)]
struct EpisodeAcc {
    steps: usize,
    kwh: f64,
    switches: u64,
    reward: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub session_id: Uuid,
    pub clock: ClockSpec,
    pub latched: Action,
    pub created: DateTime<Utc>,
    pub last_active: DateTime<Utc>,
    pub totals: Totals,
    pub remaining_minutes: usize,
    pub failed: Option<String>,
}

pub struct Session {
    pub id: Uuid,
    pub clock: ClockSpec,
    pub latched: Action,
    pub created: DateTime<Utc>,
    pub last_active_wall: DateTime<Utc>,
    pub last_active: Instant,
    /// Connected stream clients; a watched session never expires.
    pub subscribers: usize,
    env: Env,
    reward: RewardVariant,
    last_action: Action,
    totals: Totals,
    episode: EpisodeAcc,
    /// Set when the simulation panicked; the session only answers errors afterwards.
    failed: Option<String>,
}

/// Validate a scenario and build its session.
pub fn create_session(cfg: &AppConfig, scenario: &Scenario, clock: ClockSpec) -> Result<Session, String> {
    let mut cfg = cfg.clone();
    if let Some(variant) = scenario.reward {
        cfg.reward.variant = variant;
    }
    let clock = match clock {
        ClockSpec::Manual => ClockSpec::Manual,
        ClockSpec::Timed { minutes_per_second } => {
            let rate = minutes_per_second.unwrap_or(cfg.service.minutes_per_second);
            if !(rate > 0.0 && rate <= 60_000.0) {
                return Err(format!("minutes_per_second must be in (0, 60000], got {rate}"));
            }
            ClockSpec::Timed {
                minutes_per_second: Some(rate),
            }
        }
    };
    let trace = match &scenario.demand {
        Some(demand) => {
            if demand.is_empty() {
                return Err("demand trace is empty".into());
            }
            let start = match &scenario.start {
                Some(s) => parse_timestamp(s).ok_or_else(|| format!("bad start timestamp {s:?}"))?,
                None => cfg.demand.start,
            };
            DemandTrace {
                start,
                demand: demand.clone(),
            }
        }
        None => {
            let days = scenario.days.unwrap_or(cfg.service.scenario_days);
            if days == 0 || days > 366 {
                return Err(format!("days must be between 1 and 366, got {days}"));
            }
            synthesize_demand(days, scenario.seed, &cfg.demand)
        }
    };
    let level = scenario.initial_level.unwrap_or(cfg.env.initial_level);
    let mut env = Env::new(cfg.hydraulics.clone(), cfg.reward, &cfg.env, trace).map_err(|e| e.to_string())?;
    env.reset(level, 0).map_err(|e| e.to_string())?;
    env.set_recording(true);
    let now = Utc::now();
    Ok(Session {
        id: Uuid::new_v4(),
        clock,
        latched: Action::NOP,
        created: now,
        last_active_wall: now,
        last_active: Instant::now(),
        subscribers: 0,
        env,
        reward: cfg.reward.variant,
        last_action: Action::NOP,
        totals: Totals::default(),
        episode: EpisodeAcc::default(),
        failed: None,
    })
}

impl Session {
    pub fn touch(&mut self) {
        self.last_active = Instant::now();
        self.last_active_wall = Utc::now();
    }

    pub fn totals(&self) -> Totals {
        self.totals
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        self.env.trajectory()
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id,
            clock: self.clock,
            latched: self.latched,
            created: self.created,
            last_active: self.last_active_wall,
            totals: self.totals,
            remaining_minutes: self.env.remaining(),
            failed: self.failed.clone(),
        }
    }

    fn timestamp(&self) -> String {
        let index = self.env.position().unwrap_or(0);
        format_timestamp(&self.env.trace().timestamp(index))
    }

    pub fn created_message(&self) -> ServerMessage {
        ServerMessage::Created {
            session_id: self.id,
            clock: self.clock,
            reward: self.reward,
            horizon: self.env.trace().len(),
            observation: self.env.observation().expect("session env is reset"),
            timestamp: self.timestamp(),
        }
    }

    /// Acknowledge a newly latched action without advancing the plant.
    pub fn latch(&mut self, action: Action, seq: Option<u64>) -> ServerMessage {
        self.latched = action;
        ServerMessage::State(StateMessage {
            session_id: self.id,
            seq,
            action,
            latched: true,
            observation: self.env.observation().expect("session env is reset"),
            timestamp: self.timestamp(),
            reward: None,
            info: None,
            switches: 0,
            totals: self.totals,
        })
    }

    /// Advance one minute. The first message answers the step; an
    /// `episode_end` notice follows when the step closed an episode.
    pub fn step(&mut self, action: Action, seq: Option<u64>) -> Vec<ServerMessage> {
        if let Some(reason) = &self.failed {
            return vec![ServerMessage::error(
                Some(self.id),
                seq,
                ErrorCode::SessionFailed,
                format!("session is out of service: {reason}"),
            )];
        }
        let env = &mut self.env;
        let outcome = match catch_unwind(AssertUnwindSafe(|| env.step(action))) {
            Ok(Ok(outcome)) => outcome,
            Ok(Err(e)) => {
                return vec![ServerMessage::error(Some(self.id), seq, ErrorCode::SimulationError, e.to_string())];
            }
            Err(panic) => {
                let reason = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "simulation panicked".into());
                log::error!("session {} failed: {reason}", self.id);
                self.failed = Some(reason.clone());
                return vec![ServerMessage::error(Some(self.id), seq, ErrorCode::SessionFailed, reason)];
            }
        };
        let switches = switches_between(self.last_action, action, SwitchCounting::PerPump) as u64;
        self.last_action = action;
        let kwh = outcome.info.kw / 60.0;
        self.totals.steps += 1;
        self.totals.kwh += kwh;
        self.totals.switches += switches;
        self.totals.reward += outcome.reward;
        self.episode.steps += 1;
        self.episode.kwh += kwh;
        self.episode.switches += switches;
        self.episode.reward += outcome.reward;

        let mut out = Vec::with_capacity(2);
        let finished = self.totals.episode;
        if outcome.info.episode_end {
            self.totals.episode += 1;
        }
        self.totals.step_in_episode = self.env.step_in_episode().unwrap_or(0);
        out.push(ServerMessage::State(StateMessage {
            session_id: self.id,
            seq,
            action,
            latched: false,
            observation: outcome.observation,
            timestamp: self.timestamp(),
            reward: Some(outcome.reward),
            info: Some(outcome.info),
            switches,
            totals: self.totals,
        }));
        if outcome.info.episode_end {
            let ep = std::mem::take(&mut self.episode);
            out.push(ServerMessage::EpisodeEnd {
                session_id: self.id,
                episode: finished,
                steps: ep.steps,
                kwh: ep.kwh,
                switches: ep.switches,
                reward: ep.reward,
            });
        }
        out
    }

    pub fn export_csv(rows: &[TrajectoryRow]) -> String {
        let mut buf = Vec::new();
        write_trajectory(rows, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    /// Write the recorded trajectory to `<dir>/<id>.csv`. Nothing is written
    /// for a session without steps.
    pub fn flush_to(&self, dir: &Path) -> std::io::Result<Option<PathBuf>> {
        if self.rows().is_empty() {
            return Ok(None);
        }
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.csv", self.id));
        let file = std::fs::File::create(&path)?;
        write_trajectory(self.rows(), std::io::BufWriter::new(file)).map_err(std::io::Error::other)?;
        Ok(Some(path))
    }
}
