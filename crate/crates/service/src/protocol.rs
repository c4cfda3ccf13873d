//! JSON wire format shared by the HTTP endpoints and the session stream.
//! See `docs/protocol.md` for the field reference.

use pumpsched_core::env::{Observation, RewardVariant, StepInfo};
use pumpsched_core::Action;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub const PROTOCOL_VERSION: u32 = 1;

/// Where a new session's demand comes from and how it starts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    /// Days of seeded synthetic demand; ignored when `demand` is given.
    pub days: Option<usize>,
    pub seed: u64,
    /// Initial tank level, m.
    pub initial_level: Option<f64>,
    pub reward: Option<RewardVariant>,
    /// Explicit per-minute demand, m³/h.
    pub demand: Option<Vec<f64>>,
    /// First timestamp of an explicit demand trace, `YYYY-MM-DDTHH:MM`.
    pub start: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockSpec {
    /// The plant advances one minute per `act`.
    #[default]
    Manual,
    /// The plant advances on a server clock with the last commanded action
    /// latched.
    Timed { minutes_per_second: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMessage {
    Create {
        #[serde(default)]
        scenario: Scenario,
        #[serde(default)]
        clock: ClockSpec,
    },
    Act {
        action: String,
        #[serde(default)]
        seq: Option<u64>,
    },
    Export {
        #[serde(default)]
        seq: Option<u64>,
    },
}

/// Every message carries the protocol version next to its kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(body: T) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            body,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub steps: u64,
    pub kwh: f64,
    /// Per-pump ON/OFF changes.
    pub switches: u64,
    pub reward: f64,
    /// Completed episodes.
    pub episode: u64,
    pub step_in_episode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub session_id: Uuid,
    /// Echo of the `act` this answers; absent on clock ticks.
    pub seq: Option<u64>,
    /// Action applied in this step, or the newly latched action.
    pub action: Action,
    /// True when the message acknowledges a latched action without stepping.
    pub latched: bool,
    /// Observation for the upcoming minute.
    pub observation: Observation,
    /// Timestamp of the upcoming minute.
    pub timestamp: String,
    pub reward: Option<f64>,
    pub info: Option<StepInfo>,
    /// Switches caused by this step.
    pub switches: u64,
    pub totals: Totals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    UnsupportedVersion,
    BadAction,
    UnknownSession,
    InvalidScenario,
    EmptySession,
    SimulationError,
    SessionFailed,
    TooManySessions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Created {
        session_id: Uuid,
        clock: ClockSpec,
        reward: RewardVariant,
        /// Minutes of demand available.
        horizon: usize,
        observation: Observation,
        timestamp: String,
    },
    State(StateMessage),
    EpisodeEnd {
        session_id: Uuid,
        /// Index of the episode that just finished, from 0.
        episode: u64,
        steps: usize,
        kwh: f64,
        switches: u64,
        reward: f64,
    },
    Exported {
        session_id: Uuid,
        seq: Option<u64>,
        rows: usize,
        csv: String,
    },
    Error {
        session_id: Option<Uuid>,
        seq: Option<u64>,
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(session_id: Option<Uuid>, seq: Option<u64>, code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            session_id,
            seq,
            code,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Envelope::new(self)).expect("wire messages serialize")
    }
}

/// Parse and version-check a client message.
pub fn parse_client(text: &str) -> Result<ClientMessage, ServerMessage> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| ServerMessage::error(None, None, ErrorCode::BadMessage, format!("not JSON: {e}")))?;
    let seq = value.get("seq").and_then(serde_json::Value::as_u64);
    match value.get("v").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(PROTOCOL_VERSION) => {}
        Some(v) => {
            return Err(ServerMessage::error(
                None,
                seq,
                ErrorCode::UnsupportedVersion,
                format!("protocol version {v} is not supported; use {PROTOCOL_VERSION}"),
            ))
        }
        None => {
            return Err(ServerMessage::error(None, seq, ErrorCode::BadMessage, "missing numeric field `v`"));
        }
    }
    let env: Envelope<ClientMessage> = serde_json::from_value(value)
        .map_err(|e| ServerMessage::error(None, seq, ErrorCode::BadMessage, e.to_string()))?;
    Ok(env.body)
}
