use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::hydraulics::PumpId;

/// Discrete control action: run exactly one distribution pump, or none.
///
/// The discriminant doubles as the index into Q-vectors and one-hot
/// encodings, so `NP1` is index 0 and `NOP` is index 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    NP1 = 0,
    NP2 = 1,
    NP3 = 2,
    NP4 = 3,
    NOP = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::NP1, Action::NP2, Action::NP3, Action::NP4, Action::NOP];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Self::ALL.get(index).copied()
    }

    pub fn pump(self) -> Option<PumpId> {
        match self {
            Action::NP1 => Some(PumpId::NP1),
            Action::NP2 => Some(PumpId::NP2),
            Action::NP3 => Some(PumpId::NP3),
            Action::NP4 => Some(PumpId::NP4),
            Action::NOP => None,
        }
    }

    pub fn from_pump(pump: PumpId) -> Action {
        Action::ALL[pump.index()]
    }

    pub fn is_nop(self) -> bool {
        self == Action::NOP
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::NP1 => "NP1",
            Action::NP2 => "NP2",
            Action::NP3 => "NP3",
            Action::NP4 => "NP4",
            Action::NOP => "NOP",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown action `{0}` (expected one of NP1, NP2, NP3, NP4, NOP)")]
pub struct ParseActionError(pub String);

impl FromStr for Action {
    type Err = ParseActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NP1" => Ok(Action::NP1),
            "NP2" => Ok(Action::NP2),
            "NP3" => Ok(Action::NP3),
            "NP4" => Ok(Action::NP4),
            "NOP" => Ok(Action::NOP),
            _ => Err(ParseActionError(s.to_string())),
        }
    }
}
