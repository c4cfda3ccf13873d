//! Schedule sources and synthetic operation logs.
//!
//! [`RuleOperator`] imitates a cautious human operator: it keeps the tank
//! inside a level band with hysteresis, tops it up before the morning peak
//! and picks the smallest pump that can outrun the current demand.

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::config::AppConfig;
use crate::dataset::{synthesize_demand, DemandTrace, TrajectoryRow};
use crate::env::{Env, EnvError, Observation};
use crate::hydraulics::{HydraulicsConfig, PumpId};

/// Anything that picks one action per minute.
pub trait Operator {
    fn decide(&mut self, obs: &Observation, hydraulics: &HydraulicsConfig) -> Action;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    /// Start pumping below this level, m.
    pub low: f64,
    /// Stop pumping above this level, m.
    pub high: f64,
    /// Minute of day at which pre-peak filling starts.
    pub fill_from: u32,
    /// Minute of day at which pre-peak filling ends.
    pub fill_until: u32,
    /// Level targeted while filling, m.
    pub fill_target: f64,
    /// A pump qualifies when its flow exceeds demand by this factor.
    pub flow_margin: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            low: 52.0,
            high: 55.0,
            fill_from: 0,
            fill_until: 420,
            fill_target: 56.0,
            flow_margin: 1.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuleOperator {
    pub config: RuleConfig,
    running: Option<PumpId>,
}

impl RuleOperator {
    pub fn new(config: RuleConfig) -> Self {
        Self { config, running: None }
    }

    /// Smallest-flow pump that outruns `demand`, else the strongest one.
    fn pick(&self, obs: &Observation, hyd: &HydraulicsConfig) -> Option<PumpId> {
        let mut flows: Vec<(PumpId, f64)> = PumpId::ALL
            .iter()
            .filter_map(|id| {
                hyd.pump_operating_point(*id, obs.tank_level, obs.demand, 1.0)
                    .ok()
                    .filter(|op| op.q > 0.0 && op.p_electric > 0.0)
                    .map(|op| (*id, op.q))
            })
            .collect();
        flows.sort_by(|a, b| a.1.total_cmp(&b.1));
        flows
            .iter()
            .find(|(_, q)| *q >= obs.demand * self.config.flow_margin)
            .or(flows.last())
            .map(|(id, _)| *id)
    }
}

impl Operator for RuleOperator {
    fn decide(&mut self, obs: &Observation, hyd: &HydraulicsConfig) -> Action {
        let c = &self.config;
        let filling = (c.fill_from..c.fill_until).contains(&obs.minute_of_day);
        let stop_at = if filling { c.fill_target } else { c.high };
        let level = obs.tank_level;

        match self.running {
            Some(_) if level >= stop_at => self.running = None,
            Some(id) => {
                // Upsize when the running pump no longer keeps up with demand.
                let q = hyd
                    .pump_operating_point(id, level, obs.demand, 1.0)
                    .map(|op| op.q)
                    .unwrap_or(0.0);
                if q < obs.demand {
                    self.running = self.pick(obs, hyd);
                }
            }
            None if level < c.low || (filling && level < c.fill_target - 0.5) => {
                self.running = self.pick(obs, hyd);
            }
            None => {}
        }
        self.running.map_or(Action::NOP, Action::from_pump)
    }
}

/// Replays a fixed action sequence; NOP once exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedOperator {
    actions: Vec<Action>,
    next: usize,
}

impl ScriptedOperator {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, next: 0 }
    }
}

impl Operator for ScriptedOperator {
    fn decide(&mut self, _: &Observation, _: &HydraulicsConfig) -> Action {
        let a = self.actions.get(self.next).copied().unwrap_or(Action::NOP);
        self.next += 1;
        a
    }
}

/// One action forever.
#[derive(Debug, Clone, Copy)]
pub struct ConstantOperator(pub Action);

impl Operator for ConstantOperator {
    fn decide(&mut self, _: &Observation, _: &HydraulicsConfig) -> Action {
        self.0
    }
}

/// Step `env` for `steps` minutes under `operator`, returning the recorded rows.
pub fn run_operator(env: &mut Env, operator: &mut dyn Operator, steps: usize) -> Result<Vec<TrajectoryRow>, EnvError> {
    env.set_recording(true);
    let start = env.trajectory().len();
    for _ in 0..steps {
        let obs = env.observation()?;
        let action = operator.decide(&obs, env.hydraulics());
        env.step(action)?;
    }
    Ok(env.trajectory()[start..].to_vec())
}

/// Build a fresh environment over `trace` using the configured start state.
pub fn make_env(cfg: &AppConfig, trace: DemandTrace) -> Result<Env, EnvError> {
    let mut env = Env::new(cfg.hydraulics.clone(), cfg.reward, &cfg.env, trace)?;
    env.reset(cfg.env.initial_level, cfg.env.start_index)?;
    Ok(env)
}

/// Synthetic operation log: `days` of seeded demand operated by the rule
/// operator, in the trajectory export schema.
pub fn synthesize_log(cfg: &AppConfig, days: usize, seed: u64) -> Result<Vec<TrajectoryRow>, EnvError> {
    let trace = synthesize_demand(days, seed, &cfg.demand);
    let steps = trace.len();
    let mut env = make_env(cfg, trace)?;
    run_operator(&mut env, &mut RuleOperator::new(cfg.rule.clone()), steps)
}
