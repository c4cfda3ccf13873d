//! Reset-free episodic pump-scheduling environment.
//!
//! One instance walks a single continuous demand trace minute by minute.
//! Episodes are 1440-step windows over that walk: at each boundary the
//! per-episode accumulators are cleared but the tank keeps its water, so the
//! last state of one episode is the first state of the next.

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::dataset::{DemandTrace, SensorRecord, TrajectoryRow, EPISODE_LEN};
use crate::hydraulics::{self, HydraulicsConfig, HydraulicsError, OperatingPoint, TankState};

pub const OBS_DIM: usize = 17;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("environment stepped before reset")]
    NotReset,
    #[error("no demand available for step {index} (trace holds {len} minutes)")]
    DemandExhausted { index: usize, len: usize },
    #[error("{action} is running but draws no power; check the pump curve for this plant state")]
    ZeroPowerRunning { action: Action },
    #[error(transparent)]
    Hydraulics(#[from] HydraulicsError),
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardVariant {
    V1,
    V2,
}

/// Level thresholds used by the tank term, m geodetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardThresholds {
    pub critical: f64,
    pub safety: f64,
    pub quality: f64,
    pub full: f64,
}

impl Default for RewardThresholds {
    fn default() -> Self {
        Self {
            critical: 49.0,
            safety: 50.0,
            quality: 53.0,
            full: 57.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub variant: RewardVariant,
    /// Weight of the tank term.
    pub psi: f64,
    /// Offset in the running-time term after a switch.
    pub omega_switch: f64,
    pub omega_base: f64,
    pub thresholds: RewardThresholds,
    /// Use `exp(1/(-Q/kW))` for the V1 efficiency term instead of `exp(-Q/kW)`.
    pub eq1_literal: bool,
    /// Levels within this distance of `thresholds.full` count as full.
    pub full_epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            variant: RewardVariant::V1,
            psi: 10.0,
            omega_switch: 30.0,
            omega_base: 1.0,
            thresholds: RewardThresholds::default(),
            eq1_literal: false,
            full_epsilon: 1e-6,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi > 0.0) {
            return Err(EnvError::InvalidConfig("psi must be positive".into()));
        }
        if !(self.omega_switch > self.omega_base && self.omega_base >= 1.0) {
            return Err(EnvError::InvalidConfig("need omega_switch > omega_base >= 1".into()));
        }
        Ok(())
    }

    pub fn compute(&self, ctx: &RewardContext) -> Result<f64> {
        match self.variant {
            RewardVariant::V1 => reward_v1(ctx, self),
            RewardVariant::V2 => reward_v2(ctx, self),
        }
    }
}

/// Inputs of one reward evaluation, all taken at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardContext {
    pub action: Action,
    pub prev_action: Action,
    /// Minutes `action` has run so far in this episode.
    pub time_running: u32,
    pub tank_level: f64,
    pub water_quality: bool,
    /// m³/h
    pub q: f64,
    /// kW
    pub kw: f64,
}

/// Tank term `B`.
pub fn tank_penalty(level: f64, water_quality: bool, cfg: &RewardConfig) -> f64 {
    let t = &cfg.thresholds;
    if level > t.critical && level < t.safety {
        (level - t.safety).abs()
    } else if level <= t.critical || level >= t.full - cfg.full_epsilon {
        1.0
    } else if level >= t.safety && level < t.quality && !water_quality {
        -1.0
    } else {
        0.0
    }
}

fn running_term(ctx: &RewardContext, omega: f64) -> f64 {
    (1.0 / (f64::from(ctx.time_running) + omega)).ln()
}

fn require_power(ctx: &RewardContext) -> Result<()> {
    if ctx.kw > 0.0 {
        Ok(())
    } else {
        Err(EnvError::ZeroPowerRunning { action: ctx.action })
    }
}

/// Efficiency-oriented reward; NOP and continuing runs are never charged the
/// switch offset.
pub fn reward_v1(ctx: &RewardContext, cfg: &RewardConfig) -> Result<f64> {
    let omega = if ctx.prev_action == ctx.action || ctx.time_running == 0 || ctx.action.is_nop() {
        cfg.omega_base
    } else {
        cfg.omega_switch
    };
    let b = tank_penalty(ctx.tank_level, ctx.water_quality, cfg);
    if ctx.action.is_nop() {
        return Ok(-b * cfg.psi + running_term(ctx, omega));
    }
    require_power(ctx)?;
    let efficiency = if cfg.eq1_literal {
        (1.0 / (-ctx.q / ctx.kw)).exp()
    } else {
        (-ctx.q / ctx.kw).exp()
    };
    Ok(efficiency - b * cfg.psi + running_term(ctx, omega))
}

/// Power-oriented reward; switching into NOP is charged like any other switch.
pub fn reward_v2(ctx: &RewardContext, cfg: &RewardConfig) -> Result<f64> {
    let omega = if ctx.prev_action == ctx.action || ctx.time_running == 0 {
        cfg.omega_base
    } else {
        cfg.omega_switch
    };
    let b = tank_penalty(ctx.tank_level, ctx.water_quality, cfg);
    if ctx.action.is_nop() {
        return Ok(-b * cfg.psi + running_term(ctx, omega));
    }
    require_power(ctx)?;
    Ok(-(-1.0 / ctx.kw).exp() - b * cfg.psi + running_term(ctx, omega))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// m geodetic
    pub tank_level: f64,
    /// Demand for the upcoming minute, m³/h.
    pub demand: f64,
    pub minute_of_day: u32,
    pub month: u32,
    pub prev_action: Action,
    /// Minutes run per action this episode, indexed like [`Action::index`].
    pub time_running: [u32; 5],
    pub water_quality: bool,
}

/// Fixed-length feature vector:
/// `[level, demand, sin/cos minute, sin/cos month, one-hot prev action (5),
/// time running / 1440 (5), water quality]`.
pub fn encode_observation(obs: &Observation, demand_max: f64) -> [f64; OBS_DIM] {
    use std::f64::consts::TAU;
    let mut v = [0.0; OBS_DIM];
    v[0] = (obs.tank_level - 47.0) / 10.0;
    v[1] = obs.demand / demand_max;
    let minute = TAU * f64::from(obs.minute_of_day) / EPISODE_LEN as f64;
    v[2] = minute.sin();
    v[3] = minute.cos();
    let month = TAU * f64::from(obs.month.saturating_sub(1)) / 12.0;
    v[4] = month.sin();
    v[5] = month.cos();
    v[6 + obs.prev_action.index()] = 1.0;
    for (i, t) in obs.time_running.iter().enumerate() {
        v[11 + i] = f64::from(*t) / EPISODE_LEN as f64;
    }
    v[16] = if obs.water_quality { 1.0 } else { 0.0 };
    v
}

/// `(s, a, r, s')` with an episode-boundary marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: Action,
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// The running pump changed relative to the previous minute.
    pub switch: bool,
    pub kw: f64,
    pub q: f64,
    pub head: f64,
    pub demand: f64,
    pub overflow: bool,
    pub empty: bool,
    pub dead_headed: bool,
    /// Level after the step is below the safety threshold.
    pub safety_violation: bool,
    pub episode_end: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub initial_level: f64,
    /// Offset into the demand trace at reset.
    pub start_index: usize,
    pub dt_minutes: f64,
    /// Demand normalizer for the feature vector, m³/h.
    pub demand_max: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            initial_level: 52.0,
            start_index: 0,
            dt_minutes: 1.0,
            demand_max: 600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EnvState {
    tank: TankState,
    index: usize,
    step_in_episode: usize,
    prev_action: Action,
    /// Pump physically running during the last minute; survives rollover.
    last_action: Action,
    time_running: [u32; 5],
    water_quality: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    hydraulics: HydraulicsConfig,
    reward: RewardConfig,
    dt_minutes: f64,
    demand_max: f64,
    trace: DemandTrace,
    state: Option<EnvState>,
    recording: bool,
    trajectory: Vec<TrajectoryRow>,
}

impl Env {
    pub fn new(hydraulics: HydraulicsConfig, reward: RewardConfig, config: &EnvConfig, trace: DemandTrace) -> Result<Self> {
        hydraulics.validate()?;
        reward.validate()?;
        if !(config.dt_minutes > 0.0) {
            return Err(EnvError::InvalidConfig("dt_minutes must be positive".into()));
        }
        if !(config.demand_max > 0.0) {
            return Err(EnvError::InvalidConfig("demand_max must be positive".into()));
        }
        if let Some(d) = trace.demand.iter().find(|d| !(**d >= 0.0)) {
            return Err(HydraulicsError::NegativeDemand(*d).into());
        }
        Ok(Self {
            hydraulics,
            reward,
            dt_minutes: config.dt_minutes,
            demand_max: config.demand_max,
            trace,
            state: None,
            recording: false,
            trajectory: Vec::new(),
        })
    }

    pub fn hydraulics(&self) -> &HydraulicsConfig {
        &self.hydraulics
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn trace(&self) -> &DemandTrace {
        &self.trace
    }

    pub fn demand_max(&self) -> f64 {
        self.demand_max
    }

    /// Minutes of demand left before `step` fails.
    pub fn remaining(&self) -> usize {
        self.state.as_ref().map_or(0, |s| self.trace.len().saturating_sub(s.index))
    }

    /// Index of the next minute in the demand trace.
    pub fn position(&self) -> Option<usize> {
        self.state.as_ref().map(|s| s.index)
    }

    /// Steps taken in the current episode.
    pub fn step_in_episode(&self) -> Option<usize> {
        self.state.as_ref().map(|s| s.step_in_episode)
    }

    pub fn tank_level(&self) -> Option<f64> {
        self.state.as_ref().map(|s| s.tank.level(&self.hydraulics.tank))
    }

    /// Stored volume above the tank floor, m³.
    pub fn tank_volume(&self) -> Option<f64> {
        self.state.as_ref().map(|s| s.tank.volume)
    }

    /// Keep a [`TrajectoryRow`] for every subsequent step.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        &self.trajectory
    }

    pub fn take_trajectory(&mut self) -> Vec<TrajectoryRow> {
        std::mem::take(&mut self.trajectory)
    }

    /// Start a fresh walk at `start_index` of the trace with the given level.
    pub fn reset(&mut self, initial_level: f64, start_index: usize) -> Result<Observation> {
        let tank = TankState::from_level(initial_level, &self.hydraulics.tank)?;
        if start_index >= self.trace.len() {
            return Err(EnvError::DemandExhausted {
                index: start_index,
                len: self.trace.len(),
            });
        }
        self.state = Some(EnvState {
            tank,
            index: start_index,
            step_in_episode: 0,
            prev_action: Action::NOP,
            last_action: Action::NOP,
            time_running: [0; 5],
            water_quality: false,
        });
        self.trajectory.clear();
        self.observation()
    }

    pub fn observation(&self) -> Result<Observation> {
        let st = self.state.as_ref().ok_or(EnvError::NotReset)?;
        // Past the end of the trace the last known demand stands in.
        let demand_index = st.index.min(self.trace.len() - 1);
        let ts = self.trace.timestamp(st.index);
        use chrono::{Datelike, Timelike};
        Ok(Observation {
            tank_level: st.tank.level(&self.hydraulics.tank),
            demand: self.trace.demand[demand_index],
            minute_of_day: ts.hour() * 60 + ts.minute(),
            month: ts.month(),
            prev_action: st.prev_action,
            time_running: st.time_running,
            water_quality: st.water_quality,
        })
    }

    pub fn encode(&self, obs: &Observation) -> [f64; OBS_DIM] {
        encode_observation(obs, self.demand_max)
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        self.step_at_speed(action, 1.0)
    }

    /// Step with the selected pump at a speed ratio in `(0, 1]`; the discrete
    /// action space always uses rated speed.
    pub fn step_at_speed(&mut self, action: Action, speed: f64) -> Result<StepOutcome> {
        let hyd = &self.hydraulics;
        let st = self.state.as_ref().ok_or(EnvError::NotReset)?;
        if st.index >= self.trace.len() {
            return Err(EnvError::DemandExhausted {
                index: st.index,
                len: self.trace.len(),
            });
        }
        let demand = self.trace.demand[st.index];
        let level = st.tank.level(&hyd.tank);
        let op = match action.pump() {
            Some(id) => hyd.pump_operating_point(id, level, demand, speed)?,
            None => OperatingPoint::IDLE,
        };
        let ctx = RewardContext {
            action,
            prev_action: st.prev_action,
            time_running: st.time_running[action.index()],
            tank_level: level,
            water_quality: st.water_quality,
            q: op.q,
            kw: op.p_electric,
        };
        let reward = self.reward.compute(&ctx)?;
        let update = hydraulics::tank_update(&st.tank, op.q, demand, self.dt_minutes, &hyd.tank);
        let new_level = update.state.level(&hyd.tank);
        let thresholds = self.reward.thresholds;

        if self.recording {
            let mut kw = [0.0; 4];
            let mut flow = [0.0; 4];
            if let Some(id) = action.pump() {
                kw[id.index()] = op.p_electric;
                flow[id.index()] = op.q;
            }
            self.trajectory.push(TrajectoryRow {
                record: SensorRecord {
                    timestamp: self.trace.timestamp(st.index),
                    demand,
                    tank_level: level,
                    kw,
                    flow: Some(flow),
                },
                action,
                reward,
                water_quality: st.water_quality,
            });
        }

        let st = self.state.as_mut().expect("checked above");
        let switch = action != st.last_action;
        st.tank = update.state;
        st.index += 1;
        st.time_running[action.index()] += 1;
        st.water_quality |= new_level < thresholds.quality;
        st.prev_action = action;
        st.last_action = action;
        st.step_in_episode += 1;
        let episode_end = st.step_in_episode == EPISODE_LEN;
        if episode_end {
            st.step_in_episode = 0;
            st.time_running = [0; 5];
            st.water_quality = false;
            st.prev_action = Action::NOP;
        }

        let info = StepInfo {
            switch,
            kw: op.p_electric,
            q: op.q,
            head: op.head,
            demand,
            overflow: update.overflow,
            empty: update.empty,
            dead_headed: op.dead_headed,
            safety_violation: new_level < thresholds.safety,
            episode_end,
        };
        Ok(StepOutcome {
            observation: self.observation()?,
            reward,
            info,
        })
    }

    /// Step and package the result as an encoded transition.
    pub fn transition(&mut self, action: Action) -> Result<(Transition, StepOutcome)> {
        let obs = self.observation()?;
        let outcome = self.step(action)?;
        let t = Transition {
            obs: self.encode(&obs),
            action,
            reward: outcome.reward,
            next_obs: self.encode(&outcome.observation),
            terminal: outcome.info.episode_end,
        };
        Ok((t, outcome))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_demand, DemandProfileConfig};
    use approx::assert_relative_eq;
    use chrono::NaiveDate;

    fn ctx(action: Action, prev: Action, tr: u32, level: f64, wq: bool, q: f64, kw: f64) -> RewardContext {
        RewardContext {
            action,
            prev_action: prev,
            time_running: tr,
            tank_level: level,
            water_quality: wq,
            q,
            kw,
        }
    }

    fn flat_trace(minutes: usize, demand: f64) -> DemandTrace {
        DemandTrace {
            start: NaiveDate::from_ymd_opt(2024, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            demand: vec![demand; minutes],
        }
    }

    fn env_with(trace: DemandTrace) -> Env {
        Env::new(HydraulicsConfig::default(), RewardConfig::default(), &EnvConfig::default(), trace).unwrap()
    }

    #[test]
    fn worked_reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(reward_v1(&ctx(Action::NOP, Action::NOP, 0, 55.0, false, 0.0, 0.0), &cfg).unwrap(), 0.0);
        let r = reward_v1(&ctx(Action::NP2, Action::NP2, 120, 54.0, false, 200.0, 40.0), &cfg).unwrap();
        assert_relative_eq!(r, (-5.0f64).exp() + (1.0f64 / 121.0).ln(), epsilon = 1e-12);
        assert_relative_eq!(r, -4.78905, epsilon = 1e-5);
        let r = reward_v1(&ctx(Action::NP3, Action::NP1, 50, 48.5, false, 120.0, 30.0), &cfg).unwrap();
        assert_relative_eq!(r, -14.3637, epsilon = 1e-4);
        let r = reward_v2(&ctx(Action::NP2, Action::NP2, 120, 54.0, false, 200.0, 40.0), &cfg).unwrap();
        assert_relative_eq!(r, -5.77110, epsilon = 1e-5);
        let r = reward_v2(&ctx(Action::NOP, Action::NOP, 10, 55.0, false, 0.0, 0.0), &cfg).unwrap();
        assert_relative_eq!(r, -2.39790, epsilon = 1e-5);
        assert_eq!(reward_v2(&ctx(Action::NOP, Action::NP1, 0, 55.0, false, 0.0, 0.0), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn omega_differs_between_variants_for_nop() {
        let cfg = RewardConfig::default();
        let c = ctx(Action::NOP, Action::NP1, 9, 55.0, false, 0.0, 0.0);
        assert_relative_eq!(reward_v1(&c, &cfg).unwrap(), (1.0f64 / 10.0).ln(), epsilon = 1e-15);
        assert_relative_eq!(reward_v2(&c, &cfg).unwrap(), (1.0f64 / 39.0).ln(), epsilon = 1e-15);
    }

    #[test]
    fn eq1_literal_exponent() {
        let cfg = RewardConfig {
            eq1_literal: true,
            ..Default::default()
        };
        let r = reward_v1(&ctx(Action::NP2, Action::NP2, 0, 55.0, false, 200.0, 40.0), &cfg).unwrap();
        assert_relative_eq!(r, (-0.2f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn zero_power_running_is_rejected() {
        let cfg = RewardConfig::default();
        let c = ctx(Action::NP1, Action::NP1, 0, 55.0, false, 100.0, 0.0);
        assert_eq!(reward_v1(&c, &cfg), Err(EnvError::ZeroPowerRunning { action: Action::NP1 }));
        assert!(reward_v2(&c, &cfg).is_err());
    }

    #[test]
    fn tank_penalty_boundaries() {
        let cfg = RewardConfig::default();
        assert_eq!(tank_penalty(49.0, false, &cfg), 1.0);
        assert_relative_eq!(tank_penalty(49.0 + 1e-9, false, &cfg), 1.0, epsilon = 1e-8);
        assert_relative_eq!(tank_penalty(49.5, false, &cfg), 0.5, epsilon = 1e-15);
        assert!(tank_penalty(50.0 - 1e-9, false, &cfg) > 0.0);
        assert!(tank_penalty(50.0 - 1e-9, false, &cfg) < 1e-8);
        assert_eq!(tank_penalty(50.0, false, &cfg), -1.0);
        assert_eq!(tank_penalty(50.0, true, &cfg), 0.0);
        assert_eq!(tank_penalty(53.0, false, &cfg), 0.0);
        assert_eq!(tank_penalty(57.0, false, &cfg), 1.0);
        assert_eq!(tank_penalty(57.0 - 5e-7, false, &cfg), 1.0);
        assert_eq!(tank_penalty(56.9, false, &cfg), 0.0);
        assert_eq!(tank_penalty(47.0, true, &cfg), 1.0);
    }

    #[test]
    fn reset_zeroes_accumulators() {
        let mut env = env_with(synthesize_demand(1, 3, &DemandProfileConfig::default()));
        let obs = env.reset(52.0, 0).unwrap();
        assert_eq!(obs.time_running, [0; 5]);
        assert!(!obs.water_quality);
        assert_eq!(obs.prev_action, Action::NOP);
        assert_eq!(obs.month, 1);
        assert_eq!(env.reset(52.0, 0).unwrap(), obs);
        assert!(matches!(env.reset(46.9, 0), Err(EnvError::Hydraulics(HydraulicsError::LevelOutOfRange { .. }))));
    }

    #[test]
    fn step_before_reset_fails() {
        let mut env = env_with(flat_trace(10, 0.0));
        assert_eq!(env.step(Action::NOP).unwrap_err(), EnvError::NotReset);
    }

    #[test]
    fn nop_at_zero_demand_keeps_level() {
        let mut env = env_with(flat_trace(10, 0.0));
        env.reset(52.0, 0).unwrap();
        let out = env.step(Action::NOP).unwrap();
        assert_eq!(out.observation.tank_level, 52.0);
        assert_eq!(out.info.q, 0.0);
        assert_eq!(out.info.kw, 0.0);
        // 50 <= level < 53 before any water exchange: B = -1.
        assert_eq!(out.reward, 10.0);
    }

    #[test]
    fn pumping_raises_level() {
        let mut env = env_with(flat_trace(10, 100.0));
        env.reset(52.0, 0).unwrap();
        let out = env.step(Action::NP2).unwrap();
        assert!(out.info.q > 100.0);
        assert!(out.observation.tank_level > 52.0);
        assert!(out.info.switch);
        assert!(!env.step(Action::NP2).unwrap().info.switch);
    }

    #[test]
    fn trace_exhaustion_is_an_error() {
        let mut env = env_with(flat_trace(2, 10.0));
        env.reset(52.0, 0).unwrap();
        env.step(Action::NOP).unwrap();
        env.step(Action::NOP).unwrap();
        assert_eq!(env.step(Action::NOP).unwrap_err(), EnvError::DemandExhausted { index: 2, len: 2 });
    }

    #[test]
    fn episode_rollover() {
        let mut env = env_with(flat_trace(3 * EPISODE_LEN, 150.0));
        env.reset(52.0, 0).unwrap();
        for i in 1..=EPISODE_LEN {
            let a = if i % 200 < 100 { Action::NP3 } else { Action::NOP };
            let out = env.step(a).unwrap();
            assert_eq!(out.info.episode_end, i == EPISODE_LEN);
            if i < EPISODE_LEN {
                assert_eq!(out.observation.time_running.iter().sum::<u32>() as usize, i);
            } else {
                assert_eq!(out.observation.time_running, [0; 5]);
                assert!(!out.observation.water_quality);
            }
        }
        let out = env.step(Action::NOP).unwrap();
        assert_eq!(out.observation.time_running, [0, 0, 0, 0, 1]);
    }

    #[test]
    fn water_quality_latches_within_episode() {
        let mut env = env_with(flat_trace(200, 300.0));
        env.reset(53.01, 0).unwrap();
        let mut seen = false;
        for _ in 0..200 {
            let out = env.step(Action::NOP).unwrap();
            if seen {
                assert!(out.observation.water_quality);
            }
            seen |= out.observation.water_quality;
        }
        assert!(seen);
    }

    #[test]
    fn minute_and_month_advance() {
        let trace = DemandTrace {
            start: NaiveDate::from_ymd_opt(2024, 1, 31).unwrap().and_hms_opt(23, 58, 0).unwrap(),
            demand: vec![0.0; 5],
        };
        let mut env = env_with(trace);
        let obs = env.reset(52.0, 0).unwrap();
        assert_eq!((obs.minute_of_day, obs.month), (1438, 1));
        env.step(Action::NOP).unwrap();
        let obs = env.step(Action::NOP).unwrap().observation;
        assert_eq!((obs.minute_of_day, obs.month), (0, 2));
    }

    #[test]
    fn encoding_layout() {
        let mut obs = Observation {
            tank_level: 47.0,
            demand: 300.0,
            minute_of_day: 0,
            month: 1,
            prev_action: Action::NP2,
            time_running: [0, 720, 0, 0, 0],
            water_quality: true,
        };
        let v = encode_observation(&obs, 600.0);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.5);
        assert_eq!(v[6..11], [0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(v[12], 0.5);
        assert_eq!(v[16], 1.0);
        obs.tank_level = 57.0;
        assert_eq!(encode_observation(&obs, 600.0)[0], 1.0);
        let a = encode_observation(&obs, 600.0);
        obs.minute_of_day = 1440;
        let b = encode_observation(&obs, 600.0);
        assert_relative_eq!(a[2], b[2], epsilon = 1e-12);
        assert_relative_eq!(a[3], b[3], epsilon = 1e-12);
    }

    #[test]
    fn recording_captures_rows() {
        let mut env = env_with(flat_trace(5, 100.0));
        env.set_recording(true);
        env.reset(52.0, 0).unwrap();
        env.step(Action::NP4).unwrap();
        env.step(Action::NOP).unwrap();
        let rows = env.take_trajectory();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].record.tank_level, 52.0);
        assert!(rows[0].record.kw[3] > 0.0);
        assert_eq!(rows[1].record.kw, [0.0; 4]);
    }
}
