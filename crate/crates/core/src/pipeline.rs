//! Workflows built from the lower-level modules: replaying a logged schedule
//! through the simulator, offline training, greedy evaluation and optional
//! online fine-tuning.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::action::Action;
use crate::agent::{
    greedy_policy, sample_alphas, AgentError, Checkpoint, CheckpointError, QEnsemble, QNetwork,
};
use crate::config::AppConfig;
use crate::dataset::{extract_actions, DatasetError, DemandTrace, SensorRecord, TrajectoryRow};
use crate::env::{encode_observation, EnvError, Observation, Transition};
use crate::hydraulics::HydraulicsConfig;
use crate::metrics::{aggregate, OperationReport, ReportOptions};
use crate::replay::{PrioritizedBuffer, ReplayConfig, ReplayError};
use crate::synth::{make_env, run_operator, Operator};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub fn report_options(cfg: &AppConfig) -> ReportOptions {
    ReportOptions {
        switch_counting: cfg.pipeline.switch_counting,
        safety_level: cfg.reward.thresholds.safety,
        quality_level: cfg.reward.thresholds.quality,
        dt_minutes: cfg.env.dt_minutes,
    }
}

/// Transitions obtained by replaying a logged schedule through the simulator.
#[derive(Debug, Clone)]
pub struct BehavioralReplay {
    pub actions: Vec<Action>,
    pub transitions: Vec<Transition>,
    pub rows: Vec<TrajectoryRow>,
    pub parallel_warnings: usize,
}

/// Extract the operators' actions from a contiguous log and re-run them
/// through the simulator from the log's first tank level.
pub fn build_transitions(cfg: &AppConfig, records: &[SensorRecord]) -> Result<BehavioralReplay> {
    let trace = DemandTrace::from_records(records)?;
    let extraction = extract_actions(records, cfg.pipeline.kw_tolerance);
    let mut run_cfg = cfg.clone();
    run_cfg.env.initial_level = records[0].tank_level;
    run_cfg.env.start_index = 0;
    let mut env = make_env(&run_cfg, trace)?;
    env.set_recording(true);
    let mut transitions = Vec::with_capacity(records.len());
    for action in &extraction.actions {
        let (t, _) = env.transition(*action)?;
        transitions.push(t);
    }
    Ok(BehavioralReplay {
        actions: extraction.actions,
        transitions,
        rows: env.take_trajectory(),
        parallel_warnings: extraction.parallel_warnings,
    })
}

/// Greedy policy of a Q-network.
pub struct GreedyOperator<'a> {
    pub net: &'a QNetwork,
    pub demand_max: f64,
}

impl Operator for GreedyOperator<'_> {
    fn decide(&mut self, obs: &Observation, _: &HydraulicsConfig) -> Action {
        greedy_policy(self.net, &encode_observation(obs, self.demand_max))
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub rows: Vec<TrajectoryRow>,
    pub total_reward: f64,
    pub report: OperationReport,
}

/// Run `operator` over `trace` from the configured start state.
pub fn simulate(cfg: &AppConfig, trace: DemandTrace, operator: &mut dyn Operator, steps: usize) -> Result<Rollout> {
    if cfg.env.start_index + steps > trace.len() {
        return Err(EnvError::DemandExhausted {
            index: trace.len(),
            len: trace.len(),
        }
        .into());
    }
    let mut env = make_env(cfg, trace)?;
    let rows = run_operator(&mut env, operator, steps)?;
    let total_reward = rows.iter().map(|r| r.reward).sum();
    let report = aggregate(&rows, &report_options(cfg));
    Ok(Rollout {
        rows,
        total_reward,
        report,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub mean_abs_td: f64,
    pub beta: f64,
    pub grad_norm: f64,
    pub eval_reward: Option<f64>,
    pub eval_kwh: Option<f64>,
    pub eval_switches: Option<usize>,
}

pub const TRAIN_LOG_HEADER: [&str; 8] = [
    "step",
    "loss",
    "mean_abs_td",
    "beta",
    "grad_norm",
    "eval_reward",
    "eval_kwh",
    "eval_switches",
];

impl TrainLogRow {
    pub fn to_record(&self) -> Vec<String> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        vec![
            self.step.to_string(),
            self.loss.to_string(),
            self.mean_abs_td.to_string(),
            self.beta.to_string(),
            self.grad_norm.to_string(),
            opt(self.eval_reward.map(|v| v.to_string())),
            opt(self.eval_kwh.map(|v| v.to_string())),
            opt(self.eval_switches.map(|v| v.to_string())),
        ]
    }
}

/// Append-only CSV sink for training progress.
pub struct TrainLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TrainLog<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(sink);
        writer.write_record(TRAIN_LOG_HEADER)?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, row: &TrainLogRow) -> Result<()> {
        self.writer.write_record(row.to_record())?;
        self.writer.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
    /// Loss of every update, in order.
    pub losses: Vec<f64>,
}

/// Offline REM training over a fixed set of transitions.
///
/// Transitions enter the prioritized buffer at the running maximum priority;
/// each update samples a batch, draws one set of mixture weights, trains and
/// writes the new |δ| back as priorities. `eval_trace` enables periodic greedy
/// evaluation days per `pipeline.eval_every`.
pub fn train_offline(
    cfg: &AppConfig,
    transitions: &[Transition],
    steps: usize,
    seed: u64,
    eval_trace: Option<&DemandTrace>,
    mut on_log: impl FnMut(&TrainLogRow) -> Result<()>,
) -> Result<TrainOutcome> {
    let batch = cfg.train.batch_size;
    if transitions.len() < batch {
        return Err(PipelineError::Invalid(format!(
            "{} transitions cannot fill a batch of {batch}",
            transitions.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let mut ensemble = QEnsemble::new(train_cfg, &mut rng)?;
    let replay_cfg = ReplayConfig {
        capacity: cfg.replay.capacity.min(transitions.len().next_power_of_two()),
        ..cfg.replay
    };
    let mut buffer = PrioritizedBuffer::new(replay_cfg);
    for t in transitions {
        buffer.push_max(*t);
    }

    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    let (mut loss_acc, mut td_acc, mut n_acc) = (0.0, 0.0, 0usize);
    for step in 0..steps {
        let beta = replay_cfg.beta_at(step, steps);
        let sampled = buffer.sample(batch, beta, &mut rng)?;
        let alphas = sample_alphas(ensemble.config.k, &mut rng);
        let stats = ensemble.train_step(&sampled.items, &sampled.weights, &alphas)?;
        buffer.update_priorities(&sampled.indices, &stats.td_errors);
        losses.push(stats.loss);
        loss_acc += stats.loss;
        td_acc += stats.td_errors.iter().sum::<f64>() / stats.td_errors.len() as f64;
        n_acc += 1;

        let done = step + 1;
        let eval_now = cfg.pipeline.eval_every > 0 && done % cfg.pipeline.eval_every == 0;
        if done % cfg.pipeline.log_every == 0 || done == steps || eval_now {
            let mut row = TrainLogRow {
                step: ensemble.updates,
                loss: loss_acc / n_acc as f64,
                mean_abs_td: td_acc / n_acc as f64,
                beta,
                grad_norm: stats.grad_norm,
                eval_reward: None,
                eval_kwh: None,
                eval_switches: None,
            };
            if let (true, Some(trace)) = (eval_now, eval_trace) {
                let steps = trace.len().min(crate::dataset::EPISODE_LEN);
                let mut op = GreedyOperator {
                    net: &ensemble.online,
                    demand_max: cfg.env.demand_max,
                };
                let mut eval_cfg = cfg.clone();
                eval_cfg.env.start_index = 0;
                let r = simulate(&eval_cfg, trace.clone(), &mut op, steps)?;
                row.eval_reward = Some(r.total_reward);
                row.eval_kwh = Some(r.report.total_kwh);
                row.eval_switches = Some(r.report.total_switches);
            }
            on_log(&row)?;
            log.push(row);
            (loss_acc, td_acc, n_acc) = (0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            ensemble,
            rng,
            config_echo: cfg.to_json_pretty(),
        },
        log,
        losses,
    })
}

/// Exploration settings for [`fine_tune_online`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineSettings {
    pub steps: usize,
    /// Probability of a uniformly random action.
    pub epsilon: f64,
    /// Environment steps between gradient updates.
    pub update_every: usize,
}

/// ε-greedy interaction with the simulator on top of an offline-trained
/// ensemble. New transitions join the replay buffer (seeded with `offline`)
/// at maximum priority.
pub fn fine_tune_online(
    cfg: &AppConfig,
    checkpoint: &mut Checkpoint,
    offline: &[Transition],
    trace: DemandTrace,
    settings: OnlineSettings,
) -> Result<Vec<f64>> {
    let batch = cfg.train.batch_size;
    let replay_cfg = ReplayConfig {
        capacity: cfg.replay.capacity.min((offline.len() + settings.steps).next_power_of_two()),
        ..cfg.replay
    };
    let mut buffer = PrioritizedBuffer::new(replay_cfg);
    for t in offline {
        buffer.push_max(*t);
    }
    let mut env = make_env(cfg, trace)?;
    let steps = settings.steps.min(env.remaining());
    let rng = &mut checkpoint.rng;
    let ens = &mut checkpoint.ensemble;
    let mut losses = Vec::new();
    for step in 0..steps {
        let obs = env.observation()?;
        let action = if rng.random::<f64>() < settings.epsilon {
            Action::from_index(rng.random_range(0..Action::COUNT)).expect("in range")
        } else {
            ens.greedy(&env.encode(&obs))
        };
        let (t, _) = env.transition(action)?;
        buffer.push_max(t);
        if buffer.len() >= batch && (step + 1) % settings.update_every.max(1) == 0 {
            let beta = cfg.replay.beta_at(step, steps);
            let sampled = buffer.sample(batch, beta, rng)?;
            let alphas = sample_alphas(ens.config.k, rng);
            let stats = ens.train_step(&sampled.items, &sampled.weights, &alphas)?;
            buffer.update_priorities(&sampled.indices, &stats.td_errors);
            losses.push(stats.loss);
        }
    }
    Ok(losses)
}
