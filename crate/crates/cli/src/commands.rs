use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use pumpsched_core::agent::{load_checkpoint, save_checkpoint, Checkpoint};
use pumpsched_core::dataset::{
    extract_actions, format_timestamp, parse_log, repair_gaps, slice_episodes, synthesize_demand, write_log,
    write_trajectory, DemandTrace, SensorRecord, DEFAULT_MAX_FILL_MINUTES, EPISODE_LEN,
};
use pumpsched_core::env::OBS_DIM;
use pumpsched_core::metrics::{
    aggregate_records, compare, write_comparison_csv, write_daily_csv, write_monthly_csv, write_profile_csv,
    OperationReport,
};
use pumpsched_core::pipeline::{
    build_transitions, fine_tune_online, report_options, simulate, train_offline, GreedyOperator, OnlineSettings,
    PipelineError, TrainLog,
};
use pumpsched_core::synth::{synthesize_log, ConstantOperator, Operator, RuleOperator, ScriptedOperator};
use pumpsched_core::{Action, AppConfig};
use pumpsched_service::ServiceState;
use serde::Serialize;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{Cli, Command, DatasetCommand, EvalArgs, GlobalArgs, Policy, ServeArgs, SimulateArgs, TrainArgs};

/// Process exit status of a failed run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Validation = 2,
    Runtime = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: FailureKind,
    pub error: anyhow::Error,
}

impl Failure {
    fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: FailureKind::Validation,
            error: error.into(),
        }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: FailureKind::Runtime,
            error: error.into(),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self, ctx: impl Display) -> Outcome<T>;
    fn runtime(self, ctx: impl Display) -> Outcome<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: std::error::Error + Send + Sync + 'static,
{
    fn invalid(self, ctx: impl Display) -> Outcome<T> {
        self.map_err(|e| Failure::invalid(anyhow::Error::new(e).context(ctx.to_string())))
    }

    fn runtime(self, ctx: impl Display) -> Outcome<T> {
        self.map_err(|e| Failure::runtime(anyhow::Error::new(e).context(ctx.to_string())))
    }
}

/// Bad inputs exit as validation failures; the rest as runtime failures.
fn pipeline_failure(ctx: &str) -> impl FnOnce(PipelineError) -> Failure + '_ {
    move |e| {
        let kind = match e {
            PipelineError::Io(_) | PipelineError::Csv(_) | PipelineError::Agent(_) | PipelineError::Replay(_) => {
                FailureKind::Runtime
            }
            _ => FailureKind::Validation,
        };
        Failure {
            kind,
            error: anyhow::Error::new(e).context(ctx.to_string()),
        }
    }
}

pub fn run(cli: Cli) -> Outcome<()> {
    let g = &cli.global;
    match cli.command {
        Command::Simulate(args) => cmd_simulate(g, &args),
        Command::Train(args) => cmd_train(g, &args),
        Command::Eval(args) => cmd_eval(g, &args),
        Command::Dataset(DatasetCommand::Validate { path }) => cmd_validate(g, &path),
        Command::Dataset(DatasetCommand::Synth { days }) => cmd_synth(g, days),
        Command::Dataset(DatasetCommand::Slice { path, offset }) => cmd_slice(g, &path, offset),
        Command::Serve(args) => cmd_serve(g, &args),
    }
}

/// Effective configuration: the `--config` file, else `fallback` (a
/// checkpoint's echo), else defaults; then CLI overrides.
fn load_config(g: &GlobalArgs, fallback: Option<&str>) -> Outcome<(AppConfig, u64)> {
    let mut cfg = match (&g.config, fallback) {
        (Some(path), _) => AppConfig::load(path).invalid(format!("loading {}", path.display()))?,
        (None, Some(text)) => AppConfig::from_json(text).invalid("configuration stored in checkpoint")?,
        (None, None) => AppConfig::default(),
    };
    if let Some(r) = g.reward {
        cfg.reward.variant = r.into();
    }
    let seed = g.seed.unwrap_or(cfg.train.seed);
    cfg.train.seed = seed;
    Ok((cfg, seed))
}

/// Files produced by one run.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Outcome<Self> {
        std::fs::create_dir_all(dir).runtime(format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> Outcome<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).runtime(format!("creating {}", parent.display()))?;
        }
        let file = File::create(&path).runtime(format!("creating {}", path.display()))?;
        self.written.push(path);
        Ok(BufWriter::new(file))
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Outcome<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).runtime(format!("writing {name}"))?;
        w.flush().runtime(format!("writing {name}"))
    }

    fn report(&mut self, prefix: &str, report: &OperationReport) -> Outcome<()> {
        self.json(&format!("{prefix}report.json"), report)?;
        let name = format!("{prefix}profile.csv");
        write_profile_csv(report, self.create(&name)?).runtime(&name)?;
        let name = format!("{prefix}monthly.csv");
        write_monthly_csv(report, self.create(&name)?).runtime(&name)?;
        let name = format!("{prefix}daily.csv");
        write_daily_csv(report, self.create(&name)?).runtime(&name)
    }

    fn finish(self, mut manifest: RunManifest) -> Outcome<()> {
        manifest.outputs = self.written;
        manifest.write(&self.dir).runtime("writing run manifest")?;
        Ok(())
    }
}

fn read_log(path: &Path) -> Outcome<Vec<SensorRecord>> {
    let file = File::open(path).invalid(format!("opening {}", path.display()))?;
    parse_log(BufReader::new(file)).invalid(format!("reading {}", path.display()))
}

/// Demand of a log; short gaps are forward-filled, longer ones are refused.
fn demand_from_log(path: &Path) -> Outcome<DemandTrace> {
    let (records, gaps) = repair_gaps(&read_log(path)?, DEFAULT_MAX_FILL_MINUTES);
    if let Some(gap) = gaps.unrepaired.first() {
        return Err(Failure::invalid(anyhow!(
            "{}: demand is missing for {} minutes after {}",
            path.display(),
            gap.missing_minutes,
            format_timestamp(&gap.after)
        )));
    }
    DemandTrace::from_records(&records).invalid(path.display())
}

fn check_horizon(trace: &DemandTrace, start: usize, horizon: usize) -> Outcome<()> {
    if horizon == 0 {
        return Err(Failure::invalid(anyhow!("horizon must be at least one minute")));
    }
    if start + horizon > trace.len() {
        return Err(Failure::invalid(anyhow!(
            "demand covers {} minutes ({} to {}); a {horizon}-minute horizon from minute {start} is missing demand from {} to {}",
            trace.len(),
            format_timestamp(&trace.timestamp(0)),
            format_timestamp(&trace.timestamp(trace.len().saturating_sub(1))),
            format_timestamp(&trace.timestamp(trace.len())),
            format_timestamp(&trace.timestamp(start + horizon - 1)),
        )));
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    let file = File::open(path).invalid(format!("opening {}", path.display()))?;
    load_checkpoint(BufReader::new(file)).invalid(format!("loading checkpoint {}", path.display()))
}

fn check_dimensions(ckpt: &Checkpoint, cfg: &AppConfig) -> Outcome<()> {
    let have = &ckpt.ensemble.config;
    let want = &cfg.train;
    let input = ckpt.ensemble.online.input_dim();
    if input != OBS_DIM || have.k != want.k || have.hidden != want.hidden || have.layout != want.layout {
        return Err(Failure::invalid(anyhow!(
            "checkpoint network (inputs {input}, k {}, hidden {:?}, {:?}) does not match the configuration (inputs {OBS_DIM}, k {}, hidden {:?}, {:?})",
            have.k,
            have.hidden,
            have.layout,
            want.k,
            want.hidden,
            want.layout
        )));
    }
    Ok(())
}

fn fixed_operator(policy: Policy, cfg: &AppConfig) -> Box<dyn Operator> {
    match policy {
        Policy::Rule => Box::new(RuleOperator::new(cfg.rule.clone())),
        Policy::Nop => Box::new(ConstantOperator(Action::NOP)),
        Policy::Np1 => Box::new(ConstantOperator(Action::NP1)),
        Policy::Np2 => Box::new(ConstantOperator(Action::NP2)),
        Policy::Np3 => Box::new(ConstantOperator(Action::NP3)),
        Policy::Np4 => Box::new(ConstantOperator(Action::NP4)),
    }
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_simulate(g: &GlobalArgs, args: &SimulateArgs) -> Outcome<()> {
    let checkpoint = args.checkpoint.as_deref().map(read_checkpoint).transpose()?;
    let (mut cfg, seed) = load_config(g, checkpoint.as_ref().map(|c| c.config_echo.as_str()))?;
    let mut manifest = RunManifest::new("simulate", g.config.clone(), seed, &cfg);

    let (trace, mut operator): (DemandTrace, Box<dyn Operator + '_>) = if let Some(path) = &args.replay {
        manifest.inputs.push(path.clone());
        let records = read_log(path)?;
        let trace = DemandTrace::from_records(&records).invalid(path.display())?;
        cfg.env.initial_level = records[0].tank_level;
        cfg.env.start_index = 0;
        let actions = extract_actions(&records, cfg.pipeline.kw_tolerance).actions;
        (trace, Box::new(ScriptedOperator::new(actions)))
    } else {
        let trace = match &args.demand {
            Some(path) => {
                manifest.inputs.push(path.clone());
                demand_from_log(path)?
            }
            None => synthesize_demand(args.days, seed, &cfg.demand),
        };
        let operator: Box<dyn Operator> = match &checkpoint {
            Some(ckpt) => {
                check_dimensions(ckpt, &cfg)?;
                Box::new(GreedyOperator {
                    net: &ckpt.ensemble.online,
                    demand_max: cfg.env.demand_max,
                })
            }
            None => fixed_operator(args.policy, &cfg),
        };
        (trace, operator)
    };
    if let Some(path) = &args.checkpoint {
        manifest.inputs.push(path.clone());
    }
    cfg.validate().invalid("configuration")?;
    manifest.config = cfg.clone();

    let start = cfg.env.start_index;
    let horizon = args.horizon.unwrap_or(trace.len().saturating_sub(start));
    check_horizon(&trace, start, horizon)?;
    let rollout = simulate(&cfg, trace, operator.as_mut(), horizon).map_err(pipeline_failure("simulation"))?;

    let mut out = Outputs::new(&g.out)?;
    write_trajectory(&rollout.rows, out.create("trajectory.csv")?).runtime("writing trajectory")?;
    out.report("", &rollout.report)?;
    print_summary(json!({
        "steps": rollout.rows.len(),
        "total_reward": rollout.total_reward,
        "total_kwh": rollout.report.total_kwh,
        "total_switches": rollout.report.total_switches,
        "safety_violations": rollout.report.safety_violations,
        "trajectory": out.dir.join("trajectory.csv"),
    }));
    out.finish(manifest)
}

fn cmd_train(g: &GlobalArgs, args: &TrainArgs) -> Outcome<()> {
    let (mut cfg, seed) = load_config(g, None)?;
    if let Some(k) = args.k {
        cfg.train.k = k;
    }
    cfg.validate().invalid("configuration")?;
    if !(0.0..=1.0).contains(&args.epsilon) {
        return Err(Failure::invalid(anyhow!("--epsilon must be in [0, 1]")));
    }
    let mut manifest = RunManifest::new("train", g.config.clone(), seed, &cfg);
    manifest.inputs.push(args.data.clone());

    let (records, gaps) = repair_gaps(&read_log(&args.data)?, DEFAULT_MAX_FILL_MINUTES);
    let sliced = slice_episodes(&records, 0).invalid(args.data.display())?;
    if sliced.slices.is_empty() {
        return Err(Failure::invalid(anyhow!(
            "{} contains no complete day of {EPISODE_LEN} minutes",
            args.data.display()
        )));
    }
    let mut transitions = Vec::with_capacity(sliced.slices.len() * EPISODE_LEN);
    let mut parallel = 0;
    for slice in &sliced.slices {
        let replay = build_transitions(&cfg, slice.records).map_err(pipeline_failure("replaying the log"))?;
        transitions.extend(replay.transitions);
        parallel += replay.parallel_warnings;
    }
    log::info!(
        "{} episodes, {} transitions ({} gap minutes filled, {} days excluded, {} parallel-operation rows)",
        sliced.slices.len(),
        transitions.len(),
        gaps.filled_minutes,
        sliced.excluded.len(),
        parallel
    );

    let steps = args.steps.unwrap_or(cfg.pipeline.train_steps);
    let eval_trace = (cfg.pipeline.eval_every > 0).then(|| synthesize_demand(1, seed.wrapping_add(1), &cfg.demand));
    let mut out = Outputs::new(&g.out)?;
    let mut log = TrainLog::new(out.create("train_log.csv")?).map_err(pipeline_failure("training log"))?;
    let outcome = train_offline(&cfg, &transitions, steps, seed, eval_trace.as_ref(), |row| {
        log::info!("update {} loss {:.6} |td| {:.6}", row.step, row.loss, row.mean_abs_td);
        log.append(row)
    })
    .map_err(pipeline_failure("training"))?;
    let mut checkpoint = outcome.checkpoint;

    let mut online_loss = None;
    if args.online_steps > 0 {
        let days = args.online_steps.div_ceil(EPISODE_LEN);
        let trace = synthesize_demand(days, seed.wrapping_add(2), &cfg.demand);
        let settings = OnlineSettings {
            steps: args.online_steps,
            epsilon: args.epsilon,
            update_every: 1,
        };
        let losses = fine_tune_online(&cfg, &mut checkpoint, &transitions, trace, settings)
            .map_err(pipeline_failure("online fine-tuning"))?;
        online_loss = losses.last().copied();
    }

    save_checkpoint(&checkpoint, out.create("model.ckpt")?).runtime("writing checkpoint")?;
    print_summary(json!({
        "episodes": sliced.slices.len(),
        "transitions": transitions.len(),
        "updates": checkpoint.ensemble.updates,
        "final_loss": outcome.losses.last(),
        "online_final_loss": online_loss,
        "checkpoint": out.dir.join("model.ckpt"),
    }));
    out.finish(manifest)
}

fn cmd_eval(g: &GlobalArgs, args: &EvalArgs) -> Outcome<()> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let (cfg, seed) = load_config(g, Some(&checkpoint.config_echo))?;
    cfg.validate().invalid("configuration")?;
    check_dimensions(&checkpoint, &cfg)?;
    let mut manifest = RunManifest::new("eval", g.config.clone(), seed, &cfg);
    manifest.inputs.push(args.checkpoint.clone());

    let trace = match &args.demand {
        Some(path) => {
            manifest.inputs.push(path.clone());
            demand_from_log(path)?
        }
        None => synthesize_demand(args.days, seed, &cfg.demand),
    };
    let start = cfg.env.start_index;
    let horizon = args.horizon.unwrap_or(trace.len().saturating_sub(start));
    check_horizon(&trace, start, horizon)?;

    let mut greedy = GreedyOperator {
        net: &checkpoint.ensemble.online,
        demand_max: cfg.env.demand_max,
    };
    let policy = simulate(&cfg, trace.clone(), &mut greedy, horizon).map_err(pipeline_failure("policy rollout"))?;
    let mut out = Outputs::new(&g.out)?;
    let baseline = match &args.baseline {
        Some(path) => {
            manifest.inputs.push(path.clone());
            let records = read_log(path)?;
            let actions = extract_actions(&records, cfg.pipeline.kw_tolerance).actions;
            aggregate_records(&records, &actions, &report_options(&cfg))
        }
        None => {
            let mut rule = RuleOperator::new(cfg.rule.clone());
            let rollout = simulate(&cfg, trace, &mut rule, horizon).map_err(pipeline_failure("baseline rollout"))?;
            write_trajectory(&rollout.rows, out.create("baseline_trajectory.csv")?)
                .runtime("writing baseline trajectory")?;
            rollout.report
        }
    };
    let comparison = compare(&baseline, &policy.report);

    write_trajectory(&policy.rows, out.create("trajectory.csv")?).runtime("writing trajectory")?;
    out.report("", &policy.report)?;
    out.report("baseline_", &baseline)?;
    out.json("comparison.json", &comparison)?;
    write_comparison_csv(&comparison, out.create("comparison.csv")?).runtime("writing comparison")?;
    for w in &comparison.warnings {
        log::warn!("{w}");
    }
    print_summary(json!({
        "steps": policy.rows.len(),
        "total_reward": policy.total_reward,
        "total_kwh": policy.report.total_kwh,
        "total_switches": policy.report.total_switches,
        "baseline_kwh": baseline.total_kwh,
        "baseline_switches": baseline.total_switches,
        "report": out.dir.join("report.json"),
    }));
    out.finish(manifest)
}

fn cmd_validate(g: &GlobalArgs, path: &Path) -> Outcome<()> {
    let (cfg, seed) = load_config(g, None)?;
    let mut manifest = RunManifest::new("dataset validate", g.config.clone(), seed, &cfg);
    manifest.inputs.push(path.to_path_buf());
    let records = read_log(path)?;
    let (repaired, gaps) = repair_gaps(&records, DEFAULT_MAX_FILL_MINUTES);
    let (episodes, excluded) = match slice_episodes(&repaired, 0) {
        Ok(s) => (s.slices.len(), s.excluded),
        Err(_) => (0, Vec::new()),
    };
    let extraction = extract_actions(&records, cfg.pipeline.kw_tolerance);
    let summary = json!({
        "rows": records.len(),
        "start": records.first().map(|r| format_timestamp(&r.timestamp)),
        "end": records.last().map(|r| format_timestamp(&r.timestamp)),
        "has_flow": records.iter().all(|r| r.flow.is_some()),
        "errors": 0,
        "filled_minutes": gaps.filled_minutes,
        "unrepaired_gaps": gaps.unrepaired,
        "complete_days": episodes,
        "excluded_days": excluded,
        "parallel_operation_rows": extraction.parallel_warnings,
    });
    let mut out = Outputs::new(&g.out)?;
    out.json("validation.json", &summary)?;
    print_summary(summary);
    out.finish(manifest)
}

fn cmd_synth(g: &GlobalArgs, days: usize) -> Outcome<()> {
    if days == 0 {
        return Err(Failure::invalid(anyhow!("--days must be at least 1")));
    }
    let (cfg, seed) = load_config(g, None)?;
    cfg.validate().invalid("configuration")?;
    let manifest = RunManifest::new("dataset synth", g.config.clone(), seed, &cfg);
    let rows = synthesize_log(&cfg, days, seed).map_err(|e| Failure::runtime(anyhow::Error::new(e).context("synthesis")))?;
    let mut out = Outputs::new(&g.out)?;
    write_trajectory(&rows, out.create("synth.csv")?).runtime("writing synthetic log")?;
    let actions: Vec<Action> = rows.iter().map(|r| r.action).collect();
    print_summary(json!({
        "rows": rows.len(),
        "switches": pumpsched_core::metrics::count_switches_with(&actions, cfg.pipeline.switch_counting),
        "path": out.dir.join("synth.csv"),
    }));
    out.finish(manifest)
}

fn cmd_slice(g: &GlobalArgs, path: &Path, offset: i64) -> Outcome<()> {
    let (cfg, seed) = load_config(g, None)?;
    let mut manifest = RunManifest::new("dataset slice", g.config.clone(), seed, &cfg);
    manifest.inputs.push(path.to_path_buf());
    let (records, gaps) = repair_gaps(&read_log(path)?, DEFAULT_MAX_FILL_MINUTES);
    let report = slice_episodes(&records, offset).invalid(path.display())?;
    let mut out = Outputs::new(&g.out)?;
    let mut episodes = Vec::new();
    for (i, slice) in report.slices.iter().enumerate() {
        let first = slice.records[0].timestamp;
        let name = format!("episodes/episode_{i:03}_{}.csv", first.format("%Y%m%d"));
        write_log(slice.records, out.create(&name)?).runtime(&name)?;
        episodes.push(json!({
            "index": i,
            "start": format_timestamp(&first),
            "end": format_timestamp(&slice.records[slice.records.len() - 1].timestamp),
            "file": out.dir.join(&name),
        }));
    }
    let summary = json!({
        "episodes": episodes,
        "dropped_partial": report.dropped_partial,
        "excluded_days": report.excluded,
        "filled_minutes": gaps.filled_minutes,
    });
    out.json("slice.json", &summary)?;
    print_summary(json!({ "episodes": report.slices.len(), "report": out.dir.join("slice.json") }));
    out.finish(manifest)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutting down");
}

fn cmd_serve(g: &GlobalArgs, args: &ServeArgs) -> Outcome<()> {
    let (mut cfg, seed) = load_config(g, None)?;
    cfg.validate().invalid("configuration")?;
    if cfg.service.flush_dir.is_relative() {
        cfg.service.flush_dir = g.out.join(&cfg.service.flush_dir);
    }
    let manifest = RunManifest::new("serve", g.config.clone(), seed, &cfg);
    let mut out = Outputs::new(&g.out)?;
    let runtime = tokio::runtime::Runtime::new().runtime("starting async runtime")?;
    let flushed = runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.runtime(format!("binding {addr}"))?;
        let local = listener.local_addr().runtime("reading bound address")?;
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        let state = ServiceState::new(cfg);
        pumpsched_service::serve(listener, state, shutdown_signal()).await.runtime("serving")
    })?;
    out.written.extend(flushed);
    out.finish(manifest)
}
