//! Operation analytics: switch counts, energy per month, tank-level profile
//! and constraint statistics, plus side-by-side comparison of two reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Datelike, NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::dataset::{format_timestamp, SensorRecord, TrajectoryRow};

/// Quantiles reported for the tank level at each minute of the day.
pub const PROFILE_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchCounting {
    /// Every pump turning on or off counts once, so NP1→NP2 counts 2.
    #[default]
    PerPump,
    /// Every change of action counts once.
    ActionChange,
}

/// Switches incurred going from `a` to `b` in adjacent minutes.
pub fn switches_between(a: Action, b: Action, mode: SwitchCounting) -> usize {
    if a == b {
        return 0;
    }
    match mode {
        SwitchCounting::PerPump => usize::from(!a.is_nop()) + usize::from(!b.is_nop()),
        SwitchCounting::ActionChange => 1,
    }
}

/// Number of per-pump ON/OFF changes between adjacent minutes.
pub fn count_switches(actions: &[Action]) -> usize {
    count_switches_with(actions, SwitchCounting::PerPump)
}

pub fn count_switches_with(actions: &[Action], mode: SwitchCounting) -> usize {
    actions.windows(2).map(|w| switches_between(w[0], w[1], mode)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub switch_counting: SwitchCounting,
    /// Levels below this count as safety violations, m.
    pub safety_level: f64,
    /// A day whose minimum level falls below this had a water exchange, m.
    pub quality_level: f64,
    /// Minutes per row.
    pub dt_minutes: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            switch_counting: SwitchCounting::PerPump,
            safety_level: 50.0,
            quality_level: 53.0,
            dt_minutes: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub minute_of_day: u32,
    pub samples: usize,
    /// Level at each of [`PROFILE_QUANTILES`], m.
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OperationReport {
    pub horizon_minutes: usize,
    pub start: Option<String>,
    pub end: Option<String>,
    pub switch_counting: SwitchCounting,
    /// Switches per calendar day; a change across midnight belongs to the new day.
    pub daily_switches: BTreeMap<NaiveDate, usize>,
    pub total_switches: usize,
    pub mean_daily_switches: f64,
    /// Energy per calendar month (`YYYY-MM`), kWh.
    pub monthly_kwh: BTreeMap<String, f64>,
    pub total_kwh: f64,
    pub tank_profile: Vec<ProfileRow>,
    pub mean_level: f64,
    pub safety_violations: usize,
    pub water_exchange_days: usize,
    /// Fraction of running minutes per pump NP1..NP4; all zero when no pump ran.
    pub pump_usage_share: [f64; 4],
    pub running_minutes: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn aggregate(rows: &[TrajectoryRow], opts: &ReportOptions) -> OperationReport {
    let records: Vec<SensorRecord> = rows.iter().map(|r| r.record).collect();
    let actions: Vec<Action> = rows.iter().map(|r| r.action).collect();
    aggregate_records(&records, &actions, opts)
}

/// Build a report from telemetry and the action taken at each minute.
pub fn aggregate_records(records: &[SensorRecord], actions: &[Action], opts: &ReportOptions) -> OperationReport {
    assert_eq!(records.len(), actions.len(), "one action per record");
    let mut report = OperationReport {
        horizon_minutes: records.len(),
        switch_counting: opts.switch_counting,
        ..Default::default()
    };
    if records.is_empty() {
        return report;
    }
    report.start = Some(format_timestamp(&records[0].timestamp));
    report.end = Some(format_timestamp(&records[records.len() - 1].timestamp));

    let mut day_min: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    let mut by_minute: Vec<Vec<f64>> = vec![Vec::new(); 1440];
    let mut running = [0usize; 4];
    let mut level_sum = 0.0;
    for (i, (rec, action)) in records.iter().zip(actions).enumerate() {
        let day = rec.timestamp.date();
        let switches = report.daily_switches.entry(day).or_insert(0);
        if i > 0 {
            *switches += switches_between(actions[i - 1], *action, opts.switch_counting);
        }
        let kwh = rec.kw.iter().sum::<f64>() * opts.dt_minutes / 60.0;
        let month = format!("{:04}-{:02}", rec.timestamp.year(), rec.timestamp.month());
        *report.monthly_kwh.entry(month).or_insert(0.0) += kwh;

        let level = rec.tank_level;
        level_sum += level;
        let m = day_min.entry(day).or_insert(f64::INFINITY);
        *m = m.min(level);
        if level < opts.safety_level {
            report.safety_violations += 1;
        }
        let minute = (rec.timestamp.hour() * 60 + rec.timestamp.minute()) as usize;
        by_minute[minute].push(level);
        if let Some(p) = action.pump() {
            running[p.index()] += 1;
        }
    }

    report.total_switches = report.daily_switches.values().sum();
    report.mean_daily_switches = report.total_switches as f64 / report.daily_switches.len() as f64;
    report.total_kwh = report.monthly_kwh.values().sum();
    report.mean_level = level_sum / records.len() as f64;
    report.water_exchange_days = day_min.values().filter(|m| **m < opts.quality_level).count();
    report.running_minutes = running.iter().sum();
    if report.running_minutes > 0 {
        for (share, n) in report.pump_usage_share.iter_mut().zip(running) {
            *share = n as f64 / report.running_minutes as f64;
        }
    }
    for (minute, mut levels) in by_minute.into_iter().enumerate() {
        if levels.is_empty() {
            continue;
        }
        levels.sort_by(f64::total_cmp);
        report.tank_profile.push(ProfileRow {
            minute_of_day: minute as u32,
            samples: levels.len(),
            levels: PROFILE_QUANTILES.iter().map(|p| quantile(&levels, *p)).collect(),
        });
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub field: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b − a`.
    pub abs_delta: Option<f64>,
    /// `(b − a) / a` in percent.
    pub pct_delta: Option<f64>,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub warnings: Vec<String>,
    pub rows: Vec<DiffRow>,
}

impl Comparison {
    pub fn row(&self, field: &str) -> Option<&DiffRow> {
        self.rows.iter().find(|r| r.field == field)
    }
}

fn diff(field: impl Into<String>, a: Option<f64>, b: Option<f64>) -> DiffRow {
    let mut row = DiffRow {
        field: field.into(),
        a,
        b,
        abs_delta: None,
        pct_delta: None,
        flag: None,
    };
    match (a, b) {
        (Some(a), Some(b)) => {
            row.abs_delta = Some(b - a);
            if a != 0.0 {
                row.pct_delta = Some((b - a) / a * 100.0);
            } else if b == 0.0 {
                row.pct_delta = Some(0.0);
            } else {
                row.flag = Some("zero baseline".into());
            }
        }
        (None, Some(_)) => row.flag = Some("missing in a".into()),
        (Some(_), None) => row.flag = Some("missing in b".into()),
        (None, None) => row.flag = Some("missing in both".into()),
    }
    row
}

/// Field-by-field deltas of `b` against baseline `a`.
pub fn compare(a: &OperationReport, b: &OperationReport) -> Comparison {
    let mut warnings = Vec::new();
    if a.horizon_minutes != b.horizon_minutes {
        warnings.push(format!(
            "horizons differ: {} vs {} minutes; totals are not directly comparable",
            a.horizon_minutes, b.horizon_minutes
        ));
    }
    if a.switch_counting != b.switch_counting {
        warnings.push("reports use different switch counting modes".into());
    }
    let mut rows = vec![
        diff("total_kwh", Some(a.total_kwh), Some(b.total_kwh)),
        diff("total_switches", Some(a.total_switches as f64), Some(b.total_switches as f64)),
        diff("mean_daily_switches", Some(a.mean_daily_switches), Some(b.mean_daily_switches)),
        diff("mean_level", Some(a.mean_level), Some(b.mean_level)),
        diff("safety_violations", Some(a.safety_violations as f64), Some(b.safety_violations as f64)),
        diff("water_exchange_days", Some(a.water_exchange_days as f64), Some(b.water_exchange_days as f64)),
    ];
    for (i, pump) in ["np1", "np2", "np3", "np4"].iter().enumerate() {
        rows.push(diff(
            format!("pump_usage_share.{pump}"),
            Some(a.pump_usage_share[i]),
            Some(b.pump_usage_share[i]),
        ));
    }
    let months: BTreeSet<&String> = a.monthly_kwh.keys().chain(b.monthly_kwh.keys()).collect();
    for m in months {
        rows.push(diff(
            format!("monthly_kwh.{m}"),
            a.monthly_kwh.get(m).copied(),
            b.monthly_kwh.get(m).copied(),
        ));
    }
    Comparison { warnings, rows }
}

/// Minute-of-day × quantile matrix.
pub fn write_profile_csv<W: Write>(report: &OperationReport, sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["minute_of_day".to_string(), "samples".to_string()];
    header.extend(PROFILE_QUANTILES.iter().map(|p| format!("q{:02}", (p * 100.0).round() as u32)));
    w.write_record(&header)?;
    for row in &report.tank_profile {
        let mut rec = vec![row.minute_of_day.to_string(), row.samples.to_string()];
        rec.extend(row.levels.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Month × kWh matrix.
pub fn write_monthly_csv<W: Write>(report: &OperationReport, sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["month", "kwh"])?;
    for (m, kwh) in &report.monthly_kwh {
        w.write_record([m.clone(), kwh.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_daily_csv<W: Write>(report: &OperationReport, sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["date", "switches"])?;
    for (d, n) in &report.daily_switches {
        w.write_record([d.to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_comparison_csv<W: Write>(cmp: &Comparison, sink: W) -> csv::Result<()> {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["field", "a", "b", "abs_delta", "pct_delta", "flag"])?;
    for r in &cmp.rows {
        w.write_record([
            r.field.clone(),
            opt(r.a),
            opt(r.b),
            opt(r.abs_delta),
            opt(r.pct_delta),
            r.flag.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
