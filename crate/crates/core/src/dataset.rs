//! Minute-resolution operation logs.
//!
//! The canonical text form is comma-separated with the header
//! `timestamp,demand,tank_level,kw_np1,kw_np2,kw_np3,kw_np4[,q_np1..q_np4]`
//! and ISO-8601 minute timestamps (`2024-01-01T00:00`). Trajectories exported
//! from the environment append `action,reward,water_quality`; [`parse_log`]
//! ignores those columns so exported files re-enter the pipeline unchanged.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::Action;

pub const EPISODE_LEN: usize = 1440;
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";
/// kW readings at or below this are sensor noise on an idle pump.
pub const DEFAULT_KW_TOLERANCE: f64 = 0.1;
/// Gaps up to this many missing minutes are forward-filled.
pub const DEFAULT_MAX_FILL_MINUTES: i64 = 5;

const REQUIRED_COLUMNS: [&str; 7] = ["timestamp", "demand", "tank_level", "kw_np1", "kw_np2", "kw_np3", "kw_np4"];
const FLOW_COLUMNS: [&str; 4] = ["q_np1", "q_np2", "q_np3", "q_np4"];
const LEVEL_RANGE: (f64, f64) = (47.0, 57.0);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn summarize<T: fmt::Display>(items: &[T]) -> String {
    const SHOWN: usize = 5;
    let mut s = items.iter().take(SHOWN).map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
    if items.len() > SHOWN {
        s.push_str(&format!("; ... and {} more", items.len() - SHOWN));
    }
    s
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column(s): {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("{} malformed row(s): {}", .0.len(), summarize(.0))]
    MalformedRows(Vec<RowError>),
    #[error("timestamps not strictly increasing: {}", summarize(.0))]
    NonMonotonic(Vec<RowError>),
    #[error("log too short: need {needed} records, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("demand trace is not minute-contiguous at record {index}")]
    NotContiguous { index: usize },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One minute of plant telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorRecord {
    pub timestamp: NaiveDateTime,
    /// Water demand, m³/h.
    pub demand: f64,
    /// Geodetic tank level, m.
    pub tank_level: f64,
    /// Electrical draw of NP1..NP4, kW.
    pub kw: [f64; 4],
    /// Delivered flow of NP1..NP4, m³/h, when the log carries it.
    pub flow: Option<[f64; 4]>,
}

/// A [`SensorRecord`] plus the columns the environment appends on export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub record: SensorRecord,
    pub action: Action,
    pub reward: f64,
    pub water_quality: bool,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    ["%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

struct Columns {
    index: HashMap<String, usize>,
    has_flow: bool,
}

impl Columns {
    fn from_headers(headers: &csv::StringRecord, extra_required: &[&str]) -> Result<Self> {
        let index: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
            .collect();
        let missing: Vec<String> = REQUIRED_COLUMNS
            .iter()
            .chain(extra_required)
            .filter(|c| !index.contains_key(**c))
            .map(|c| c.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(DatasetError::MissingColumns(missing));
        }
        let flow_present = FLOW_COLUMNS.iter().filter(|c| index.contains_key(**c)).count();
        if flow_present != 0 && flow_present != 4 {
            let missing = FLOW_COLUMNS
                .iter()
                .filter(|c| !index.contains_key(**c))
                .map(|c| c.to_string())
                .collect();
            return Err(DatasetError::MissingColumns(missing));
        }
        Ok(Self {
            index,
            has_flow: flow_present == 4,
        })
    }

    fn field<'r>(&self, row: &'r csv::StringRecord, name: &str) -> std::result::Result<&'r str, String> {
        row.get(self.index[name]).map(str::trim).ok_or_else(|| format!("missing field `{name}`"))
    }

    fn number(&self, row: &csv::StringRecord, name: &str) -> std::result::Result<f64, String> {
        let raw = self.field(row, name)?;
        let v: f64 = raw.parse().map_err(|_| format!("`{name}` is not a number: {raw:?}"))?;
        if !v.is_finite() {
            return Err(format!("`{name}` is not finite"));
        }
        Ok(v)
    }

    fn record(&self, row: &csv::StringRecord) -> std::result::Result<SensorRecord, String> {
        let raw_ts = self.field(row, "timestamp")?;
        let timestamp = parse_timestamp(raw_ts).ok_or_else(|| format!("bad timestamp {raw_ts:?}"))?;
        if timestamp.second() != 0 {
            return Err(format!("timestamp {raw_ts:?} is not on a whole minute"));
        }
        let demand = self.number(row, "demand")?;
        if demand < 0.0 {
            return Err(format!("negative demand {demand}"));
        }
        let tank_level = self.number(row, "tank_level")?;
        if !(LEVEL_RANGE.0..=LEVEL_RANGE.1).contains(&tank_level) {
            return Err(format!("tank_level {tank_level} outside [47, 57]"));
        }
        let mut kw = [0.0; 4];
        for (i, slot) in kw.iter_mut().enumerate() {
            *slot = self.number(row, REQUIRED_COLUMNS[3 + i])?;
            if *slot < 0.0 {
                return Err(format!("negative {} {}", REQUIRED_COLUMNS[3 + i], *slot));
            }
        }
        let flow = if self.has_flow {
            let mut q = [0.0; 4];
            for (i, slot) in q.iter_mut().enumerate() {
                *slot = self.number(row, FLOW_COLUMNS[i])?;
            }
            Some(q)
        } else {
            None
        };
        Ok(SensorRecord {
            timestamp,
            demand,
            tank_level,
            kw,
            flow,
        })
    }
}

fn line_of(row: &csv::StringRecord) -> u64 {
    row.position().map(|p| p.line()).unwrap_or(0)
}

fn check_monotonic(stamps: &[(u64, NaiveDateTime)]) -> Result<()> {
    let offending: Vec<RowError> = stamps
        .windows(2)
        .filter(|w| w[1].1 <= w[0].1)
        .map(|w| RowError {
            line: w[1].0,
            message: if w[1].1 == w[0].1 {
                format!("duplicate timestamp {} (also on line {})", format_timestamp(&w[1].1), w[0].0)
            } else {
                format!("timestamp {} precedes line {}", format_timestamp(&w[1].1), w[0].0)
            },
        })
        .collect();
    if offending.is_empty() {
        Ok(())
    } else {
        Err(DatasetError::NonMonotonic(offending))
    }
}

fn read_rows<R: Read, T>(
    source: R,
    extra_required: &[&str],
    mut convert: impl FnMut(&Columns, &csv::StringRecord) -> std::result::Result<T, String>,
    stamp: impl Fn(&T) -> NaiveDateTime,
) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let columns = Columns::from_headers(reader.headers()?, extra_required)?;
    let mut out = Vec::new();
    let mut lines = Vec::new();
    let mut errors = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match convert(&columns, &row) {
            Ok(item) => {
                lines.push((line_of(&row), stamp(&item)));
                out.push(item);
            }
            Err(message) => errors.push(RowError {
                line: line_of(&row),
                message,
            }),
        }
    }
    if !errors.is_empty() {
        return Err(DatasetError::MalformedRows(errors));
    }
    check_monotonic(&lines)?;
    Ok(out)
}

/// Parse and validate an operation log.
pub fn parse_log<R: Read>(source: R) -> Result<Vec<SensorRecord>> {
    read_rows(source, &[], |cols, row| cols.record(row), |r| r.timestamp)
}

/// Parse an exported trajectory (log columns plus `action,reward,water_quality`).
pub fn parse_trajectory<R: Read>(source: R) -> Result<Vec<TrajectoryRow>> {
    read_rows(
        source,
        &["action", "reward", "water_quality"],
        |cols, row| {
            let record = cols.record(row)?;
            let action = cols.field(row, "action")?.parse::<Action>().map_err(|e| e.to_string())?;
            let reward = cols.number(row, "reward")?;
            let water_quality = match cols.field(row, "water_quality")? {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(format!("bad water_quality {other:?}")),
            };
            Ok(TrajectoryRow {
                record,
                action,
                reward,
                water_quality,
            })
        },
        |r| r.record.timestamp,
    )
}

fn header(with_flow: bool, trajectory: bool) -> Vec<&'static str> {
    let mut h: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    if with_flow {
        h.extend(FLOW_COLUMNS);
    }
    if trajectory {
        h.extend(["action", "reward", "water_quality"]);
    }
    h
}

fn record_fields(r: &SensorRecord, with_flow: bool) -> Vec<String> {
    let mut f = vec![format_timestamp(&r.timestamp), r.demand.to_string(), r.tank_level.to_string()];
    f.extend(r.kw.iter().map(|v| v.to_string()));
    if with_flow {
        let q = r.flow.unwrap_or([0.0; 4]);
        f.extend(q.iter().map(|v| v.to_string()));
    }
    f
}

/// Serialize records in the canonical schema. Flow columns are written when
/// any record carries them.
pub fn write_log<W: Write>(records: &[SensorRecord], sink: W) -> Result<()> {
    let with_flow = records.iter().any(|r| r.flow.is_some());
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header(with_flow, false))?;
    for r in records {
        w.write_record(record_fields(r, with_flow))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory<W: Write>(rows: &[TrajectoryRow], sink: W) -> Result<()> {
    let with_flow = rows.iter().any(|r| r.record.flow.is_some());
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header(with_flow, true))?;
    for row in rows {
        let mut f = record_fields(&row.record, with_flow);
        f.push(row.action.name().to_string());
        f.push(row.reward.to_string());
        f.push(if row.water_quality { "1" } else { "0" }.to_string());
        w.write_record(f)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BehavioralAction {
    pub action: Action,
    /// More than one pump drew power in this minute.
    pub parallel: bool,
}

/// The action the operators took in `record`: the pump drawing power, NOP if
/// none does. Parallel operation collapses to the pump with the largest draw.
pub fn behavioral_action(record: &SensorRecord, kw_tolerance: f64) -> BehavioralAction {
    let mut best: Option<(usize, f64)> = None;
    let mut running = 0;
    for (i, &kw) in record.kw.iter().enumerate() {
        if kw > kw_tolerance {
            running += 1;
            if best.map_or(true, |(_, b)| kw > b) {
                best = Some((i, kw));
            }
        }
    }
    let action = best.and_then(|(i, _)| Action::from_index(i)).unwrap_or(Action::NOP);
    let parallel = running > 1;
    if parallel {
        log::warn!(
            "parallel pump operation at {}: kW = {:?}; recorded as {action}",
            format_timestamp(&record.timestamp),
            record.kw
        );
    }
    BehavioralAction { action, parallel }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ActionExtraction {
    pub actions: Vec<Action>,
    pub parallel_warnings: usize,
}

pub fn extract_actions(records: &[SensorRecord], kw_tolerance: f64) -> ActionExtraction {
    let mut out = ActionExtraction::default();
    for r in records {
        let b = behavioral_action(r, kw_tolerance);
        out.actions.push(b.action);
        out.parallel_warnings += usize::from(b.parallel);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Gap {
    /// Last record before the gap.
    pub after: NaiveDateTime,
    pub missing_minutes: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct GapReport {
    pub filled_minutes: usize,
    pub unrepaired: Vec<Gap>,
}

/// Forward-fill short gaps. Longer gaps are left in place and reported; the
/// slicer excludes the days they fall in.
pub fn repair_gaps(records: &[SensorRecord], max_fill_minutes: i64) -> (Vec<SensorRecord>, GapReport) {
    let mut out = Vec::with_capacity(records.len());
    let mut report = GapReport::default();
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            let prev = records[i - 1];
            let missing = (r.timestamp - prev.timestamp).num_minutes() - 1;
            if missing > 0 {
                if missing <= max_fill_minutes {
                    for k in 1..=missing {
                        out.push(SensorRecord {
                            timestamp: prev.timestamp + Duration::minutes(k),
                            ..prev
                        });
                    }
                    report.filled_minutes += missing as usize;
                } else {
                    report.unrepaired.push(Gap {
                        after: prev.timestamp,
                        missing_minutes: missing,
                    });
                }
            }
        }
        out.push(*r);
    }
    (out, report)
}

/// One day-long window of a log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSlice<'a> {
    pub start_index: usize,
    pub records: &'a [SensorRecord],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedDay {
    pub day: NaiveDate,
    pub records: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SliceReport<'a> {
    pub slices: Vec<EpisodeSlice<'a>>,
    /// Records in leading/trailing partial days.
    pub dropped_partial: usize,
    pub excluded: Vec<ExcludedDay>,
}

fn is_contiguous(records: &[SensorRecord]) -> bool {
    records.windows(2).all(|w| w[1].timestamp - w[0].timestamp == Duration::minutes(1))
}

/// Cut a log into consecutive 1440-minute windows starting at
/// `day_offset_minutes` past midnight.
pub fn slice_episodes(records: &[SensorRecord], day_offset_minutes: i64) -> Result<SliceReport<'_>> {
    if records.len() < EPISODE_LEN {
        return Err(DatasetError::TooShort {
            needed: EPISODE_LEN,
            got: records.len(),
        });
    }
    let offset = Duration::minutes(day_offset_minutes);
    let day_of = |r: &SensorRecord| (r.timestamp - offset).date();

    let mut groups: Vec<(NaiveDate, usize, usize)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let d = day_of(r);
        match groups.last_mut() {
            Some((day, _, end)) if *day == d => *end = i + 1,
            _ => groups.push((d, i, i + 1)),
        }
    }

    let mut report = SliceReport::default();
    let last = groups.len() - 1;
    for (g, &(day, start, end)) in groups.iter().enumerate() {
        let window = &records[start..end];
        let contiguous = is_contiguous(window);
        if window.len() == EPISODE_LEN && contiguous {
            report.slices.push(EpisodeSlice {
                start_index: start,
                records: window,
            });
        } else if contiguous && (g == 0 || g == last) {
            report.dropped_partial += window.len();
        } else {
            report.excluded.push(ExcludedDay {
                day,
                records: window.len(),
                reason: if contiguous {
                    format!("incomplete day ({} of {EPISODE_LEN} minutes)", window.len())
                } else {
                    "unrepaired gap".to_string()
                },
            });
        }
    }
    if report.dropped_partial > 0 {
        log::info!("dropped {} records in partial days", report.dropped_partial);
    }
    for ex in &report.excluded {
        log::warn!("excluded day {}: {}", ex.day, ex.reason);
    }
    Ok(report)
}

/// Exogenous per-minute demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandTrace {
    pub start: NaiveDateTime,
    /// m³/h, one value per minute.
    pub demand: Vec<f64>,
}

impl DemandTrace {
    pub fn len(&self) -> usize {
        self.demand.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demand.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::minutes(index as i64)
    }

    /// Demand column of a minute-contiguous log.
    pub fn from_records(records: &[SensorRecord]) -> Result<Self> {
        let first = records.first().ok_or(DatasetError::TooShort { needed: 1, got: 0 })?;
        if let Some(i) = records
            .windows(2)
            .position(|w| w[1].timestamp - w[0].timestamp != Duration::minutes(1))
        {
            return Err(DatasetError::NotContiguous { index: i + 1 });
        }
        Ok(Self {
            start: first.timestamp,
            demand: records.iter().map(|r| r.demand).collect(),
        })
    }
}

/// Shape of the synthetic consumption pattern.
///
/// `demand(t) = mean · season(t) · (1 + a₁cos(2π(h − h₁)/24) + a₂cos(4π(h − h₂)/24)) · (1 + u)`
/// with `h` the hour of day and `u` uniform in `[-noise, noise]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandProfileConfig {
    /// Long-run mean demand, m³/h.
    pub mean: f64,
    pub daily_amplitude: f64,
    /// Hour at which the daily harmonic peaks.
    pub daily_peak_hour: f64,
    pub semidiurnal_amplitude: f64,
    /// Hour of the first semidiurnal peak (the second is 12 h later).
    pub semidiurnal_peak_hour: f64,
    pub seasonal_amplitude: f64,
    pub seasonal_peak_day: f64,
    /// Relative bound of the multiplicative noise.
    pub noise: f64,
    pub start: NaiveDateTime,
}

impl Default for DemandProfileConfig {
    fn default() -> Self {
        Self {
            mean: 180.0,
            daily_amplitude: 0.3,
            daily_peak_hour: 13.0,
            semidiurnal_amplitude: 0.25,
            semidiurnal_peak_hour: 7.0,
            seasonal_amplitude: 0.1,
            seasonal_peak_day: 200.0,
            noise: 0.05,
            start: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
        }
    }
}

impl DemandProfileConfig {
    /// Noise-free demand at `ts`.
    pub fn expected(&self, ts: &NaiveDateTime) -> f64 {
        let hour = (ts.hour() * 60 + ts.minute()) as f64 / 60.0;
        let daily = 1.0
            + self.daily_amplitude * (2.0 * PI * (hour - self.daily_peak_hour) / 24.0).cos()
            + self.semidiurnal_amplitude * (4.0 * PI * (hour - self.semidiurnal_peak_hour) / 24.0).cos();
        let doy = ts.ordinal0() as f64;
        let season = 1.0 + self.seasonal_amplitude * (2.0 * PI * (doy - self.seasonal_peak_day) / 365.25).cos();
        self.mean * season * daily
    }
}

/// Deterministic synthetic demand for `days` days.
pub fn synthesize_demand(days: usize, seed: u64, profile: &DemandProfileConfig) -> DemandTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = days * EPISODE_LEN;
    let demand = (0..n)
        .map(|i| {
            let ts = profile.start + Duration::minutes(i as i64);
            let u = if profile.noise > 0.0 {
                rng.random_range(-profile.noise..=profile.noise)
            } else {
                0.0
            };
            (profile.expected(&ts) * (1.0 + u)).max(0.0)
        })
        .collect();
    DemandTrace {
        start: profile.start,
        demand,
    }
}
