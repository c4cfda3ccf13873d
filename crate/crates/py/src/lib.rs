//! Python bindings for the simulator, rewards, replay tree and trained
//! policies.

use std::fmt::Display;
use std::str::FromStr;

use pumpsched_core::agent::{greedy_policy, load_checkpoint, Checkpoint};
use pumpsched_core::dataset::{
    behavioral_action, parse_log, parse_timestamp, parse_trajectory, synthesize_demand, write_trajectory, DemandTrace,
    DEFAULT_KW_TOLERANCE,
};
use pumpsched_core::env::{reward_v1, reward_v2, Env, RewardContext, OBS_DIM};
use pumpsched_core::hydraulics::{hydraulic_power as power, WATER_DENSITY};
use pumpsched_core::metrics::{aggregate, count_switches_with, SwitchCounting};
use pumpsched_core::pipeline::report_options;
use pumpsched_core::replay::SumTree as CoreSumTree;
use pumpsched_core::synth::synthesize_log as synth_log;
use pumpsched_core::{Action, AppConfig};
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn invalid(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn action(name: &str) -> PyResult<Action> {
    Action::from_str(name).map_err(invalid)
}

fn config(json: Option<&str>) -> PyResult<AppConfig> {
    json.map_or_else(|| Ok(AppConfig::default()), |text| AppConfig::from_json(text).map_err(invalid))
}

/// Converts any serializable value to plain Python objects.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Action names in index order.
#[pyfunction]
fn actions() -> Vec<&'static str> {
    Action::ALL.iter().map(|a| a.name()).collect()
}

#[pyclass(name = "OperatingPoint", frozen, get_all)]
struct PyOperatingPoint {
    q: f64,
    head: f64,
    p_hydraulic: f64,
    p_electric: f64,
    eta: f64,
    dead_headed: bool,
}

#[pymethods]
impl PyOperatingPoint {
    fn __repr__(&self) -> String {
        format!(
            "OperatingPoint(q={}, head={}, p_electric={}, eta={}, dead_headed={})",
            self.q, self.head, self.p_electric, self.eta, self.dead_headed
        )
    }
}

/// Operating point of one pump against the system at a tank level and
/// demand.
#[pyfunction]
#[pyo3(signature = (pump, tank_level, demand, speed = 1.0, config_json = None))]
fn operating_point(
    pump: &str,
    tank_level: f64,
    demand: f64,
    speed: f64,
    config_json: Option<&str>,
) -> PyResult<PyOperatingPoint> {
    let id = action(pump)?
        .pump()
        .ok_or_else(|| PyValueError::new_err("NOP has no operating point"))?;
    let op = config(config_json)?
        .hydraulics
        .pump_operating_point(id, tank_level, demand, speed)
        .map_err(invalid)?;
    Ok(PyOperatingPoint {
        q: op.q,
        head: op.head,
        p_hydraulic: op.p_hydraulic,
        p_electric: op.p_electric,
        eta: op.eta,
        dead_headed: op.dead_headed,
    })
}

/// Hydraulic power in kW for a flow in m³/h and head in m.
#[pyfunction]
#[pyo3(signature = (q, head, rho = WATER_DENSITY))]
fn hydraulic_power(q: f64, head: f64, rho: f64) -> f64 {
    power(q, head, rho)
}

/// One-minute reward under variant `"v1"` or `"v2"`.
#[pyfunction]
#[pyo3(signature = (variant, action_name, prev_action, time_running, tank_level, water_quality, q, kw, config_json = None))]
#[allow(clippy::too_many_arguments)]
fn reward(
    variant: &str,
    action_name: &str,
    prev_action: &str,
    time_running: u32,
    tank_level: f64,
    water_quality: bool,
    q: f64,
    kw: f64,
    config_json: Option<&str>,
) -> PyResult<f64> {
    let cfg = config(config_json)?.reward;
    let ctx = RewardContext {
        action: action(action_name)?,
        prev_action: action(prev_action)?,
        time_running,
        tank_level,
        water_quality,
        q,
        kw,
    };
    match variant.to_ascii_lowercase().as_str() {
        "v1" => reward_v1(&ctx, &cfg),
        "v2" => reward_v2(&ctx, &cfg),
        other => return Err(PyValueError::new_err(format!("unknown reward variant {other:?}"))),
    }
    .map_err(invalid)
}

/// Minute-step pump station with a day-long, reset-free episode clock.
#[pyclass(name = "Env")]
struct PyEnv {
    inner: Env,
    initial_level: f64,
    start_index: usize,
}

#[pymethods]
impl PyEnv {
    /// Synthesizes `days` of demand unless an explicit per-minute `demand`
    /// list is given.
    #[new]
    #[pyo3(signature = (days = 1, seed = 0, demand = None, start = None, config_json = None))]
    fn new(days: usize, seed: u64, demand: Option<Vec<f64>>, start: Option<&str>, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = config(config_json)?;
        let trace = match demand {
            Some(demand) => DemandTrace {
                start: match start {
                    Some(s) => parse_timestamp(s).ok_or_else(|| PyValueError::new_err(format!("bad timestamp {s:?}")))?,
                    None => cfg.demand.start,
                },
                demand,
            },
            None => synthesize_demand(days, seed, &cfg.demand),
        };
        let mut inner = Env::new(cfg.hydraulics.clone(), cfg.reward, &cfg.env, trace).map_err(invalid)?;
        inner.set_recording(true);
        Ok(Self {
            inner,
            initial_level: cfg.env.initial_level,
            start_index: cfg.env.start_index,
        })
    }

    /// Starts over; returns the first observation.
    #[pyo3(signature = (level = None, start_index = None))]
    fn reset(&mut self, py: Python<'_>, level: Option<f64>, start_index: Option<usize>) -> PyResult<Py<PyAny>> {
        let obs = self
            .inner
            .reset(level.unwrap_or(self.initial_level), start_index.unwrap_or(self.start_index))
            .map_err(invalid)?;
        self.inner.take_trajectory();
        to_py(py, &obs)
    }

    /// Runs one minute; returns `(observation, reward, info)`.
    fn step(&mut self, py: Python<'_>, action_name: &str) -> PyResult<(Py<PyAny>, f64, Py<PyAny>)> {
        let out = self.inner.step(action(action_name)?).map_err(invalid)?;
        Ok((to_py(py, &out.observation)?, out.reward, to_py(py, &out.info)?))
    }

    fn observation(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.observation().map_err(invalid)?)
    }

    /// Feature vector of the current observation.
    fn features(&self) -> PyResult<Vec<f64>> {
        let obs = self.inner.observation().map_err(invalid)?;
        Ok(self.inner.encode(&obs).to_vec())
    }

    #[getter]
    fn tank_level(&self) -> Option<f64> {
        self.inner.tank_level()
    }

    #[getter]
    fn step_in_episode(&self) -> Option<usize> {
        self.inner.step_in_episode()
    }

    /// Minutes of demand left.
    #[getter]
    fn remaining(&self) -> usize {
        self.inner.remaining()
    }

    /// Steps since the last reset as CSV.
    fn trajectory_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_trajectory(self.inner.trajectory(), &mut buf).map_err(|e| PyIOError::new_err(e.to_string()))?;
        String::from_utf8(buf).map_err(invalid)
    }
}

/// Rule-operated synthetic log as CSV.
#[pyfunction]
#[pyo3(signature = (days = 1, seed = 0, config_json = None))]
fn synthesize_log(days: usize, seed: u64, config_json: Option<&str>) -> PyResult<String> {
    let rows = synth_log(&config(config_json)?, days, seed).map_err(invalid)?;
    let mut buf = Vec::new();
    write_trajectory(&rows, &mut buf).map_err(|e| PyIOError::new_err(e.to_string()))?;
    String::from_utf8(buf).map_err(invalid)
}

/// Operator actions implied by the power columns of a log.
#[pyfunction]
#[pyo3(signature = (csv, kw_tolerance = DEFAULT_KW_TOLERANCE))]
fn extract_actions(csv: &str, kw_tolerance: f64) -> PyResult<Vec<&'static str>> {
    let records = parse_log(csv.as_bytes()).map_err(invalid)?;
    Ok(records
        .iter()
        .map(|r| behavioral_action(r, kw_tolerance).action.name())
        .collect())
}

/// Switches in an action sequence; `per_pump` counts a direct pump change
/// as two.
#[pyfunction]
#[pyo3(signature = (actions, per_pump = true))]
fn count_switches(actions: Vec<String>, per_pump: bool) -> PyResult<usize> {
    let parsed = actions.iter().map(|a| action(a)).collect::<PyResult<Vec<_>>>()?;
    let mode = if per_pump {
        SwitchCounting::PerPump
    } else {
        SwitchCounting::ActionChange
    };
    Ok(count_switches_with(&parsed, mode))
}

/// Operation report of an exported trajectory.
#[pyfunction]
#[pyo3(signature = (csv, config_json = None))]
fn report(py: Python<'_>, csv: &str, config_json: Option<&str>) -> PyResult<Py<PyAny>> {
    let rows = parse_trajectory(csv.as_bytes()).map_err(invalid)?;
    to_py(py, &aggregate(&rows, &report_options(&config(config_json)?)))
}

/// Sum tree over a fixed number of leaves.
#[pyclass(name = "SumTree")]
struct PySumTree {
    inner: CoreSumTree,
    capacity: usize,
}

impl PySumTree {
    fn check(&self, leaf: usize) -> PyResult<()> {
        if leaf < self.capacity {
            Ok(())
        } else {
            Err(PyIndexError::new_err(format!("leaf {leaf} out of range")))
        }
    }
}

#[pymethods]
impl PySumTree {
    #[new]
    fn new(capacity: usize) -> PyResult<Self> {
        if capacity == 0 {
            return Err(PyValueError::new_err("capacity must be positive"));
        }
        Ok(Self {
            inner: CoreSumTree::new(capacity),
            capacity,
        })
    }

    fn set(&mut self, leaf: usize, priority: f64) -> PyResult<()> {
        self.check(leaf)?;
        if !(priority >= 0.0 && priority.is_finite()) {
            return Err(PyValueError::new_err("priority must be finite and nonnegative"));
        }
        self.inner.set(leaf, priority);
        Ok(())
    }

    fn get(&self, leaf: usize) -> PyResult<f64> {
        self.check(leaf)?;
        Ok(self.inner.get(leaf))
    }

    #[getter]
    fn total(&self) -> f64 {
        self.inner.total()
    }

    /// Leaf whose cumulative range contains `mass`.
    fn find(&self, mass: f64) -> usize {
        self.inner.find(mass)
    }

    fn __len__(&self) -> usize {
        self.capacity
    }
}

/// Greedy policy of a trained checkpoint.
#[pyclass(name = "Policy", frozen)]
struct PyPolicy {
    checkpoint: Checkpoint,
    demand_max: f64,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let checkpoint = load_checkpoint(std::io::BufReader::new(file)).map_err(invalid)?;
        let demand_max = AppConfig::from_json(&checkpoint.config_echo)
            .map(|c| c.env.demand_max)
            .unwrap_or_else(|_| AppConfig::default().env.demand_max);
        Ok(Self { checkpoint, demand_max })
    }

    /// Ensemble size.
    #[getter]
    fn k(&self) -> usize {
        self.checkpoint.ensemble.online.k()
    }

    #[getter]
    fn updates(&self) -> u64 {
        self.checkpoint.ensemble.updates
    }

    /// Per-head action values for a feature vector.
    fn head_values(&self, features: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.check(&features)?;
        Ok(self
            .checkpoint
            .ensemble
            .online
            .head_outputs(&features)
            .iter()
            .map(|h| h.to_vec())
            .collect())
    }

    fn act(&self, features: Vec<f64>) -> PyResult<&'static str> {
        self.check(&features)?;
        Ok(greedy_policy(&self.checkpoint.ensemble.online, &features).name())
    }

    /// Greedy action for the environment's current state.
    fn act_in(&self, env: &PyEnv) -> PyResult<&'static str> {
        let obs = env.inner.observation().map_err(invalid)?;
        let x = pumpsched_core::env::encode_observation(&obs, self.demand_max);
        Ok(greedy_policy(&self.checkpoint.ensemble.online, &x).name())
    }
}

impl PyPolicy {
    fn check(&self, features: &[f64]) -> PyResult<()> {
        if features.len() == OBS_DIM {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("expected {OBS_DIM} features, got {}", features.len())))
        }
    }
}

#[pymodule]
fn pumpsched(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OBS_DIM", OBS_DIM)?;
    m.add_function(wrap_pyfunction!(actions, m)?)?;
    m.add_function(wrap_pyfunction!(operating_point, m)?)?;
    m.add_function(wrap_pyfunction!(hydraulic_power, m)?)?;
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_log, m)?)?;
    m.add_function(wrap_pyfunction!(extract_actions, m)?)?;
    m.add_function(wrap_pyfunction!(count_switches, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_class::<PyOperatingPoint>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PySumTree>()?;
    m.add_class::<PyPolicy>()?;
    Ok(())
}
