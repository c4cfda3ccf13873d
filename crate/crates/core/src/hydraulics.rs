//! Pump and tank physics.
//!
//! Everything here is a pure function of its arguments. Flows are in m³/h,
//! heads in meters, powers in kW and speeds are ratios to the rated speed.
//!
//! A pump's head curve at rated speed is the downward parabola
//! `H(Q) = h0 - c·Q²`. The system curve is the upward parabola
//! `H(Q) = H_st + k·Q²`, whose static part follows the tank level and whose
//! slope flattens as demand grows. Both are quadratic in `Q` with no linear
//! term, so their intersection has a closed form.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Standard gravity used by the hydraulic power formula, m/s².
pub const GRAVITY: f64 = 9.81;
/// Density of water, kg/m³.
pub const WATER_DENSITY: f64 = 1000.0;
/// Efficiency used for power accounting when the efficiency parabola has
/// dropped to zero while the pump still delivers flow.
pub const MIN_RUNNING_EFFICIENCY: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HydraulicsError {
    #[error("demand must be nonnegative, got {0} m³/h")]
    NegativeDemand(f64),
    #[error("flow must be nonnegative, got {0} m³/h")]
    NegativeFlow(f64),
    #[error("speed ratio must lie in (0, 1], got {0}")]
    InvalidSpeed(f64),
    #[error("efficiency must lie in (0, 1], got {0}")]
    InvalidEfficiency(f64),
    #[error("tank level {level} m outside [{min}, {max}] m")]
    LevelOutOfRange { level: f64, min: f64, max: f64 },
    #[error("invalid pump {id}: {reason}")]
    InvalidPump { id: PumpId, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("calibration of {id} needs at least {needed} usable samples, got {got}")]
    NotEnoughSamples { id: PumpId, needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, HydraulicsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PumpId {
    NP1,
    NP2,
    NP3,
    NP4,
}

impl PumpId {
    pub const ALL: [PumpId; 4] = [PumpId::NP1, PumpId::NP2, PumpId::NP3, PumpId::NP4];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PumpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PumpId::NP1 => "NP1",
            PumpId::NP2 => "NP2",
            PumpId::NP3 => "NP3",
            PumpId::NP4 => "NP4",
        };
        f.write_str(name)
    }
}

/// Characteristic curves of one fixed-geometry centrifugal pump at rated speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpModel {
    pub id: PumpId,
    /// Shutoff head at zero flow, m.
    pub h0: f64,
    /// Head-curve curvature, m/(m³/h)².
    pub c: f64,
    /// Flow at the best efficiency point, m³/h.
    pub q_bep: f64,
    /// Peak efficiency.
    pub eta_bep: f64,
    /// Curvature of the efficiency parabola around the BEP, 1/(m³/h)².
    pub eta_coeff: f64,
}

impl PumpModel {
    /// Flow at which the rated-speed head curve reaches zero.
    pub fn runout_flow(&self) -> f64 {
        (self.h0 / self.c).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(HydraulicsError::InvalidPump {
                id: self.id,
                reason: reason.to_string(),
            })
        };
        if !(self.h0 > 0.0 && self.h0.is_finite()) {
            return fail("shutoff head must be positive");
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return fail("head coefficient must be positive");
        }
        if !(self.eta_bep > 0.0 && self.eta_bep <= 1.0) {
            return fail("peak efficiency must lie in (0, 1]");
        }
        if !(self.eta_coeff >= 0.0 && self.eta_coeff.is_finite()) {
            return fail("efficiency curvature must be nonnegative");
        }
        if !(self.q_bep > 0.0 && self.q_bep < self.runout_flow()) {
            return fail("BEP flow must lie strictly between zero and runout");
        }
        Ok(())
    }
}

/// Coefficients of the demand-dependent system curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemCurveConfig {
    /// Slope at zero demand, m/(m³/h)².
    pub k0: f64,
    /// Demand sensitivity of the slope, 1/(m³/h).
    pub beta: f64,
    /// Static-head rise per unit demand, m/(m³/h).
    pub c_d: f64,
}

impl Default for SystemCurveConfig {
    fn default() -> Self {
        Self {
            k0: 4e-5,
            beta: 0.002,
            c_d: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemCurve {
    /// Static head, m.
    pub static_head: f64,
    /// Dynamic-loss coefficient, m/(m³/h)².
    pub slope: f64,
}

impl SystemCurve {
    pub fn head_at(&self, q: f64) -> f64 {
        self.static_head + self.slope * q * q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TankConfig {
    /// Horizontal cross-section, m².
    pub area: f64,
    /// Geodetic level of the tank floor, m.
    pub min_level: f64,
    /// Geodetic level at which the tank overflows, m.
    pub max_level: f64,
}

impl Default for TankConfig {
    fn default() -> Self {
        Self {
            area: 1600.0,
            min_level: 47.0,
            max_level: 57.0,
        }
    }
}

impl TankConfig {
    pub fn capacity(&self) -> f64 {
        (self.max_level - self.min_level) * self.area
    }

    pub fn check_level(&self, level: f64) -> Result<()> {
        if level >= self.min_level && level <= self.max_level {
            Ok(())
        } else {
            Err(HydraulicsError::LevelOutOfRange {
                level,
                min: self.min_level,
                max: self.max_level,
            })
        }
    }
}

/// Stored water. Volume is the conserved quantity; the geodetic level is
/// derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TankState {
    /// Stored volume above the tank floor, m³.
    pub volume: f64,
}

impl TankState {
    pub fn from_level(level: f64, tank: &TankConfig) -> Result<Self> {
        tank.check_level(level)?;
        Ok(Self {
            volume: (level - tank.min_level) * tank.area,
        })
    }

    pub fn level(&self, tank: &TankConfig) -> f64 {
        tank.min_level + self.volume / tank.area
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TankUpdate {
    pub state: TankState,
    pub overflow: bool,
    pub empty: bool,
}

/// Reynolds-number correction of peak efficiency under speed change.
///
/// `(1 - η₁) / (1 - η₂) = (1 - V) + V·(Re₂/Re₁)^inv_alpha` with the Reynolds
/// ratio taken equal to the speed ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AckeretConfig {
    #[serde(rename = "V")]
    pub v: f64,
    pub inv_alpha: f64,
}

impl Default for AckeretConfig {
    fn default() -> Self {
        Self { v: 0.5, inv_alpha: 0.2 }
    }
}

impl AckeretConfig {
    /// Parameters for which the correction is the identity at every speed.
    pub const IDENTITY: AckeretConfig = AckeretConfig { v: 1.0, inv_alpha: 0.0 };

    pub fn peak_efficiency(&self, eta_rated: f64, speed: f64) -> f64 {
        let ratio = (1.0 - self.v) + self.v * speed.powf(self.inv_alpha);
        (1.0 - (1.0 - eta_rated) / ratio).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Delivered flow, m³/h.
    pub q: f64,
    /// Pump head at the intersection, m.
    pub head: f64,
    pub p_hydraulic: f64,
    pub p_electric: f64,
    pub eta: f64,
    pub dead_headed: bool,
}

impl OperatingPoint {
    /// The idle point of a stopped pump.
    pub const IDLE: OperatingPoint = OperatingPoint {
        q: 0.0,
        head: 0.0,
        p_hydraulic: 0.0,
        p_electric: 0.0,
        eta: 0.0,
        dead_headed: false,
    };
}

/// System curve for the current tank level and demand.
///
/// `H_st = level + c_d·demand`, `k = k0 / (1 + β·demand)`.
pub fn system_curve(tank_level: f64, demand: f64, params: &SystemCurveConfig) -> Result<SystemCurve> {
    if !(demand >= 0.0) {
        return Err(HydraulicsError::NegativeDemand(demand));
    }
    Ok(SystemCurve {
        static_head: tank_level + params.c_d * demand,
        slope: params.k0 / (1.0 + params.beta * demand),
    })
}

fn check_speed(speed: f64) -> Result<()> {
    if speed > 0.0 && speed <= 1.0 {
        Ok(())
    } else {
        Err(HydraulicsError::InvalidSpeed(speed))
    }
}

fn check_flow(q: f64) -> Result<()> {
    if q >= 0.0 {
        Ok(())
    } else {
        Err(HydraulicsError::NegativeFlow(q))
    }
}

/// Head of `pump` at flow `q` when running at `speed`. Negative past runout.
pub fn pump_head(pump: &PumpModel, q: f64, speed: f64) -> Result<f64> {
    check_flow(q)?;
    check_speed(speed)?;
    Ok(speed * speed * pump.h0 - pump.c * q * q)
}

/// Pump curve at a reduced speed. Each rated point `(Q₁, H₁)` moves to
/// `(n·Q₁, n²·H₁)` along the parabola `H = (H₁/Q₁²)·Q²`.
pub fn scale_curve(pump: &PumpModel, speed: f64) -> Result<PumpModel> {
    check_speed(speed)?;
    Ok(PumpModel {
        h0: speed * speed * pump.h0,
        q_bep: speed * pump.q_bep,
        ..*pump
    })
}

/// Efficiency at flow `q` and `speed`, floored at zero.
pub fn efficiency_at(pump: &PumpModel, q: f64, speed: f64, ackeret: &AckeretConfig) -> Result<f64> {
    check_flow(q)?;
    check_speed(speed)?;
    let peak = ackeret.peak_efficiency(pump.eta_bep, speed);
    let offset = q - speed * pump.q_bep;
    Ok((peak - pump.eta_coeff * offset * offset).max(0.0))
}

/// `P_h = Q·ρ·g·h / 3.6e6` in kW, with `Q` in m³/h.
pub fn hydraulic_power(q: f64, head: f64, rho: f64) -> f64 {
    q * rho * GRAVITY * head / 3.6e6
}

/// Shaft power drawn for a given hydraulic power.
pub fn electrical_power(p_hydraulic: f64, q: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(HydraulicsError::InvalidEfficiency(eta));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    Ok(p_hydraulic / eta)
}

/// Intersection of the speed-scaled pump curve with the system curve.
pub fn operating_point(
    pump: &PumpModel,
    sys: &SystemCurve,
    speed: f64,
    ackeret: &AckeretConfig,
    rho: f64,
) -> Result<OperatingPoint> {
    check_speed(speed)?;
    let shutoff = speed * speed * pump.h0;
    if shutoff <= sys.static_head {
        return Ok(OperatingPoint {
            q: 0.0,
            head: shutoff,
            p_hydraulic: 0.0,
            p_electric: 0.0,
            eta: 0.0,
            dead_headed: true,
        });
    }
    let q = ((shutoff - sys.static_head) / (pump.c + sys.slope)).sqrt();
    let head = sys.head_at(q);
    let eta = efficiency_at(pump, q, speed, ackeret)?.max(MIN_RUNNING_EFFICIENCY);
    let p_hydraulic = hydraulic_power(q, head, rho);
    let p_electric = electrical_power(p_hydraulic, q, eta)?;
    Ok(OperatingPoint {
        q,
        head,
        p_hydraulic,
        p_electric,
        eta,
        dead_headed: false,
    })
}

/// Mass balance over `dt_minutes`; the level is clamped to the tank bounds.
pub fn tank_update(tank: &TankState, q_in: f64, demand: f64, dt_minutes: f64, config: &TankConfig) -> TankUpdate {
    let volume = tank.volume + (q_in - demand) * (dt_minutes / 60.0);
    let capacity = config.capacity();
    if volume >= capacity {
        TankUpdate {
            state: TankState { volume: capacity },
            overflow: volume > capacity,
            empty: false,
        }
    } else if volume <= 0.0 {
        TankUpdate {
            state: TankState { volume: 0.0 },
            overflow: false,
            empty: volume < 0.0,
        }
    } else {
        TankUpdate {
            state: TankState { volume },
            overflow: false,
            empty: false,
        }
    }
}

/// One measured point of a running pump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSample {
    pub q: f64,
    pub kw: f64,
    pub head: f64,
}

/// Fit a rated-speed pump model from measured (flow, electrical power, head)
/// triples.
///
/// The head curve is an ordinary least-squares fit of `H` against `Q²`. The
/// efficiency of each sample is `P_h / kW`; a parabola in `Q` is fitted to
/// those and its vertex gives the BEP. If the fitted parabola opens upward
/// (too little spread in flow) the BEP falls back to the flow-weighted mean
/// with zero curvature.
pub fn calibrate_pump(id: PumpId, samples: &[PerformanceSample], rho: f64) -> Result<PumpModel> {
    let usable: Vec<_> = samples
        .iter()
        .filter(|s| s.q > 0.0 && s.kw > 0.0 && s.head > 0.0 && s.q.is_finite() && s.kw.is_finite())
        .collect();
    if usable.len() < 3 {
        return Err(HydraulicsError::NotEnoughSamples {
            id,
            needed: 3,
            got: usable.len(),
        });
    }
    let n = usable.len() as f64;

    let xs: Vec<f64> = usable.iter().map(|s| s.q * s.q).collect();
    let ys: Vec<f64> = usable.iter().map(|s| s.head).collect();
    let (intercept, slope) = linear_fit(&xs, &ys).ok_or_else(|| HydraulicsError::InvalidPump {
        id,
        reason: "flow samples do not vary".into(),
    })?;
    let h0 = intercept;
    let c = -slope;

    let etas: Vec<f64> = usable
        .iter()
        .map(|s| (hydraulic_power(s.q, s.head, rho) / s.kw).clamp(1e-6, 1.0))
        .collect();
    let qs: Vec<f64> = usable.iter().map(|s| s.q).collect();
    let (q_bep, eta_bep, eta_coeff) = match quadratic_fit(&qs, &etas) {
        Some((a0, a1, a2)) if a2 < 0.0 => {
            let vertex = -a1 / (2.0 * a2);
            (vertex, a0 + a1 * vertex + a2 * vertex * vertex, -a2)
        }
        _ => {
            let mean_q = qs.iter().sum::<f64>() / n;
            let mean_eta = etas.iter().sum::<f64>() / n;
            (mean_q, mean_eta, 0.0)
        }
    };

    let model = PumpModel {
        id,
        h0,
        c,
        q_bep,
        eta_bep: eta_bep.clamp(1e-6, 1.0),
        eta_coeff,
    };
    model.validate()?;
    Ok(model)
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Least-squares `y = a0 + a1·x + a2·x²` via centered normal equations.
fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let scale = xs.iter().map(|x| (x - mx).abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    // Solve in u = (x - mx) / scale for conditioning.
    let mut m = [[0.0f64; 4]; 3];
    for (x, y) in xs.iter().zip(ys) {
        let u = (x - mx) / scale;
        let basis = [1.0, u, u * u];
        for r in 0..3 {
            for col in 0..3 {
                m[r][col] += basis[r] * basis[col];
            }
            m[r][3] += basis[r] * y;
        }
    }
    let b = solve3(m)?;
    // Back to x: y = b0 + b1 u + b2 u², u = (x - mx)/s.
    let s2 = scale * scale;
    let a2 = b[2] / s2;
    let a1 = b[1] / scale - 2.0 * b[2] * mx / s2;
    let a0 = b[0] - b[1] * mx / scale + b[2] * mx * mx / s2;
    Some((a0, a1, a2))
}

fn solve3(mut m: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..4 {
                    m[r][k] -= f * m[col][k];
                }
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

/// The full set of plant constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydraulicsConfig {
    pub pumps: [PumpModel; 4],
    #[serde(default)]
    pub system: SystemCurveConfig,
    #[serde(default)]
    pub tank: TankConfig,
    #[serde(default)]
    pub ackeret: AckeretConfig,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    WATER_DENSITY
}

impl Default for HydraulicsConfig {
    /// Calibration placeholders: ordered by size, every pump lifts against a
    /// full tank, electrical draw in the 30 to 70 kW range.
    fn default() -> Self {
        let pump = |id, h0, c, q_bep: f64, eta_bep: f64| PumpModel {
            id,
            h0,
            c,
            q_bep,
            eta_bep,
            eta_coeff: eta_bep / (1.5 * q_bep).powi(2),
        };
        Self {
            pumps: [
                pump(PumpId::NP1, 72.0, 1.2e-4, 360.0, 0.82),
                pump(PumpId::NP2, 70.0, 1.6e-4, 300.0, 0.80),
                pump(PumpId::NP3, 68.0, 2.4e-4, 230.0, 0.77),
                pump(PumpId::NP4, 66.0, 4.0e-4, 170.0, 0.74),
            ],
            system: SystemCurveConfig::default(),
            tank: TankConfig::default(),
            ackeret: AckeretConfig::default(),
            rho: WATER_DENSITY,
        }
    }
}

impl HydraulicsConfig {
    pub fn pump(&self, id: PumpId) -> &PumpModel {
        &self.pumps[id.index()]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, pump) in self.pumps.iter().enumerate() {
            if pump.id.index() != i {
                return Err(HydraulicsError::InvalidConfig(format!(
                    "pump slot {i} holds {}; pumps must be listed NP1..NP4",
                    pump.id
                )));
            }
            pump.validate()?;
        }
        if !(self.system.k0 >= 0.0 && self.system.beta >= 0.0 && self.system.c_d >= 0.0) {
            return Err(HydraulicsError::InvalidConfig(
                "system curve coefficients must be nonnegative".into(),
            ));
        }
        if !(self.tank.area > 0.0 && self.tank.max_level > self.tank.min_level) {
            return Err(HydraulicsError::InvalidConfig("tank geometry is degenerate".into()));
        }
        if !(self.rho > 0.0) {
            return Err(HydraulicsError::InvalidConfig("density must be positive".into()));
        }
        Ok(())
    }

    /// Operating point of `id` at rated speed for the given plant state.
    pub fn pump_operating_point(&self, id: PumpId, tank_level: f64, demand: f64, speed: f64) -> Result<OperatingPoint> {
        let sys = system_curve(tank_level, demand, &self.system)?;
        operating_point(self.pump(id), &sys, speed, &self.ackeret, self.rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_pump() -> PumpModel {
        PumpModel {
            id: PumpId::NP2,
            h0: 60.0,
            c: 5e-4,
            q_bep: 200.0,
            eta_bep: 0.8,
            eta_coeff: 1e-5,
        }
    }

    #[test]
    fn system_curve_zero_demand_identity() {
        let cfg = SystemCurveConfig { k0: 4e-4, beta: 0.0, c_d: 0.0 };
        let sys = system_curve(52.0, 0.0, &cfg).unwrap();
        assert_eq!(sys.static_head, 52.0);
        assert_eq!(sys.slope, 4e-4);
    }

    #[test]
    fn system_curve_with_demand() {
        let cfg = SystemCurveConfig { k0: 4e-4, beta: 0.002, c_d: 0.001 };
        let sys = system_curve(50.0, 400.0, &cfg).unwrap();
        assert_relative_eq!(sys.static_head, 50.4, epsilon = 1e-12);
        assert_relative_eq!(sys.slope, 4e-4 / 1.8, epsilon = 1e-15);
        assert_relative_eq!(sys.slope, 2.222e-4, epsilon = 1e-7);
    }

    #[test]
    fn system_curve_rejects_negative_demand() {
        let err = system_curve(50.0, -1.0, &SystemCurveConfig::default()).unwrap_err();
        assert_eq!(err, HydraulicsError::NegativeDemand(-1.0));
    }

    #[test]
    fn pump_head_examples() {
        let p = test_pump();
        assert_eq!(pump_head(&p, 0.0, 1.0).unwrap(), 60.0);
        assert_relative_eq!(pump_head(&p, 100.0, 1.0).unwrap(), 55.0, epsilon = 1e-12);
        assert_relative_eq!(pump_head(&p, 50.0, 0.5).unwrap(), 13.75, epsilon = 1e-12);
        assert!(matches!(pump_head(&p, 10.0, 0.0), Err(HydraulicsError::InvalidSpeed(_))));
        assert!(matches!(pump_head(&p, 10.0, -0.5), Err(HydraulicsError::InvalidSpeed(_))));
    }

    #[test]
    fn operating_point_reference_case() {
        let p = test_pump();
        let sys = SystemCurve { static_head: 52.0, slope: 3e-4 };
        let op = operating_point(&p, &sys, 1.0, &AckeretConfig::default(), WATER_DENSITY).unwrap();
        assert!(!op.dead_headed);
        assert_relative_eq!(op.q, 100.0, epsilon = 1e-9);
        assert_relative_eq!(op.head, 55.0, epsilon = 1e-9);
        assert_relative_eq!(pump_head(&p, op.q, 1.0).unwrap(), op.head, epsilon = 1e-9);
        assert_relative_eq!(op.p_electric, op.p_hydraulic / op.eta, epsilon = 1e-12);
    }

    #[test]
    fn operating_point_dead_head() {
        let p = test_pump();
        let sys = SystemCurve { static_head: 60.0, slope: 1.0 };
        let op = operating_point(&p, &sys, 1.0, &AckeretConfig::default(), WATER_DENSITY).unwrap();
        assert!(op.dead_headed);
        assert_eq!(op.q, 0.0);
        assert_eq!(op.p_hydraulic, 0.0);
        assert_eq!(op.p_electric, 0.0);
    }

    #[test]
    fn hydraulic_power_examples() {
        assert_eq!(hydraulic_power(0.0, 55.0, 1000.0), 0.0);
        assert_eq!(hydraulic_power(360.0, 50.0, 1000.0), 49.05);
        assert_relative_eq!(hydraulic_power(100.0, 55.0, 1000.0), 14.9875, epsilon = 1e-12);
    }

    #[test]
    fn electrical_power_examples() {
        assert_relative_eq!(electrical_power(14.9875, 100.0, 0.75).unwrap(), 19.983333333333, epsilon = 1e-9);
        assert_eq!(electrical_power(14.9875, 100.0, 1.0).unwrap(), 14.9875);
        assert_eq!(electrical_power(0.0, 0.0, 0.5).unwrap(), 0.0);
        assert!(matches!(electrical_power(1.0, 1.0, 0.0), Err(HydraulicsError::InvalidEfficiency(_))));
    }

    #[test]
    fn efficiency_at_bep_and_scaled_bep() {
        let p = test_pump();
        let ack = AckeretConfig::default();
        assert_eq!(efficiency_at(&p, p.q_bep, 1.0, &ack).unwrap(), p.eta_bep);
        // At the affinity-scaled BEP only the Reynolds correction remains:
        // 1 - η₂ = (1 - η₁) / (0.5 + 0.5·0.5^0.2).
        let expected = 1.0 - (1.0 - 0.8) / (0.5 + 0.5 * 0.5f64.powf(0.2));
        assert_relative_eq!(efficiency_at(&p, 0.5 * p.q_bep, 0.5, &ack).unwrap(), expected, epsilon = 1e-15);
        assert!(expected < p.eta_bep);
        assert_eq!(efficiency_at(&p, 10_000.0, 1.0, &ack).unwrap(), 0.0);
    }

    #[test]
    fn ackeret_identity_parameters() {
        for speed in [0.1, 0.5, 0.8, 1.0] {
            assert_eq!(AckeretConfig::IDENTITY.peak_efficiency(0.8, speed), 0.8);
            assert_relative_eq!(AckeretConfig::default().peak_efficiency(0.8, 1.0), 0.8, epsilon = 1e-15);
        }
    }

    #[test]
    fn scale_curve_examples() {
        let p = test_pump();
        assert_eq!(scale_curve(&p, 1.0).unwrap(), p);
        let half = scale_curve(&p, 0.5).unwrap();
        assert_eq!(half.h0, 15.0);
        assert_eq!(half.q_bep, 100.0);
        assert!(scale_curve(&p, 0.0).is_err());
        // Every rated point moves along its own affinity parabola.
        for i in 1..50 {
            let q1 = i as f64 * 5.0;
            let h1 = pump_head(&p, q1, 1.0).unwrap();
            let qx = 0.5 * q1;
            let hx = half.h0 - half.c * qx * qx;
            assert_relative_eq!(hx, h1 / (q1 * q1) * qx * qx, epsilon = 1e-10);
        }
    }

    #[test]
    fn tank_update_examples() {
        let cfg = TankConfig::default();
        let tank = TankState::from_level(52.0, &cfg).unwrap();
        let same = tank_update(&tank, 120.0, 120.0, 1.0, &cfg);
        assert_eq!(same.state.level(&cfg), 52.0);
        let up = tank_update(&tank, 280.0, 120.0, 1.0, &cfg);
        assert_relative_eq!(up.state.level(&cfg) - 52.0, 160.0 / 60.0 / 1600.0, epsilon = 1e-12);
        let near_full = TankState::from_level(56.9999, &cfg).unwrap();
        let over = tank_update(&near_full, 1e6, 0.0, 1.0, &cfg);
        assert_eq!(over.state.level(&cfg), 57.0);
        assert!(over.overflow && !over.empty);
        let drained = tank_update(&TankState::from_level(47.0001, &cfg).unwrap(), 0.0, 1e6, 1.0, &cfg);
        assert_eq!(drained.state.level(&cfg), 47.0);
        assert!(drained.empty);
    }

    #[test]
    fn from_level_rejects_out_of_range() {
        let cfg = TankConfig::default();
        assert!(TankState::from_level(46.9, &cfg).is_err());
        assert!(TankState::from_level(57.1, &cfg).is_err());
    }

    #[test]
    fn default_plant_is_valid_and_ordered() {
        let cfg = HydraulicsConfig::default();
        cfg.validate().unwrap();
        for w in cfg.pumps.windows(2) {
            assert!(w[0].q_bep > w[1].q_bep);
        }
        // Each pump alone lifts against a full tank at heavy demand.
        for level in [47.0, 52.0, 57.0] {
            let mut last_q = f64::INFINITY;
            for id in PumpId::ALL {
                let op = cfg.pump_operating_point(id, level, 400.0, 1.0).unwrap();
                assert!(!op.dead_headed, "{id} dead-headed at {level}");
                assert!(op.q < last_q);
                assert!(op.p_electric > 20.0 && op.p_electric < 100.0, "{id}: {} kW", op.p_electric);
                last_q = op.q;
            }
        }
    }

    #[test]
    fn calibration_recovers_synthetic_pump() {
        let truth = HydraulicsConfig::default().pumps[1];
        let sys_cfg = SystemCurveConfig::default();
        let mut samples = Vec::new();
        for level in [47.0, 49.0, 51.0, 53.0, 55.0, 57.0] {
            for demand in [0.0, 150.0, 300.0, 600.0, 1500.0] {
                let sys = system_curve(level, demand, &sys_cfg).unwrap();
                let op = operating_point(&truth, &sys, 1.0, &AckeretConfig::default(), WATER_DENSITY).unwrap();
                samples.push(PerformanceSample { q: op.q, kw: op.p_electric, head: op.head });
            }
        }
        let fit = calibrate_pump(PumpId::NP2, &samples, WATER_DENSITY).unwrap();
        assert_relative_eq!(fit.h0, truth.h0, max_relative = 1e-6);
        assert_relative_eq!(fit.c, truth.c, max_relative = 1e-6);
        assert_relative_eq!(fit.q_bep, truth.q_bep, max_relative = 1e-4);
        assert_relative_eq!(fit.eta_bep, truth.eta_bep, max_relative = 1e-6);
    }

    #[test]
    fn calibration_needs_samples() {
        let err = calibrate_pump(PumpId::NP1, &[], WATER_DENSITY).unwrap_err();
        assert!(matches!(err, HydraulicsError::NotEnoughSamples { .. }));
    }

    proptest! {
        #[test]
        fn slope_strictly_decreasing_in_demand(d1 in 0.0f64..2000.0, gap in 1e-3f64..500.0, level in 47.0f64..57.0) {
            let cfg = SystemCurveConfig::default();
            let a = system_curve(level, d1, &cfg).unwrap();
            let b = system_curve(level, d1 + gap, &cfg).unwrap();
            prop_assert!(a.slope > b.slope);
        }

        #[test]
        fn electrical_power_monotone_in_head(q in 1.0f64..500.0, h1 in 0.0f64..80.0, dh in 0.0f64..20.0, eta in 0.05f64..1.0) {
            let p1 = electrical_power(hydraulic_power(q, h1, WATER_DENSITY), q, eta).unwrap();
            let p2 = electrical_power(hydraulic_power(q, h1 + dh, WATER_DENSITY), q, eta).unwrap();
            prop_assert!(p2 >= p1);
        }

        #[test]
        fn operating_point_deterministic(level in 47.0f64..57.0, demand in 0.0f64..600.0, speed in 0.7f64..=1.0) {
            let cfg = HydraulicsConfig::default();
            let a = cfg.pump_operating_point(PumpId::NP3, level, demand, speed).unwrap();
            let b = cfg.pump_operating_point(PumpId::NP3, level, demand, speed).unwrap();
            prop_assert_eq!(a.q.to_bits(), b.q.to_bits());
            prop_assert_eq!(a.p_electric.to_bits(), b.p_electric.to_bits());
        }
    }
}
