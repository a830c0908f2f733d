//! Scenario files: loading, dotted-key overrides and controller construction.
//!
//! A scenario is a JSON object. Every top-level key is optional:
//!
//! ```json
//! {
//!   "patient":    { "s_g": 0.028, "p2": 0.025, "p3": 1.3e-5, "n": 0.0926, "v": 12, "g_b": 80, "i_b": 7 },
//!   "nominal":    { "...": "model the estimator and controllers believe in, same fields as patient" },
//!   "bounds":     { "frac": 0.3 },
//!   "protocol":   { "events": [{ "start_time": 480, "carbs": 50 }], "absorption": { "a_g": 0.8, "tau": 40, "dist_vol": 112 } },
//!   "controller": { "kind": "gstc", "u_bar": 144, "gstc": {}, "pid_cbf": {}, "smc": {}, "lmpc": {} },
//!   "estimator":  { "q_diag": [1.0, 1e-8, 0.1], "r": null, "project_nonnegative_x": true },
//!   "sim":        { "duration": 4320, "ts_control": 1, "dt_plant": 0.1, "cgm_noise_sigma": 0, "seed": 0 },
//!   "scenario":   { "kind": "nominal", "n_runs": 1, "seed": 0, "perturbations": {} },
//!   "synthesis":  { "grid": {} }
//! }
//! ```
//!
//! `controller.u_bar`, when present, replaces the pump limit of every controller.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{
    LmpcConfig, LmpcController, PidCbfConfig, PidCbfController, SmcConfig, SmcController,
};
use crate::error::{Error, Result};
use crate::estimator::{
    converge_covariance, default_measurement_variance, stationary_bounds, Convergence, EkfConfig,
    DEFAULT_Q_DIAG,
};
use crate::feasibility::{DesignContext, GridSpec, SynthesisProblem};
use crate::gstc::{GstcConfig, GstcController};
use crate::metrics::Thresholds;
use crate::patient::{nominal_params, ParamBounds, PatientParams, PlantState};
use crate::scenarios::{jittered_disturbance_bound, three_day_protocol, ScenarioSpec};
use crate::sim::{run_closed_loop, Controller, EstimatorSetup, SimConfig, SimTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Gstc,
    PidCbf,
    Smc,
    Lmpc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::Gstc,
        ControllerKind::PidCbf,
        ControllerKind::Smc,
        ControllerKind::Lmpc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Gstc => "gstc",
            ControllerKind::PidCbf => "pid_cbf",
            ControllerKind::Smc => "smc",
            ControllerKind::Lmpc => "lmpc",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<&str> = ControllerKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidConfig(format!(
                    "unknown controller '{s}'; known: {}",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_bar: Option<f64>,
    pub gstc: GstcConfig,
    pub pid_cbf: PidCbfConfig,
    pub smc: SmcConfig,
    pub lmpc: LmpcConfig,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Gstc,
            u_bar: None,
            gstc: GstcConfig::default(),
            pid_cbf: PidCbfConfig::default(),
            smc: SmcConfig::default(),
            lmpc: LmpcConfig::default(),
        }
    }
}

impl ControllerSpec {
    /// Copy with the shared pump limit pushed into every sub-config.
    pub fn resolved(&self) -> ControllerSpec {
        let mut c = *self;
        if let Some(u) = self.u_bar {
            c.gstc.u_bar = u;
            c.pid_cbf.u_bar = u;
            c.smc.u_bar = u;
            c.lmpc.u_bar = u;
        }
        c
    }

    pub fn build(
        &self,
        kind: ControllerKind,
        nominal: &PatientParams,
        ts: f64,
    ) -> Result<Box<dyn Controller + Send>> {
        let c = self.resolved();
        Ok(match kind {
            ControllerKind::Gstc => Box::new(GstcController::new(c.gstc)?),
            ControllerKind::PidCbf => Box::new(PidCbfController::new(c.pid_cbf, *nominal, ts)?),
            ControllerKind::Smc => Box::new(SmcController::new(c.smc, *nominal, ts)?),
            ControllerKind::Lmpc => Box::new(LmpcController::new(c.lmpc, *nominal, ts)?),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSpec {
    pub q_diag: [f64; 3],
    /// Measurement variance; derived from the CGM noise when absent.
    pub r: Option<f64>,
    pub project_nonnegative_x: bool,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            q_diag: DEFAULT_Q_DIAG,
            r: None,
            project_nonnegative_x: true,
        }
    }
}

impl EstimatorSpec {
    pub fn ekf(&self, nominal: &PatientParams, ts: f64, cgm_sigma: f64) -> EkfConfig {
        EkfConfig {
            q: Matrix3::from_diagonal(&self.q_diag.into()),
            r: self
                .r
                .unwrap_or_else(|| default_measurement_variance(cgm_sigma)),
            ts,
            nominal: *nominal,
        }
    }

    pub fn setup(&self, nominal: &PatientParams, ts: f64, cgm_sigma: f64) -> EstimatorSetup {
        EstimatorSetup {
            project_nonnegative_x: self.project_nonnegative_x,
            ..EstimatorSetup::new(self.ekf(nominal, ts, cgm_sigma))
        }
    }
}

/// Parameter box: relative half-width around the nominal model, or explicit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsSpec {
    pub frac: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explicit: Option<ParamBounds>,
}

impl Default for BoundsSpec {
    fn default() -> Self {
        Self {
            frac: 0.30,
            explicit: None,
        }
    }
}

impl BoundsSpec {
    pub fn resolve(&self, nominal: &PatientParams) -> ParamBounds {
        self.explicit
            .unwrap_or_else(|| ParamBounds::around(nominal, self.frac))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSpec {
    pub grid: GridSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    /// Plant simulated in single runs and the centre of Monte Carlo draws.
    pub patient: PatientParams,
    /// Model used by the estimator, the controllers and the feasibility check.
    pub nominal: PatientParams,
    pub bounds: BoundsSpec,
    pub protocol: crate::patient::MealProtocol,
    pub controller: ControllerSpec,
    pub estimator: EstimatorSpec,
    pub sim: SimConfig,
    pub scenario: ScenarioSpec,
    pub initial_state: PlantState,
    pub thresholds: Thresholds,
    pub synthesis: SynthesisSpec,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            patient: nominal_params(),
            nominal: nominal_params(),
            bounds: BoundsSpec::default(),
            protocol: three_day_protocol(),
            controller: ControllerSpec::default(),
            estimator: EstimatorSpec::default(),
            sim: SimConfig::default(),
            scenario: ScenarioSpec::default(),
            initial_state: PlantState::BASAL,
            thresholds: Thresholds::default(),
            synthesis: SynthesisSpec::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.patient.validate()?;
        self.nominal.validate()?;
        self.bounds.resolve(&self.nominal).validate()?;
        self.protocol.validate()?;
        self.sim.validate()?;
        self.scenario.validate()?;
        self.estimator
            .ekf(&self.nominal, self.sim.ts_control, self.sim.cgm_noise_sigma)
            .validate()?;
        let c = self.controller.resolved();
        match c.kind {
            ControllerKind::Gstc => c.gstc.validate(),
            ControllerKind::PidCbf => c.pid_cbf.validate(),
            ControllerKind::Smc => c.smc.validate(),
            ControllerKind::Lmpc => c.lmpc.validate(),
        }
    }

    /// Absolute glucose band the safety tube encloses.
    pub fn safety_band(&self) -> (f64, f64) {
        let g = self.controller.resolved().gstc;
        (self.nominal.g_b + g.g_lower, self.nominal.g_b + g.g_upper)
    }

    pub fn param_bounds(&self) -> ParamBounds {
        self.bounds.resolve(&self.nominal)
    }

    /// Disturbance bound covering every protocol the scenario can draw.
    pub fn disturbance_bound(&self) -> f64 {
        jittered_disturbance_bound(&self.protocol, &self.scenario.effective())
    }

    /// Stationary three-sigma radii `(delta_g, delta_x, delta_i)` of the
    /// scenario's filter.
    pub fn estimation_radii(&self) -> Result<(f64, f64, f64)> {
        let ekf = self
            .estimator
            .ekf(&self.nominal, self.sim.ts_control, self.sim.cgm_noise_sigma);
        let criterion = Convergence {
            max_steps: 10_000_000,
            ..Convergence::default()
        };
        Ok(stationary_bounds(&converge_covariance(
            &ekf, &ekf.q, &criterion,
        )?))
    }

    /// One closed-loop run of the scenario's own patient and protocol.
    pub fn simulate(&self, kind: ControllerKind) -> Result<SimTrace> {
        let mut controller = self
            .controller
            .build(kind, &self.nominal, self.sim.ts_control)?;
        let estimator =
            self.estimator
                .setup(&self.nominal, self.sim.ts_control, self.sim.cgm_noise_sigma);
        run_closed_loop(
            &self.patient,
            self.initial_state,
            controller.as_mut(),
            &self.protocol,
            &self.sim,
            &estimator,
        )
    }

    pub fn design_context(&self, deltas: (f64, f64, f64)) -> DesignContext {
        DesignContext {
            param_bounds: self.param_bounds(),
            d_bar: self.disturbance_bound(),
            deltas,
            i_b: self.nominal.i_b,
            v: self.nominal.v,
            g_b: self.nominal.g_b,
        }
    }

    pub fn synthesis_problem(&self, deltas: (f64, f64, f64)) -> SynthesisProblem {
        let g = self.controller.resolved().gstc;
        SynthesisProblem {
            context: self.design_context(deltas),
            g_lower: g.g_lower,
            g_upper: g.g_upper,
            u_bar: g.u_bar,
            transform: g.transform,
        }
    }

    /// Parses JSON text, applies overrides and validates.
    pub fn from_json_str(text: &str, overrides: &[(String, String)]) -> Result<Scenario> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Scenario {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let mut value = merge(serde_json::to_value(Scenario::default())?, value);
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let scenario: Scenario =
            serde_path_to_error::deserialize(value).map_err(|e| Error::Scenario {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, overrides)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Deep merge of `over` onto `base`. Objects merge key by key; anything
/// else in `over` replaces `base`.
fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Object(mut b), Value::Object(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, over) => over,
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(format!("override '{s}' is not of the form key=value"))
    })?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(Error::InvalidConfig(format!(
            "override key '{k}' is malformed"
        )));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Sets the dotted path `key` in `root`, creating objects as needed. The
/// value is read as JSON when it parses, as a string otherwise. Numeric
/// segments index into existing arrays.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| {
                    Error::InvalidConfig(format!(
                        "override '{key}': '{part}' is not an array index"
                    ))
                })?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "override '{key}': index {idx} out of range (len {len})"
                    ))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "override '{key}': '{part}' descends into a non-object value"
                )))
            }
        };
    }
    Ok(())
}
