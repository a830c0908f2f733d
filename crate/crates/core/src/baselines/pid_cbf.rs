//! PID on glucose error with a predictive barrier clamp.

use serde::{Deserialize, Serialize};

use super::predicted_min_glucose;
use crate::error::{Error, Result};
use crate::patient::PatientParams;
use crate::sim::{ControlAction, Controller, Observation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidCbfConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the accumulated error integral (mg/dL min).
    pub integral_clamp: f64,
    /// Absolute glucose the predicted trajectory must stay above (mg/dL).
    pub cbf_floor: f64,
    /// Look-ahead of the barrier prediction (min).
    pub cbf_horizon: f64,
    /// Absolute glucose setpoint (mg/dL).
    pub target: f64,
    pub u_bar: f64,
}

impl Default for PidCbfConfig {
    fn default() -> Self {
        Self {
            kp: 0.2,
            ki: 0.002,
            kd: 1.0,
            integral_clamp: 5000.0,
            cbf_floor: 75.0,
            cbf_horizon: 30.0,
            target: 110.0,
            u_bar: 144.0,
        }
    }
}

impl PidCbfConfig {
    pub fn validate(&self) -> Result<()> {
        let gains = [self.kp, self.ki, self.kd, self.integral_clamp];
        if gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::InvalidConfig(
                "pid gains and integral clamp must be >= 0".into(),
            ));
        }
        if !(self.cbf_floor > 54.0) {
            return Err(Error::InvalidConfig(format!(
                "cbf_floor must exceed 54, got {}",
                self.cbf_floor
            )));
        }
        if !(self.cbf_horizon > 0.0) || !(self.u_bar >= 0.0) || !self.target.is_finite() {
            return Err(Error::InvalidConfig(
                "cbf_horizon > 0, u_bar >= 0 and finite target required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PidMemory {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidCbfOutput {
    pub u: f64,
    /// Unclamped PID law.
    pub u_pid: f64,
    pub barrier_active: bool,
}

/// Bisection iterations of the barrier clamp.
pub const CBF_BISECTIONS: usize = 20;

/// One PID step followed by the barrier clamp. `estimate` is the deviation
/// state; the barrier only ever scales the PID input down.
pub fn pid_cbf_step(
    estimate: [f64; 3],
    dt: f64,
    memory: &mut PidMemory,
    config: &PidCbfConfig,
    nominal: &PatientParams,
) -> PidCbfOutput {
    let e = estimate[0] + nominal.g_b - config.target;
    memory.integral =
        (memory.integral + e * dt).clamp(-config.integral_clamp, config.integral_clamp);
    let de = memory.prev_error.map_or(0.0, |p| (e - p) / dt);
    memory.prev_error = Some(e);
    let u_pid = config.kp * e + config.ki * memory.integral + config.kd * de;
    let candidate = u_pid.clamp(0.0, config.u_bar);

    let steps = (config.cbf_horizon / dt).ceil().max(1.0) as usize;
    let safe = |u: f64| predicted_min_glucose(estimate, u, nominal, dt, steps) >= config.cbf_floor;
    if candidate == 0.0 || safe(candidate) {
        return PidCbfOutput {
            u: candidate,
            u_pid,
            barrier_active: false,
        };
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..CBF_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if safe(mid * candidate) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    PidCbfOutput {
        u: lo * candidate,
        u_pid,
        barrier_active: true,
    }
}

#[derive(Clone, Debug)]
pub struct PidCbfController {
    pub config: PidCbfConfig,
    pub nominal: PatientParams,
    pub dt: f64,
    pub memory: PidMemory,
}

impl PidCbfController {
    pub fn new(config: PidCbfConfig, nominal: PatientParams, dt: f64) -> Result<Self> {
        config.validate()?;
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig("pid dt must be > 0".into()));
        }
        Ok(Self {
            config,
            nominal,
            dt,
            memory: PidMemory::default(),
        })
    }
}

impl Controller for PidCbfController {
    fn name(&self) -> &str {
        "pid_cbf"
    }

    fn pump_limit(&self) -> f64 {
        self.config.u_bar
    }

    fn step(&mut self, obs: &Observation) -> Result<ControlAction> {
        let out = pid_cbf_step(
            obs.estimate,
            self.dt,
            &mut self.memory,
            &self.config,
            &self.nominal,
        );
        Ok(ControlAction::plain(out.u))
    }
}
