//! Sliding-mode control on a first-order glucose surface with a boundary layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patient::PatientParams;
use crate::sim::{ControlAction, Controller, Observation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmcConfig {
    /// Surface slope (1/min).
    pub lambda: f64,
    /// Reaching gain, the saturated input (mU/min).
    pub eta: f64,
    /// Width of the linear saturation layer (mg/dL/min).
    pub boundary_layer: f64,
    /// Absolute glucose setpoint (mg/dL).
    pub target: f64,
    pub u_bar: f64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            eta: 25.0,
            boundary_layer: 2.0,
            target: 90.0,
            u_bar: 144.0,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.eta > 0.0 && self.boundary_layer > 0.0) {
            return Err(Error::InvalidConfig(
                "smc lambda, eta and boundary_layer must be > 0".into(),
            ));
        }
        if !(self.u_bar >= 0.0) || !self.target.is_finite() {
            return Err(Error::InvalidConfig(
                "smc needs u_bar >= 0 and a finite target".into(),
            ));
        }
        Ok(())
    }
}

fn sat(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// `g_est` and `target` absolute, `g_rate_est` in mg/dL/min.
pub fn smc_step(g_est: f64, g_rate_est: f64, target: f64, config: &SmcConfig) -> f64 {
    let s = g_rate_est + config.lambda * (g_est - target);
    (config.eta * sat(s / config.boundary_layer)).clamp(0.0, config.u_bar)
}

#[derive(Clone, Debug)]
pub struct SmcController {
    pub config: SmcConfig,
    pub nominal: PatientParams,
    pub dt: f64,
    prev_g: Option<f64>,
}

impl SmcController {
    pub fn new(config: SmcConfig, nominal: PatientParams, dt: f64) -> Result<Self> {
        config.validate()?;
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig("smc dt must be > 0".into()));
        }
        Ok(Self {
            config,
            nominal,
            dt,
            prev_g: None,
        })
    }
}

impl Controller for SmcController {
    fn name(&self) -> &str {
        "smc"
    }

    fn pump_limit(&self) -> f64 {
        self.config.u_bar
    }

    fn step(&mut self, obs: &Observation) -> Result<ControlAction> {
        let g = obs.estimate[0] + self.nominal.g_b;
        let rate = self.prev_g.map_or(0.0, |p| (g - p) / self.dt);
        self.prev_g = Some(g);
        Ok(ControlAction::plain(smc_step(
            g,
            rate,
            self.config.target,
            &self.config,
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let c = SmcConfig::default();
        assert_eq!(smc_step(c.target, 0.0, c.target, &c), 0.0);
        assert_eq!(smc_step(c.target, 1e3, c.target, &c), c.eta);
        let half = smc_step(c.target, c.boundary_layer / 2.0, c.target, &c);
        assert!((half - c.eta / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rate_is_backward_difference() {
        let mut ctl =
            SmcController::new(SmcConfig::default(), PatientParams::default(), 1.0).unwrap();
        let obs = |step: usize, g: f64| Observation {
            step,
            t: step as f64,
            estimate: [g, 0.0, 0.0],
        };
        let target_dev = ctl.config.target - ctl.nominal.g_b;
        assert_eq!(ctl.step(&obs(0, target_dev)).unwrap().u, 0.0);
        let u = ctl.step(&obs(1, target_dev + 1.0)).unwrap().u;
        let expect = ctl.config.eta * (1.0 + ctl.config.lambda) / ctl.config.boundary_layer;
        assert!((u - expect).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn output_in_range(g in -100.0..500.0f64, r in -50.0..50.0f64) {
            let c = SmcConfig::default();
            let u = smc_step(g, r, c.target, &c);
            prop_assert!((0.0..=c.u_bar).contains(&u));
        }
    }
}
