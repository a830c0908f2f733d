//! Glycemic safety tube controller.
//!
//! Three cascaded stages, each a bounded transformation of a normalized
//! error:
//!
//! 1. glucose error `e_g` on the safe band gives the remote-action
//!    reference `x_ref = kappa1 * psi(e_g)`;
//! 2. the remote-action tracking error, normalized by the funnel `rho_x(t)`,
//!    gives the plasma-insulin reference `i_ref = kappa2 * psi(e_x)`;
//! 3. the plasma-insulin tracking error, normalized by `rho_i(t)`, gives the
//!    pump command `u = u_bar * psi(e_i)`.
//!
//! The controller sees state estimates and wall time only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{ControlAction, Controller, Observation};

/// Shape of the bounded transformation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformFn {
    /// `3s^2 - 2s^3`
    #[default]
    SmoothstepCubic,
    /// `6s^5 - 15s^4 + 10s^3`
    SmoothstepQuintic,
}

impl TransformFn {
    pub fn eval(self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= 1.0 {
            return 1.0;
        }
        match self {
            TransformFn::SmoothstepCubic => s * s * (3.0 - 2.0 * s),
            TransformFn::SmoothstepQuintic => s * s * s * (s * (6.0 * s - 15.0) + 10.0),
        }
    }

    pub fn slope(self, s: f64) -> f64 {
        if s <= 0.0 || s >= 1.0 {
            return 0.0;
        }
        match self {
            TransformFn::SmoothstepCubic => 6.0 * s * (1.0 - s),
            TransformFn::SmoothstepQuintic => 30.0 * s * s * (1.0 - s) * (1.0 - s),
        }
    }

    /// Supremum of `|psi'|`, attained at `s = 0.5`.
    pub fn max_slope(self) -> f64 {
        match self {
            TransformFn::SmoothstepCubic => 1.5,
            TransformFn::SmoothstepQuintic => 1.875,
        }
    }
}

/// Default transformation (cubic smoothstep).
pub fn psi(s: f64) -> f64 {
    TransformFn::SmoothstepCubic.eval(s)
}

/// Exponentially shrinking tube `rho(t) = e^(-mu t) (p - q) + q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelSpec {
    pub p: f64,
    pub q: f64,
    pub mu: f64,
}

impl FunnelSpec {
    pub fn new(p: f64, q: f64, mu: f64) -> Self {
        Self { p, q, mu }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.q > 0.0 && self.q < self.p && self.mu > 0.0 && self.p.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "{name} requires 0 < q < p and mu > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn radius(&self, t: f64) -> f64 {
        funnel_radius(self, t).0
    }
}

/// Radius and its time derivative.
pub fn funnel_radius(spec: &FunnelSpec, t: f64) -> (f64, f64) {
    let decay = (-spec.mu * t).exp();
    let gap = spec.p - spec.q;
    (decay * gap + spec.q, -spec.mu * gap * decay)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GstcConfig {
    /// Lower glucose deviation bound (mg/dL, negative).
    pub g_lower: f64,
    /// Upper glucose deviation bound (mg/dL).
    pub g_upper: f64,
    /// Remote-action gain (1/min).
    pub kappa1: f64,
    /// Plasma-insulin gain (mU/L).
    pub kappa2: f64,
    /// Pump limit (mU/min).
    pub u_bar: f64,
    pub funnel_x: FunnelSpec,
    pub funnel_i: FunnelSpec,
    pub transform: TransformFn,
}

impl Default for GstcConfig {
    fn default() -> Self {
        Self {
            g_lower: -10.0,
            g_upper: 100.0,
            kappa1: 0.04,
            kappa2: 60.0,
            u_bar: 144.0,
            funnel_x: FunnelSpec::new(0.035, 0.005, 0.05),
            funnel_i: FunnelSpec::new(55.0, 5.0, 0.05),
            transform: TransformFn::SmoothstepCubic,
        }
    }
}

impl GstcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_lower < 0.0 && 0.0 < self.g_upper) {
            return Err(Error::InvalidConfig(format!(
                "gstc requires g_lower < 0 < g_upper, got [{}, {}]",
                self.g_lower, self.g_upper
            )));
        }
        self.funnel_x.validate("gstc.funnel_x")?;
        self.funnel_i.validate("gstc.funnel_i")?;
        if !(self.kappa1 > self.funnel_x.p) {
            return Err(Error::InvalidConfig(format!(
                "gstc requires kappa1 > funnel_x.p ({} <= {})",
                self.kappa1, self.funnel_x.p
            )));
        }
        if !(self.kappa2 > self.funnel_i.p) {
            return Err(Error::InvalidConfig(format!(
                "gstc requires kappa2 > funnel_i.p ({} <= {})",
                self.kappa2, self.funnel_i.p
            )));
        }
        if !(self.u_bar >= 0.0 && self.u_bar.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gstc.u_bar must be >= 0, got {}",
                self.u_bar
            )));
        }
        Ok(())
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.g_upper - self.g_lower)
    }
}

pub fn glucose_error(g_est: f64, g_lower: f64, g_upper: f64) -> f64 {
    (g_est - 0.5 * (g_upper + g_lower)) / (0.5 * (g_upper - g_lower))
}

pub fn stage1_x_ref(e_g: f64, kappa1: f64) -> f64 {
    kappa1 * psi(e_g)
}

/// Returns `(i_ref, e_x)`.
pub fn stage2_i_ref(
    x_ref: f64,
    x_hat: f64,
    funnel_x: &FunnelSpec,
    t: f64,
    kappa2: f64,
) -> (f64, f64) {
    let e_x = (x_ref - x_hat) / funnel_x.radius(t);
    (kappa2 * psi(e_x), e_x)
}

/// Returns `(u, e_i)`.
pub fn stage3_control(
    i_ref: f64,
    i_hat: f64,
    funnel_i: &FunnelSpec,
    t: f64,
    u_bar: f64,
) -> (f64, f64) {
    let e_i = (i_ref - i_hat) / funnel_i.radius(t);
    (u_bar * psi(e_i), e_i)
}

/// Internal signals of one controller evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GstcDiagnostics {
    pub e_g: f64,
    pub e_x: f64,
    pub e_i: f64,
    pub x_ref: f64,
    pub i_ref: f64,
    pub rho_x: f64,
    pub rho_i: f64,
}

/// One evaluation of the full cascade on estimates `(g, x, i)` at time `t`.
pub fn gstc_step(
    estimates: [f64; 3],
    t: f64,
    config: &GstcConfig,
) -> Result<(f64, GstcDiagnostics)> {
    if !estimates.iter().all(|v| v.is_finite()) || !t.is_finite() {
        return Err(Error::NonFiniteEstimate(estimates));
    }
    let [g_hat, x_hat, i_hat] = estimates;
    let psi = |s| config.transform.eval(s);

    let e_g = glucose_error(g_hat, config.g_lower, config.g_upper);
    let x_ref = config.kappa1 * psi(e_g);

    let rho_x = config.funnel_x.radius(t);
    let e_x = (x_ref - x_hat) / rho_x;
    let i_ref = config.kappa2 * psi(e_x);

    let rho_i = config.funnel_i.radius(t);
    let e_i = (i_ref - i_hat) / rho_i;
    let u = config.u_bar * psi(e_i);

    Ok((
        u,
        GstcDiagnostics {
            e_g,
            e_x,
            e_i,
            x_ref,
            i_ref,
            rho_x,
            rho_i,
        },
    ))
}

/// Adapter driving [`gstc_step`] from the closed-loop engine.
#[derive(Clone, Debug)]
pub struct GstcController {
    pub config: GstcConfig,
}

impl GstcController {
    pub fn new(config: GstcConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl Controller for GstcController {
    fn name(&self) -> &str {
        "gstc"
    }

    fn pump_limit(&self) -> f64 {
        self.config.u_bar
    }

    fn step(&mut self, obs: &Observation) -> Result<ControlAction> {
        let (u, diag) = gstc_step(obs.estimate, obs.t, &self.config)?;
        Ok(ControlAction {
            u,
            diagnostics: Some(diag),
        })
    }
}
