//! Extended Kalman filter over the Euler-discretized Bergman model, and the
//! certified uncertainty radii derived from its stationary covariance.
//!
//! The filter always runs on nominal parameters and never sees the meal
//! signal; mismatch with the true plant is left for the controller to absorb.

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patient::{ParamBounds, PatientParams};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

const H: RowVector3<f64> = RowVector3::new(1.0, 0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EkfState {
    /// `(g_hat, x_hat, i_hat)`.
    pub x_hat: Vec3,
    pub sigma: Mat3,
}

impl EkfState {
    pub fn new(x_hat: Vec3, sigma: Mat3) -> Self {
        Self { x_hat, sigma }
    }

    pub fn estimate(&self) -> [f64; 3] {
        [self.x_hat[0], self.x_hat[1], self.x_hat[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EkfConfig {
    pub q: Mat3,
    /// Measurement noise variance, (mg/dL)^2.
    pub r: f64,
    /// Sampling period (min).
    pub ts: f64,
    pub nominal: PatientParams,
}

/// Default diagonal process noise.
pub const DEFAULT_Q_DIAG: [f64; 3] = [1.0, 1e-8, 0.1];
/// Measurement variance used when the CGM is noise-free.
pub const NOISE_FREE_R: f64 = 1.0;

impl EkfConfig {
    pub fn new(nominal: PatientParams, ts: f64, cgm_sigma: f64) -> Self {
        Self {
            q: Mat3::from_diagonal(&Vec3::from(DEFAULT_Q_DIAG)),
            r: default_measurement_variance(cgm_sigma),
            ts,
            nominal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "estimator.r must be > 0, got {}",
                self.r
            )));
        }
        if !(self.ts > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "estimator ts must be > 0, got {}",
                self.ts
            )));
        }
        if !is_psd(&self.q, 1e-12) {
            return Err(Error::InvalidConfig(
                "estimator.q must be symmetric PSD".into(),
            ));
        }
        self.nominal.validate()
    }
}

/// `sigma^2`, or [`NOISE_FREE_R`] for a noise-free sensor.
pub fn default_measurement_variance(cgm_sigma: f64) -> f64 {
    if cgm_sigma > 0.0 {
        cgm_sigma * cgm_sigma
    } else {
        NOISE_FREE_R
    }
}

/// Euler-discretized Bergman map with nominal parameters and no meal term.
pub fn predict_mean(x_hat: &Vec3, u: f64, p: &PatientParams, ts: f64) -> Vec3 {
    let (g, x, i) = (x_hat[0], x_hat[1], x_hat[2]);
    Vec3::new(
        g + ts * (-p.s_g * g - x * (g + p.g_b)),
        x + ts * (p.p3 * i - p.p2 * x),
        i + ts * (-p.n * (i + p.i_b) + u / p.v),
    )
}

/// Jacobian of [`predict_mean`] at `x_hat`.
pub fn jacobian(x_hat: &Vec3, p: &PatientParams, ts: f64) -> Mat3 {
    let (g, x) = (x_hat[0], x_hat[1]);
    Mat3::new(
        1.0 - ts * (p.s_g + x),
        -ts * (g + p.g_b),
        0.0,
        0.0,
        1.0 - ts * p.p2,
        ts * p.p3,
        0.0,
        0.0,
        1.0 - ts * p.n,
    )
}

/// A-priori step.
pub fn predict(state: &EkfState, u: f64, config: &EkfConfig) -> EkfState {
    let f = jacobian(&state.x_hat, &config.nominal, config.ts);
    EkfState {
        x_hat: predict_mean(&state.x_hat, u, &config.nominal, config.ts),
        sigma: f * state.sigma * f.transpose() + config.q,
    }
}

/// Joseph-form covariance update for an arbitrary gain.
pub fn joseph_update(sigma: &Mat3, gain: &Vec3, r: f64) -> Mat3 {
    let a = Mat3::identity() - gain * H;
    a * sigma * a.transpose() + gain * gain.transpose() * r
}

/// A-posteriori step on the absolute CGM reading `z` (mg/dL).
pub fn update(state: &EkfState, z: f64, config: &EkfConfig) -> Result<EkfState> {
    let s = state.sigma[(0, 0)] + config.r;
    if !(s > 0.0) {
        return Err(Error::CovarianceCorrupted(s));
    }
    let innovation = (z - config.nominal.g_b) - state.x_hat[0];
    let gain: Vec3 = state.sigma.column(0) / s;
    Ok(EkfState {
        x_hat: state.x_hat + gain * innovation,
        sigma: joseph_update(&state.sigma, &gain, config.r),
    })
}

/// Symmetric and PSD up to `tol` on the eigenvalues, scaled by the matrix norm.
pub fn is_psd(m: &Mat3, tol: f64) -> bool {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigenvalues()
        .iter()
        .all(|&l| l >= -tol * scale)
}

/// Position radii and their worst-case rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBounds {
    pub delta_g: f64,
    pub delta_x: f64,
    pub delta_i: f64,
    pub ddelta_g: f64,
    pub ddelta_x: f64,
    pub ddelta_i: f64,
}

/// Stationarity test for the covariance recursion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Convergence {
    pub tol: f64,
    pub consecutive: usize,
    pub max_steps: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            consecutive: 100,
            max_steps: 200_000,
        }
    }
}

/// Runs the covariance recursion linearized at the basal operating point
/// until `max |sigma_k - sigma_{k-1}| < tol` holds for `consecutive` steps.
/// Returns the a-posteriori stationary covariance.
pub fn converge_covariance(
    config: &EkfConfig,
    initial: &Mat3,
    criterion: &Convergence,
) -> Result<Mat3> {
    let mut state = EkfState::new(Vec3::zeros(), *initial);
    let basal_u = config.nominal.basal_infusion();
    let mut quiet = 0;
    let mut change = f64::INFINITY;
    for _ in 0..criterion.max_steps {
        let mut next = predict(&state, basal_u, config);
        next = update(&next, config.nominal.g_b, config)?;
        // the mean stays at the origin; only the covariance moves
        next.x_hat = Vec3::zeros();
        change = (next.sigma - state.sigma).amax();
        state = next;
        if change < criterion.tol {
            quiet += 1;
            if quiet >= criterion.consecutive {
                return Ok(state.sigma);
            }
        } else {
            quiet = 0;
        }
    }
    let s = state.sigma;
    Err(Error::NotConverged {
        steps: criterion.max_steps,
        last_change: change,
        last_sigma: [
            [s[(0, 0)], s[(0, 1)], s[(0, 2)]],
            [s[(1, 0)], s[(1, 1)], s[(1, 2)]],
            [s[(2, 0)], s[(2, 1)], s[(2, 2)]],
        ],
    })
}

/// Three-sigma radii from a stationary covariance: `(delta_g, delta_x, delta_i)`.
pub fn stationary_bounds(converged_sigma: &Mat3) -> (f64, f64, f64) {
    let r = |k: usize| 3.0 * converged_sigma[(k, k)].max(0.0).sqrt();
    (r(0), r(1), r(2))
}

/// Worst-case growth rates of the estimation radii. Returns
/// `(ddelta_i, ddelta_x, ddelta_g)`.
///
/// `x_upper` bounds remote insulin action; `g_upper` is the largest glucose
/// deviation of interest.
pub fn derivative_bounds(
    bounds: &ParamBounds,
    deltas: (f64, f64, f64),
    d_bar: f64,
    x_upper: f64,
    g_upper: f64,
    g_b: f64,
) -> (f64, f64, f64) {
    let (delta_g, delta_x, delta_i) = deltas;
    let ddelta_i = bounds.n.upper * delta_i;
    let ddelta_x = bounds.p3.upper * delta_i + bounds.p2.upper * delta_x;
    let ddelta_g = (bounds.s_g.upper + x_upper) * delta_g + (g_upper + g_b) * delta_x + d_bar;
    (ddelta_i, ddelta_x, ddelta_g)
}

/// Assembles the six uncertainty constants.
pub fn uncertainty_bounds(
    converged_sigma: &Mat3,
    bounds: &ParamBounds,
    d_bar: f64,
    x_upper: impl FnOnce(f64) -> f64,
    g_upper: f64,
    g_b: f64,
) -> UncertaintyBounds {
    let deltas = stationary_bounds(converged_sigma);
    let x_bar = x_upper(deltas.1);
    let (ddelta_i, ddelta_x, ddelta_g) =
        derivative_bounds(bounds, deltas, d_bar, x_bar, g_upper, g_b);
    UncertaintyBounds {
        delta_g: deltas.0,
        delta_x: deltas.1,
        delta_i: deltas.2,
        ddelta_g,
        ddelta_x,
        ddelta_i,
    }
}
