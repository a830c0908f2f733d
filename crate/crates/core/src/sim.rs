//! Fixed-step closed-loop execution.
//!
//! Each control period: read the CGM, run the filter, ask the controller for
//! an infusion rate, clamp it to the pump range and hold it while the plant
//! is integrated with RK4 substeps. The meal signal reaches the plant only.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, EkfConfig, EkfState, Mat3, Vec3};
use crate::gstc::GstcDiagnostics;
use crate::integrator::rk4_step;
use crate::patient::{derivatives, meal_rate, MealProtocol, PatientParams, PlantState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Total simulated time (min).
    pub duration: f64,
    /// Control and estimation period (min).
    pub ts_control: f64,
    /// RK4 substep (min).
    pub dt_plant: f64,
    /// CGM noise standard deviation (mg/dL).
    pub cgm_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 72.0 * 60.0,
            ts_control: 1.0,
            dt_plant: 0.1,
            cgm_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let k = r.round();
    ((r - k).abs() < 1e-9 * k.max(1.0) && k >= 1.0).then_some(k as usize)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ts_control > 0.0 && self.dt_plant > 0.0 && self.duration > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sim requires positive duration, ts_control and dt_plant: {self:?}"
            )));
        }
        if integer_ratio(self.ts_control, self.dt_plant).is_none() {
            return Err(Error::InvalidConfig(format!(
                "sim.dt_plant ({}) must divide sim.ts_control ({}) exactly",
                self.dt_plant, self.ts_control
            )));
        }
        if integer_ratio(self.duration, self.ts_control).is_none() {
            return Err(Error::InvalidConfig(format!(
                "sim.duration ({}) must be a multiple of sim.ts_control ({})",
                self.duration, self.ts_control
            )));
        }
        if !(self.cgm_noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(
                "sim.cgm_noise_sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn control_steps(&self) -> usize {
        integer_ratio(self.duration, self.ts_control).unwrap_or(0)
    }

    pub fn substeps(&self) -> usize {
        integer_ratio(self.ts_control, self.dt_plant).unwrap_or(1)
    }
}

/// Advances the plant over one control period with `u` held and the meal
/// signal evaluated at every RK stage. Remote action is clamped at zero after
/// each substep.
pub fn integrate_step(
    state: PlantState,
    params: &PatientParams,
    u: f64,
    protocol: &MealProtocol,
    t0: f64,
    ts_control: f64,
    dt_plant: f64,
) -> Result<PlantState> {
    let substeps = integer_ratio(ts_control, dt_plant).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "dt_plant {dt_plant} does not divide ts_control {ts_control}"
        ))
    })?;
    let mut rhs = |t: f64, s: PlantState| derivatives(s, params, u, meal_rate(protocol, t));
    let mut y = state;
    for k in 0..substeps {
        let t = t0 + k as f64 * dt_plant;
        y = rk4_step(&mut rhs, t, y, dt_plant);
        y.x = y.x.max(0.0);
        if !y.is_finite() {
            return Err(Error::NonFiniteState {
                t: t + dt_plant,
                state: y.to_array(),
            });
        }
    }
    Ok(y)
}

/// Absolute CGM reading for glucose deviation `g`.
pub fn cgm_sample<R: rand::Rng + ?Sized>(g: f64, g_b: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma > 0");
        g + g_b + noise.sample(rng)
    } else {
        g + g_b
    }
}

/// What a controller is allowed to see.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub step: usize,
    /// Minutes since the start of the run.
    pub t: f64,
    /// `(g_hat, x_hat, i_hat)`, deviations from the nominal basal point.
    pub estimate: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlAction {
    pub u: f64,
    pub diagnostics: Option<GstcDiagnostics>,
}

impl ControlAction {
    pub fn plain(u: f64) -> Self {
        Self {
            u,
            diagnostics: None,
        }
    }
}

/// Step interface shared by every controller the engine can drive.
pub trait Controller {
    fn name(&self) -> &str;
    /// Upper end of the admissible infusion range (mU/min).
    fn pump_limit(&self) -> f64;
    fn step(&mut self, obs: &Observation) -> Result<ControlAction>;
}

/// Filter configuration plus run-level options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorSetup {
    pub ekf: EkfConfig,
    /// Initial covariance.
    pub sigma0: Mat3,
    /// Project `x_hat` onto `x >= 0` after each update, mirroring the plant.
    pub project_nonnegative_x: bool,
}

impl EstimatorSetup {
    pub fn new(ekf: EkfConfig) -> Self {
        Self {
            sigma0: ekf.q,
            ekf,
            project_nonnegative_x: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t_min: f64,
    pub g_true: f64,
    pub g_abs: f64,
    pub z_cgm: f64,
    pub g_hat: f64,
    pub x_true: f64,
    pub x_hat: f64,
    pub i_true: f64,
    pub i_hat: f64,
    pub x_ref: f64,
    pub i_ref: f64,
    pub rho_x: f64,
    pub rho_i: f64,
    pub e_g: f64,
    pub e_x: f64,
    pub e_i: f64,
    pub u: f64,
    pub d: f64,
    #[serde(default = "nan", skip_serializing)]
    pub sigma_11: f64,
    #[serde(default = "nan", skip_serializing)]
    pub sigma_22: f64,
    #[serde(default = "nan", skip_serializing)]
    pub sigma_33: f64,
}

fn nan() -> f64 {
    f64::NAN
}

/// Column order of the exported trace.
pub const TRACE_COLUMNS: [&str; 18] = [
    "t_min", "g_true", "g_abs", "z_cgm", "g_hat", "x_true", "x_hat", "i_true", "i_hat", "x_ref",
    "i_ref", "rho_x", "rho_i", "e_g", "e_x", "e_i", "u", "d",
];
pub const COVARIANCE_COLUMNS: [&str; 3] = ["sigma_11", "sigma_22", "sigma_33"];

#[derive(Clone, Debug, Default)]
pub struct SimTrace {
    pub controller: String,
    /// True basal glucose of the simulated patient.
    pub g_b: f64,
    pub ts_control: f64,
    pub rows: Vec<TraceRow>,
    /// Wall-clock time spent inside `Controller::step`.
    pub controller_time: Duration,
}

impl SimTrace {
    pub fn mean_step_time_ms(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.controller_time.as_secs_f64() * 1e3 / self.rows.len() as f64
    }

    pub fn max_u(&self) -> f64 {
        self.rows.iter().map(|r| r.u).fold(0.0, f64::max)
    }

    /// CSV with the fixed column set, optionally followed by the covariance
    /// diagonal.
    pub fn write_csv<W: Write>(&self, out: W, with_covariance: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = TRACE_COLUMNS.to_vec();
        if with_covariance {
            header.extend(COVARIANCE_COLUMNS);
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut fields = vec![
                r.t_min, r.g_true, r.g_abs, r.z_cgm, r.g_hat, r.x_true, r.x_hat, r.i_true, r.i_hat,
                r.x_ref, r.i_ref, r.rho_x, r.rho_i, r.e_g, r.e_x, r.e_i, r.u, r.d,
            ];
            if with_covariance {
                fields.extend([r.sigma_11, r.sigma_22, r.sigma_33]);
            }
            // `{}` on f64 prints the shortest string that round-trips exactly
            w.write_record(fields.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let expected: Vec<&str> = TRACE_COLUMNS.to_vec();
        if headers.iter().take(TRACE_COLUMNS.len()).collect::<Vec<_>>() != expected {
            return Err(Error::InvalidConfig(format!(
                "unexpected trace header: {headers:?}"
            )));
        }
        rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
    }
}

/// Runs one closed loop. The plant starts at `initial`, the filter at the
/// nominal basal point.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop(
    patient: &PatientParams,
    initial: PlantState,
    controller: &mut dyn Controller,
    protocol: &MealProtocol,
    sim: &SimConfig,
    estimator: &EstimatorSetup,
) -> Result<SimTrace> {
    sim.validate()?;
    patient.validate()?;
    protocol.validate()?;
    estimator.ekf.validate()?;
    if (estimator.ekf.ts - sim.ts_control).abs() > 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "estimator period {} differs from the control period {}",
            estimator.ekf.ts, sim.ts_control
        )));
    }
    let u_bar = controller.pump_limit();
    if !(u_bar >= 0.0 && u_bar.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "pump limit must be >= 0, got {u_bar}"
        )));
    }

    let steps = sim.control_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut plant = initial;
    let mut filter = EkfState::new(Vec3::zeros(), estimator.sigma0);
    let mut u_prev = 0.0;
    let mut rows = Vec::with_capacity(steps);
    let mut controller_time = Duration::ZERO;

    for k in 0..steps {
        let t = k as f64 * sim.ts_control;
        let z = cgm_sample(plant.g, patient.g_b, sim.cgm_noise_sigma, &mut rng);
        if k > 0 {
            filter = estimator::predict(&filter, u_prev, &estimator.ekf);
        }
        filter = estimator::update(&filter, z, &estimator.ekf)?;
        if estimator.project_nonnegative_x {
            filter.x_hat[1] = filter.x_hat[1].max(0.0);
        }

        let obs = Observation {
            step: k,
            t,
            estimate: filter.estimate(),
        };
        let started = Instant::now();
        let action = controller.step(&obs)?;
        controller_time += started.elapsed();
        if !action.u.is_finite() {
            return Err(Error::NonFiniteControl {
                step: k,
                u: action.u,
            });
        }
        let u = action.u.clamp(0.0, u_bar);
        let diag = action.diagnostics.unwrap_or(GstcDiagnostics {
            e_g: f64::NAN,
            e_x: f64::NAN,
            e_i: f64::NAN,
            x_ref: f64::NAN,
            i_ref: f64::NAN,
            rho_x: f64::NAN,
            rho_i: f64::NAN,
        });

        rows.push(TraceRow {
            t_min: t,
            g_true: plant.g,
            g_abs: plant.g + patient.g_b,
            z_cgm: z,
            g_hat: filter.x_hat[0],
            x_true: plant.x,
            x_hat: filter.x_hat[1],
            i_true: plant.i,
            i_hat: filter.x_hat[2],
            x_ref: diag.x_ref,
            i_ref: diag.i_ref,
            rho_x: diag.rho_x,
            rho_i: diag.rho_i,
            e_g: diag.e_g,
            e_x: diag.e_x,
            e_i: diag.e_i,
            u,
            d: meal_rate(protocol, t),
            sigma_11: filter.sigma[(0, 0)],
            sigma_22: filter.sigma[(1, 1)],
            sigma_33: filter.sigma[(2, 2)],
        });

        plant = integrate_step(plant, patient, u, protocol, t, sim.ts_control, sim.dt_plant)?;
        u_prev = u;
    }

    Ok(SimTrace {
        controller: controller.name().to_string(),
        g_b: patient.g_b,
        ts_control: sim.ts_control,
        rows,
        controller_time,
    })
}

/// Outcome of checking a trace against the safety tube and both funnels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvarianceCheck {
    pub steps: usize,
    pub glucose_violations: usize,
    pub funnel_x_violations: usize,
    pub funnel_i_violations: usize,
    pub input_violations: usize,
    /// `max |e_x|` and `max |e_i|` over the run.
    pub max_abs_e_x: f64,
    pub max_abs_e_i: f64,
    pub min_g_abs: f64,
    pub max_g_abs: f64,
}

impl InvarianceCheck {
    pub fn glucose_safe(&self) -> bool {
        self.glucose_violations == 0 && self.input_violations == 0
    }

    pub fn holds(&self) -> bool {
        self.glucose_safe() && self.funnel_x_violations == 0 && self.funnel_i_violations == 0
    }
}

/// Counts rows where absolute glucose leaves `[g_low_abs, g_high_abs]`, a
/// normalized tracking error leaves `(-1, 1)`, or `u` leaves `[0, u_bar]`.
/// Funnel columns are skipped for controllers that do not report them.
pub fn check_invariance(
    trace: &SimTrace,
    g_low_abs: f64,
    g_high_abs: f64,
    u_bar: f64,
) -> InvarianceCheck {
    let mut c = InvarianceCheck {
        steps: trace.rows.len(),
        min_g_abs: f64::INFINITY,
        max_g_abs: f64::NEG_INFINITY,
        ..Default::default()
    };
    for r in &trace.rows {
        if !(g_low_abs..=g_high_abs).contains(&r.g_abs) {
            c.glucose_violations += 1;
        }
        if !(0.0..=u_bar).contains(&r.u) {
            c.input_violations += 1;
        }
        if !r.e_x.is_nan() {
            // |x_ref - x_hat| < rho_x, checked on the unnormalized error
            if (r.x_ref - r.x_hat).abs() >= r.rho_x {
                c.funnel_x_violations += 1;
            }
            c.max_abs_e_x = c.max_abs_e_x.max(r.e_x.abs());
        }
        if !r.e_i.is_nan() {
            if (r.i_ref - r.i_hat).abs() >= r.rho_i {
                c.funnel_i_violations += 1;
            }
            c.max_abs_e_i = c.max_abs_e_i.max(r.e_i.abs());
        }
        c.min_g_abs = c.min_g_abs.min(r.g_abs);
        c.max_g_abs = c.max_g_abs.max(r.g_abs);
    }
    c
}
