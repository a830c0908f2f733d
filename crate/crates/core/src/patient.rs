//! Bergman minimal-model plant, patient parameter sets and the meal disturbance.
//!
//! States are deviations: `g` from basal glucose, `i` from basal plasma
//! insulin. Remote insulin action `x` is absolute and non-negative.

use std::ops::{Add, Mul};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// True physiology of one (virtual) patient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatientParams {
    /// Glucose effectiveness (1/min).
    pub s_g: f64,
    /// Remote insulin rate constant (1/min).
    pub p2: f64,
    /// Insulin-glucose coupling ((mU/L)^-1 min^-2).
    pub p3: f64,
    /// Insulin clearance (1/min).
    pub n: f64,
    /// Insulin distribution volume (L).
    pub v: f64,
    /// Basal glucose (mg/dL).
    pub g_b: f64,
    /// Basal plasma insulin (mU/L).
    pub i_b: f64,
}

pub const DEFAULT_BASAL_GLUCOSE: f64 = 80.0;
pub const DEFAULT_BASAL_INSULIN: f64 = 7.0;

impl Default for PatientParams {
    fn default() -> Self {
        nominal_params()
    }
}

impl PatientParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("s_g", self.s_g),
            ("p2", self.p2),
            ("p3", self.p3),
            ("n", self.n),
            ("v", self.v),
            ("g_b", self.g_b),
            ("i_b", self.i_b),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "patient.{name} must be finite and > 0, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Infusion rate (mU/min) that holds plasma insulin at its basal value.
    pub fn basal_infusion(&self) -> f64 {
        self.n * self.i_b * self.v
    }

    /// Same physiology with the insulin-glucose coupling scaled.
    pub fn with_p3_scaled(mut self, factor: f64) -> Self {
        self.p3 *= factor;
        self
    }
}

/// Population-average Bergman parameters with the default basal pair.
pub fn nominal_params() -> PatientParams {
    nominal_params_with_basal(DEFAULT_BASAL_GLUCOSE, DEFAULT_BASAL_INSULIN)
}

pub fn nominal_params_with_basal(g_b: f64, i_b: f64) -> PatientParams {
    PatientParams {
        s_g: 0.028,
        p2: 0.025,
        p3: 1.3e-5,
        n: 5.0 / 54.0,
        v: 12.0,
        g_b,
        i_b,
    }
}

/// Closed interval used for parameter uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    /// `center * (1 ± frac)`.
    pub fn relative(center: f64, frac: f64) -> Self {
        Self::new(center * (1.0 - frac), center * (1.0 + frac))
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Known uncertainty box around the four physiological rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub s_g: Interval,
    pub p2: Interval,
    pub p3: Interval,
    pub n: Interval,
}

impl ParamBounds {
    /// Symmetric relative box `±frac` around `center`.
    pub fn around(center: &PatientParams, frac: f64) -> Self {
        Self {
            s_g: Interval::relative(center.s_g, frac),
            p2: Interval::relative(center.p2, frac),
            p3: Interval::relative(center.p3, frac),
            n: Interval::relative(center.n, frac),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, iv) in self.named() {
            if !(iv.lower > 0.0 && iv.lower <= iv.upper && iv.upper.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "bounds.{name} must satisfy 0 < lower <= upper, got [{}, {}]",
                    iv.lower, iv.upper
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &PatientParams) -> bool {
        self.s_g.contains(p.s_g)
            && self.p2.contains(p.p2)
            && self.p3.contains(p.p3)
            && self.n.contains(p.n)
    }

    fn named(&self) -> [(&'static str, Interval); 4] {
        [
            ("s_g", self.s_g),
            ("p2", self.p2),
            ("p3", self.p3),
            ("n", self.n),
        ]
    }
}

/// Plant state: glucose deviation (mg/dL), remote insulin action (1/min),
/// plasma insulin deviation (mU/L).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub g: f64,
    pub x: f64,
    pub i: f64,
}

impl PlantState {
    pub const BASAL: PlantState = PlantState {
        g: 0.0,
        x: 0.0,
        i: 0.0,
    };

    pub fn new(g: f64, x: f64, i: f64) -> Self {
        Self { g, x, i }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.g, self.x, self.i]
    }

    pub fn is_finite(&self) -> bool {
        self.g.is_finite() && self.x.is_finite() && self.i.is_finite()
    }
}

impl Add for PlantState {
    type Output = PlantState;
    fn add(self, rhs: PlantState) -> PlantState {
        PlantState::new(self.g + rhs.g, self.x + rhs.x, self.i + rhs.i)
    }
}

impl Mul<f64> for PlantState {
    type Output = PlantState;
    fn mul(self, k: f64) -> PlantState {
        PlantState::new(self.g * k, self.x * k, self.i * k)
    }
}

/// Bergman right-hand side for infusion `u` (mU/min) and meal appearance `d`
/// (mg/dL/min).
pub fn derivatives(state: PlantState, params: &PatientParams, u: f64, d: f64) -> PlantState {
    PlantState {
        g: -params.s_g * state.g - state.x * (state.g + params.g_b) + d,
        x: -params.p2 * state.x + params.p3 * state.i,
        i: -params.n * (state.i + params.i_b) + u / params.v,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MealEvent {
    /// Minutes from scenario start.
    pub start_time: f64,
    /// Carbohydrate content (g).
    pub carbs: f64,
}

/// Gut absorption constants for the rise-and-decay kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Absorption {
    /// Bioavailable fraction of ingested carbohydrate.
    pub a_g: f64,
    /// Time-to-peak constant (min).
    pub tau: f64,
    /// Glucose distribution volume (dL).
    pub dist_vol: f64,
}

impl Default for Absorption {
    fn default() -> Self {
        Self {
            a_g: 0.8,
            tau: 40.0,
            dist_vol: 112.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MealProtocol {
    pub events: Vec<MealEvent>,
    #[serde(default)]
    pub absorption: Absorption,
}

impl MealProtocol {
    pub fn new(mut events: Vec<MealEvent>, absorption: Absorption) -> Self {
        events.sort_by(|a, b| a.start_time.total_cmp(&b.start_time));
        Self { events, absorption }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.absorption;
        if !(a.a_g > 0.0 && a.a_g <= 1.0) || !(a.tau > 0.0) || !(a.dist_vol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "absorption requires 0 < a_g <= 1, tau > 0, dist_vol > 0; got {a:?}"
            )));
        }
        for (k, ev) in self.events.iter().enumerate() {
            if !(ev.start_time >= 0.0) || !(ev.carbs > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "meal {k}: start_time must be >= 0 and carbs > 0, got {ev:?}"
                )));
            }
        }
        if self
            .events
            .windows(2)
            .any(|w| w[1].start_time < w[0].start_time)
        {
            return Err(Error::InvalidConfig(
                "meal events must be sorted by start_time".into(),
            ));
        }
        Ok(())
    }

    pub fn total_carbs(&self) -> f64 {
        self.events.iter().map(|e| e.carbs).sum()
    }

    /// Total glucose excursion area (mg/dL) delivered by one event.
    pub fn event_area(&self, event: &MealEvent) -> f64 {
        1000.0 * event.carbs * self.absorption.a_g / self.absorption.dist_vol
    }

    /// Analytic peak of a single event's appearance rate, reached `tau`
    /// minutes after the start.
    pub fn event_peak(&self, event: &MealEvent) -> f64 {
        self.event_area(event) / (self.absorption.tau * std::f64::consts::E)
    }
}

/// Meal glucose appearance rate (mg/dL/min) at time `t`.
pub fn meal_rate(protocol: &MealProtocol, t: f64) -> f64 {
    let tau = protocol.absorption.tau;
    let mut d = 0.0;
    for ev in &protocol.events {
        let s = t - ev.start_time;
        if s < 0.0 {
            // events are sorted
            break;
        }
        d += protocol.event_area(ev) * s * (-s / tau).exp() / (tau * tau);
    }
    d
}

/// Sampling step used when bounding the disturbance supremum.
pub const DISTURBANCE_SAMPLE_STEP: f64 = 0.1;
/// Inflation applied to the sampled supremum.
pub const DISTURBANCE_SAFETY_FACTOR: f64 = 1.05;

/// Upper bound on `sup_t meal_rate`, by dense sampling inflated by 5%.
pub fn disturbance_bound(protocol: &MealProtocol) -> f64 {
    let Some(last) = protocol.events.last() else {
        return 0.0;
    };
    let first = protocol.events[0].start_time;
    // the kernel decays below 1e-6 of its peak after ~20 tau
    let end = last.start_time + 20.0 * protocol.absorption.tau;
    let steps = ((end - first) / DISTURBANCE_SAMPLE_STEP).ceil() as usize;
    let sup = (0..=steps)
        .map(|k| meal_rate(protocol, first + k as f64 * DISTURBANCE_SAMPLE_STEP))
        .fold(0.0, f64::max);
    sup * DISTURBANCE_SAFETY_FACTOR
}

/// Relative half-widths used when drawing virtual patients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatientPerturbation {
    /// Applied to `s_g`, `p2`, `p3`.
    pub param_frac: f64,
    /// Applied to `g_b`, `i_b`.
    pub basal_frac: f64,
}

impl Default for PatientPerturbation {
    fn default() -> Self {
        Self {
            param_frac: 0.30,
            basal_frac: 0.10,
        }
    }
}

impl PatientPerturbation {
    pub const NONE: PatientPerturbation = PatientPerturbation {
        param_frac: 0.0,
        basal_frac: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("param_frac", self.param_frac),
            ("basal_frac", self.basal_frac),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!(
                    "perturbation {name} must lie in [0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, base: f64, frac: f64) -> f64 {
    if frac == 0.0 {
        return base;
    }
    base * (1.0 + rng.random_range(-frac..=frac))
}

/// Draws a patient uniformly around `base`. `n` and `v` are left untouched.
pub fn sample_patient<R: Rng + ?Sized>(
    perturbation: &PatientPerturbation,
    base: &PatientParams,
    rng: &mut R,
) -> PatientParams {
    PatientParams {
        s_g: jitter(rng, base.s_g, perturbation.param_frac),
        p2: jitter(rng, base.p2, perturbation.param_frac),
        p3: jitter(rng, base.p3, perturbation.param_frac),
        n: base.n,
        v: base.v,
        g_b: jitter(rng, base.g_b, perturbation.basal_frac),
        i_b: jitter(rng, base.i_b, perturbation.basal_frac),
    }
}
