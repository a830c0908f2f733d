//! Meal protocols, uncertainty scenarios and Monte Carlo batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, compute_report, AggregateReport, GlycemicReport};
use crate::patient::{
    sample_patient, Absorption, MealEvent, MealProtocol, PatientParams, PatientPerturbation,
    DISTURBANCE_SAFETY_FACTOR, DISTURBANCE_SAMPLE_STEP,
};
use crate::sim::{check_invariance, run_closed_loop, InvarianceCheck, SimConfig};

/// Perturbed carbs never fall below this (g).
pub const MIN_CARBS: f64 = 5.0;

/// Ten meals over three days: regular, busy with a snack, late dinner.
pub fn three_day_protocol() -> MealProtocol {
    const DAY: f64 = 1440.0;
    let hm = |day: f64, h: f64, m: f64| day * DAY + h * 60.0 + m;
    let events = [
        (hm(0.0, 8.0, 0.0), 50.0),
        (hm(0.0, 13.0, 0.0), 70.0),
        (hm(0.0, 19.0, 0.0), 40.0),
        (hm(1.0, 8.0, 0.0), 50.0),
        (hm(1.0, 12.0, 30.0), 65.0),
        (hm(1.0, 16.0, 0.0), 25.0),
        (hm(1.0, 19.0, 30.0), 45.0),
        (hm(2.0, 8.0, 0.0), 55.0),
        (hm(2.0, 13.0, 0.0), 70.0),
        (hm(2.0, 21.0, 0.0), 50.0),
    ]
    .into_iter()
    .map(|(start_time, carbs)| MealEvent { start_time, carbs })
    .collect();
    MealProtocol::new(events, Absorption::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Nominal,
    McParameters,
    McMeals,
    McCombined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbations {
    pub param_frac: f64,
    pub basal_frac: f64,
    /// Uniform meal-time jitter half-width (min).
    pub meal_time_min: f64,
    /// Uniform carb jitter half-width (g).
    pub meal_carbs_g: f64,
}

impl Default for Perturbations {
    fn default() -> Self {
        Self {
            param_frac: 0.30,
            basal_frac: 0.10,
            meal_time_min: 60.0,
            meal_carbs_g: 15.0,
        }
    }
}

impl Perturbations {
    pub const NONE: Perturbations = Perturbations {
        param_frac: 0.0,
        basal_frac: 0.0,
        meal_time_min: 0.0,
        meal_carbs_g: 0.0,
    };

    pub fn patient(&self) -> PatientPerturbation {
        PatientPerturbation {
            param_frac: self.param_frac,
            basal_frac: self.basal_frac,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_runs: usize,
    pub perturbations: Perturbations,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Nominal,
            n_runs: 1,
            perturbations: Perturbations::default(),
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 1 {
            return Err(Error::InvalidConfig("scenario.n_runs must be >= 1".into()));
        }
        let p = &self.perturbations;
        if [p.param_frac, p.basal_frac, p.meal_time_min, p.meal_carbs_g]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidConfig(
                "scenario perturbations must be finite and >= 0".into(),
            ));
        }
        self.perturbations.patient().validate()
    }

    /// Perturbations that actually apply to this kind.
    pub fn effective(&self) -> Perturbations {
        let p = self.perturbations;
        match self.kind {
            ScenarioKind::Nominal => Perturbations::NONE,
            ScenarioKind::McParameters => Perturbations {
                meal_time_min: 0.0,
                meal_carbs_g: 0.0,
                ..p
            },
            ScenarioKind::McMeals => Perturbations {
                param_frac: 0.0,
                basal_frac: 0.0,
                ..p
            },
            ScenarioKind::McCombined => p,
        }
    }
}

/// Uniform jitter of every meal's time and size, floored and re-sorted.
/// The floor never raises a meal above its base size.
pub fn perturb_protocol<R: Rng + ?Sized>(
    base: &MealProtocol,
    p: &Perturbations,
    rng: &mut R,
) -> MealProtocol {
    let events = base
        .events
        .iter()
        .map(|ev| {
            let dt = if p.meal_time_min > 0.0 {
                rng.random_range(-p.meal_time_min..=p.meal_time_min)
            } else {
                0.0
            };
            let dc = if p.meal_carbs_g > 0.0 {
                rng.random_range(-p.meal_carbs_g..=p.meal_carbs_g)
            } else {
                0.0
            };
            MealEvent {
                start_time: (ev.start_time + dt).max(0.0),
                carbs: (ev.carbs + dc).max(MIN_CARBS.min(ev.carbs)),
            }
        })
        .collect();
    MealProtocol::new(events, base.absorption)
}

/// Supremum of the meal rate over every protocol reachable by the jitter,
/// times the usual safety factor. Each meal contributes its own worst
/// placement, so overlapping meals are covered.
pub fn jittered_disturbance_bound(base: &MealProtocol, p: &Perturbations) -> f64 {
    let Some(last) = base.events.last() else {
        return 0.0;
    };
    let tau = base.absorption.tau;
    let kernel = |area: f64, s: f64| {
        if s < 0.0 {
            0.0
        } else {
            area * s * (-s / tau).exp() / (tau * tau)
        }
    };
    // the kernel rises until s = tau and decays after
    let worst = |ev: &MealEvent, t: f64| {
        let area = base.event_area(&MealEvent {
            carbs: ev.carbs + p.meal_carbs_g,
            ..*ev
        });
        let earliest = (ev.start_time - p.meal_time_min).max(0.0);
        let latest = ev.start_time + p.meal_time_min;
        let (s_min, s_max) = (t - latest, t - earliest);
        let s = tau.clamp(s_min, s_max.max(s_min));
        kernel(area, s)
    };
    let end = last.start_time + p.meal_time_min + 20.0 * tau;
    let steps = (end / DISTURBANCE_SAMPLE_STEP).ceil() as usize;
    let sup = (0..=steps)
        .map(|k| {
            let t = k as f64 * DISTURBANCE_SAMPLE_STEP;
            base.events.iter().map(|ev| worst(ev, t)).sum::<f64>()
        })
        .fold(0.0, f64::max);
    sup * DISTURBANCE_SAFETY_FACTOR
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-run seed. Injective in `index` for a fixed root.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    splitmix64(root.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// One Monte Carlo draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInstance {
    pub index: usize,
    pub seed: u64,
    pub patient: PatientParams,
    pub protocol: MealProtocol,
}

pub fn draw_instance(scenario: &Scenario, index: usize) -> RunInstance {
    let spec = &scenario.scenario;
    let seed = derive_seed(spec.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = spec.effective();
    let patient = sample_patient(&p.patient(), &scenario.patient, &mut rng);
    let protocol = perturb_protocol(&scenario.protocol, &p, &mut rng);
    RunInstance {
        index,
        seed,
        patient,
        protocol,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub index: usize,
    pub seed: u64,
    pub patient: PatientParams,
    pub report: Option<GlycemicReport>,
    pub invariance: Option<InvarianceCheck>,
    /// Glucose stayed inside the safety band and every input inside the pump range.
    pub safe: bool,
    pub error: Option<String>,
}

/// Runs one drawn instance to completion.
pub fn run_instance(scenario: &Scenario, instance: &RunInstance) -> RunOutcome {
    let attempt = || -> Result<(GlycemicReport, InvarianceCheck)> {
        let sim = SimConfig {
            seed: instance.seed,
            ..scenario.sim
        };
        let mut controller = scenario.controller.build(
            scenario.controller.kind,
            &scenario.nominal,
            sim.ts_control,
        )?;
        let estimator =
            scenario
                .estimator
                .setup(&scenario.nominal, sim.ts_control, sim.cgm_noise_sigma);
        let trace = run_closed_loop(
            &instance.patient,
            scenario.initial_state,
            controller.as_mut(),
            &instance.protocol,
            &sim,
            &estimator,
        )?;
        let starts: Vec<f64> = instance
            .protocol
            .events
            .iter()
            .map(|e| e.start_time)
            .collect();
        let report = compute_report(&trace, &starts, &scenario.thresholds)?;
        let (lo, hi) = scenario.safety_band();
        let inv = check_invariance(&trace, lo, hi, controller.pump_limit());
        Ok((report, inv))
    };
    match attempt() {
        Ok((report, inv)) => RunOutcome {
            index: instance.index,
            seed: instance.seed,
            patient: instance.patient,
            safe: inv.glucose_safe(),
            report: Some(report),
            invariance: Some(inv),
            error: None,
        },
        Err(e) => RunOutcome {
            index: instance.index,
            seed: instance.seed,
            patient: instance.patient,
            report: None,
            invariance: None,
            safe: false,
            error: Some(e.to_string()),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub kind: ScenarioKind,
    pub n_runs: usize,
    pub root_seed: u64,
    pub safe_runs: usize,
    pub unsafe_runs: usize,
    pub failed_runs: usize,
    /// Lowest time in range, ties broken by lowest minimum glucose.
    pub worst_run: Option<usize>,
    /// Absent when every run failed.
    pub aggregate: Option<AggregateReport>,
}

impl MonteCarloSummary {
    pub fn all_safe(&self) -> bool {
        self.safe_runs == self.n_runs
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "scenario {}: {} runs, {} safe, {} unsafe, {} failed\n",
            serde_json::to_value(self.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
            self.n_runs,
            self.safe_runs,
            self.unsafe_runs,
            self.failed_runs
        );
        if let Some(w) = self.worst_run {
            out.push_str(&format!("worst run: {w}\n"));
        }
        if let Some(a) = &self.aggregate {
            out.push_str(&a.table());
        }
        out
    }
}

/// Summarizes outcomes in index order.
pub fn summarize(scenario: &Scenario, runs: &[RunOutcome]) -> Result<MonteCarloSummary> {
    let reports: Vec<GlycemicReport> = runs.iter().filter_map(|r| r.report).collect();
    let failed = runs.iter().filter(|r| r.error.is_some()).count();
    let safe = runs.iter().filter(|r| r.safe).count();
    let worst_run = runs
        .iter()
        .filter_map(|r| r.report.map(|rep| (r.index, rep)))
        .min_by(|a, b| {
            a.1.tir_70_180
                .total_cmp(&b.1.tir_70_180)
                .then(a.1.min_g.total_cmp(&b.1.min_g))
                .then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i);
    Ok(MonteCarloSummary {
        kind: scenario.scenario.kind,
        n_runs: runs.len(),
        root_seed: scenario.scenario.seed,
        safe_runs: safe,
        unsafe_runs: runs.len() - safe - failed,
        failed_runs: failed,
        worst_run,
        aggregate: if reports.is_empty() {
            None
        } else {
            Some(aggregate(&reports)?)
        },
    })
}

/// Reads `GLYCTUBE_THREADS`; `None` when unset or unparsable.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("GLYCTUBE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n >= 1)
}

/// Runs `scenario.scenario.n_runs` independent closed loops. Failed runs are
/// recorded and the batch continues. Results are ordered by run index
/// regardless of scheduling.
pub fn run_monte_carlo(
    scenario: &Scenario,
    threads: Option<usize>,
) -> Result<(MonteCarloSummary, Vec<RunOutcome>)> {
    scenario.validate()?;
    let n = scenario.scenario.n_runs;
    let job = || -> Vec<RunOutcome> {
        (0..n)
            .into_par_iter()
            .map(|i| run_instance(scenario, &draw_instance(scenario, i)))
            .collect()
    };
    let runs = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(job),
        None => job(),
    };
    let summary = summarize(scenario, &runs)?;
    Ok((summary, runs))
}
