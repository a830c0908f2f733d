//! Linear MPC on the basal linearization, solved as a box-constrained QP by
//! projected gradient descent.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patient::PatientParams;
use crate::sim::{ControlAction, Controller, Observation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmpcConfig {
    /// Prediction and control horizon (steps).
    pub horizon: usize,
    /// Weight on squared glucose tracking error.
    pub q_weight: f64,
    /// Weight on squared deviation of the input from basal.
    pub r_weight: f64,
    /// Absolute glucose target (mg/dL).
    pub target: f64,
    pub max_iters: usize,
    /// Fraction of `1/L` used as gradient step, `L` the Hessian's largest eigenvalue.
    pub step_size: f64,
    /// Stop when no input moves by more than this (mU/min).
    pub tol: f64,
    pub u_bar: f64,
}

impl Default for LmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 60,
            q_weight: 1.0,
            r_weight: 1e-3,
            target: 100.0,
            max_iters: 200,
            step_size: 1.0,
            tol: 1e-6,
            u_bar: 144.0,
        }
    }
}

impl LmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidConfig("lmpc horizon must be >= 1".into()));
        }
        if !(self.q_weight > 0.0 && self.r_weight > 0.0) {
            return Err(Error::InvalidConfig("lmpc weights must be > 0".into()));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::InvalidConfig(
                "lmpc step_size must lie in (0, 1]".into(),
            ));
        }
        if !(self.tol > 0.0)
            || self.max_iters == 0
            || !(self.u_bar >= 0.0)
            || !self.target.is_finite()
        {
            return Err(Error::InvalidConfig(
                "lmpc needs tol > 0, max_iters >= 1, u_bar >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start and after each iteration, when recorded.
    pub cost_history: Vec<f64>,
}

pub fn qp_cost(h: &DMatrix<f64>, f: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + f.dot(x)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn largest_eigenvalue(h: &DMatrix<f64>, iters: usize) -> f64 {
    let n = h.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = h * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda.max((h * &v).norm())
}

/// Minimizes `x'Hx/2 + f'x` over `lo <= x <= hi`. `lipschitz` bounds the
/// largest eigenvalue of `H` and must be positive.
#[allow(clippy::too_many_arguments)]
pub fn solve_box_qp(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x0: &DVector<f64>,
    lipschitz: f64,
    step_size: f64,
    max_iters: usize,
    tol: f64,
    record_cost: bool,
) -> QpSolution {
    let project = |x: DVector<f64>| x.zip_zip_map(lo, hi, |v, l, u| v.clamp(l, u));
    let mut x = project(x0.clone());
    let mut history = Vec::new();
    if record_cost {
        history.push(qp_cost(h, f, &x));
    }
    let alpha = step_size / lipschitz;
    for it in 1..=max_iters {
        let grad = h * &x + f;
        let next = project(&x - grad * alpha);
        let moved = (&next - &x).amax();
        x = next;
        if record_cost {
            history.push(qp_cost(h, f, &x));
        }
        if moved < tol {
            return QpSolution {
                x,
                iterations: it,
                converged: true,
                cost_history: history,
            };
        }
    }
    QpSolution {
        x,
        iterations: max_iters,
        converged: false,
        cost_history: history,
    }
}

/// Condensed prediction matrices of the basal-linearized Euler model.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Row `k-1` maps the initial state to predicted glucose at step `k`.
    pub phi_g: DMatrix<f64>,
    /// Row `k-1`, column `j` maps input `j` to glucose at step `k`.
    pub gamma: DMatrix<f64>,
}

pub fn linearized_transition(p: &PatientParams, ts: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let a = Matrix3::new(-p.s_g, -p.g_b, 0.0, 0.0, -p.p2, p.p3, 0.0, 0.0, -p.n);
    (
        Matrix3::identity() + a * ts,
        Vector3::new(0.0, 0.0, ts / p.v),
    )
}

pub fn condense(p: &PatientParams, ts: f64, horizon: usize) -> Prediction {
    let (f, b) = linearized_transition(p, ts);
    let mut phi_g = DMatrix::zeros(horizon, 3);
    // markov[k] = e1' F^k b
    let mut markov = vec![0.0; horizon];
    let mut fk = Matrix3::identity();
    for k in 0..horizon {
        markov[k] = (fk * b)[0];
        fk = f * fk;
        for c in 0..3 {
            phi_g[(k, c)] = fk[(0, c)];
        }
    }
    let gamma = DMatrix::from_fn(horizon, horizon, |row, j| {
        if j <= row {
            markov[row - j]
        } else {
            0.0
        }
    });
    Prediction { phi_g, gamma }
}

#[derive(Clone, Debug)]
pub struct LmpcController {
    pub config: LmpcConfig,
    pub nominal: PatientParams,
    pub ts: f64,
    prediction: Prediction,
    hessian: DMatrix<f64>,
    lipschitz: f64,
    warm: Option<DVector<f64>>,
    /// Solver outcome of the most recent step.
    pub last_solution: Option<QpSolution>,
    pub record_cost: bool,
}

impl LmpcController {
    pub fn new(config: LmpcConfig, nominal: PatientParams, ts: f64) -> Result<Self> {
        config.validate()?;
        if !(ts > 0.0) {
            return Err(Error::InvalidConfig("lmpc ts must be > 0".into()));
        }
        let prediction = condense(&nominal, ts, config.horizon);
        let n = config.horizon;
        let hessian = (prediction.gamma.transpose() * &prediction.gamma * config.q_weight
            + DMatrix::identity(n, n) * config.r_weight)
            * 2.0;
        let lipschitz = largest_eigenvalue(&hessian, 100);
        Ok(Self {
            config,
            nominal,
            ts,
            prediction,
            hessian,
            lipschitz,
            warm: None,
            last_solution: None,
            record_cost: false,
        })
    }

    pub fn basal_input(&self) -> f64 {
        self.nominal.basal_infusion()
    }

    /// QP in the input deviation from basal: `(H, f, lo, hi)`.
    pub fn qp(
        &self,
        estimate: [f64; 3],
    ) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.config.horizon;
        let z0 = DVector::from_column_slice(&estimate);
        let reference = self.config.target - self.nominal.g_b;
        let free = &self.prediction.phi_g * z0 - DVector::from_element(n, reference);
        let f = self.prediction.gamma.transpose() * free * (2.0 * self.config.q_weight);
        let u_b = self.basal_input();
        let lo = DVector::from_element(n, (-u_b).min(self.config.u_bar - u_b));
        let hi = DVector::from_element(n, self.config.u_bar - u_b);
        (self.hessian.clone(), f, lo, hi)
    }

    /// Solves the horizon problem and returns the first absolute input.
    pub fn solve(&mut self, estimate: [f64; 3]) -> f64 {
        let (h, f, lo, hi) = self.qp(estimate);
        let n = self.config.horizon;
        let x0 = match &self.warm {
            Some(prev) => DVector::from_fn(n, |k, _| prev[(k + 1).min(n - 1)]),
            None => DVector::zeros(n),
        };
        let sol = solve_box_qp(
            &h,
            &f,
            &lo,
            &hi,
            &x0,
            self.lipschitz,
            self.config.step_size,
            self.config.max_iters,
            self.config.tol,
            self.record_cost,
        );
        let u = (sol.x[0] + self.basal_input()).clamp(0.0, self.config.u_bar);
        self.warm = Some(sol.x.clone());
        self.last_solution = Some(sol);
        u
    }
}

impl Controller for LmpcController {
    fn name(&self) -> &str {
        "lmpc"
    }

    fn pump_limit(&self) -> f64 {
        self.config.u_bar
    }

    fn step(&mut self, obs: &Observation) -> Result<ControlAction> {
        Ok(ControlAction::plain(self.solve(obs.estimate)))
    }
}
