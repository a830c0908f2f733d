//! Feasibility conditions for the safety tube controller and a grid-search
//! synthesizer for gains and funnels that satisfy them.
//!
//! Six inequalities tie the gains, funnels and pump limit to the parameter
//! box, the disturbance bound and the estimation radii:
//!
//! | name | binds | lhs > rhs |
//! |------|-------|-----------|
//! | FC1a | kappa1 | `(k1 - pX - dX)(gU + gb) > Dbar` |
//! | FC1b | pX | `-SG_lo gL > (pX + dX)(gL + gb)` |
//! | FC2a | kappa2 | `P3_lo (k2 - pI - dI) - P2_hi (k1 - qX + dX) > R_X` |
//! | FC2b | qX | `P2_lo (qX - dX) - P3_hi (pI + dI) > R_X` |
//! | FC3a | u_bar | `u_bar / V - n_hi (k2 - qI + dI + Ib) > R_I` |
//! | FC3b | qI | `n_lo (qI - dI + Ib) > R_I` |
//!
//! with `R_X = sup|dXref/dt| + muX (pX - qX) + dDelta_X` and
//! `R_I = sup|dIref/dt| + muI (pI - qI) + dDelta_I`.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{derivative_bounds, UncertaintyBounds};
use crate::gstc::{FunnelSpec, GstcConfig, TransformFn};
use crate::patient::ParamBounds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "FC1a")]
    Fc1a,
    #[serde(rename = "FC1b")]
    Fc1b,
    #[serde(rename = "FC2a")]
    Fc2a,
    #[serde(rename = "FC2b")]
    Fc2b,
    #[serde(rename = "FC3a")]
    Fc3a,
    #[serde(rename = "FC3b")]
    Fc3b,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Fc1a,
        Condition::Fc1b,
        Condition::Fc2a,
        Condition::Fc2b,
        Condition::Fc3a,
        Condition::Fc3b,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Fc1a => "FC1a",
            Condition::Fc1b => "FC1b",
            Condition::Fc2a => "FC2a",
            Condition::Fc2b => "FC2b",
            Condition::Fc3a => "FC3a",
            Condition::Fc3b => "FC3b",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            Condition::Fc1a | Condition::Fc1b => "mg/dL/min",
            Condition::Fc2a | Condition::Fc2b => "1/min^2",
            Condition::Fc3a | Condition::Fc3b => "mU/L/min",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every constant the six conditions read.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityInputs {
    pub param_bounds: ParamBounds,
    pub d_bar: f64,
    pub uncertainty: UncertaintyBounds,
    pub config: GstcConfig,
    pub i_b: f64,
    pub v: f64,
    pub g_b: f64,
    pub sup_xref_rate: f64,
    pub sup_iref_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMargin {
    pub condition: Condition,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

impl ConditionMargin {
    fn new(condition: Condition, lhs: f64, rhs: f64) -> Self {
        let margin = lhs - rhs;
        Self {
            condition,
            lhs,
            rhs,
            margin,
            pass: margin > 0.0,
        }
    }

    /// Margin scaled by the size of its right-hand side, comparable across
    /// conditions with different units.
    pub fn normalized(&self) -> f64 {
        self.margin / (self.rhs.abs() + 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub margins: [ConditionMargin; 6],
    pub pass: bool,
    /// Condition with the smallest normalized margin.
    pub binding: Condition,
}

impl FeasibilityReport {
    pub fn margin(&self, condition: Condition) -> &ConditionMargin {
        &self.margins[Condition::ALL
            .iter()
            .position(|c| *c == condition)
            .unwrap_or(0)]
    }

    pub fn min_normalized_margin(&self) -> f64 {
        self.margins
            .iter()
            .map(ConditionMargin::normalized)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn failing(&self) -> Vec<Condition> {
        self.margins
            .iter()
            .filter(|m| !m.pass)
            .map(|m| m.condition)
            .collect()
    }

    /// Six-row aligned table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<6} {:>14} {:>14} {:>14} {:>6}  units\n",
            "cond", "lhs", "rhs", "margin", "pass"
        );
        for m in &self.margins {
            out.push_str(&format!(
                "{:<6} {:>14.6e} {:>14.6e} {:>14.6e} {:>6}  {}\n",
                m.condition.name(),
                m.lhs,
                m.rhs,
                m.margin,
                if m.pass { "yes" } else { "NO" },
                m.condition.units()
            ));
        }
        out.push_str(&format!(
            "verdict: {} (binding {})\n",
            if self.pass { "FEASIBLE" } else { "INFEASIBLE" },
            self.binding
        ));
        out
    }
}

/// Evaluates the six inequalities.
pub fn check(inputs: &FeasibilityInputs) -> FeasibilityReport {
    let b = &inputs.param_bounds;
    let c = &inputs.config;
    let u = &inputs.uncertainty;
    let (fx, fi) = (&c.funnel_x, &c.funnel_i);

    let x_rate_rhs = inputs.sup_xref_rate + fx.mu * (fx.p - fx.q) + u.ddelta_x;
    let i_rate_rhs = inputs.sup_iref_rate + fi.mu * (fi.p - fi.q) + u.ddelta_i;

    let margins = [
        ConditionMargin::new(
            Condition::Fc1a,
            (c.kappa1 - fx.p - u.delta_x) * (c.g_upper + inputs.g_b),
            inputs.d_bar,
        ),
        ConditionMargin::new(
            Condition::Fc1b,
            -b.s_g.lower * c.g_lower,
            (fx.p + u.delta_x) * (c.g_lower + inputs.g_b),
        ),
        ConditionMargin::new(
            Condition::Fc2a,
            b.p3.lower * (c.kappa2 - fi.p - u.delta_i) - b.p2.upper * (c.kappa1 - fx.q + u.delta_x),
            x_rate_rhs,
        ),
        ConditionMargin::new(
            Condition::Fc2b,
            b.p2.lower * (fx.q - u.delta_x) - b.p3.upper * (fi.p + u.delta_i),
            x_rate_rhs,
        ),
        ConditionMargin::new(
            Condition::Fc3a,
            c.u_bar / inputs.v - b.n.upper * (c.kappa2 - fi.q + u.delta_i + inputs.i_b),
            i_rate_rhs,
        ),
        ConditionMargin::new(
            Condition::Fc3b,
            b.n.lower * (fi.q - u.delta_i + inputs.i_b),
            i_rate_rhs,
        ),
    ];

    let pass = margins.iter().all(|m| m.pass);
    let binding = margins
        .iter()
        .min_by(|a, b| a.normalized().total_cmp(&b.normalized()))
        .map(|m| m.condition)
        .unwrap_or(Condition::Fc1a);
    FeasibilityReport {
        margins,
        pass,
        binding,
    }
}

/// Worst-case reference rates with every intermediate term kept for audit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefRateBounds {
    pub sup_xref_rate: f64,
    pub sup_iref_rate: f64,
    /// Max slope of the transformation.
    pub psi_lipschitz: f64,
    /// Upper bound on remote action, `kappa1 + pX + dX`.
    pub x_upper: f64,
    /// `sup |dG/dt|` over the band.
    pub sup_g_rate: f64,
    /// `sup |de_g/dt|`.
    pub sup_eg_rate: f64,
    /// `sup |dX/dt|`.
    pub sup_x_rate: f64,
    /// `sup |de_x/dt|`.
    pub sup_ex_rate: f64,
    /// Funnel-shrink part of `sup |de_x/dt|`, `pX muX (pX - qX) / qX^2`.
    pub funnel_shrink_term: f64,
}

/// Chain-rule over-approximation of `sup|dXref/dt|` and `sup|dIref/dt|`.
///
/// `de_x/dt = (dXref/dt - dXhat/dt)/rho_x - e_hat_x drho_x/dt / rho_x^2`,
/// bounded with `rho_x >= qX`, `|e_hat_x| <= pX` and `|drho_x/dt| <= muX (pX - qX)`.
pub fn ref_rate_bounds(
    config: &GstcConfig,
    param_bounds: &ParamBounds,
    d_bar: f64,
    g_b: f64,
    deltas: (f64, f64, f64),
) -> Result<RefRateBounds> {
    let (fx, fi) = (&config.funnel_x, &config.funnel_i);
    if !(fx.q > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "funnel_x.q must be > 0, got {}",
            fx.q
        )));
    }
    let (_, delta_x, delta_i) = deltas;
    let lipschitz = config.transform.max_slope();
    let x_upper = config.kappa1 + fx.p + delta_x;

    let sup_g_rate = param_bounds.s_g.upper * config.g_lower.abs().max(config.g_upper)
        + x_upper * (config.g_upper + g_b)
        + d_bar;
    let sup_eg_rate = sup_g_rate / config.half_width();
    let sup_xref_rate = config.kappa1 * lipschitz * sup_eg_rate;

    let sup_x_rate =
        param_bounds.p3.upper * (config.kappa2 + fi.p + delta_i) + param_bounds.p2.upper * x_upper;
    let funnel_shrink_term = fx.p * fx.mu * (fx.p - fx.q) / (fx.q * fx.q);
    let sup_ex_rate = (sup_xref_rate + sup_x_rate) / fx.q + funnel_shrink_term;
    let sup_iref_rate = config.kappa2 * lipschitz * sup_ex_rate;

    Ok(RefRateBounds {
        sup_xref_rate,
        sup_iref_rate,
        psi_lipschitz: lipschitz,
        x_upper,
        sup_g_rate,
        sup_eg_rate,
        sup_x_rate,
        sup_ex_rate,
        funnel_shrink_term,
    })
}

/// Fixed physiological context for evaluating candidate designs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignContext {
    pub param_bounds: ParamBounds,
    pub d_bar: f64,
    /// `(delta_g, delta_x, delta_i)`.
    pub deltas: (f64, f64, f64),
    pub i_b: f64,
    pub v: f64,
    pub g_b: f64,
}

/// Derives rate bounds and uncertainty rates for `config`, then assembles
/// the condition inputs.
pub fn assemble_inputs(
    config: &GstcConfig,
    ctx: &DesignContext,
) -> Result<(FeasibilityInputs, RefRateBounds)> {
    let rates = ref_rate_bounds(config, &ctx.param_bounds, ctx.d_bar, ctx.g_b, ctx.deltas)?;
    let (ddelta_i, ddelta_x, ddelta_g) = derivative_bounds(
        &ctx.param_bounds,
        ctx.deltas,
        ctx.d_bar,
        rates.x_upper,
        config.g_upper,
        ctx.g_b,
    );
    let uncertainty = UncertaintyBounds {
        delta_g: ctx.deltas.0,
        delta_x: ctx.deltas.1,
        delta_i: ctx.deltas.2,
        ddelta_g,
        ddelta_x,
        ddelta_i,
    };
    Ok((
        FeasibilityInputs {
            param_bounds: ctx.param_bounds,
            d_bar: ctx.d_bar,
            uncertainty,
            config: *config,
            i_b: ctx.i_b,
            v: ctx.v,
            g_b: ctx.g_b,
            sup_xref_rate: rates.sup_xref_rate,
            sup_iref_rate: rates.sup_iref_rate,
        },
        rates,
    ))
}

/// Full pipeline: rates, uncertainty rates, conditions.
pub fn evaluate(config: &GstcConfig, ctx: &DesignContext) -> Result<FeasibilityReport> {
    Ok(check(&assemble_inputs(config, ctx)?.0))
}

/// One search dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    #[serde(default)]
    pub log: bool,
}

impl Axis {
    pub fn linear(min: f64, max: f64, points: usize) -> Self {
        Self {
            min,
            max,
            points,
            log: false,
        }
    }

    pub fn log(min: f64, max: f64, points: usize) -> Self {
        Self {
            min,
            max,
            points,
            log: true,
        }
    }

    pub fn fixed(value: f64) -> Self {
        Self::linear(value, value, 1)
    }

    fn valid(&self) -> bool {
        self.points >= 1
            && self.min.is_finite()
            && self.max.is_finite()
            && self.min <= self.max
            && (!self.log || self.min > 0.0)
    }

    fn warp(&self, v: f64) -> f64 {
        if self.log {
            v.ln()
        } else {
            v
        }
    }

    fn unwarp(&self, s: f64) -> f64 {
        if self.log {
            s.exp()
        } else {
            s
        }
    }

    fn values(&self) -> Vec<f64> {
        if self.points == 1 || self.min == self.max {
            return vec![self.min];
        }
        let (a, b) = (self.warp(self.min), self.warp(self.max));
        (0..self.points)
            .map(|k| {
                let v = self.unwarp(a + (b - a) * k as f64 / (self.points - 1) as f64);
                v.clamp(self.min, self.max)
            })
            .collect()
    }

    /// Axis of the same resolution centred on `center`, one grid step each
    /// side, clipped to `outer`.
    fn zoom(&self, center: f64, outer: &Axis) -> Axis {
        if self.points <= 1 || self.min == self.max {
            return *self;
        }
        let step = (self.warp(self.max) - self.warp(self.min)) / (self.points - 1) as f64;
        let c = self.warp(center);
        let lo = self.unwarp(c - step).max(outer.min);
        let hi = self.unwarp(c + step).min(outer.max);
        Axis {
            min: lo,
            max: hi,
            ..*self
        }
    }
}

/// Search ranges. Steady-state funnel radii are parameterized as fractions
/// of the initial radius so every candidate satisfies `q < p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub kappa1: Axis,
    pub kappa2: Axis,
    pub p_x: Axis,
    pub q_x_ratio: Axis,
    pub mu_x: Axis,
    pub p_i: Axis,
    pub q_i_ratio: Axis,
    pub mu_i: Axis,
    /// Zoom rounds after the initial sweep.
    pub refinements: usize,
}

impl GridSpec {
    fn axes(&self) -> [Axis; 8] {
        [
            self.kappa1,
            self.kappa2,
            self.p_x,
            self.q_x_ratio,
            self.mu_x,
            self.p_i,
            self.q_i_ratio,
            self.mu_i,
        ]
    }

    fn with_axes(&self, a: [Axis; 8]) -> GridSpec {
        GridSpec {
            kappa1: a[0],
            kappa2: a[1],
            p_x: a[2],
            q_x_ratio: a[3],
            mu_x: a[4],
            p_i: a[5],
            q_i_ratio: a[6],
            mu_i: a[7],
            refinements: self.refinements,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes().iter().any(|a| !a.valid()) {
            return Err(Error::Empty(
                "synthesis grid has an empty or malformed axis",
            ));
        }
        let ratios_ok = [self.q_x_ratio, self.q_i_ratio]
            .iter()
            .all(|a| a.min > 0.0 && a.max < 1.0);
        if !ratios_ok {
            return Err(Error::InvalidConfig(
                "funnel q ratios must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Grid collapsed onto a single design.
    pub fn single(config: &GstcConfig) -> GridSpec {
        GridSpec {
            kappa1: Axis::fixed(config.kappa1),
            kappa2: Axis::fixed(config.kappa2),
            p_x: Axis::fixed(config.funnel_x.p),
            q_x_ratio: Axis::fixed(config.funnel_x.q / config.funnel_x.p),
            mu_x: Axis::fixed(config.funnel_x.mu),
            p_i: Axis::fixed(config.funnel_i.p),
            q_i_ratio: Axis::fixed(config.funnel_i.q / config.funnel_i.p),
            mu_i: Axis::fixed(config.funnel_i.mu),
            refinements: 0,
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            kappa1: Axis::log(1e-4, 0.1, 7),
            kappa2: Axis::log(1e-1, 300.0, 7),
            p_x: Axis::log(1e-5, 0.05, 6),
            q_x_ratio: Axis::linear(0.1, 0.99, 4),
            mu_x: Axis::log(1e-4, 0.1, 4),
            p_i: Axis::log(1e-2, 100.0, 6),
            q_i_ratio: Axis::linear(0.1, 0.99, 4),
            mu_i: Axis::log(1e-4, 0.1, 4),
            refinements: 6,
        }
    }
}

/// Everything fixed during synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisProblem {
    pub context: DesignContext,
    pub g_lower: f64,
    pub g_upper: f64,
    pub u_bar: f64,
    #[serde(default)]
    pub transform: TransformFn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub config: GstcConfig,
    pub report: FeasibilityReport,
    /// Minimum normalized margin of the returned design.
    pub objective: f64,
    pub feasible: bool,
    pub evaluated: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    config: GstcConfig,
    objective: f64,
    index: usize,
}

/// Total order: larger objective first, then smaller kappa2, smaller kappa1,
/// then grid index. Deterministic regardless of evaluation order.
fn better(a: &Candidate, b: &Candidate) -> Ordering {
    b.objective
        .total_cmp(&a.objective)
        .then(a.config.kappa2.total_cmp(&b.config.kappa2))
        .then(a.config.kappa1.total_cmp(&b.config.kappa1))
        .then(a.index.cmp(&b.index))
}

fn sweep(problem: &SynthesisProblem, grid: &GridSpec) -> (Option<Candidate>, usize) {
    let values: Vec<Vec<f64>> = grid.axes().iter().map(Axis::values).collect();
    let total: usize = values.iter().map(Vec::len).product();
    let best = (0..total)
        .into_par_iter()
        .filter_map(|index| {
            let mut rem = index;
            let mut pick = [0.0; 8];
            for (slot, axis) in pick.iter_mut().zip(&values) {
                *slot = axis[rem % axis.len()];
                rem /= axis.len();
            }
            let config = GstcConfig {
                g_lower: problem.g_lower,
                g_upper: problem.g_upper,
                kappa1: pick[0],
                kappa2: pick[1],
                u_bar: problem.u_bar,
                funnel_x: FunnelSpec::new(pick[2], pick[2] * pick[3], pick[4]),
                funnel_i: FunnelSpec::new(pick[5], pick[5] * pick[6], pick[7]),
                transform: problem.transform,
            };
            let report = evaluate(&config, &problem.context).ok()?;
            let objective = report.min_normalized_margin();
            objective.is_finite().then_some(Candidate {
                config,
                objective,
                index,
            })
        })
        .min_by(better);
    (best, total)
}

/// Coarse-to-fine grid search maximizing the smallest normalized margin.
/// Returns the best design found, flagged infeasible if any condition fails.
pub fn synthesize_gains(problem: &SynthesisProblem, grid: &GridSpec) -> Result<SynthesisResult> {
    grid.validate()?;
    let (mut best, mut evaluated) = sweep(problem, grid);
    let mut current = *grid;
    for _ in 0..grid.refinements {
        let Some(b) = best else { break };
        let centers = [
            b.config.kappa1,
            b.config.kappa2,
            b.config.funnel_x.p,
            b.config.funnel_x.q / b.config.funnel_x.p,
            b.config.funnel_x.mu,
            b.config.funnel_i.p,
            b.config.funnel_i.q / b.config.funnel_i.p,
            b.config.funnel_i.mu,
        ];
        let outer = grid.axes();
        let mut zoomed = current.axes();
        for k in 0..8 {
            zoomed[k] = zoomed[k].zoom(centers[k], &outer[k]);
        }
        current = grid.with_axes(zoomed);
        let (candidate, n) = sweep(problem, &current);
        evaluated += n;
        if let Some(c) = candidate {
            if better(&c, &b) == Ordering::Less {
                best = Some(c);
            }
        }
    }
    let best = best.ok_or(Error::Empty("no grid point produced a finite objective"))?;
    let report = evaluate(&best.config, &problem.context)?;
    Ok(SynthesisResult {
        config: best.config,
        feasible: report.pass,
        objective: report.min_normalized_margin(),
        report,
        evaluated,
    })
}
