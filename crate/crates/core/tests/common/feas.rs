use glyctube::feasibility::{
    assemble_inputs, check, evaluate, ref_rate_bounds, synthesize_gains, Condition, DesignContext,
    FeasibilityInputs,
};
use glyctube::gstc::GstcConfig;
use glyctube::patient::ParamBounds;
use glyctube::scenarios::draw_instance;
use glyctube::sim::run_closed_loop;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn synthetic() -> (glyctube::config::Scenario, DesignContext) {
    let s = super::load("synthetic_feasible");
    let ctx = s.design_context(super::deltas(&s));
    (s, ctx)
}

fn margin(inputs: &FeasibilityInputs, c: Condition) -> f64 {
    check(inputs).margin(c).margin
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let rising = f(hi) > f(lo);
    assert!(
        f(lo).signum() != f(hi).signum(),
        "no sign change on [{lo}, {hi}]"
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn each_margin_flips_at_its_linear_root() {
    let (s, ctx) = synthetic();
    let (base, _) = assemble_inputs(&s.controller.gstc, &ctx).unwrap();
    let b = base.param_bounds;
    let u = base.uncertainty;
    let c = base.config;
    let (fx, fi) = (c.funnel_x, c.funnel_i);
    let rx = base.sup_xref_rate + fx.mu * (fx.p - fx.q) + u.ddelta_x;
    let ri = base.sup_iref_rate + fi.mu * (fi.p - fi.q) + u.ddelta_i;

    let with = |edit: fn(&mut FeasibilityInputs, f64), c: Condition| {
        move |v: f64| {
            let mut i = base;
            edit(&mut i, v);
            margin(&i, c)
        }
    };

    let k1 = with(|i, v| i.config.kappa1 = v, Condition::Fc1a);
    let root = fx.p + u.delta_x + base.d_bar / (c.g_upper + base.g_b);
    let found = bisect(0.0, 1.0, k1);
    assert!((found - root).abs() < 1e-9, "FC1a {found} vs {root}");

    let px = with(|i, v| i.config.funnel_x.p = v, Condition::Fc1b);
    let root = -b.s_g.lower * c.g_lower / (c.g_lower + base.g_b) - u.delta_x;
    let found = bisect(0.0, 1.0, px);
    assert!((found - root).abs() < 1e-9, "FC1b {found} vs {root}");

    let k2 = with(|i, v| i.config.kappa2 = v, Condition::Fc2a);
    let root = fi.p + u.delta_i + (b.p2.upper * (c.kappa1 - fx.q + u.delta_x) + rx) / b.p3.lower;
    let found = bisect(0.0, 1e3, k2);
    assert!((found - root).abs() < 1e-9, "FC2a {found} vs {root}");

    let qx = with(|i, v| i.config.funnel_x.q = v, Condition::Fc2b);
    let root = (b.p2.lower * u.delta_x
        + b.p3.upper * (fi.p + u.delta_i)
        + base.sup_xref_rate
        + fx.mu * fx.p
        + u.ddelta_x)
        / (b.p2.lower + fx.mu);
    let found = bisect(0.0, 1.0, qx);
    assert!((found - root).abs() < 1e-9, "FC2b {found} vs {root}");

    let ub = with(|i, v| i.config.u_bar = v, Condition::Fc3a);
    let root = base.v * (b.n.upper * (c.kappa2 - fi.q + u.delta_i + base.i_b) + ri);
    let found = bisect(0.0, 1e4, ub);
    assert!((found - root).abs() < 1e-9, "FC3a {found} vs {root}");

    let qi = with(|i, v| i.config.funnel_i.q = v, Condition::Fc3b);
    let root =
        (b.n.lower * (u.delta_i - base.i_b) + base.sup_iref_rate + fi.mu * fi.p + u.ddelta_i)
            / (b.n.lower + fi.mu);
    let found = bisect(-100.0, 100.0, qi);
    assert!((found - root).abs() < 1e-9, "FC3b {found} vs {root}");
}

fn random_config(rng: &mut ChaCha8Rng) -> GstcConfig {
    let mut c = GstcConfig::default();
    c.kappa1 = rng.random_range(1e-3..0.1);
    c.kappa2 = rng.random_range(1.0..200.0);
    c.funnel_x.p = rng.random_range(0.0..c.kappa1);
    c.funnel_x.q = c.funnel_x.p * rng.random_range(0.1..0.99);
    c.funnel_x.mu = rng.random_range(1e-4..0.1);
    c.funnel_i.p = rng.random_range(0.0..c.kappa2);
    c.funnel_i.q = c.funnel_i.p * rng.random_range(0.1..0.99);
    c.funnel_i.mu = rng.random_range(1e-4..0.1);
    c.u_bar = rng.random_range(0.0..500.0);
    c
}

fn random_context(
    rng: &mut ChaCha8Rng,
    nominal: &glyctube::patient::PatientParams,
) -> DesignContext {
    let frac = rng.random_range(0.0..0.5);
    DesignContext {
        param_bounds: ParamBounds::around(nominal, frac),
        d_bar: rng.random_range(0.0..5.0),
        deltas: (
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..1e-4),
            rng.random_range(0.0..1.0),
        ),
        i_b: nominal.i_b,
        v: nominal.v,
        g_b: nominal.g_b,
    }
}

fn finite_difference(
    c: &GstcConfig,
    ctx: &DesignContext,
    cond: Condition,
    step: f64,
    edit: impl Fn(&mut GstcConfig, f64),
) -> f64 {
    let mut moved = *c;
    edit(&mut moved, step);
    evaluate(&moved, ctx).unwrap().margin(cond).margin
        - evaluate(c, ctx).unwrap().margin(cond).margin
}

/// FC1a rises with kappa1; FC2a falls with kappa1 and rises with kappa2;
/// FC3a falls with kappa2 and rises with u_bar; FC1b falls with pX and dX.
pub fn margins_are_monotone_in_their_parameters() {
    let nominal = glyctube::patient::nominal_params();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..10_000 {
        let c = random_config(&mut rng);
        let ctx = random_context(&mut rng, &nominal);
        let h = |scale: f64, rng: &mut ChaCha8Rng| scale * rng.random_range(0.01..1.0);

        let dk1 = h(1e-3, &mut rng);
        assert!(
            finite_difference(&c, &ctx, Condition::Fc1a, dk1, |c, d| c.kappa1 += d) > 0.0,
            "case {case}"
        );
        assert!(
            finite_difference(&c, &ctx, Condition::Fc2a, dk1, |c, d| c.kappa1 += d) < 0.0,
            "case {case}"
        );

        let dk2 = h(1.0, &mut rng);
        assert!(
            finite_difference(&c, &ctx, Condition::Fc2a, dk2, |c, d| c.kappa2 += d) > 0.0,
            "case {case}"
        );
        assert!(
            finite_difference(&c, &ctx, Condition::Fc3a, dk2, |c, d| c.kappa2 += d) < 0.0,
            "case {case}"
        );

        let du = h(10.0, &mut rng);
        assert!(
            finite_difference(&c, &ctx, Condition::Fc3a, du, |c, d| c.u_bar += d) > 0.0,
            "case {case}"
        );

        let dp = h(1e-3, &mut rng);
        assert!(
            finite_difference(&c, &ctx, Condition::Fc1b, dp, |c, d| c.funnel_x.p += d) < 0.0,
            "case {case}"
        );

        let mut wider = ctx;
        wider.deltas.1 += h(1e-4, &mut rng);
        let (a, b) = (evaluate(&c, &ctx).unwrap(), evaluate(&c, &wider).unwrap());
        assert!(
            b.margin(Condition::Fc1b).margin < a.margin(Condition::Fc1b).margin,
            "case {case}"
        );
    }
}

pub fn synthesized_design_passes_the_checker() {
    let (s, ctx) = synthetic();
    let result = synthesize_gains(&s.synthesis_problem(ctx.deltas), &s.synthesis.grid).unwrap();
    assert!(result.feasible);
    let report = evaluate(&result.config, &ctx).unwrap();
    assert!(report.pass);
    assert_eq!(report, result.report);
}

pub fn zero_pump_limit_binds_fc3a() {
    let (s, ctx) = synthetic();
    let mut c = s.controller.gstc;
    c.u_bar = 0.0;
    let report = evaluate(&c, &ctx).unwrap();
    assert!(!report.pass);
    assert_eq!(report.binding, Condition::Fc3a);
    assert_eq!(report.failing(), vec![Condition::Fc3a]);
}

pub fn widening_the_box_eventually_fails_fc1b() {
    let (s, ctx) = synthetic();
    let c = s.controller.gstc;
    let mut prev = f64::INFINITY;
    let mut flipped = None;
    for k in 0..=100 {
        let frac = 0.05 + 0.009 * k as f64;
        let ctx = DesignContext {
            param_bounds: ParamBounds::around(&s.nominal, frac),
            ..ctx
        };
        let m = evaluate(&c, &ctx).unwrap().margin(Condition::Fc1b).margin;
        assert!(m <= prev);
        prev = m;
        if m <= 0.0 {
            flipped = Some(frac);
            break;
        }
    }
    let frac = flipped.expect("FC1b never failed");
    // FC1b reads only the lower end of S_G
    let b = s.nominal.s_g * (1.0 - frac);
    let u = assemble_inputs(&c, &ctx).unwrap().0.uncertainty;
    assert!(-b * c.g_lower <= (c.funnel_x.p + u.delta_x) * (c.g_lower + s.nominal.g_b));
}

pub fn reference_rate_bound_dominates_simulated_rates() {
    let s = super::load("mc_combined");
    let deltas = super::deltas(&s);
    let c = s.controller.gstc;
    let rates = ref_rate_bounds(
        &c,
        &s.param_bounds(),
        s.disturbance_bound(),
        s.nominal.g_b,
        deltas,
    )
    .unwrap();
    let est = s
        .estimator
        .setup(&s.nominal, s.sim.ts_control, s.sim.cgm_noise_sigma);
    let ts = s.sim.ts_control;
    let worst = (0..100)
        .into_par_iter()
        .map(|k| {
            let inst = draw_instance(&s, k);
            let mut ctl = s
                .controller
                .build(s.controller.kind, &s.nominal, ts)
                .unwrap();
            let trace = run_closed_loop(
                &inst.patient,
                s.initial_state,
                ctl.as_mut(),
                &inst.protocol,
                &s.sim,
                &est,
            )
            .unwrap();
            let mut max = (0.0f64, 0.0f64);
            for w in trace.rows.windows(2) {
                max.0 = max.0.max((w[1].x_ref - w[0].x_ref).abs() / ts);
                max.1 = max.1.max((w[1].i_ref - w[0].i_ref).abs() / ts);
            }
            max
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    assert!(
        worst.0 > 0.0 && worst.0 <= rates.sup_xref_rate,
        "{} vs {}",
        worst.0,
        rates.sup_xref_rate
    );
    assert!(
        worst.1 <= rates.sup_iref_rate,
        "{} vs {}",
        worst.1,
        rates.sup_iref_rate
    );
}
