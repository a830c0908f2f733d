use glyctube::baselines::lmpc::{qp_cost, solve_box_qp, LmpcConfig, LmpcController};
use glyctube::baselines::pid_cbf::{pid_cbf_step, PidCbfConfig, PidMemory};
use glyctube::config::{ControllerKind, ControllerSpec};
use glyctube::patient::nominal_params;
use glyctube::sim::Observation;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact minimizer of a two-variable box QP by checking every face: each
/// coordinate is at its lower bound, its upper bound or free.
fn enumerate_faces(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    let mut best: Option<(f64, DVector<f64>)> = None;
    for a in 0..3 {
        for b in 0..3 {
            let fix = |s: usize, k: usize| match s {
                0 => Some(lo[k]),
                1 => Some(hi[k]),
                _ => None,
            };
            let (x0, x1) = (fix(a, 0), fix(b, 1));
            let x = match (x0, x1) {
                (Some(p), Some(q)) => [p, q],
                (Some(p), None) => [p, -(f[1] + h[(1, 0)] * p) / h[(1, 1)]],
                (None, Some(q)) => [-(f[0] + h[(0, 1)] * q) / h[(0, 0)], q],
                (None, None) => {
                    let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
                    [
                        (-f[0] * h[(1, 1)] + f[1] * h[(0, 1)]) / det,
                        (-f[1] * h[(0, 0)] + f[0] * h[(1, 0)]) / det,
                    ]
                }
            };
            let x = DVector::from_column_slice(&x);
            let inside = (0..2).all(|k| x[k] >= lo[k] - 1e-12 && x[k] <= hi[k] + 1e-12);
            if !inside {
                continue;
            }
            let c = qp_cost(h, f, &x);
            if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                best = Some((c, x));
            }
        }
    }
    best.expect("corners are always feasible").1
}

fn solve(h: &DMatrix<f64>, f: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    let l = h.symmetric_eigenvalues().max();
    solve_box_qp(
        h,
        f,
        lo,
        hi,
        &DVector::zeros(2),
        l,
        1.0,
        200_000,
        1e-14,
        false,
    )
    .x
}

pub fn projected_gradient_matches_face_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..2000 {
        let m = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
        let h = &m * m.transpose() + DMatrix::identity(2, 2) * rng.random_range(0.05..1.0);
        let f = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
        let lo = DVector::from_fn(2, |_, _| rng.random_range(-3.0..0.0));
        let hi = DVector::from_fn(2, |k, _| lo[k] + rng.random_range(0.0..3.0));
        let (got, want) = (solve(&h, &f, &lo, &hi), enumerate_faces(&h, &f, &lo, &hi));
        assert!((&got - &want).amax() < 1e-6, "case {case}: {got} vs {want}");
    }
}

pub fn horizon_two_controller_qp_matches_face_enumeration() {
    let cfg = LmpcConfig {
        horizon: 2,
        ..LmpcConfig::default()
    };
    let c = LmpcController::new(cfg, nominal_params(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let est = [
            rng.random_range(-60.0..200.0),
            rng.random_range(0.0..0.05),
            rng.random_range(-7.0..60.0),
        ];
        let (h, f, lo, hi) = c.qp(est);
        let (got, want) = (solve(&h, &f, &lo, &hi), enumerate_faces(&h, &f, &lo, &hi));
        assert!((&got - &want).amax() < 1e-6, "{est:?}: {got} vs {want}");
    }
}

pub fn pid_barrier_never_raises_the_input() {
    let p = nominal_params();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let cfg = PidCbfConfig {
            kp: rng.random_range(0.0..5.0),
            ki: rng.random_range(0.0..0.05),
            kd: rng.random_range(0.0..5.0),
            ..PidCbfConfig::default()
        };
        let mut memory = PidMemory {
            integral: rng.random_range(-5000.0..5000.0),
            prev_error: rng
                .random_bool(0.8)
                .then(|| rng.random_range(-100.0..200.0)),
        };
        let est = [
            rng.random_range(-80.0..300.0),
            rng.random_range(0.0..0.1),
            rng.random_range(-7.0..200.0),
        ];
        let out = pid_cbf_step(est, 1.0, &mut memory, &cfg, &p);
        assert!(out.u >= 0.0 && out.u <= cfg.u_bar, "{out:?}");
        assert!(out.u <= out.u_pid.clamp(0.0, cfg.u_bar), "{out:?}");
    }
}

pub fn lmpc_cost_never_increases() {
    let mut c = LmpcController::new(LmpcConfig::default(), nominal_params(), 1.0).unwrap();
    c.record_cost = true;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let est = [
            rng.random_range(-60.0..200.0),
            rng.random_range(0.0..0.05),
            rng.random_range(-7.0..60.0),
        ];
        c.solve(est);
        let hist = &c.last_solution.as_ref().unwrap().cost_history;
        for w in hist.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0),
                "{} -> {}",
                w[0],
                w[1]
            );
        }
    }
}

/// Raw controller outputs on random estimates, before the engine clamp.
pub fn baselines_respect_pump_range() {
    let p = nominal_params();
    let spec = ControllerSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for kind in [
        ControllerKind::PidCbf,
        ControllerKind::Smc,
        ControllerKind::Lmpc,
    ] {
        let mut c = spec.build(kind, &p, 1.0).unwrap();
        for step in 0..2000 {
            let obs = Observation {
                step,
                t: step as f64,
                estimate: [
                    rng.random_range(-80.0..300.0),
                    rng.random_range(0.0..0.1),
                    rng.random_range(-7.0..200.0),
                ],
            };
            let u = c.step(&obs).unwrap().u;
            assert!((0.0..=144.0).contains(&u), "{kind}: {u}");
        }
    }
}
