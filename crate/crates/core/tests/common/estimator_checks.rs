use glyctube::estimator::{
    is_psd, joseph_update, predict, predict_mean, update, EkfConfig, EkfState, Mat3, Vec3,
};
use glyctube::patient::nominal_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn joseph_keeps_covariance_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scales = Vec3::new(10.0, 1e-3, 3.0);
    for case in 0..100_000 {
        let m = Mat3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let d = Mat3::from_diagonal(&scales);
        let sigma = d * m * m.transpose() * d;
        let k = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let r = 10f64.powf(rng.random_range(-3.0..2.0));
        let out = joseph_update(&sigma, &k, r);
        assert!(
            out == out.transpose() || (out - out.transpose()).amax() <= 1e-12 * out.amax(),
            "case {case}"
        );
        assert!(is_psd(&out, 1e-12), "case {case}: {out}");
    }
}

fn random_input(rng: &mut ChaCha8Rng, basal: f64) -> f64 {
    if rng.random_bool(0.7) {
        basal
    } else {
        rng.random_range(0.0..144.0)
    }
}

/// Filter driven by its own noise-free model never leaves the true state,
/// up to the rounding of the `g_b` offset in the reading. Returns the largest
/// estimation error seen.
pub fn noise_free_filter_tracks_exactly() -> f64 {
    let p = nominal_params();
    let config = EkfConfig::new(p, 1.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut x = Vec3::new(
            rng.random_range(-20.0..60.0),
            rng.random_range(0.0..0.02),
            rng.random_range(-5.0..30.0),
        );
        let mut filter = EkfState::new(x, config.q);
        for _ in 0..5000 {
            filter = update(&filter, x[0] + p.g_b, &config).unwrap();
            worst = worst.max((filter.x_hat - x).amax());
            let u = random_input(&mut rng, p.basal_infusion());
            x = predict_mean(&x, u, &p, config.ts);
            filter = predict(&filter, u, &config);
        }
    }
    assert!(worst < 1e-12, "{worst}");
    worst
}

/// Fraction of steps, worst component, where the true state sits inside the
/// filter's three-sigma box on a plant that matches the filter's model.
pub fn three_sigma_coverage(steps: usize) -> f64 {
    let p = nominal_params();
    let sigma_cgm = 2.0;
    let config = EkfConfig::new(p, 1.0, sigma_cgm);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let chol = config.q.cholesky().unwrap().l();
    let mut x = Vec3::zeros();
    let mut filter = EkfState::new(x, config.q);
    let mut inside = [0usize; 3];
    for k in 0..steps {
        let v: f64 = StandardNormal.sample(&mut rng);
        filter = update(&filter, x[0] + p.g_b + sigma_cgm * v, &config).unwrap();
        for (c, count) in inside.iter_mut().enumerate() {
            if (filter.x_hat[c] - x[c]).abs() <= 3.0 * filter.sigma[(c, c)].sqrt() {
                *count += 1;
            }
        }
        if k + 1 == steps {
            break;
        }
        let u = random_input(&mut rng, p.basal_infusion());
        let w = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        x = predict_mean(&x, u, &p, config.ts) + chol * w;
        filter = predict(&filter, u, &config);
    }
    inside
        .iter()
        .map(|&c| c as f64 / steps as f64)
        .fold(1.0, f64::min)
}

pub fn coverage_reaches_99_percent() {
    let c = three_sigma_coverage(100_000);
    assert!(c >= 0.99, "{c}");
}
