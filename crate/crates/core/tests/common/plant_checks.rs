use glyctube::patient::{nominal_params, MealEvent, MealProtocol, PlantState};
use glyctube::sim::integrate_step;

/// Largest relative gap to `50 e^(-s_g t)` over ten hours at `dt = 0.1`.
pub fn insulin_free_decay_error() -> f64 {
    let p = nominal_params();
    let none = MealProtocol::default();
    let mut s = PlantState::new(50.0, 0.0, 0.0);
    let mut worst = 0.0f64;
    for k in 0..600 {
        s = integrate_step(s, &p, p.basal_infusion(), &none, k as f64, 1.0, 0.1).unwrap();
        let exact = 50.0 * (-p.s_g * (k + 1) as f64).exp();
        worst = worst.max((s.g - exact).abs() / exact);
    }
    worst
}

fn meal_response(dt: f64) -> PlantState {
    let p = nominal_params();
    let meal = MealProtocol::new(
        vec![MealEvent {
            start_time: 0.0,
            carbs: 60.0,
        }],
        Default::default(),
    );
    integrate_step(PlantState::BASAL, &p, 30.0, &meal, 0.0, 120.0, dt).unwrap()
}

/// Observed convergence orders from successive dt halvings against a fine
/// reference, on a meal response with insulin above basal.
pub fn convergence_slopes() -> Vec<f64> {
    let reference = meal_response(1.0 / 256.0);
    let err = |dt: f64| {
        let s = meal_response(dt);
        (s.g - reference.g).abs()
    };
    let dts = [4.0, 2.0, 1.0, 0.5];
    dts.windows(2)
        .map(|w| (err(w[0]) / err(w[1])).log2())
        .collect()
}

pub fn decay_matches_closed_form() {
    let e = insulin_free_decay_error();
    assert!(e < 1e-8, "{e}");
}

pub fn rk4_is_fourth_order() {
    for s in convergence_slopes() {
        assert!((s - 4.0).abs() <= 0.2, "slope {s}");
    }
}
