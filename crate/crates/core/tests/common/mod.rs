#![allow(dead_code, unused_imports)]

use std::path::PathBuf;

use glyctube::config::Scenario;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

pub fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name), &[]).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn deltas(s: &Scenario) -> (f64, f64, f64) {
    s.estimation_radii().unwrap()
}

pub mod baseline_checks;
pub mod estimator_checks;
pub mod feas;
pub mod metrics_oracle;
pub mod plant_checks;
