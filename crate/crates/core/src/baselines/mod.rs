//! Comparator controllers driven through the same step interface as the
//! safety tube controller.

pub mod lmpc;
pub mod pid_cbf;
pub mod smc;

pub use lmpc::{LmpcConfig, LmpcController};
pub use pid_cbf::{PidCbfConfig, PidCbfController};
pub use smc::{SmcConfig, SmcController};

use crate::patient::PatientParams;

/// Euler prediction of the nominal model in deviation coordinates with `u`
/// held constant. Returns the lowest absolute glucose over `steps` steps.
pub(crate) fn predicted_min_glucose(
    estimate: [f64; 3],
    u: f64,
    p: &PatientParams,
    dt: f64,
    steps: usize,
) -> f64 {
    let [mut g, mut x, mut i] = estimate;
    let mut lowest = g;
    for _ in 0..steps {
        let dg = -p.s_g * g - x * (g + p.g_b);
        let dx = -p.p2 * x + p.p3 * i;
        let di = -p.n * (i + p.i_b) + u / p.v;
        g += dt * dg;
        x = (x + dt * dx).max(0.0);
        i += dt * di;
        lowest = lowest.min(g);
    }
    lowest + p.g_b
}
