//! Classical fixed-step Runge-Kutta.

use std::ops::{Add, Mul};

/// One RK4 step of `dy/dt = f(t, y)` from `(t, y)` with step `h`.
pub fn rk4_step<S, F>(f: &mut F, t: f64, y: S, h: f64) -> S
where
    S: Copy + Add<Output = S> + Mul<f64, Output = S>,
    F: FnMut(f64, S) -> S,
{
    let half = 0.5 * h;
    let k1 = f(t, y);
    let k2 = f(t + half, y + k1 * half);
    let k3 = f(t + half, y + k2 * half);
    let k4 = f(t + h, y + k3 * h);
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates over `[t0, t0 + steps * h]`, applying `post` after every step.
pub fn rk4_integrate<S, F, P>(f: &mut F, t0: f64, y0: S, h: f64, steps: usize, mut post: P) -> S
where
    S: Copy + Add<Output = S> + Mul<f64, Output = S>,
    F: FnMut(f64, S) -> S,
    P: FnMut(S) -> S,
{
    let mut y = y0;
    for k in 0..steps {
        y = post(rk4_step(f, t0 + k as f64 * h, y, h));
    }
    y
}
