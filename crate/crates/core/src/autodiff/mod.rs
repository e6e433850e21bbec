//! Reverse-mode differentiation over the engine's primitives.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] walks it once in reverse. Trainable tensors live in a
//! [`ParamStore`]; the tape only refers to them by [`ParamId`].

mod optim;
mod params;
mod tape;

pub use optim::{adam_step, adam_step_store, OptimState};
pub use params::{ParamId, ParamStore};
pub use tape::{Activation, Gradients, Mat, NodeGrads, Tape, Var, PROB_CLAMP};

use alloc::vec::Vec;

/// Central-difference gradient of `f` at `p`.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, p: &[f64], eps: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = q[i];
        q[i] = orig + eps;
        let hi = f(&q);
        q[i] = orig - eps;
        let lo = f(&q);
        q[i] = orig;
        g.push((hi - lo) / (2.0 * eps));
    }
    g
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over paired entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
