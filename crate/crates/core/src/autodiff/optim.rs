use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::math::{powf, sqrt};

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Per-tensor multiplier on `lr`.
    pub lr_scale: Vec<f64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    /// Moments shaped like `params`, all zero.
    pub fn new(params: &[Vec<f64>], lr: f64, weight_decay: f64) -> Self {
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            lr_scale: vec![1.0; params.len()],
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One Adam step. Weight decay is applied first as `p -= lr * wd * p`.
pub fn adam_step(state: &mut OptimState, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.lr_scale.len() {
        return Err(Error::ShapeMismatch {
            what: "adam parameter count",
            expected: state.m.len(),
            got: grads.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::ShapeMismatch {
                what: "adam parameter shape",
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - powf(state.beta1, t);
    let bc2 = 1.0 - powf(state.beta2, t);
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    for ((((p, g), m), v), k) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v).zip(&state.lr_scale) {
        let lr = state.lr * k;
        for i in 0..p.len() {
            if wd != 0.0 {
                p[i] -= lr * wd * p[i];
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (sqrt(vh) + eps);
        }
    }
    Ok(())
}

pub fn adam_step_store(state: &mut OptimState, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
    adam_step(state, store.values_mut(), grads.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = vec![vec![1.0, -2.0], vec![0.5]];
        let before = p.clone();
        let mut s = OptimState::new(&p, 0.003, 0.0);
        let g = vec![vec![0.0, 0.0], vec![0.0]];
        adam_step(&mut s, &mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_lr_sign() {
        let mut p = vec![vec![1.0, 1.0, 1.0]];
        let mut s = OptimState::new(&p, 0.003, 0.0);
        let g = vec![vec![0.5, -2.0, 1e-3]];
        adam_step(&mut s, &mut p, &g).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        for (pi, gi) in p[0].iter().zip(&g[0]) {
            let expect = 1.0 - 0.003 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15);
            assert!((pi - (1.0 - 0.003 * gi.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn decoupled_decay_applied_first() {
        let mut p = vec![vec![2.0]];
        let mut s = OptimState::new(&p, 0.1, 0.01);
        adam_step(&mut s, &mut p, &[vec![0.0]]).unwrap();
        assert!((p[0][0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn decreases_convex_quadratic() {
        // f(p) = 0.5 * |p - c|^2, grad = p - c
        let c = [3.0, -1.0];
        let f = |p: &[f64]| 0.5 * ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2));
        let mut p = vec![vec![0.0, 0.0]];
        let mut s = OptimState::new(&p, 0.1, 0.0);
        let mut last = f(&p[0]);
        for _ in 0..2 {
            let g = vec![vec![p[0][0] - c[0], p[0][1] - c[1]]];
            adam_step(&mut s, &mut p, &g).unwrap();
            let now = f(&p[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![vec![1.0, 2.0]];
        let mut s = OptimState::new(&p, 0.1, 0.0);
        assert!(adam_step(&mut s, &mut p, &[vec![1.0]]).is_err());
        assert!(adam_step(&mut s, &mut p, &[]).is_err());
    }
}
