//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { step: 0, m, v }
    }
}

/// One Adam update over `params`, in place. Increments the step counter first.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    lr: f32,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(alloc::format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::powf(cfg.beta1, t as f32);
    let bc2 = 1.0 - libm::powf(cfg.beta2, t as f32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![p.len()],
                rhs: vec![g.len()],
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (math::sqrtf(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut Vec<f32>, g: &[f32], st: &mut AdamState, lr: f32) {
        adam_step(&mut [p.as_mut_slice()], &[g], st, lr, AdamConfig::default()).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0];
        let mut st = AdamState::new([2]);
        for _ in 0..10 {
            step(&mut p, &[0.0, 0.0], &mut st, 0.1);
        }
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new([2]);
        for _ in 0..100 {
            step(&mut p, &[0.3, -2.0], &mut st, 0.01);
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        // t = 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        let lr = 1e-3;
        let g = [0.7f32, -0.02, 3.0];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new([3]);
        step(&mut p, &g, &mut st, lr);
        for (pv, gv) in p.iter().zip(g) {
            let expected = -(lr as f64) * (gv as f64) / ((gv as f64).abs() + 1e-8);
            assert!((*pv as f64 - expected).abs() < 1e-6);
            assert!((*pv as f64 + lr as f64 * gv.signum() as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_lengths_error() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new([2]);
        let r = adam_step(&mut [p.as_mut_slice()], &[&[1.0][..]], &mut st, 0.1, AdamConfig::default());
        assert!(r.is_err());
    }
}
