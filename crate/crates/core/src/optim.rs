//! Adam, early stopping and the edge-drop curriculum schedule.

use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment accumulators for one flat parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Bias-corrected Adam update. Parameters and moments are stored rounded to
/// `f32` so that single-precision checkpoints restore them exactly.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.len(), "parameter/state length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = (ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g) as f32 as f64;
        *v = (ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g) as f32 as f64;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = (*p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32 as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Index of the first maximum of `history`.
pub fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &x) in history.iter().enumerate() {
        if best.is_none_or(|b| x > history[b]) {
            best = Some(k);
        }
    }
    best
}

/// Stops once the best validation score is `patience` evaluations old.
pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    match best_index(history) {
        Some(best) if history.len() - 1 - best >= patience => StopDecision::Stop,
        _ => StopDecision::Continue,
    }
}

/// Linear ramp from 0 to `target` over the first half of training, flat
/// afterwards.
pub fn curriculum_drop_ratio(epoch: usize, total_epochs: usize, target: f64) -> f64 {
    let half = total_epochs as f64 / 2.0;
    if half <= 0.0 {
        return target;
    }
    target * (epoch as f64 / half).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_lr() {
        for g in [3.0, -0.02, 1e-3, -250.0] {
            let mut p = [0.0];
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, 1e-3);
            let update = p[0];
            assert_eq!(update.signum(), -g.signum());
            assert!(update.abs() >= 0.999 * 1e-3 && update.abs() <= 1e-3 * 1.0000001, "{update}");
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = [0.5f32 as f64, -1.25];
        let before = p;
        let mut st = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut x = [1.0];
        let mut st = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut st, 0.1);
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn early_stopping_rules() {
        let rising: Vec<f64> = (0..50).map(|k| k as f64).collect();
        for n in 1..=rising.len() {
            assert_eq!(early_stop(&rising[..n], 10), StopDecision::Continue);
        }
        let flat = vec![0.3; 11];
        assert_eq!(early_stop(&flat[..10], 10), StopDecision::Continue);
        assert_eq!(early_stop(&flat, 10), StopDecision::Stop);

        let h = [0.1, 0.2, 0.2, 0.2];
        assert_eq!(early_stop(&h[..3], 2), StopDecision::Continue);
        assert_eq!(early_stop(&h, 2), StopDecision::Stop);
        assert_eq!(best_index(&h), Some(1));
    }

    #[test]
    fn curriculum_schedule() {
        assert_eq!(curriculum_drop_ratio(0, 100, 0.15), 0.0);
        assert_eq!(curriculum_drop_ratio(50, 100, 0.15), 0.15);
        assert_eq!(curriculum_drop_ratio(25, 100, 0.2), 0.1);
        assert_eq!(curriculum_drop_ratio(90, 100, 0.2), 0.2);
    }
}
