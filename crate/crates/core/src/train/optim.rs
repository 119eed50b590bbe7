//! Adaptive-moment optimizer with decoupled weight decay, and the step
//! learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-5 }
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { first: vec![0.0; n], second: vec![0.0; n] }
    }
}

impl AdamW {
    /// One update at 1-based `step_index`. Decay shrinks parameters directly by
    /// `lr · weight_decay` and never enters the moment estimates.
    pub fn step(
        &self,
        params: &mut [f64],
        grads: &[f64],
        moments: &mut Moments,
        step_index: u64,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || moments.first.len() != params.len() || moments.second.len() != params.len() {
            bail!(InvalidInput, "optimizer shapes disagree: {} params, {} grads", params.len(), grads.len());
        }
        if step_index == 0 {
            bail!(InvalidInput, "step index is 1-based");
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            bail!(NonFinite, "gradient entry {} is {}", i, grads[i]);
        }
        let c1 = 1.0 - libm::pow(self.beta1, step_index as f64);
        let c2 = 1.0 - libm::pow(self.beta2, step_index as f64);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * moments.first[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * moments.second[i] + (1.0 - self.beta2) * g * g;
            moments.first[i] = m;
            moments.second[i] = v;
            let update = (m / c1) / (libm::sqrt(v / c2) + self.epsilon);
            params[i] = params[i] * decay - lr * update;
        }
        Ok(())
    }
}

/// `lr_initial · 0.5^⌊(epoch − 1) / period⌋` for 1-based epochs; a zero period
/// disables halving.
pub fn learning_rate(lr_initial: f64, halving_period: u32, epoch: u32) -> f64 {
    if halving_period == 0 {
        return lr_initial;
    }
    let halvings = epoch.saturating_sub(1) / halving_period;
    lr_initial * libm::pow(0.5, halvings as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let opt = AdamW { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![1.0, -2.0, 3.5];
        let mut m = Moments::zeros(3);
        opt.step(&mut p, &[0.0; 3], &mut m, 1, 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let opt = AdamW { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![0.0, 0.0];
        let mut m = Moments::zeros(2);
        opt.step(&mut p, &[3.0, -0.25], &mut m, 1, 1e-2).unwrap();
        assert!((p[0] + 1e-2).abs() < 1e-9);
        assert!((p[1] - 1e-2).abs() < 1e-9);
        assert!(p[0].abs() < 1e-2);
    }

    #[test]
    fn decay_is_decoupled() {
        let opt = AdamW { weight_decay: 0.1, ..Default::default() };
        let mut p = vec![2.0];
        let mut m = Moments::zeros(1);
        for s in 1..=5 {
            opt.step(&mut p, &[0.0], &mut m, s, 0.5).unwrap();
        }
        assert!((p[0] - 2.0 * libm::pow(1.0 - 0.05, 5.0)).abs() < 1e-15);
        assert_eq!(m.first[0], 0.0);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut p = vec![0.0];
        let mut m = Moments::zeros(1);
        let r = AdamW::default().step(&mut p, &[f64::NAN], &mut m, 1, 1e-3);
        assert!(matches!(r, Err(crate::Error::NonFinite(_))));
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn schedule_halves_on_period_boundaries() {
        assert_eq!(learning_rate(1e-4, 20, 1), 1e-4);
        assert_eq!(learning_rate(1e-4, 20, 20), 1e-4);
        assert_eq!(learning_rate(1e-4, 20, 21), 5e-5);
        assert_eq!(learning_rate(1e-4, 20, 41), 2.5e-5);
        let mut prev = f64::INFINITY;
        for e in 1..100 {
            let lr = learning_rate(1e-3, 7, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
