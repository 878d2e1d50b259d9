use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};

/// Bias-corrected Adam. Moments are kept in `f64` regardless of parameter
/// precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = (0..params.len())
            .map(|i| vec![0.0; params.value(i).len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let grad: Vec<f64> = params.grad(i).iter().map(|g| g.to_f64()).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = params.value_mut(i).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                value[j] = T::from_f64(value[j].to_f64() - update);
            }
        }
    }
}

/// Reduce-on-plateau learning-rate schedule driven by a monitored loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    pub best: f64,
    pub epochs_since_improvement: usize,
    pub history: Vec<f64>,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
            threshold: 1e-6,
            best: f64::INFINITY,
            epochs_since_improvement: 0,
            history: Vec::new(),
        }
    }

    /// Records one epoch's monitored loss and returns the (possibly reduced) rate.
    pub fn step(&mut self, loss: f64) -> f64 {
        self.history.push(loss);
        if loss < self.best - self.threshold {
            self.best = loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.epochs_since_improvement = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        p.grad_mut(0)[0] = 1.0;
        let mut adam = AdamState::new(&p, 1e-4);
        adam.step(&mut p);
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p.value(0).data()[0] - expected).abs() < 1e-15);
        assert!((p.value(0).data()[0] + 9.99999e-5).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(0.7);
        let mut adam = AdamState::new(&p, 1e-3);
        for _ in 0..5 {
            adam.step(&mut p);
        }
        assert_eq!(p.value(0).data()[0], 0.7);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = scalar_store(1.0);
            let mut adam = AdamState::new(&p, 1e-2);
            for i in 0..10 {
                p.zero_grads();
                p.grad_mut(0)[0] = 2.0 * p.value(0).data()[0] + (i as f64).sin();
                adam.step(&mut p);
            }
            p.value(0).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_keeps_lr_while_improving() {
        let mut s = PlateauScheduler::new(1e-3);
        for i in 0..20 {
            assert_eq!(s.step(1.0 / (i + 1) as f64), 1e-3);
        }
    }

    #[test]
    fn plateau_reduces_once_after_patience() {
        let mut s = PlateauScheduler::new(1e-3);
        let lrs: Vec<f64> = (0..6).map(|_| s.step(0.5)).collect();
        assert_eq!(&lrs[..5], &[1e-3; 5]);
        assert_eq!(lrs[5], 5e-4);
    }

    #[test]
    fn plateau_respects_floor() {
        let mut s = PlateauScheduler::new(1e-6);
        for _ in 0..50 {
            assert_eq!(s.step(1.0), 1e-6);
        }
        let mut s = PlateauScheduler::new(1.5e-6);
        for _ in 0..50 {
            s.step(1.0);
        }
        assert_eq!(s.lr, 1e-6);
    }

    #[test]
    fn plateau_never_increases() {
        let mut s = PlateauScheduler::new(1e-2);
        let mut last = s.lr;
        for i in 0..200 {
            let lr = s.step(((i * 37) % 11) as f64);
            assert!(lr <= last);
            last = lr;
        }
    }
}
