use serde::{Deserialize, Serialize};

use crate::layers::{Grads, Param};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter slot.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[&Param<T>]) -> Self {
        let OptimizerKind::Adam { beta1, beta2, eps } = kind;
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect::<Vec<_>>();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates only the listed slots; all others are left untouched.
    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &Grads<T>, slots: &[usize]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for &s in slots {
            let g = &grads.bufs[s];
            let (m, v) = (&mut self.m[s], &mut self.v[s]);
            for (i, w) in params[s].value.iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                *w = *w - step_size * m[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = Param::<f32>::zeros("w", vec![3]);
        p.value = vec![0.5, -1.0, 2.0];
        let before = p.value.clone();
        let grads = Grads::zeros_like(&[&p]);
        let mut opt = Adam::new(OptimizerKind::default(), 1e-3, &[&p]);
        opt.step(&mut [&mut p], &grads, &[0]);
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::<f64>::zeros("w", vec![2]);
        let mut grads = Grads::zeros_like(&[&p]);
        grads.bufs[0] = vec![3.0, -0.25];
        let mut opt = Adam::new(OptimizerKind::default(), 0.01, &[&p]);
        opt.step(&mut [&mut p], &grads, &[0]);
        assert!((p.value[0] + 0.01).abs() < 1e-8);
        assert!((p.value[1] - 0.01).abs() < 1e-8);
    }
}
