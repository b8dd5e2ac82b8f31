//! Adam with linear warmup and a single step decay.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    /// Fraction of steps spent warming up linearly from `0.1·base_lr`.
    pub warmup_frac: f64,
    /// Fraction of steps after which the rate is multiplied by `decay`.
    pub decay_at: f64,
    pub decay: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            total_steps,
            warmup_frac: 0.1,
            decay_at: 0.75,
            decay: 0.1,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warmup = (self.warmup_frac * total).floor();
        let s = step as f64;
        let mut lr = self.base_lr;
        if s < warmup {
            lr *= 0.1 + 0.9 * s / warmup;
        }
        if s >= (self.decay_at * total).floor() {
            lr *= self.decay;
        }
        lr
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1.0, 100);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!(s.lr(5) > s.lr(0) && s.lr(5) < 1.0);
        assert_eq!(s.lr(10), 1.0);
        assert_eq!(s.lr(74), 1.0);
        assert!((s.lr(75) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut params = vec![Tensor::from_vec(vec![0.3, -1.7, 2.0])];
        let before = params.clone();
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &[Tensor::from_vec(vec![1.0, -2.0, 0.0])], 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = vec![Tensor::from_vec(vec![3.0, -2.0])];
        let mut adam = Adam::new(&params);
        for _ in 0..2000 {
            let g = Tensor::from_vec(params[0].data().iter().map(|x| 2.0 * x).collect());
            adam.step(&mut params, &[g], 0.05);
        }
        assert!(params[0].l2_norm() < 1e-3);
    }
}
