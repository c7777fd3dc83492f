//! AdamW with decoupled weight decay, and the cosine step-size schedule.

use std::f64::consts::PI;

use super::nn::Real;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
        }
    }

    /// One update at step size `lr`. Decay is applied to the parameters
    /// directly (`θ ← θ(1 − lr·λ)`), not folded into the gradient.
    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.t));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t));
        let lr_t = T::of(lr);
        let decay = T::of(1.0 - lr * self.weight_decay);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *p = *p * decay;
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Step size for `epoch` (0-based) of `epochs`, annealed from `base` towards 0.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    0.5 * base * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 30), 1e-3);
        assert!((cosine_lr(1e-3, 15, 30) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 29, 30) > 0.0);
        assert!(cosine_lr(1e-3, 29, 30) < 1e-5);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = AdamW::<f64>::new(2, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.3, -5.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        // Zero gradient: only the multiplicative decay acts.
        let mut opt = AdamW::<f64>::new(1, 0.1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.5);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::<f64>::new(1, 0.0);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step(&mut p, &g, 0.01);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
