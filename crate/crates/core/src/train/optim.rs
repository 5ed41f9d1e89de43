//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::real::Real;

/// Process-wide count of optimizer steps; lets tests assert that paths which
/// promise "no training" really perform none.
pub static OPTIMIZER_STEPS: AtomicU64 = AtomicU64::new(0);

pub fn optimizer_steps() -> u64 {
    OPTIMIZER_STEPS.load(Ordering::Relaxed)
}

/// Cosine anneal from `base_lr` at t=0 to zero at `t = total`, no warmup.
pub fn cosine_lr(base_lr: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: T,
    weight_decay: T,
}

impl<T: Real> AdamW<T> {
    pub fn new(param_sizes: &[usize], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            m: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            t: 0,
            beta1,
            beta2,
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(weight_decay),
        }
    }

    /// One update: `p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p)`.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), self.m.len(), "param group count changed");
        assert_eq!(grads.len(), self.m.len(), "grad group count changed");
        self.t += 1;
        OPTIMIZER_STEPS.fetch_add(1, Ordering::Relaxed);

        let lr_t = T::from_f64(lr);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.beta2);
        let inv_bc1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let inv_bc2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), m.len(), "param size changed");
            assert_eq!(g.len(), m.len(), "grad size changed");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_minus_b1 * g[i];
                v[i] = b2 * v[i] + one_minus_b2 * g[i] * g[i];
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                let update = mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i];
                p[i] -= lr_t * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0.1, 0, 100) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut opt = AdamW::<f64>::new(&[3], 0.9, 0.999, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, 0.1, -0.7];
        let before = p.clone();
        opt.step(0.0, &mut [&mut p], &[&g]);
        assert_eq!(p, before);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut opt = AdamW::<f64>::new(&[1], 0.9, 0.999, 0.0);
        let mut x = vec![0.0f64];
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 3.0)];
            opt.step(0.05, &mut [&mut x], &[&g]);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn step_counter_increments() {
        let before = optimizer_steps();
        let mut opt = AdamW::<f32>::new(&[1], 0.9, 0.999, 0.0);
        let mut p = vec![0.0f32];
        let g = vec![1.0f32];
        opt.step(0.01, &mut [&mut p], &[&g]);
        assert_eq!(optimizer_steps(), before + 1);
    }
}
