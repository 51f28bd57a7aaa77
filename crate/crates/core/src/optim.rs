//! Adam with linear warmup and global-norm gradient clipping.

use splm_autodiff::Scalar;

use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates over which the rate ramps linearly up to `lr`.
    pub warmup: u64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup: 100, clip: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Completed updates.
    pub t: u64,
    /// First and second moments per parameter, in store order; empty for frozen ones.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |p: &crate::params::Param<T>| if p.trainable() { vec![T::zero(); p.tensor.len()] } else { Vec::new() };
        Adam { config, t: 0, m: store.iter().map(zeros).collect(), v: store.iter().map(zeros).collect() }
    }

    /// Rate used by update number `t` (zero-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        let c = &self.config;
        if c.warmup == 0 {
            c.lr
        } else {
            c.lr * ((t + 1) as f64 / c.warmup as f64).min(1.0)
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> StepStats {
        let sq: f64 = store
            .iter()
            .filter_map(|p| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
            .sum();
        let grad_norm = sq.sqrt();
        let scale = if self.config.clip > 0.0 && grad_norm > self.config.clip { self.config.clip / grad_norm } else { 1.0 };
        let lr = self.lr_at(self.t);
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let scale = T::of(scale);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable() {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else { continue };
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] * scale;
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                data[i] = data[i] - step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        StepStats { lr, grad_norm }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn warmup_is_linear_then_flat() {
        let store = ParamStore::<f64>::new(0);
        let a = Adam::new(&store, AdamConfig::default());
        assert!((a.lr_at(0) - 3e-6).abs() < 1e-18);
        assert!((a.lr_at(49) - 1.5e-4).abs() < 1e-15);
        assert_eq!(a.lr_at(99), 3e-4);
        assert_eq!(a.lr_at(5000), 3e-4);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // with bias correction the first Adam step is lr * sign(g) up to eps
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("x", vec![3], Init::Zeros, true).unwrap();
        store.get_mut(id).accumulate_grad(&[0.2, -0.1, 0.0]);
        let mut a = Adam::new(&store, AdamConfig { warmup: 0, lr: 0.01, ..Default::default() });
        let s = a.step(&mut store);
        assert!((s.grad_norm - 0.05f64.sqrt()).abs() < 1e-15);
        let x = store.get(id).data();
        assert!((x[0] + 0.01).abs() < 1e-9 && (x[1] - 0.01).abs() < 1e-9 && x[2] == 0.0);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn clipping_bounds_the_update_direction_not_sign() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("x", vec![1], Init::Zeros, true).unwrap();
        store.get_mut(id).accumulate_grad(&[100.0]);
        let mut a = Adam::new(&store, AdamConfig { warmup: 0, ..Default::default() });
        let s = a.step(&mut store);
        assert_eq!(s.grad_norm, 100.0);
        // clipped gradient is 1.0; first moment after one step is 0.1
        assert!((a.m[0][0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("x", vec![2], Init::Ones, false).unwrap();
        let mut a = Adam::new(&store, AdamConfig::default());
        a.step(&mut store);
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
    }
}
