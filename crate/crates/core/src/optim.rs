//! AdamW with decoupled weight decay and linear warmup.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent ramping the learning rate up from 0.
    pub warmup_fraction: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
        }
    }
}

impl AdamWConfig {
    /// Learning rate at `global_step` (0-based): linear ramp from 0 over the
    /// first `warmup_fraction * total_steps` steps, then constant.
    pub fn lr_at(&self, global_step: u64, total_steps: u64) -> f64 {
        let warmup = libm::ceil(self.warmup_fraction * total_steps as f64) as u64;
        if warmup == 0 || global_step >= warmup {
            self.lr
        } else {
            self.lr * global_step as f64 / warmup as f64
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let first: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::ZERO; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// Start zeroed moments for parameters added to `store` since creation.
    pub fn track_new_params(&mut self, store: &ParamStore<T>) {
        for (_, p) in store.iter().skip(self.first.len()) {
            self.first.push(vec![T::ZERO; p.value.len()]);
            self.second.push(vec![T::ZERO; p.value.len()]);
        }
    }

    /// One AdamW update of every non-frozen parameter. Frozen groups are left
    /// bit-identical. Returns the learning rate that was applied.
    pub fn step(&mut self, store: &mut ParamStore<T>, global_step: u64, total_steps: u64) -> Result<f64> {
        if self.first.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        let missing = store
            .iter()
            .find(|(id, p)| !store.is_frozen(*id) && p.grad.is_none())
            .map(|(_, p)| p.name.clone());
        if let Some(name) = missing {
            return Err(Error::MissingGradient(name));
        }

        let c = self.config;
        let lr = c.lr_at(global_step, total_steps);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);

        let frozen: Vec<bool> = store.iter().map(|(id, _)| store.is_frozen(id)).collect();
        for (i, p) in store.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let g = p.grad.as_deref().unwrap_or(&[]);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                *w *= decay;
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                *w -= step_size * m[j] / denom;
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    fn store_with(vals: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "w",
            ParamGroup::Head,
            Tensor::new(&[vals.len()], vals.to_vec()).unwrap(),
        );
        s
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let vals = [1.0f32, -2.5, 0.125, 7.0];
        let mut store = store_with(&vals);
        let cfg = AdamWConfig {
            lr: 0.001,
            weight_decay: 0.1,
            warmup_fraction: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &store);
        let id = store.find("w").unwrap();
        store.accumulate_grad(id, &[0.0; 4]);
        opt.step(&mut store, 0, 10).unwrap();
        let factor = 1.0f32 - (0.001f64 * 0.1) as f32;
        for (w, v) in store.value(id).data().iter().zip(vals) {
            assert_eq!(*w, v * factor);
            assert!(((*w / v) as f64 - 0.9999).abs() < 1e-7);
        }
    }

    #[test]
    fn warmup_starts_at_zero() {
        let cfg = AdamWConfig {
            warmup_fraction: 0.1,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0, 100), 0.0);
        assert!((cfg.lr_at(5, 100) - cfg.lr * 0.5).abs() < 1e-15);
        assert_eq!(cfg.lr_at(10, 100), cfg.lr);
        assert_eq!(cfg.lr_at(99, 100), cfg.lr);

        let vals = [0.5f32, 1.5];
        let mut store = store_with(&vals);
        let mut opt = OptimizerState::new(cfg, &store);
        let id = store.find("w").unwrap();
        store.accumulate_grad(id, &[3.0, -1.0]);
        assert_eq!(opt.step(&mut store, 0, 100).unwrap(), 0.0);
        assert_eq!(store.value(id).data(), &vals);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        // With a constant gradient the bias-corrected ratio m/sqrt(v) is 1,
        // so every step moves each weight by lr * sign(g).
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            eps: 1e-8,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Head, Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let mut opt = OptimizerState::new(cfg, &store);
        for step in 0..200 {
            let before = store.value(id).data().to_vec();
            store.zero_grad();
            store.accumulate_grad(id, &[0.3, -4.0]);
            opt.step(&mut store, step, 200).unwrap();
            let after = store.value(id).data();
            assert!((after[0] - before[0] + 0.01).abs() < 1e-6);
            assert!((after[1] - before[1] - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_gradient_is_an_error_and_frozen_groups_are_skipped() {
        let mut store = store_with(&[1.0, 2.0]);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &store);
        assert!(matches!(opt.step(&mut store, 0, 1), Err(Error::MissingGradient(_))));
        store.set_frozen(ParamGroup::Head, true);
        opt.step(&mut store, 5, 10).unwrap();
        assert_eq!(store.value(store.find("w").unwrap()).data(), &[1.0, 2.0]);
    }
}
