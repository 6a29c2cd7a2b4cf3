use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f64| (0.0..1.0).contains(&b);
        if !ok_beta(self.beta1) || !ok_beta(self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "adam eps must be positive and weight_decay non-negative".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are kept for every parameter slot of
/// the store; non-trainable slots stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Global L2 norm of the stored trainable gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let clip = match self.config.clip_norm {
            Some(c) => {
                let norm = Self::grad_norm(store);
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let k = id.index();
            let p = store.get_mut(id);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i] * clip + weight_decay * value[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamId;

    fn store_with_grad(grad: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let n = grad.len();
        let id = store.add("w", Tensor::vector(vec![0.5; n]), true);
        store.get_mut(id).grad = Tensor::vector(grad);
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-3;
        let (mut store, id) = store_with_grad(vec![0.3, -2.0, 1e-4, -7.5]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, lr).unwrap();
        let grads = [0.3, -2.0, 1e-4, -7.5];
        for (after, g) in store.value(id).data().iter().zip(grads) {
            let delta = after - 0.5;
            assert_eq!(delta.signum(), -f64::signum(g));
            assert!(delta.abs() >= 0.99 * lr && delta.abs() <= lr, "{delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = store_with_grad(vec![0.0; 3]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, 1e-2).unwrap();
        assert_eq!(store.value(id).data(), &[0.5; 3]);
    }

    #[test]
    fn zero_lr_advances_moments_only() {
        let (mut store, id) = store_with_grad(vec![1.0, -1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, 0.0).unwrap();
        assert_eq!(store.value(id).data(), &[0.5, 0.5]);
        assert_eq!(adam.step, 1);
        assert!((adam.m[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((adam.v[0].data()[1] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, _) = store_with_grad(vec![f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        match adam.update(&mut store, 1e-3) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn identical_inputs_identical_trajectories() {
        let run = || {
            let (mut store, id) = store_with_grad(vec![0.2, -0.7]);
            let mut adam = Adam::new(AdamConfig::default(), &store);
            for k in 0..5 {
                store.get_mut(id).grad = Tensor::vector(vec![0.1 * k as f64, -0.3]);
                adam.update(&mut store, 1e-2).unwrap();
            }
            store.value(id).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_effective_gradient() {
        let (mut store, _) = store_with_grad(vec![3.0, 4.0]);
        let config = AdamConfig {
            clip_norm: Some(1.0),
            ..Default::default()
        };
        let mut adam = Adam::new(config, &store);
        adam.update(&mut store, 0.0).unwrap();
        assert!((adam.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((adam.m[0].data()[1] - 0.1 * 0.8).abs() < 1e-15);
    }
}
