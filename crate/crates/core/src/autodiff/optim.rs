use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts before any parameter
    /// is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Training {
                    step: self.step,
                    detail: format!("non-finite gradient for `{}`", store.name(id)),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for (id, g) in grads.iter() {
            let i = id.index();
            let theta = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..theta.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                theta[j] = theta[j] * decay - step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_f64(&[1], &[theta]).unwrap()).unwrap();
        let mut grads = GradMap::zeros_like(&store);
        grads.grads[0] = Tensor::from_f64(&[1], &[g]).unwrap();
        let cfg = AdamWConfig {
            lr,
            weight_decay: wd,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        opt.step(&mut store, &grads).unwrap();
        store.get(id).data()[0]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        assert_eq!(single(0.7, 0.0, 0.1, 0.0), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        assert!((single(0.0, 1.0, 0.1, 0.0) + 0.1).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay() {
        assert!((single(1.0, 0.0, 0.1, 1.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.add("enc.w", Tensor::zeros(&[2])).unwrap();
        let mut grads = GradMap::zeros_like(&store);
        grads.grads[0] = Tensor::from_f64(&[2], &[0.0, f64::NAN]).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let err = opt.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }
}
