use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam with decoupled weight decay. State is keyed by parameter name, so
/// tensors that are never passed to [`AdamW::update`] never acquire state.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, state: BTreeMap::new() }
    }

    pub fn with_state(config: AdamWConfig, step: u64, state: BTreeMap<String, Moments<T>>) -> Self {
        AdamW { config, step, state }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    /// Advances the bias-correction counter; call once per optimization step before the updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(TensorError::shape("adamw", param.shape(), grad.shape()));
        }
        if self.step == 0 {
            return Err(TensorError::invalid("adamw", "update called before begin_step"));
        }
        let c = self.config;
        let moments = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: Tensor::zeros(param.shape()), v: Tensor::zeros(param.shape()) });
        let b1 = T::from_f64c(c.beta1);
        let b2 = T::from_f64c(c.beta2);
        let bc1 = T::from_f64c(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64c(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64c(c.lr);
        let decay = T::from_f64c(1.0 - c.lr * c.weight_decay);
        let eps = T::from_f64c(c.eps);
        let one = T::one();
        let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
        for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * sign(g) (eps aside).
        let mut opt = AdamW::<f64>::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.3, -5.0]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, &g).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((p.data()[1] - (-1.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_applies_with_zero_gradient() {
        let mut opt = AdamW::<f64>::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        let mut p = Tensor::new(&[1], vec![2.0]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, &Tensor::zeros(&[1])).unwrap();
        assert!((p.data()[0] - 2.0 * 0.95).abs() < 1e-12);
        assert_eq!(opt.state().len(), 1);
    }

    #[test]
    fn update_before_begin_step_is_rejected() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut p = Tensor::zeros(&[1]);
        assert!(opt.update("p", &mut p, &Tensor::zeros(&[1])).is_err());
    }
}
