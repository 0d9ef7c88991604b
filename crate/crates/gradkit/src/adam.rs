use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    shapes: Vec<Vec<usize>>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update using each parameter's accumulated
    /// gradient (a missing gradient counts as zero).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(Error::Usage(format!(
                "adam: state tracks {} parameters, got {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for (p, shape) in params.iter().zip(&self.shapes) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Usage(format!(
                    "adam: parameter shape {:?} does not match state shape {shape:?}",
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.epsilon));
        let one = T::one();
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);
        for ((param, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = param.grad().map(<[T]>::to_vec);
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
