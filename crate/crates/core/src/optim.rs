//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of every trainable parameter. A parameter without a gradient
    /// entry is updated as if its gradient were zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step_with(params, |id| grads.param(id))
    }

    pub fn step_with<'g>(
        &mut self,
        params: &mut ParamStore<T>,
        grad_of: impl Fn(ParamId) -> Option<&'g Tensor<T>>,
    ) -> Result<()>
    where
        T: 'g,
    {
        if params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "optimizer tracks {} parameters, store has {}",
                    self.first_moment.len(),
                    params.len()
                ),
            ));
        }
        let ids: Vec<ParamId> = params.trainable_ids().collect();
        for &id in &ids {
            let shape = params.value(id).shape();
            if let Some(g) = grad_of(id) {
                if g.shape() != shape {
                    return Err(Error::shape(
                        "adam_step",
                        format!(
                            "{}: parameter {shape:?} vs gradient {:?}",
                            params.get(id).name,
                            g.shape()
                        ),
                    ));
                }
            }
            if self.first_moment[id.index()].shape() != shape {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: moment shape drift", params.get(id).name),
                ));
            }
        }

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let correction1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let correction2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.epsilon);

        for id in ids {
            let g = grad_of(id);
            let m = self.first_moment[id.index()].data_mut();
            let v = self.second_moment[id.index()].data_mut();
            let theta = params.value_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
