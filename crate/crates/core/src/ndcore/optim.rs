use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::SgdMomentum { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }

    pub fn build(&self) -> Optimizer {
        Optimizer {
            config: self.clone(),
            first: HashMap::new(),
            second: HashMap::new(),
            steps: HashMap::new(),
        }
    }
}

/// Stateful optimizer over a subset of a [`ParamStore`].
///
/// Each call to [`Optimizer::step`] updates the listed parameters in place
/// and zeroes their gradients.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: HashMap<ParamId, Tensor>,
    second: HashMap<ParamId, Tensor>,
    steps: HashMap<ParamId, i32>,
}

impl Optimizer {
    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.config {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr = new_lr,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId]) -> Result<()> {
        if let Some(bad) = params.iter().find(|&&id| !store.grad(id).is_finite()) {
            return Err(Error::NonFiniteGradient(store.name(*bad).to_string()));
        }
        for &id in params {
            match self.config {
                OptimizerConfig::SgdMomentum { lr, momentum } => {
                    let (value, grad) = store.value_and_grad_mut(id);
                    let vel = self
                        .first
                        .entry(id)
                        .or_insert_with(|| Tensor::zeros(value.shape()));
                    for ((p, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let (value, grad) = store.value_and_grad_mut(id);
                    let m = self
                        .first
                        .entry(id)
                        .or_insert_with(|| Tensor::zeros(value.shape()));
                    let v = self
                        .second
                        .entry(id)
                        .or_insert_with(|| Tensor::zeros(value.shape()));
                    let t = self.steps.entry(id).or_insert(0);
                    *t += 1;
                    let c1 = 1.0 - beta1.powi(*t);
                    let c2 = 1.0 - beta2.powi(*t);
                    for (((p, g), m), v) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grad_of(params);
        Ok(())
    }
}
