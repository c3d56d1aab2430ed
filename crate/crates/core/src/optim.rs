//! First-order optimizers over a model's parameter list.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid optimizer setting {field}: {reason}")]
pub struct OptimError {
    pub field: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// `v ← μ·v + g`, `θ ← θ − lr·v`.
    SgdMomentum { lr: f64, momentum: f64 },
    /// Bias-corrected Adam.
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::SgdMomentum { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        match Self::default() {
            Self::Adam { beta1, beta2, eps, .. } => Self::Adam { lr, beta1, beta2, eps },
            other => other,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::SgdMomentum { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let err = |field, reason: &str| {
            Err(OptimError {
                field,
                reason: reason.to_string(),
            })
        };
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return err("lr", "must be positive and finite");
        }
        match *self {
            Self::SgdMomentum { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return err("momentum", "must lie in [0, 1)");
                }
            }
            Self::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) {
                    return err("beta1", "must lie in [0, 1)");
                }
                if !(0.0..1.0).contains(&beta2) {
                    return err("beta2", "must lie in [0, 1)");
                }
                if !(eps > 0.0) {
                    return err("eps", "must be positive");
                }
            }
        }
        Ok(())
    }
}

/// Optimizer state. Moments are kept in `f64` regardless of the parameter
/// type.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Vec<Vec<f64>>>,
    second: Vec<Vec<Vec<f64>>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn ensure_state<T: Scalar>(&mut self, params: &[Vec<Tensor<T>>]) {
        if self.first.len() == params.len() {
            return;
        }
        let zeros: Vec<Vec<Vec<f64>>> = params
            .iter()
            .map(|layer| layer.iter().map(|t| vec![0.0; t.len()]).collect())
            .collect();
        self.first = zeros.clone();
        if matches!(self.cfg, OptimizerConfig::Adam { .. }) {
            self.second = zeros;
        }
    }

    /// One update of `params` from `grads` (laid out like the parameters).
    pub fn step<T: Scalar>(&mut self, params: &mut [Vec<Tensor<T>>], grads: &Gradients<T>) {
        self.ensure_state(params);
        self.steps += 1;
        let t = self.steps as i32;
        for (l, layer) in params.iter_mut().enumerate() {
            for (k, tensor) in layer.iter_mut().enumerate() {
                let g = grads.layers[l][k].data();
                let w = tensor.data_mut();
                let m = &mut self.first[l][k];
                match self.cfg {
                    OptimizerConfig::SgdMomentum { lr, momentum } => {
                        for i in 0..w.len() {
                            m[i] = momentum * m[i] + g[i].widen();
                            w[i] = T::narrow(w[i].widen() - lr * m[i]);
                        }
                    }
                    OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                        let v = &mut self.second[l][k];
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        for i in 0..w.len() {
                            let gi = g[i].widen();
                            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                            w[i] = T::narrow(w[i].widen() - update);
                        }
                    }
                }
            }
        }
    }
}
