//! First-order optimizers over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, Default)]
pub struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        state: BTreeMap<String, AdamSlot>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::adam(0.9, 0.999, 1e-8),
        }
    }

    pub fn adam(beta1: f64, beta2: f64, eps: f64) -> Self {
        Optimizer::Adam {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter with `requires_grad` in place from its
    /// gradient buffer. Parameters without `requires_grad` are skipped;
    /// a trainable parameter without a gradient is an error.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor)>,
    {
        for (name, tensor) in params {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor
                .grad()
                .ok_or_else(|| {
                    Error::TrainingState(format!("trainable parameter `{name}` has no gradient"))
                })?
                .to_vec();
            if grad.len() != tensor.numel() {
                return Err(Error::TrainingState(format!(
                    "gradient of `{name}` has {} elements, parameter has {}",
                    grad.len(),
                    tensor.numel()
                )));
            }
            match self {
                Optimizer::Sgd => {
                    for (w, g) in tensor.data_mut().iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                Optimizer::Adam {
                    beta1,
                    beta2,
                    eps,
                    state,
                } => {
                    let slot = state.entry(name).or_insert_with(|| AdamSlot {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                        t: 0,
                    });
                    slot.t += 1;
                    let c1 = 1.0 - beta1.powi(slot.t);
                    let c2 = 1.0 - beta2.powi(slot.t);
                    for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        slot.m[i] = *beta1 * slot.m[i] + (1.0 - *beta1) * g;
                        slot.v[i] = *beta2 * slot.v[i] + (1.0 - *beta2) * g * g;
                        let m_hat = slot.m[i] / c1;
                        let v_hat = slot.v[i] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(w: f64, g: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![w]).unwrap().with_requires_grad(true);
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn sgd_step() {
        let mut p = param(0.0, 1.0);
        Optimizer::new(OptimizerKind::Sgd)
            .step([("w".to_string(), &mut p)], 0.1)
            .unwrap();
        assert_eq!(p.data(), &[-0.1]);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = param(0.7, 0.0);
            Optimizer::new(kind)
                .step([("w".to_string(), &mut p)], 0.1)
                .unwrap();
            assert_eq!(p.data(), &[0.7]);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // m_hat = g and v_hat = g^2 after one step, so the update is
        // lr * g / (|g| + eps).
        for g in [3.0, -0.02, 1e-3] {
            let mut p = param(1.0, g);
            let lr = 1e-2;
            Optimizer::new(OptimizerKind::Adam)
                .step([("w".to_string(), &mut p)], lr)
                .unwrap();
            let expected = 1.0 - lr * g / (f64::abs(g) + 1e-8);
            assert!((p.data()[0] - expected).abs() < 1e-15);
            assert!(((1.0 - p.data()[0]).abs() - lr).abs() < 1e-7);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap().with_requires_grad(true);
        let err = Optimizer::new(OptimizerKind::Sgd)
            .step([("w".to_string(), &mut p)], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::TrainingState(_)));

        let mut frozen = Tensor::new(vec![1], vec![0.0]).unwrap();
        Optimizer::new(OptimizerKind::Sgd)
            .step([("w".to_string(), &mut frozen)], 0.1)
            .unwrap();
    }
}
