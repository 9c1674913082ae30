use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamGrads;
use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::model::{ModelParams, CENTERS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Matrix,
    second: Matrix,
    steps: u64,
}

/// Per-tensor Adam moments keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of completed [`adam_step`] calls.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Matrix> {
        self.moments.get(name).map(|m| &m.first)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Matrix> {
        self.moments.get(name).map(|m| &m.second)
    }

    /// Bias-corrected Adam update of one tensor.
    pub fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix, lr: f64, cfg: &AdamConfig) {
        debug_assert_eq!(param.shape(), grad.shape());
        let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: Matrix::zeros(param.rows(), param.cols()),
            second: Matrix::zeros(param.rows(), param.cols()),
            steps: 0,
        });
        m.steps += 1;
        let t = m.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (first, second) = (m.first.data_mut(), m.second.data_mut());
        for (((p, &g), m1), m2) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(first.iter_mut())
            .zip(second.iter_mut())
        {
            *m1 = b1 * *m1 + (1.0 - b1) * g;
            *m2 = b2 * *m2 + (1.0 - b2) * g * g;
            *p -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// One optimizer step over every tensor of `params`.
///
/// Tensors without an entry in `grads` are updated with a zero gradient.
/// Cluster centers are skipped unless `update_centers`. Any non-finite
/// gradient aborts the step before a single parameter changes.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    update_centers: bool,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    for (name, tensor) in params.tensors_mut() {
        if name == CENTERS && !update_centers {
            continue;
        }
        match grads.get(&name) {
            Some(g) => {
                if g.shape() != tensor.shape() {
                    return Err(Error::Dimension {
                        op: "adam_step",
                        lhs: tensor.shape(),
                        rhs: g.shape(),
                    });
                }
                state.update(&name, tensor, g, lr, cfg);
            }
            None => {
                let zero = Matrix::zeros(tensor.rows(), tensor.cols());
                state.update(&name, tensor, &zero, lr, cfg);
            }
        }
    }
    state.step += 1;
    Ok(())
}
