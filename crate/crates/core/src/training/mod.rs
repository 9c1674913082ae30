//! Two-stage training: angle losses on clean data first, then the same
//! losses plus the clustering term on occluded data.

mod adam;
mod eval;
mod history;
mod stages;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, mae_report, predict_angles, EvalMetrics, MaeReport, SubsetMae};
pub use history::{read_history, write_history, EpochRecord};
pub use stages::{
    ablate_beta, encode_samples, epoch_order, init_stage2, stage2_samples, train_stage1, train_stage2, AblationRow,
    EpochHook,
};

use crate::clustering::{soft_assign_node, ClusterConfig};
use crate::data::{feature_matrix, Sample};
use crate::diff::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::losses::{angle_loss, kl_clustering, AngleBinSpec, LossReport, LossWeights};
use crate::model::{angle_heads, encode, ModelParams};

/// Gradients keyed by tensor name, as in [`ModelParams::tensors`].
pub type ParamGrads = BTreeMap<String, Matrix>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier applied every `lr_decay_interval` epochs of a stage.
    pub lr_decay: f64,
    pub lr_decay_interval: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub alpha: f64,
    /// Clustering weight during Stage 2.
    pub beta: f64,
    pub cluster: ClusterConfig,
    /// Epochs between recomputations of the target distribution.
    pub target_refresh: usize,
    pub seed: u64,
    /// Fresh Adam moments at the start of Stage 2.
    pub reset_adam_between_stages: bool,
    /// Train Stage 2 on clean samples as well as occluded ones.
    pub stage2_include_clean: bool,
    /// Epochs between intermediate checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 25,
            stage2_epochs: 25,
            batch_size: 128,
            learning_rate: 1e-2,
            lr_decay: 0.1,
            lr_decay_interval: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            alpha: 1.0,
            beta: 1.0,
            cluster: ClusterConfig::default(),
            target_refresh: 1,
            seed: 0,
            reset_adam_between_stages: true,
            stage2_include_clean: false,
            checkpoint_interval: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be > 0, got {}", self.adam_epsilon));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.lr_decay_interval == 0 || self.target_refresh == 0 {
            return bad("batch_size, lr_decay_interval and target_refresh must be >= 1".into());
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be >= 1".into());
        }
        self.weights().validate()?;
        self.cluster.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// Learning rate for a stage-local, zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_interval) as i32)
    }
}

/// Features and ground truth of one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub angles: [Vec<f64>; 3],
}

impl Batch {
    pub fn gather(data: &[Sample], rows: &[usize], input_dim: usize) -> Batch {
        let features = feature_matrix(rows.iter().map(|&i| &data[i]), input_dim);
        let angles = std::array::from_fn(|a| rows.iter().map(|&i| data[i].angles()[a]).collect());
        Batch { features, angles }
    }

    pub fn from_samples(data: &[Sample], input_dim: usize) -> Batch {
        let rows: Vec<usize> = (0..data.len()).collect();
        Batch::gather(data, &rows, input_dim)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss components and parameter gradients of one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub grads: ParamGrads,
}

/// Forward and backward pass of the full objective on one batch.
///
/// With `beta = 0` the clustering branch is not built at all; cluster centers
/// then get no gradient entry and `targets` is ignored. With `beta > 0` the
/// model must carry centers and `targets` must hold the batch rows of P.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &Batch,
    targets: Option<&Matrix>,
    spec: &AngleBinSpec,
    weights: LossWeights,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(batch.features.clone());
    let latents = encode(&mut tape, &bound, x)?;
    let logits = angle_heads(&mut tape, &bound, latents)?;
    let [yaw, pitch, roll] = [0, 1, 2].map(|a| angle_loss(&mut tape, logits[a], &batch.angles[a], spec, weights.alpha));
    let (yaw, pitch, roll) = (yaw?, pitch?, roll?);
    let sum = tape.add(yaw.total, pitch.total)?;
    let mut total = tape.add(sum, roll.total)?;

    let mut clustering = 0.0;
    if weights.beta > 0.0 {
        let centers = bound
            .centers
            .ok_or_else(|| Error::Config("clustering term needs installed cluster centers".into()))?;
        let p = targets.ok_or_else(|| Error::Config("clustering term needs a target distribution".into()))?;
        let q = soft_assign_node(&mut tape, latents, centers)?;
        let kl = kl_clustering(&mut tape, q, p)?;
        clustering = tape.value(kl).item();
        let weighted = tape.scale(kl, weights.beta)?;
        total = tape.add(total, weighted)?;
    }

    let mut grads_by_node = tape.backward(total)?;
    let grads = bound
        .named()
        .into_iter()
        .filter_map(|(name, id)| grads_by_node.take(id).map(|g| (name, g)))
        .collect();
    let report = LossReport {
        yaw: yaw.values(&tape),
        pitch: pitch.values(&tape),
        roll: roll.values(&tape),
        clustering,
        beta: weights.beta,
        total: tape.value(total).item(),
    };
    Ok(StepOutput { report, grads })
}
