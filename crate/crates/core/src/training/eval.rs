use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{soft_assign, target_distribution};
use crate::data::{angle_to_bin, feature_matrix, Sample};
use crate::diff::{softmax_rows, Matrix};
use crate::error::{Error, Result};
use crate::losses::{
    expected_angle_values, kl_divergence, AngleBinSpec, AngleLossValues, LossReport, LossWeights, LOG_FLOOR,
};
use crate::model::{encode_frozen, forward_frozen, ModelParams};

const EVAL_CHUNK: usize = 512;

/// Mean absolute error in degrees over one subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetMae {
    pub count: usize,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Mean of the three per-angle errors.
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    /// `None` when the dataset holds no clean samples.
    pub clean: Option<SubsetMae>,
    pub occluded: Option<SubsetMae>,
    pub combined: SubsetMae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: MaeReport,
    pub losses: LossReport,
}

fn subset<'a>(pairs: impl Iterator<Item = (&'a Sample, &'a [f64; 3])>) -> Option<SubsetMae> {
    let mut sums = [0.0; 3];
    let mut count = 0;
    for (s, p) in pairs {
        for (a, sum) in sums.iter_mut().enumerate() {
            *sum += (s.angles()[a] - p[a]).abs();
        }
        count += 1;
    }
    (count > 0).then(|| {
        let [yaw, pitch, roll] = sums.map(|v| v / count as f64);
        SubsetMae {
            count,
            yaw,
            pitch,
            roll,
            mean: (yaw + pitch + roll) / 3.0,
        }
    })
}

/// Per-angle MAE of `predictions` split by the occlusion flag.
pub fn mae_report(samples: &[Sample], predictions: &[[f64; 3]]) -> Result<MaeReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    if samples.len() != predictions.len() {
        return Err(Error::Dimension {
            op: "mae_report",
            lhs: (samples.len(), 3),
            rhs: (predictions.len(), 3),
        });
    }
    let pairs = || samples.iter().zip(predictions);
    Ok(MaeReport {
        clean: subset(pairs().filter(|(s, _)| !s.occluded)),
        occluded: subset(pairs().filter(|(s, _)| s.occluded)),
        combined: subset(pairs()).expect("non-empty"),
    })
}

/// Softmax probabilities of the three heads for every sample.
fn head_probs(params: &ModelParams, samples: &[Sample]) -> Result<[Matrix; 3]> {
    let dim = params.input_dim();
    let chunks = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (_, logits) = forward_frozen(params, &feature_matrix(chunk, dim))?;
            Ok(logits.map(|l| softmax_rows(&l)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(std::array::from_fn(|a| {
        let c = params.num_bins();
        let data = chunks.iter().flat_map(|p| p[a].data().iter().copied()).collect();
        Matrix::from_vec(samples.len(), c, data).expect("chunk sizes add up")
    }))
}

/// Decoded yaw, pitch and roll for every sample.
pub fn predict_angles(params: &ModelParams, samples: &[Sample], spec: &AngleBinSpec) -> Result<Vec<[f64; 3]>> {
    let probs = head_probs(params, samples)?;
    let decoded = probs.each_ref().map(|p| expected_angle_values(p, spec));
    Ok((0..samples.len())
        .map(|i| [decoded[0][i], decoded[1][i], decoded[2][i]])
        .collect())
}

/// MAE per subset plus the loss components on the whole dataset.
///
/// When the model carries cluster centers, the clustering term is the KL
/// divergence between the dataset's own target distribution and its soft
/// assignment, summed over samples.
pub fn evaluate(
    params: &ModelParams,
    samples: &[Sample],
    spec: &AngleBinSpec,
    weights: LossWeights,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let probs = head_probs(params, samples)?;
    let n = samples.len() as f64;
    let mut components = [AngleLossValues::default(); 3];
    let mut predictions = vec![[0.0; 3]; samples.len()];
    for (a, p) in probs.iter().enumerate() {
        let decoded = expected_angle_values(p, spec);
        let (mut class, mut reg) = (0.0, 0.0);
        for (i, s) in samples.iter().enumerate() {
            let truth = s.angles()[a];
            let bin = angle_to_bin(truth, spec)?;
            class -= p.get(i, bin - 1).max(LOG_FLOOR).ln();
            reg += (truth - decoded[i]).powi(2);
            predictions[i][a] = decoded[i];
        }
        let (class, reg) = (class / n, reg / n);
        components[a] = AngleLossValues {
            class,
            reg,
            total: class + weights.alpha * reg,
        };
    }

    let clustering = match &params.centers {
        Some(centers) => {
            let dim = params.input_dim();
            let latents = encode_frozen(params, &feature_matrix(samples, dim))?;
            let q = soft_assign(&latents, centers)?;
            let p = target_distribution(&q);
            kl_divergence(&p.0, &q.0)?
        }
        None => 0.0,
    };
    let [yaw, pitch, roll] = components;
    Ok(EvalMetrics {
        mae: mae_report(samples, &predictions)?,
        losses: crate::losses::total_loss(yaw, pitch, roll, clustering, weights),
    })
}
