//! Scalar training objectives.
//!
//! Each Euler angle is supervised twice from the same softmax output: a
//! cross-entropy over angle bins and a squared error on the angle decoded as
//! the expected bin offset. The clustering branch contributes a KL divergence
//! between a fixed target distribution and the current soft assignment.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Geometry of the angle classification bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleBinSpec {
    pub num_bins: usize,
    /// Bin width in degrees.
    pub bin_width: f64,
    /// Left edge of bin 1, in degrees.
    pub min_angle: f64,
}

impl Default for AngleBinSpec {
    /// 66 bins of 3° covering [-99°, 99°).
    fn default() -> Self {
        AngleBinSpec {
            num_bins: 66,
            bin_width: 3.0,
            min_angle: -99.0,
        }
    }
}

impl AngleBinSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins == 0 {
            return Err(Error::Config("num_bins must be >= 1".into()));
        }
        if !(self.bin_width > 0.0) || !self.min_angle.is_finite() {
            return Err(Error::Config(format!(
                "invalid bin geometry: width {} min {}",
                self.bin_width, self.min_angle
            )));
        }
        Ok(())
    }

    /// Right (open) edge of the covered range.
    pub fn max_angle(&self) -> f64 {
        self.min_angle + self.num_bins as f64 * self.bin_width
    }

    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.min_angle && angle < self.max_angle()
    }

    /// Center of the 1-indexed `bin`.
    pub fn bin_center(&self, bin: usize) -> f64 {
        self.min_angle + (bin as f64 - 0.5) * self.bin_width
    }

    /// Per-bin decoding weights `r * (i - (1 + C) / 2)` for `i = 1..=C`.
    pub fn decode_offsets(&self) -> Vec<f64> {
        let mid = (1.0 + self.num_bins as f64) / 2.0;
        (1..=self.num_bins).map(|i| self.bin_width * (i as f64 - mid)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the regression term inside each per-angle loss.
    pub alpha: f64,
    /// Weight of the clustering term in the total loss; zero in stage 1.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Values of the three parts of one angle's loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AngleLossValues {
    pub class: f64,
    pub reg: f64,
    pub total: f64,
}

/// Graph nodes for one angle's loss.
#[derive(Debug, Clone, Copy)]
pub struct AngleLossNodes {
    pub class: NodeId,
    pub reg: NodeId,
    pub total: NodeId,
    pub probs: NodeId,
    pub predicted: NodeId,
}

impl AngleLossNodes {
    pub fn values(&self, tape: &Tape) -> AngleLossValues {
        AngleLossValues {
            class: tape.value(self.class).item(),
            reg: tape.value(self.reg).item(),
            total: tape.value(self.total).item(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub yaw: AngleLossValues,
    pub pitch: AngleLossValues,
    pub roll: AngleLossValues,
    pub clustering: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossReport {
    pub fn angle_sum(&self) -> f64 {
        self.yaw.total + self.pitch.total + self.roll.total
    }

    /// Largest relative deviation from `total = yaw + pitch + roll + beta * clustering`.
    pub fn decomposition_error(&self) -> f64 {
        let expected = self.angle_sum() + self.beta * self.clustering;
        (self.total - expected).abs() / expected.abs().max(1e-300)
    }
}

/// Total loss from already computed components.
pub fn total_loss(
    yaw: AngleLossValues,
    pitch: AngleLossValues,
    roll: AngleLossValues,
    clustering: f64,
    weights: LossWeights,
) -> LossReport {
    LossReport {
        yaw,
        pitch,
        roll,
        clustering,
        beta: weights.beta,
        total: yaw.total + pitch.total + roll.total + weights.beta * clustering,
    }
}

/// Batch-mean cross-entropy `-(1/N) Σ_n Σ_i t_ni ln S_ni` against one-hot rows.
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, targets: &Matrix) -> Result<NodeId> {
    let p = tape.value(probs);
    p.expect_same_shape(targets, "cross_entropy")?;
    for (n, row) in targets.iter_rows().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Label(format!("row {n} is not one-hot ({ones} active bins)")));
        }
    }
    let n = targets.rows().max(1) as f64;
    let t = tape.constant(targets.clone());
    let log_p = tape.log_clamped(probs, LOG_FLOOR)?;
    let picked = tape.mul(t, log_p)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / n)
}

/// One-hot rows for 1-indexed bins.
pub fn one_hot(bins: &[usize], num_bins: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(bins.len(), num_bins);
    for (r, &b) in bins.iter().enumerate() {
        if b == 0 || b > num_bins {
            return Err(Error::Label(format!("bin {b} outside 1..={num_bins}")));
        }
        m.set(r, b - 1, 1.0);
    }
    Ok(m)
}

/// Expected-value angle decoding, `r Σ_i S_i (i - (1 + C) / 2)`, as an N×1 node.
pub fn expected_angle(tape: &mut Tape, probs: NodeId, spec: &AngleBinSpec) -> Result<NodeId> {
    let offsets = tape.constant(Matrix::column(&spec.decode_offsets()));
    tape.matmul(probs, offsets)
}

/// Expected-value decoding on plain probabilities.
pub fn expected_angle_values(probs: &Matrix, spec: &AngleBinSpec) -> Vec<f64> {
    let offsets = spec.decode_offsets();
    probs
        .iter_rows()
        .map(|row| row.iter().zip(&offsets).map(|(p, o)| p * o).sum())
        .collect()
}

/// Batch-mean squared error between an N×1 prediction node and ground truth.
pub fn mse_regression(tape: &mut Tape, predicted: NodeId, truth: &[f64]) -> Result<NodeId> {
    let p = tape.value(predicted);
    if p.shape() != (truth.len(), 1) {
        return Err(Error::Dimension {
            op: "mse_regression",
            lhs: p.shape(),
            rhs: (truth.len(), 1),
        });
    }
    let gt = tape.constant(Matrix::column(truth));
    let diff = tape.sub(gt, predicted)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Per-angle loss `L_class + alpha * L_reg` from raw logits.
pub fn angle_loss(
    tape: &mut Tape,
    logits: NodeId,
    truth: &[f64],
    spec: &AngleBinSpec,
    alpha: f64,
) -> Result<AngleLossNodes> {
    let bins = truth
        .iter()
        .map(|&a| crate::data::angle_to_bin(a, spec))
        .collect::<Result<Vec<_>>>()?;
    let targets = one_hot(&bins, spec.num_bins)?;
    let probs = tape.softmax_rows(logits)?;
    let class = cross_entropy(tape, probs, &targets)?;
    let predicted = expected_angle(tape, probs, spec)?;
    let reg = mse_regression(tape, predicted, truth)?;
    let weighted = tape.scale(reg, alpha)?;
    let total = tape.add(class, weighted)?;
    Ok(AngleLossNodes {
        class,
        reg,
        total,
        probs,
        predicted,
    })
}

/// One summand of the divergence: `p ln(p / q) - p + q`.
///
/// Summed over a row this is `KL(p || q)` whenever both rows sum to one, and
/// every summand is non-negative for any positive `q`, so rounding can never
/// push the total below zero. Evaluated through `ln_1p` so that `q ≈ p`
/// keeps full precision.
fn kl_term(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        return q.max(0.0);
    }
    let qf = q.max(LOG_FLOOR);
    let r = (qf - p) / p;
    (p * (r - r.ln_1p()) + (q - qf)).max(0.0)
}

/// `KL(P || Q)` summed over all rows, on plain matrices.
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> Result<f64> {
    q.expect_same_shape(p, "kl_divergence")?;
    Ok(p.data().iter().zip(q.data()).map(|(&p, &q)| kl_term(p, q)).sum())
}

/// `KL(P || Q) = Σ_i Σ_j p_ij ln(p_ij / q_ij)` with `P` held constant.
///
/// Terms with `p_ij = 0` contribute nothing. `q_ij` is floored at
/// [`LOG_FLOOR`] inside the logarithm. The value is accumulated in the
/// termwise non-negative form of [`kl_divergence`]; its gradient
/// `1 - p/q` differs from `-p/q` by a constant per entry, which cancels
/// once `Q` is row-normalised.
pub fn kl_clustering(tape: &mut Tape, q: NodeId, p: &Matrix) -> Result<NodeId> {
    let qv = tape.value(q);
    let value = kl_divergence(p, qv)?;
    let clamped = qv
        .data()
        .iter()
        .zip(p.data())
        .filter(|(&q, &p)| p > 0.0 && q <= LOG_FLOOR)
        .count();
    if clamped > 0 {
        log::warn!("kl_clustering: {clamped} soft-assignment entries clamped at {LOG_FLOOR}");
    }

    let p = p.clone();
    let backward = move |up: &Matrix, inputs: &[&Matrix], _: &Matrix| {
        let g = up.item();
        let grad = inputs[0]
            .zip_map(&p, |q, p| if q > LOG_FLOOR { g * (1.0 - p / q) } else { g })
            .expect("shape checked on the forward pass");
        vec![grad]
    };
    tape.custom(&[q], Matrix::scalar(value), Rc::new(backward))
}
