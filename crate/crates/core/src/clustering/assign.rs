use crate::diff::{Matrix, NodeId, Tape};
use crate::error::Result;

/// Floor on soft cluster frequencies in the target distribution.
pub const FREQUENCY_FLOOR: f64 = 1e-12;

/// N × K row-stochastic Student-t similarities between embeddings and centers.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment(pub Matrix);

/// N × K sharpened, frequency-normalized self-training target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution(pub Matrix);

impl SoftAssignment {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Index of the most probable cluster per sample.
    pub fn hard_assignments(&self) -> Vec<usize> {
        (0..self.0.rows()).map(|i| self.0.argmax_row(i)).collect()
    }
}

impl TargetDistribution {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// `q_ij = (1 + |l_i - c_j|^2)^-1 / Σ_j' (1 + |l_i - c_j'|^2)^-1` on the tape.
///
/// Normalization runs over clusters for each sample, so every row of Q is a
/// probability distribution.
pub fn soft_assign_node(tape: &mut Tape, latents: NodeId, centers: NodeId) -> Result<NodeId> {
    let d2 = tape.sq_dist(latents, centers)?;
    let kernel = tape.student_t(d2)?;
    tape.normalize_rows(kernel)
}

pub fn soft_assign(latents: &Matrix, centers: &Matrix) -> Result<SoftAssignment> {
    let mut tape = Tape::new();
    let l = tape.constant(latents.clone());
    let c = tape.constant(centers.clone());
    let q = soft_assign_node(&mut tape, l, c)?;
    Ok(SoftAssignment(tape.value(q).clone()))
}

/// `p_ij = (q_ij^2 / f_j) / Σ_j' (q_ij'^2 / f_j')` with soft frequencies
/// `f_j = Σ_i q_ij`. The result is a constant; no gradient flows through it.
pub fn target_distribution(q: &SoftAssignment) -> TargetDistribution {
    let q = &q.0;
    let mut freq = vec![0.0; q.cols()];
    for row in q.iter_rows() {
        for (f, &v) in freq.iter_mut().zip(row) {
            *f += v;
        }
    }
    let mut p = Matrix::zeros(q.rows(), q.cols());
    for i in 0..q.rows() {
        let out = p.row_mut(i);
        for ((o, &v), &f) in out.iter_mut().zip(q.row(i)).zip(&freq) {
            *o = v * v / f.max(FREQUENCY_FLOOR);
        }
        let total: f64 = out.iter().sum();
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    TargetDistribution(p)
}
