use serde::{Deserialize, Serialize};

use super::{kmeans, ClusterConfig};
use crate::diff::Matrix;
use crate::error::{Error, Result};

/// Below this relative curvature the WCSS curve is treated as having no elbow.
pub const LOW_CURVATURE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowReport {
    pub candidate_ks: Vec<usize>,
    pub wcss: Vec<f64>,
    /// `W[i-1] - 2 W[i] + W[i+1]` for interior candidates, `None` at the ends.
    pub second_differences: Vec<Option<f64>>,
    pub chosen_k: usize,
    /// Largest second difference divided by the WCSS of the smallest candidate.
    pub relative_curvature: f64,
    pub low_confidence: bool,
}

/// Runs k-means for every candidate and picks the interior candidate with
/// the largest discrete second difference of the WCSS curve.
pub fn elbow_select(latents: &Matrix, candidate_ks: &[usize], config: &ClusterConfig) -> Result<ElbowReport> {
    let mut ks = candidate_ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() < 3 {
        return Err(Error::Config(format!(
            "elbow selection needs at least 3 distinct candidates, got {candidate_ks:?}"
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > latents.rows()) {
        return Err(Error::Config(format!(
            "candidate k = {k} invalid for {} points",
            latents.rows()
        )));
    }

    let wcss = ks
        .iter()
        .map(|&k| {
            let cfg = ClusterConfig { k, ..config.clone() };
            kmeans(latents, &cfg).map(|r| r.wcss)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut second_differences = vec![None; ks.len()];
    let mut best = (1, f64::NEG_INFINITY);
    for i in 1..ks.len() - 1 {
        let d2 = wcss[i - 1] - 2.0 * wcss[i] + wcss[i + 1];
        second_differences[i] = Some(d2);
        if d2 > best.1 {
            best = (i, d2);
        }
    }
    let relative_curvature = if wcss[0] > 0.0 { best.1 / wcss[0] } else { 0.0 };
    let low_confidence = relative_curvature < LOW_CURVATURE;
    if low_confidence {
        log::warn!(
            "elbow is weak (relative curvature {relative_curvature:.4}); k = {} is low-confidence",
            ks[best.0]
        );
    }
    Ok(ElbowReport {
        chosen_k: ks[best.0],
        candidate_ks: ks,
        wcss,
        second_differences,
        relative_curvature,
        low_confidence,
    })
}
