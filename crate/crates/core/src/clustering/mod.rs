//! Latent-space clustering: k-means initialization, Student-t soft
//! assignment, the sharpened target distribution and elbow selection of K.

mod assign;
mod elbow;
mod export;
mod kmeans;

pub use assign::{
    soft_assign, soft_assign_node, target_distribution, SoftAssignment, TargetDistribution, FREQUENCY_FLOOR,
};
pub use elbow::{elbow_select, ElbowReport, LOW_CURVATURE};
pub use export::{latent_records, read_latents, write_latents, LatentRecord};
pub use kmeans::{kmeans, wcss, ClusterConfig, KMeansResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::diff::Matrix;

/// Seeded isotropic Gaussian mixture for clustering fixtures.
///
/// Component means are drawn uniformly on a sphere of radius
/// `separation * std * components / 2`, rejecting draws until every pair is at
/// least `separation * std` apart.
pub fn gaussian_mixture(
    components: usize,
    per_component: usize,
    dim: usize,
    separation: f64,
    std: f64,
    seed: u64,
) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation * std * components as f64 / 2.0;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(components);
    while means.len() < components {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        let cand: Vec<f64> = v.iter().map(|x| x / norm * radius).collect();
        let far_enough = means
            .iter()
            .all(|m| m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation * std);
        if far_enough {
            means.push(cand);
        }
    }
    let noise = Normal::new(0.0, std).expect("std >= 0");
    let mut data = Vec::with_capacity(components * per_component * dim);
    for m in &means {
        for _ in 0..per_component {
            data.extend(m.iter().map(|&c| c + noise.sample(&mut rng)));
        }
    }
    let points = Matrix::from_vec(components * per_component, dim, data).expect("sized above");
    let means = Matrix::from_rows(&means).expect("equal dims");
    (points, means)
}
