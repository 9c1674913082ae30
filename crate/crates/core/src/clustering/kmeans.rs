//! Lloyd's algorithm with k-means++ seeding and best-of-restarts selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 10,
            kmeans_max_iters: 100,
            kmeans_restarts: 5,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.kmeans_restarts == 0 || self.kmeans_max_iters == 0 {
            return Err(Error::Config("k-means needs >= 1 restart and iteration".into()));
        }
        Ok(())
    }

    /// Whether `k` is at most a tenth of `n`; logs a warning otherwise.
    pub fn check_small_relative_to(&self, n: usize) -> bool {
        let ok = self.k * 10 <= n;
        if !ok {
            log::warn!("k = {} is not much smaller than the {n} clustered samples", self.k);
        }
        ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances of the returned solution.
    pub wcss: f64,
    pub iterations: usize,
    /// WCSS after every assignment step of the winning restart.
    pub wcss_history: Vec<f64>,
    pub restart: usize,
}

/// Clusters the rows of `points` into `config.k` groups.
///
/// Restarts run in parallel; the lowest WCSS wins, ties going to the earliest
/// restart, so the result only depends on `config.seed`.
pub fn kmeans(points: &Matrix, config: &ClusterConfig) -> Result<KMeansResult> {
    let k = config.k;
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if points.rows() < k {
        return Err(Error::Config(format!(
            "k-means needs at least k = {k} points, got {}",
            points.rows()
        )));
    }
    if config.kmeans_restarts == 0 {
        return Err(Error::Config("k-means needs >= 1 restart".into()));
    }

    let runs: Vec<KMeansResult> = (0..config.kmeans_restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(restart as u64);
            lloyd(points, k, config.kmeans_max_iters, &mut rng, restart)
        })
        .collect();

    let best = runs
        .into_iter()
        .reduce(|best, r| if r.wcss < best.wcss { r } else { best })
        .expect("at least one restart");
    Ok(best)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.rows() {
        let d = sq_dist(point, centers.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = points.rows();
    let mut centers = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(points: &Matrix, k: usize, max_iters: usize, rng: &mut impl Rng, restart: usize) -> KMeansResult {
    let n = points.rows();
    let dim = points.cols();
    let mut centers = plus_plus_init(points, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let (j, d) = nearest(points.row(i), &centers);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed {
            break;
        }

        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &j) in assignments.iter().enumerate() {
            counts[j] += 1;
            for (s, &x) in sums.row_mut(j).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = 1.0 / count as f64;
                for (c, &s) in centers.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s * inv;
                }
                continue;
            }
            // empty cluster: move it onto the point worst served by its center
            let far = (0..n)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("n >= k >= 1");
            centers.row_mut(j).copy_from_slice(points.row(far));
            dists[far] = 0.0;
        }
    }

    let wcss = (0..n)
        .map(|i| sq_dist(points.row(i), centers.row(assignments[i])))
        .sum();
    KMeansResult {
        centers,
        assignments,
        wcss,
        iterations,
        wcss_history: history,
        restart,
    }
}

/// Within-cluster sum of squares of `points` against their nearest `centers`.
pub fn wcss(points: &Matrix, centers: &Matrix) -> f64 {
    points.iter_rows().map(|p| nearest(p, centers).1).sum()
}
