//! Seeded synthetic pose observations.
//!
//! Angles are pushed through a fixed random two-layer tanh network to give an
//! `input_dim` observation. Occlusion zeroes a contiguous window of that
//! observation. Weights, clean samples and occlusion each draw from their own
//! ChaCha stream, so changing the occlusion settings never perturbs the clean
//! features of a sample.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::diff::Matrix;
use crate::error::{Error, Result};

pub const ANGLE_LIMIT: f64 = 99.0;

const WEIGHT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const OCCLUSION_STREAM: u64 = 2;
const GENERATOR_HIDDEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub sample_count: usize,
    pub input_dim: usize,
    pub occlusion_fraction: f64,
    /// Fraction of the feature coordinates zeroed by one occlusion window.
    pub occlusion_mask_width: f64,
    pub noise_std: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 0,
            sample_count: 5000,
            input_dim: 32,
            occlusion_fraction: 0.3,
            occlusion_mask_width: 0.25,
            noise_std: 0.05,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be >= 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(Error::Config(format!(
                "occlusion_fraction {} outside [0, 1]",
                self.occlusion_fraction
            )));
        }
        if !(self.occlusion_mask_width > 0.0 && self.occlusion_mask_width < 1.0) {
            return Err(Error::Config(format!(
                "occlusion_mask_width {} outside (0, 1)",
                self.occlusion_mask_width
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} < 0", self.noise_std)));
        }
        Ok(())
    }

    /// Number of zeroed coordinates per occluded sample.
    pub fn mask_len(&self) -> usize {
        ((self.occlusion_mask_width * self.input_dim as f64).round() as usize).clamp(1, self.input_dim)
    }
}

/// The fixed nonlinearity from normalized angles to observations.
#[derive(Debug, Clone)]
pub struct PoseRenderer {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl PoseRenderer {
    pub fn new(seed: u64, input_dim: usize) -> Self {
        let mut rng = stream(seed, WEIGHT_STREAM);
        let mut normal = |scale: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let w1 = normal(1.0, 3 * GENERATOR_HIDDEN);
        let b1 = normal(0.3, GENERATOR_HIDDEN);
        let w2 = normal(1.0 / (GENERATOR_HIDDEN as f64).sqrt(), GENERATOR_HIDDEN * input_dim);
        let b2 = normal(0.1, input_dim);
        PoseRenderer {
            w1: Matrix::from_vec(3, GENERATOR_HIDDEN, w1).expect("sized above"),
            b1,
            w2: Matrix::from_vec(GENERATOR_HIDDEN, input_dim, w2).expect("sized above"),
            b2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w2.cols()
    }

    /// Noise-free observation for `(yaw, pitch, roll)` in degrees.
    pub fn render(&self, angles: [f64; 3]) -> Vec<f64> {
        let u = angles.map(|a| a / ANGLE_LIMIT);
        let hidden: Vec<f64> = (0..GENERATOR_HIDDEN)
            .map(|h| {
                let pre: f64 = (0..3).map(|k| u[k] * self.w1.get(k, h)).sum::<f64>() + self.b1[h];
                pre.tanh()
            })
            .collect();
        (0..self.input_dim())
            .map(|d| {
                hidden
                    .iter()
                    .enumerate()
                    .map(|(h, &v)| v * self.w2.get(h, d))
                    .sum::<f64>()
                    + self.b2[d]
            })
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates `spec.sample_count` samples with ids `0..sample_count`.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let renderer = PoseRenderer::new(spec.seed, spec.input_dim);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;

    let mut rng = stream(spec.seed, SAMPLE_STREAM);
    let mut samples: Vec<Sample> = (0..spec.sample_count)
        .map(|id| {
            let angles: [f64; 3] = std::array::from_fn(|_| rng.random_range(-ANGLE_LIMIT..ANGLE_LIMIT));
            let mut features = renderer.render(angles);
            if spec.noise_std > 0.0 {
                for f in &mut features {
                    *f += noise.sample(&mut rng);
                }
            }
            Sample {
                id: id as u64,
                features,
                yaw: angles[0],
                pitch: angles[1],
                roll: angles[2],
                occluded: false,
            }
        })
        .collect();

    let mut rng = stream(spec.seed, OCCLUSION_STREAM);
    let n_occluded = (spec.occlusion_fraction * spec.sample_count as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.sample_count).collect();
    order.shuffle(&mut rng);
    let width = spec.mask_len();
    for &i in &order[..n_occluded] {
        let start = rng.random_range(0..=spec.input_dim - width);
        apply_occlusion(&mut samples[i], start, width);
    }
    Ok(samples)
}

/// Zeroes `features[start..start + width]` and marks the sample occluded.
pub fn apply_occlusion(sample: &mut Sample, start: usize, width: usize) {
    for f in &mut sample.features[start..start + width] {
        *f = 0.0;
    }
    sample.occluded = true;
}
