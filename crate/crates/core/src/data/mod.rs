//! Synthetic pose data: generation, occlusion, binning, splitting and files.

mod bins;
mod generate;
mod io;
mod split;

use serde::{Deserialize, Serialize};

pub use bins::{angle_to_bin, BinLabel};
pub use generate::{apply_occlusion, generate_dataset, GeneratorSpec, PoseRenderer, ANGLE_LIMIT};
pub use io::{read_dataset, write_dataset, DatasetHeader, FORMAT_VERSION};
pub use split::split;

use crate::diff::Matrix;

/// One observation with its ground-truth pose in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub occluded: bool,
}

impl Sample {
    pub fn angles(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }
}

/// Stacks the features of `samples` into an N×D matrix.
pub fn feature_matrix<'a, I>(samples: I, input_dim: usize) -> Matrix
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut data = Vec::new();
    let mut rows = 0;
    for s in samples {
        debug_assert_eq!(s.features.len(), input_dim);
        data.extend_from_slice(&s.features);
        rows += 1;
    }
    Matrix::from_vec(rows, input_dim, data).expect("feature rows have input_dim entries")
}
