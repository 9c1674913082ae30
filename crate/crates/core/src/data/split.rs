use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};

/// Seeded train/validation split, stratified on the occlusion flag so both
/// sides keep the input's occluded/clean ratio.
pub fn split(dataset: &[Sample], train_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for occluded in [false, true] {
        let mut stratum: Vec<&Sample> = dataset.iter().filter(|s| s.occluded == occluded).collect();
        stratum.shuffle(&mut rng);
        let cut = (train_fraction * stratum.len() as f64).round() as usize;
        train.extend(stratum[..cut].iter().map(|&s| s.clone()));
        val.extend(stratum[cut..].iter().map(|&s| s.clone()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "split of {} samples at {train_fraction} leaves an empty side",
            dataset.len()
        )));
    }
    train.sort_by_key(|s| s.id);
    val.sort_by_key(|s| s.id);
    Ok((train, val))
}
