use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::losses::AngleBinSpec;

/// 1-indexed bin per Euler angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinLabel {
    pub yaw: usize,
    pub pitch: usize,
    pub roll: usize,
}

impl BinLabel {
    pub fn of(sample: &Sample, spec: &AngleBinSpec) -> Result<Self> {
        Ok(BinLabel {
            yaw: angle_to_bin(sample.yaw, spec)?,
            pitch: angle_to_bin(sample.pitch, spec)?,
            roll: angle_to_bin(sample.roll, spec)?,
        })
    }
}

/// Left-closed, right-open binning: `floor((angle - min) / r) + 1`.
pub fn angle_to_bin(angle: f64, spec: &AngleBinSpec) -> Result<usize> {
    if !spec.contains(angle) {
        return Err(Error::Range {
            angle,
            min: spec.min_angle,
            max: spec.max_angle(),
        });
    }
    let bin = ((angle - spec.min_angle) / spec.bin_width).floor() as usize + 1;
    // rounding in the division can land exactly on the right edge
    Ok(bin.min(spec.num_bins))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_examples() {
        let spec = AngleBinSpec::default();
        assert_eq!(angle_to_bin(0.0, &spec).unwrap(), 34);
        assert_eq!(angle_to_bin(-99.0, &spec).unwrap(), 1);
        assert_eq!(angle_to_bin(98.999, &spec).unwrap(), 66);
        assert_eq!(angle_to_bin(-96.0, &spec).unwrap(), 2);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let spec = AngleBinSpec::default();
        for a in [99.0, -99.0001, 150.0, f64::NAN] {
            assert!(matches!(angle_to_bin(a, &spec), Err(Error::Range { .. })), "{a}");
        }
    }

    #[test]
    fn bin_center_within_half_width_on_sweep() {
        let spec = AngleBinSpec::default();
        let mut worst: f64 = 0.0;
        for step in 0..1980 {
            let angle = -99.0 + step as f64 * 0.1;
            let bin = angle_to_bin(angle, &spec).unwrap();
            worst = worst.max((spec.bin_center(bin) - angle).abs());
        }
        assert!(worst <= 1.5 + 1e-9, "{worst}");
    }
}
