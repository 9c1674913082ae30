use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the training history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch within the stage.
    pub epoch: usize,
    pub stage: u8,
    #[serde(rename = "L_yaw")]
    pub l_yaw: f64,
    #[serde(rename = "L_pitch")]
    pub l_pitch: f64,
    #[serde(rename = "L_roll")]
    pub l_roll: f64,
    /// Empty whenever the clustering branch is inactive.
    #[serde(rename = "L_clustering")]
    pub l_clustering: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "val_MAE_clean")]
    pub val_mae_clean: Option<f64>,
    #[serde(rename = "val_MAE_occluded")]
    pub val_mae_occluded: Option<f64>,
    #[serde(rename = "val_MAE_combined")]
    pub val_mae_combined: Option<f64>,
    /// Checksum of the target distribution used during this epoch.
    #[serde(skip)]
    pub target_checksum: Option<String>,
}

pub fn write_history(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::Integrity(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    if records.is_empty() {
        w.write_record([
            "epoch",
            "stage",
            "L_yaw",
            "L_pitch",
            "L_roll",
            "L_clustering",
            "L_total",
            "val_MAE_clean",
            "val_MAE_occluded",
            "val_MAE_combined",
        ])
        .map_err(err)?;
    }
    for r in records {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_with_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let records = vec![
            EpochRecord {
                epoch: 1,
                stage: 1,
                l_yaw: 0.1 + 0.2,
                l_pitch: 1e-300,
                l_roll: 3.0,
                l_clustering: None,
                l_total: 1.0 / 3.0,
                val_mae_clean: Some(12.5),
                val_mae_occluded: None,
                val_mae_combined: Some(std::f64::consts::PI),
                target_checksum: None,
            },
            EpochRecord {
                epoch: 1,
                stage: 2,
                l_clustering: Some(0.017),
                ..Default::default()
            },
        ];
        write_history(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "epoch,stage,L_yaw,L_pitch,L_roll,L_clustering,L_total,val_MAE_clean,val_MAE_occluded,val_MAE_combined\n"
        ));
        assert!(text.lines().nth(1).unwrap().contains(",,"));
        assert_eq!(read_history(&path).unwrap(), records);
    }
}
