//! JSON Lines export of per-sample latents and cluster assignments.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SoftAssignment;
use crate::diff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub id: u64,
    pub latent: Vec<f64>,
    pub assigned_cluster: usize,
    pub q: Vec<f64>,
}

/// One record per row; `ids`, `latents` and `q` must have the same row count.
pub fn latent_records(ids: &[u64], latents: &Matrix, q: &SoftAssignment) -> Result<Vec<LatentRecord>> {
    if ids.len() != latents.rows() || latents.rows() != q.0.rows() {
        return Err(Error::Dimension {
            op: "latent_records",
            lhs: latents.shape(),
            rhs: q.0.shape(),
        });
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, &id)| LatentRecord {
            id,
            latent: latents.row(i).to_vec(),
            assigned_cluster: q.0.argmax_row(i),
            q: q.0.row(i).to_vec(),
        })
        .collect())
}

pub fn write_latents(path: &Path, records: &[LatentRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("plain data serializes");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
