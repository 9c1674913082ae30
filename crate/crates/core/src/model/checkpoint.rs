//! Checkpoint directories: a `manifest.txt` of `name = rows x cols` lines plus
//! one raw little-endian f64 file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dense, ModelParams, CENTERS};
use crate::diff::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";
const FORMAT_VERSION: &str = "1";

pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("format_version = {FORMAT_VERSION}\nchecksum = {}\n", checksum(params));
    for (name, tensor) in params.tensors() {
        manifest.push_str(&format!("{name} = {}x{}\n", tensor.rows(), tensor.cols()));
        let path = dir.join(format!("{name}.f64"));
        fs::write(&path, to_le_bytes(tensor)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: manifest_path.clone(),
        line,
        msg,
    };

    let mut shapes = BTreeMap::new();
    let mut expected_checksum = None;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| parse_err(idx + 1, format!("expected `key = value`, got {line:?}")))?;
        match key {
            "format_version" if value != FORMAT_VERSION => {
                return Err(parse_err(idx + 1, format!("unsupported format_version {value}")))
            }
            "format_version" => {}
            "checksum" => expected_checksum = Some(value.to_string()),
            name => {
                let (r, c) = value
                    .split_once('x')
                    .and_then(|(r, c)| Some((r.trim().parse().ok()?, c.trim().parse().ok()?)))
                    .ok_or_else(|| parse_err(idx + 1, format!("bad shape {value:?}")))?;
                shapes.insert(name.to_string(), (r, c));
            }
        }
    }

    let n_layers = (0..)
        .take_while(|i| shapes.contains_key(&format!("encoder.{i}.weight")))
        .count();
    if n_layers == 0 {
        return Err(Error::Integrity("checkpoint has no encoder layers".into()));
    }
    let has_centers = shapes.contains_key(CENTERS);

    let mut read = |name: &str| -> Result<Matrix> {
        let (rows, cols) = shapes
            .remove(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint is missing {name}")))?;
        let path = dir.join(format!("{name}.f64"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != rows * cols * 8 {
            return Err(Error::Integrity(format!(
                "{}: expected {} bytes for {rows}x{cols}, found {}",
                path.display(),
                rows * cols * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };

    let mut encoder = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        encoder.push(Dense {
            weight: read(&format!("encoder.{i}.weight"))?,
            bias: read(&format!("encoder.{i}.bias"))?,
        });
    }
    let mut head = |name: &str| -> Result<Dense> {
        Ok(Dense {
            weight: read(&format!("head.{name}.weight"))?,
            bias: read(&format!("head.{name}.bias"))?,
        })
    };
    let heads = [head("yaw")?, head("pitch")?, head("roll")?];
    let centers = if has_centers { Some(read(CENTERS)?) } else { None };
    if let Some(extra) = shapes.keys().next() {
        return Err(Error::Integrity(format!("unexpected tensor {extra} in checkpoint")));
    }

    let params = ModelParams {
        encoder,
        heads,
        centers,
    };
    params.validate()?;
    if let Some(expected) = expected_checksum {
        let actual = checksum(&params);
        if actual != expected {
            return Err(Error::Integrity(format!(
                "{}: checksum mismatch ({actual} != {expected})",
                dir.display()
            )));
        }
    }
    Ok(params)
}

/// SHA-256 over tensor names, shapes and little-endian values.
pub fn checksum(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.tensors() {
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        h.update(to_le_bytes(t));
    }
    format!("{:x}", h.finalize())
}

fn to_le_bytes(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    #[test]
    fn round_trip_with_and_without_centers() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ModelParams::init(&EncoderConfig::default(), 66, 3).unwrap();
        save_checkpoint(&p, &dir.path().join("a")).unwrap();
        assert_eq!(load_checkpoint(&dir.path().join("a")).unwrap(), p);

        p.centers = Some(Matrix::filled(10, 16, 0.125));
        save_checkpoint(&p, &dir.path().join("b")).unwrap();
        let back = load_checkpoint(&dir.path().join("b")).unwrap();
        assert_eq!(back, p);
        assert_eq!(checksum(&back), checksum(&p));

        let manifest = fs::read_to_string(dir.path().join("b").join(CHECKPOINT_MANIFEST)).unwrap();
        assert!(manifest.contains("encoder.0.weight = 32x64"));
        assert!(manifest.contains("head.roll.bias = 1x66"));
        assert!(manifest.contains("clusters.centers = 10x16"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::init(&EncoderConfig::default(), 66, 3).unwrap();
        save_checkpoint(&p, dir.path()).unwrap();
        fs::write(dir.path().join("head.yaw.bias.f64"), [0u8; 12]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn tampered_values_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::init(&EncoderConfig::default(), 66, 3).unwrap();
        save_checkpoint(&p, dir.path()).unwrap();
        fs::write(dir.path().join("head.yaw.bias.f64"), [1u8; 66 * 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn checksum_tracks_values() {
        let p = ModelParams::init(&EncoderConfig::default(), 66, 3).unwrap();
        let mut q = p.clone();
        q.encoder[1].bias.data_mut()[0] = 1e-300;
        assert_ne!(checksum(&p), checksum(&q));
    }
}
