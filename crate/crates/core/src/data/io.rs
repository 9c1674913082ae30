//! JSON Lines dataset files.
//!
//! Line 1 is a header carrying the generator settings and `format_version`.
//! Every following line is one [`Sample`]. Floats are written in shortest
//! round-trip decimal form and parsed back exactly.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GeneratorSpec, Sample};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    #[serde(flatten)]
    pub generator: GeneratorSpec,
    pub format_version: u32,
}

/// Writes `samples` under a header derived from `generator`. The header's
/// `sample_count` is set to the number of records actually written.
pub fn write_dataset(path: &Path, generator: &GeneratorSpec, samples: &[Sample]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header = DatasetHeader {
        generator: GeneratorSpec {
            sample_count: samples.len(),
            ..generator.clone()
        },
        format_version: FORMAT_VERSION,
    };
    writeln!(out, "{}", to_line(&header)).map_err(io)?;
    for s in samples {
        writeln!(out, "{}", to_line(s)).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format_version {}", header.format_version),
        ));
    }

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if sample.features.len() != header.generator.input_dim {
            return Err(parse_err(
                lineno,
                format!(
                    "expected {} features, found {}",
                    header.generator.input_dim,
                    sample.features.len()
                ),
            ));
        }
        let finite = sample.features.iter().all(|f| f.is_finite())
            && [sample.yaw, sample.pitch, sample.roll].iter().all(|a| a.is_finite());
        if !finite {
            return Err(parse_err(lineno, "non-finite value".into()));
        }
        if !seen.insert(sample.id) {
            return Err(Error::Integrity(format!(
                "{}:{lineno}: duplicate sample id {}",
                path.display(),
                sample.id
            )));
        }
        samples.push(sample);
    }
    if samples.len() != header.generator.sample_count {
        return Err(Error::Integrity(format!(
            "{}: header declares {} samples, found {}",
            path.display(),
            header.generator.sample_count,
            samples.len()
        )));
    }
    Ok((header, samples))
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let spec = GeneratorSpec::default();
        write_dataset(&path, &spec, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let (header, samples) = read_dataset(&path).unwrap();
        assert!(samples.is_empty());
        assert_eq!(header.generator.sample_count, 0);
        assert_eq!(header.format_version, 1);
    }

    #[test]
    fn samples_round_trip_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.jsonl");
        let spec = GeneratorSpec {
            sample_count: 3,
            occlusion_fraction: 0.34,
            ..GeneratorSpec::default()
        };
        let samples = generate_dataset(&spec).unwrap();
        write_dataset(&path, &spec, &samples).unwrap();
        let (header, back) = read_dataset(&path).unwrap();
        assert_eq!(header.generator, spec);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.yaw.to_bits(), b.yaw.to_bits());
            let bits = |s: &Sample| s.features.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(samples, back);
    }

    fn write_raw(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    const HEADER: &str = r#"{"seed":0,"sample_count":2,"input_dim":2,"occlusion_fraction":0.0,"occlusion_mask_width":0.5,"noise_std":0.0,"format_version":1}"#;

    #[test]
    fn nan_feature_is_rejected_with_line_number() {
        let (_d, path) = write_raw(&[
            HEADER,
            r#"{"id":0,"features":[1.0,2.0],"yaw":0.0,"pitch":0.0,"roll":0.0,"occluded":false}"#,
            r#"{"id":1,"features":[NaN,2.0],"yaw":0.0,"pitch":0.0,"roll":0.0,"occluded":false}"#,
        ]);
        match read_dataset(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let (_d, path) = write_raw(&[HEADER, r#"{"id":0,"features":[1.0]"#]);
        match read_dataset(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_an_integrity_error() {
        let rec = r#"{"id":4,"features":[1.0,2.0],"yaw":0.0,"pitch":0.0,"roll":0.0,"occluded":false}"#;
        let (_d, path) = write_raw(&[HEADER, rec, rec]);
        assert!(matches!(read_dataset(&path).unwrap_err(), Error::Integrity(_)));
    }
}
