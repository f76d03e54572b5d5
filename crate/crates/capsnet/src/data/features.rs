//! The FEAT container for precomputed backbone feature vectors:
//! magic "FEAT" | version u16 LE | n_records u32 LE | dim u32 LE |
//! per record: label u16 LE + dim float32 LE.

use std::fs;
use std::path::Path;

use crate::data::imageio::Cursor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u16 = 1;
const FEAT: &str = "FEAT file";

/// One labeled feature vector.
#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub features: Tensor<f32>,
    pub label: usize,
}

/// A loaded feature corpus.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    pub records: Vec<FeatureRecord>,
    pub dim: usize,
}

impl FeatureDataset {
    pub fn n_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }
}

/// Load a FEAT file, validating record count and feature length against
/// the header.
pub fn load_feature_dataset(path: &Path) -> Result<FeatureDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(&bytes);
    if r.take(4, FEAT)? != FEAT_MAGIC {
        return Err(Error::BadMagic { container: FEAT });
    }
    let version = r.u16(FEAT)?;
    if version != FEAT_VERSION {
        return Err(Error::UnsupportedVersion {
            container: FEAT,
            found: version,
            expected: FEAT_VERSION,
        });
    }
    let n_records = r.u32(FEAT)? as usize;
    let dim = r.u32(FEAT)? as usize;
    if n_records > 0 && dim == 0 {
        return Err(Error::LengthMismatch {
            container: FEAT,
            reason: "zero feature length with a non-zero record count".into(),
        });
    }
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let label = r.u16(FEAT)? as usize;
        let mut features = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = r.f32(FEAT)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "feature file {} holds a non-finite value",
                    path.display()
                )));
            }
            features.push(v);
        }
        records.push(FeatureRecord {
            features: Tensor::from_vec(vec![dim], features)?,
            label,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::LengthMismatch {
            container: FEAT,
            reason: format!(
                "{} trailing bytes beyond the declared {} records of length {}",
                r.remaining(),
                n_records,
                dim
            ),
        });
    }
    Ok(FeatureDataset { records, dim })
}

/// Write records into the FEAT layout. Every record must share one
/// feature length.
pub fn write_feature_dataset(records: &[FeatureRecord], dim: usize, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for record in records {
        if record.features.numel() != dim {
            return Err(Error::LengthMismatch {
                container: FEAT,
                reason: format!(
                    "record has {} features, header says {}",
                    record.features.numel(),
                    dim
                ),
            });
        }
        out.extend_from_slice(&(record.label as u16).to_le_bytes());
        for &v in record.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records(n: usize, dim: usize) -> Vec<FeatureRecord> {
        (0..n)
            .map(|i| FeatureRecord {
                features: Tensor::from_vec(
                    vec![dim],
                    (0..dim).map(|j| (i * dim + j) as f32 * 0.5).collect(),
                )
                .unwrap(),
                label: i % 3,
            })
            .collect()
    }

    #[test]
    fn round_trip_two_records_of_1024() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.feat");
        let records = sample_records(2, 1024);
        write_feature_dataset(&records, 1024, &path).unwrap();
        let loaded = load_feature_dataset(&path).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.dim, 1024);
        for (a, b) in loaded.records.iter().zip(&records) {
            assert_eq!(a.features.data(), b.features.data());
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn empty_record_list_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.feat");
        write_feature_dataset(&[], 16, &path).unwrap();
        let loaded = load_feature_dataset(&path).unwrap();
        assert!(loaded.records.is_empty());
    }

    #[test]
    fn truncated_file_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.feat");
        write_feature_dataset(&sample_records(2, 8), 8, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        match load_feature_dataset(&path) {
            Err(Error::Truncated {
                expected, found, ..
            }) => assert!(found < expected),
            other => panic!("expected truncation error, got {:?}", other.err()),
        }
    }

    #[test]
    fn bad_magic_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.feat");
        write_feature_dataset(&sample_records(1, 4), 4, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_feature_dataset(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.feat");
        write_feature_dataset(&sample_records(1, 4), 4, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_feature_dataset(&path),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
