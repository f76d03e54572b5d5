//! Versioned weight archives: a portable binary container holding a
//! model's spec, class names, seed, init scheme and every named tensor as
//! float32 little-endian, keyed by a fingerprint of the spec so weights
//! can only be loaded back into the architecture that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::imageio::Cursor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::zoo::ModelSpec;

const CAPW_MAGIC: &[u8; 4] = b"CAPW";
const CAPW_VERSION: u16 = 1;
const CAPW: &str = "CAPW archive";

/// How model parameters were initialized; recorded for reproducibility.
pub const INIT_SCHEME: &str = "conv/dense: fan-in uniform; capsule transforms: normal(0.05); bias: zero";

/// Archive header fields.
#[derive(Debug, Clone)]
pub struct ArchiveMeta {
    pub model_name: String,
    pub class_names: Vec<String>,
    pub init_scheme: String,
    pub train_seed: u64,
    pub fingerprint: [u8; 32],
}

/// SHA-256 over the canonical JSON serialization of a spec.
pub fn spec_fingerprint(spec: &ModelSpec) -> [u8; 32] {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    let digest = Sha256::digest(&json);
    digest.into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{:02x}", b)).collect()
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor) -> Result<String> {
    let len = r.u16(CAPW)? as usize;
    let bytes = r.take(len, CAPW)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::LengthMismatch {
        container: CAPW,
        reason: "non-utf8 string field".into(),
    })
}

/// Serialize a trained model. Tensors round-trip bit-exactly.
pub fn save_weights(
    model: &Model<f32>,
    class_names: &[String],
    train_seed: u64,
    path: &Path,
) -> Result<()> {
    let spec_json = serde_json::to_vec(model.spec()).expect("spec serializes");
    let fingerprint = Sha256::digest(&spec_json);

    let mut out = Vec::new();
    out.extend_from_slice(CAPW_MAGIC);
    out.extend_from_slice(&CAPW_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);
    out.extend_from_slice(&fingerprint);
    out.extend_from_slice(&(class_names.len() as u16).to_le_bytes());
    for name in class_names {
        push_str(&mut out, name);
    }
    push_str(&mut out, INIT_SCHEME);
    out.extend_from_slice(&train_seed.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, tensor) in model.params() {
        push_str(&mut out, name);
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse(bytes: &[u8]) -> Result<(ModelSpec, ArchiveMeta, BTreeMap<String, Tensor<f32>>)> {
    let mut r = Cursor::new(bytes);
    if r.take(4, CAPW)? != CAPW_MAGIC {
        return Err(Error::BadMagic { container: CAPW });
    }
    let version = r.u16(CAPW)?;
    if version != CAPW_VERSION {
        return Err(Error::UnsupportedVersion {
            container: CAPW,
            found: version,
            expected: CAPW_VERSION,
        });
    }
    let spec_len = r.u32(CAPW)? as usize;
    let spec_json = r.take(spec_len, CAPW)?;
    let stored_fingerprint: [u8; 32] = r.take(32, CAPW)?.try_into().expect("32 bytes");
    let actual: [u8; 32] = Sha256::digest(spec_json).into();
    if actual != stored_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: hex(&actual),
            found: hex(&stored_fingerprint),
        });
    }
    let spec: ModelSpec = serde_json::from_slice(spec_json).map_err(|e| Error::LengthMismatch {
        container: CAPW,
        reason: format!("embedded spec does not parse: {}", e),
    })?;

    let n_classes = r.u16(CAPW)? as usize;
    let mut class_names = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        class_names.push(read_str(&mut r)?);
    }
    let init_scheme = read_str(&mut r)?;
    let train_seed = r.u64(CAPW)?;
    let n_tensors = r.u32(CAPW)? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = read_str(&mut r)?;
        let ndims = r.take(1, CAPW)?[0] as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32(CAPW)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32(CAPW)?);
        }
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::LengthMismatch {
            container: CAPW,
            reason: format!("{} trailing bytes after tensor payload", r.remaining()),
        });
    }
    let meta = ArchiveMeta {
        model_name: spec.name.clone(),
        class_names,
        init_scheme,
        train_seed,
        fingerprint: stored_fingerprint,
    };
    Ok((spec, meta, params))
}

/// Load an archive and validate it against an expected spec. A weight
/// file produced by a different architecture is rejected with a
/// fingerprint error.
pub fn load_weights(path: &Path, expected: &ModelSpec) -> Result<(Model<f32>, ArchiveMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (spec, meta, params) = parse(&bytes)?;
    let expected_fp = spec_fingerprint(expected);
    if expected_fp != meta.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: hex(&expected_fp),
            found: hex(&meta.fingerprint),
        });
    }
    Ok((Model::from_params(spec, params)?, meta))
}

/// Load an archive using its embedded spec.
pub fn load_weights_auto(path: &Path) -> Result<(Model<f32>, ArchiveMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (spec, meta, params) = parse(&bytes)?;
    Ok((Model::from_params(spec, params)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{}", i)).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.capw");
        let model = Model::<f32>::init(zoo::build_mlp_head(16, 3).unwrap(), 5).unwrap();
        save_weights(&model, &names(3), 5, &path).unwrap();
        let (loaded, meta) = load_weights(&path, model.spec()).unwrap();
        assert_eq!(meta.model_name, "mlp-head");
        assert_eq!(meta.train_seed, 5);
        assert_eq!(meta.class_names, names(3));
        assert_eq!(meta.init_scheme, INIT_SCHEME);
        for (name, tensor) in model.params() {
            let a: Vec<u32> = tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = loaded.params()[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "tensor {} drifted", name);
        }
    }

    #[test]
    fn wrong_spec_is_a_fingerprint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.capw");
        let model = Model::<f32>::init(zoo::build_mlp_head(16, 3).unwrap(), 1).unwrap();
        save_weights(&model, &names(3), 1, &path).unwrap();
        let other = zoo::build_mlp_head(32, 3).unwrap();
        assert!(matches!(
            load_weights(&path, &other),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn corruption_kinds_raise_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.capw");
        let model = Model::<f32>::init(zoo::build_mlp_head(8, 2).unwrap(), 2).unwrap();
        save_weights(&model, &names(2), 2, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Z';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            load_weights_auto(&path),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 42;
        fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_weights_auto(&path),
            Err(Error::UnsupportedVersion { .. })
        ));

        // Flip a byte inside the stored fingerprint.
        let fp_offset = 4 + 2 + 4 + u32::from_le_bytes(good[6..10].try_into().unwrap()) as usize;
        let mut bad_fp = good.clone();
        bad_fp[fp_offset] ^= 0xFF;
        fs::write(&path, &bad_fp).unwrap();
        assert!(matches!(
            load_weights_auto(&path),
            Err(Error::FingerprintMismatch { .. })
        ));

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 1);
        fs::write(&path, &truncated).unwrap();
        assert!(matches!(
            load_weights_auto(&path),
            Err(Error::Truncated { .. })
        ));
    }
}
