//! Named-array bundles on disk.
//!
//! A bundle directory holds one `<name>.f32` raster per array (little-endian
//! float32, row-major; `/` in names becomes `__`) and a `bundle.json`
//! listing `{name, shape, file}` for every array plus free-form metadata.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleIndex {
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

pub const INDEX_FILE: &str = "bundle.json";

fn file_name(name: &str) -> String {
    format!("{}.f32", name.replace('/', "__"))
}

pub fn write_bundle(dir: &Path, tensors: &[(String, ArrayD<f32>)], meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, arr) in tensors {
        let file = file_name(name);
        let mut bytes = Vec::with_capacity(4 * arr.len());
        for v in arr.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(TensorEntry { name: name.clone(), shape: arr.shape().to_vec(), file });
    }
    let index = BundleIndex { tensors: entries, meta };
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<(Vec<(String, ArrayD<f32>)>, serde_json::Value)> {
    let index_path = dir.join(INDEX_FILE);
    let bytes = fs::read(&index_path).map_err(|e| Error::Ingestion { path: index_path.clone(), message: e.to_string() })?;
    let index: BundleIndex = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Integrity { path: index_path.clone(), message: e.to_string() })?;
    let mut out = Vec::with_capacity(index.tensors.len());
    for t in index.tensors {
        let path = dir.join(&t.file);
        let raw = fs::read(&path).map_err(|e| Error::Ingestion { path: path.clone(), message: e.to_string() })?;
        let n: usize = t.shape.iter().product();
        if raw.len() != 4 * n {
            return Err(Error::Integrity {
                path,
                message: format!("shape {:?} needs {} bytes, found {}", t.shape, 4 * n, raw.len()),
            });
        }
        let vals: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push((t.name, ArrayD::from_shape_vec(IxDyn(&t.shape), vals).expect("length checked")));
    }
    Ok((out, index.meta))
}

pub fn bundle_exists(dir: &Path) -> bool {
    dir.join(INDEX_FILE).is_file()
}

/// Short hex digest of any serializable value.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(&Sha256::digest(bytes)[..12])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] * 12 + i[1] * 4 + i[2]) as f32 * 0.1 - 1.0);
        let b = ArrayD::from_elem(IxDyn(&[5]), f32::MIN_POSITIVE);
        let tensors = vec![("enc/conv0.w".to_string(), a), ("b".to_string(), b)];
        write_bundle(dir.path(), &tensors, serde_json::json!({"kind": "AE"})).unwrap();
        let (back, meta) = read_bundle(dir.path()).unwrap();
        assert_eq!(back, tensors);
        assert_eq!(meta["kind"], "AE");
    }

    #[test]
    fn truncated_tensor_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &[("x".into(), ArrayD::zeros(IxDyn(&[4])))], serde_json::Value::Null).unwrap();
        fs::write(dir.path().join("x.f32"), [0u8; 8]).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(content_hash(&(1, "a")), content_hash(&(1, "a")));
        assert_ne!(content_hash(&(1, "a")), content_hash(&(2, "a")));
    }
}
