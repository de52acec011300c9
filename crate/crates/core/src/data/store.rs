//! Raw slice store.
//!
//! A slice `<id>` is written as
//!
//! * `<id>.f32`  - pixels, little-endian IEEE-754 float32, row-major
//! * `<id>.mask` - one byte per pixel (0 or 1), row-major
//! * `<id>.gt`   - optional ground truth, same encoding as the mask
//! * `<id>.json` - sidecar `{shape: [h, w], modality, subject_id, slice_index, mask_file, gt_file?}`
//!
//! A manifest is a JSON document listing slice files of one split.

use super::{GroundTruth, Modality, Slice};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 2],
    pub modality: Modality,
    pub subject_id: String,
    pub slice_index: usize,
    pub mask_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_file: Option<String>,
}

fn integrity(path: &Path, message: impl Into<String>) -> Error {
    Error::Integrity { path: path.to_path_buf(), message: message.into() }
}

fn encode_bits(bits: &Array2<bool>) -> Vec<u8> {
    bits.iter().map(|&b| b as u8).collect()
}

fn decode_bits(path: &Path, bytes: &[u8], shape: [usize; 2]) -> Result<Array2<bool>> {
    if bytes.len() != shape[0] * shape[1] {
        return Err(integrity(path, format!("expected {} bytes, found {}", shape[0] * shape[1], bytes.len())));
    }
    if let Some(b) = bytes.iter().find(|&&b| b > 1) {
        return Err(integrity(path, format!("invalid mask byte {b}")));
    }
    Ok(Array2::from_shape_vec((shape[0], shape[1]), bytes.iter().map(|&b| b == 1).collect()).expect("length checked"))
}

/// Write `slice` (and optional ground truth) under `dir` with stem `id`.
/// Returns the path of the `.f32` raster.
pub fn store_slice(dir: &Path, id: &str, slice: &Slice, gt: Option<&GroundTruth>) -> Result<PathBuf> {
    slice.validate()?;
    fs::create_dir_all(dir)?;
    let (h, w) = slice.dim();
    let mut raster = Vec::with_capacity(4 * h * w);
    for v in slice.pixels.iter() {
        raster.extend_from_slice(&v.to_le_bytes());
    }
    let raster_path = dir.join(format!("{id}.f32"));
    fs::write(&raster_path, raster)?;
    let mask_file = format!("{id}.mask");
    fs::write(dir.join(&mask_file), encode_bits(&slice.mask))?;
    let gt_file = match gt {
        Some(gt) => {
            if gt.labels.dim() != (h, w) {
                return Err(Error::shape(&[h, w], gt.labels.shape()));
            }
            let f = format!("{id}.gt");
            fs::write(dir.join(&f), encode_bits(&gt.labels))?;
            Some(f)
        }
        None => None,
    };
    let sidecar = Sidecar {
        shape: [h, w],
        modality: slice.modality,
        subject_id: slice.subject_id.clone(),
        slice_index: slice.slice_index,
        mask_file,
        gt_file,
    };
    fs::write(dir.join(format!("{id}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(raster_path)
}

/// Read a slice given its `.f32` raster path (or the stem without extension).
pub fn read_slice(path: &Path) -> Result<(Slice, Option<GroundTruth>)> {
    let stem = path.with_extension("");
    let dir = stem.parent().map(Path::to_path_buf).unwrap_or_default();
    let sidecar_path = stem.with_extension("json");
    let raster_path = stem.with_extension("f32");
    let sidecar_bytes = fs::read(&sidecar_path)
        .map_err(|e| Error::Ingestion { path: sidecar_path.clone(), message: e.to_string() })?;
    let sidecar: Sidecar =
        serde_json::from_slice(&sidecar_bytes).map_err(|e| integrity(&sidecar_path, format!("corrupt sidecar: {e}")))?;
    let [h, w] = sidecar.shape;
    let raster =
        fs::read(&raster_path).map_err(|e| Error::Ingestion { path: raster_path.clone(), message: e.to_string() })?;
    if raster.len() != 4 * h * w {
        return Err(integrity(
            &raster_path,
            format!("sidecar shape {h}x{w} needs {} bytes, raster has {}", 4 * h * w, raster.len()),
        ));
    }
    let pixels: Vec<f32> = raster.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let mask_path = dir.join(&sidecar.mask_file);
    let mask_bytes = fs::read(&mask_path).map_err(|e| Error::Ingestion { path: mask_path.clone(), message: e.to_string() })?;
    let mask = decode_bits(&mask_path, &mask_bytes, sidecar.shape)?;
    let gt = match &sidecar.gt_file {
        Some(f) => {
            let p = dir.join(f);
            let bytes = fs::read(&p).map_err(|e| Error::Ingestion { path: p.clone(), message: e.to_string() })?;
            Some(GroundTruth { labels: decode_bits(&p, &bytes, sidecar.shape)? })
        }
        None => None,
    };
    let slice = Slice {
        pixels: Array2::from_shape_vec((h, w), pixels).expect("length checked"),
        mask,
        modality: sidecar.modality,
        subject_id: sidecar.subject_id,
        slice_index: sidecar.slice_index,
    };
    slice.validate().map_err(|e| integrity(&raster_path, e.to_string()))?;
    Ok((slice, gt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Raster path relative to the manifest's directory.
    pub slice_file: String,
    pub modality: Modality,
    pub has_ground_truth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub preprocessing_fingerprint: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if let Some(bad) = self.entries.iter().find(|e| e.modality != first.modality) {
                return Err(Error::Validation(format!(
                    "manifest mixes modalities {} and {} ({})",
                    first.modality, bad.modality, bad.subject_id
                )));
            }
        }
        Ok(())
    }

    /// Load every entry; `base` is the directory the manifest lives in.
    pub fn load(&self, base: &Path) -> Result<Vec<(Slice, Option<GroundTruth>)>> {
        self.validate()?;
        self.entries.iter().map(|e| read_slice(&base.join(&e.slice_file))).collect()
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), message: e.to_string() })?;
    let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| integrity(path, e.to_string()))?;
    m.validate()?;
    Ok(m)
}
