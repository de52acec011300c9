//! Empty-slice removal, dataset-wide bounding-box crop, in-mask z-scoring
//! and nearest-neighbour resizing, applied in that order.

use crate::data::{GroundTruth, Slice};
use crate::error::{Error, Result};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Half-open pixel box `[row_min, row_max) x [col_min, col_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..self.row_max).contains(&r) && (self.col_min..self.col_max).contains(&c)
    }

    fn union(self, o: BoundingBox) -> BoundingBox {
        BoundingBox {
            row_min: self.row_min.min(o.row_min),
            row_max: self.row_max.max(o.row_max),
            col_min: self.col_min.min(o.col_min),
            col_max: self.col_max.max(o.col_max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Slices with fewer mask pixels than this are dropped.
    pub min_mask_pixels: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_size: 128, min_mask_pixels: 1 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be > 0".into()));
        }
        Ok(())
    }
}

pub fn remove_empty(slices: Vec<Slice>, min_mask_pixels: usize) -> Result<Vec<Slice>> {
    let kept: Vec<Slice> = slices.into_iter().filter(|s| s.mask_count() >= min_mask_pixels).collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!("no slice has >= {min_mask_pixels} mask pixels")));
    }
    Ok(kept)
}

fn mask_box(mask: &Array2<bool>) -> Option<BoundingBox> {
    let mut b: Option<BoundingBox> = None;
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            let px = BoundingBox { row_min: r, row_max: r + 1, col_min: c, col_max: c + 1 };
            b = Some(b.map_or(px, |b| b.union(px)));
        }
    }
    b
}

/// Smallest box containing the union of all masks.
pub fn max_bounding_box(dataset: &[Slice]) -> Result<BoundingBox> {
    let first = dataset.first().ok_or_else(|| Error::EmptyDataset("bounding box of zero slices".into()))?;
    let dim = first.dim();
    let mut acc: Option<BoundingBox> = None;
    for s in dataset {
        if s.dim() != dim {
            return Err(Error::shape(&[dim.0, dim.1], s.pixels.shape()));
        }
        if let Some(b) = mask_box(&s.mask) {
            acc = Some(acc.map_or(b, |a| a.union(b)));
        }
    }
    acc.ok_or_else(|| Error::EmptyDataset("every mask is empty".into()))
}

pub fn crop(slice: &Slice, b: &BoundingBox) -> Result<Slice> {
    let (h, w) = slice.dim();
    if b.row_max > h || b.col_max > w || b.row_min >= b.row_max || b.col_min >= b.col_max {
        return Err(Error::Validation(format!("box {b:?} does not fit a {h}x{w} slice")));
    }
    let sl = s![b.row_min..b.row_max, b.col_min..b.col_max];
    Ok(Slice {
        pixels: slice.pixels.slice(sl).to_owned(),
        mask: slice.mask.slice(sl).to_owned(),
        ..slice.clone()
    })
}

pub fn crop_labels(gt: &GroundTruth, b: &BoundingBox) -> GroundTruth {
    GroundTruth { labels: gt.labels.slice(s![b.row_min..b.row_max, b.col_min..b.col_max]).to_owned() }
}

/// Zero mean, unit population variance inside the mask; zero outside.
pub fn normalize(slice: &Slice) -> Result<Slice> {
    let vals: Vec<f64> = slice.masked_values().into_iter().map(f64::from).collect();
    if vals.len() < 2 {
        return Err(Error::DegenerateSlice(format!("{} has {} mask pixels", slice.key(), vals.len())));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::DegenerateSlice(format!("{} has zero in-mask variance", slice.key())));
    }
    let std = var.sqrt();
    let mut out = slice.clone();
    out.pixels.zip_mut_with(&slice.mask, |v, &m| {
        *v = if m { ((*v as f64 - mean) / std) as f32 } else { 0.0 };
    });
    Ok(out)
}

/// Output `(i, j)` takes input `(floor(i * h_in / h_out), floor(j * w_in / w_out))`.
pub fn resize_nearest_array<T: Clone>(a: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| a[[i * h / out_h, j * w / out_w]].clone())
}

pub fn resize_nearest(slice: &Slice, target: usize) -> Slice {
    Slice {
        pixels: resize_nearest_array(&slice.pixels, target, target),
        mask: resize_nearest_array(&slice.mask, target, target),
        ..slice.clone()
    }
}

pub fn resize_labels(gt: &GroundTruth, target: usize) -> GroundTruth {
    GroundTruth { labels: resize_nearest_array(&gt.labels, target, target) }
}

/// Hash of the configuration and crop box, recorded in manifests.
pub fn fingerprint(cfg: &PreprocessConfig, b: &BoundingBox) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("serializable"));
    h.update(serde_json::to_vec(b).expect("serializable"));
    hex::encode(&h.finalize()[..16])
}

/// Output of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub items: Vec<(Slice, Option<GroundTruth>)>,
    pub bbox: BoundingBox,
    pub fingerprint: String,
}

/// `remove_empty -> crop(max box) -> normalize -> resize`.
///
/// `bbox` overrides the dataset box, so several splits can share one crop.
pub fn run_pipeline(items: Vec<(Slice, Option<GroundTruth>)>, cfg: &PreprocessConfig, bbox: Option<BoundingBox>) -> Result<Preprocessed> {
    cfg.validate()?;
    let items: Vec<_> = items.into_iter().filter(|(s, _)| s.mask_count() >= cfg.min_mask_pixels).collect();
    if items.is_empty() {
        return Err(Error::EmptyDataset(format!("no slice has >= {} mask pixels", cfg.min_mask_pixels)));
    }
    let bbox = match bbox {
        Some(b) => b,
        None => max_bounding_box(&items.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>())?,
    };
    let out = items
        .iter()
        .map(|(s, gt)| {
            let c = crop(s, &bbox)?;
            let n = normalize(&c)?;
            let r = resize_nearest(&n, cfg.target_size);
            let g = gt.as_ref().map(|g| resize_labels(&crop_labels(g, &bbox), cfg.target_size));
            Ok((r, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Preprocessed { items: out, fingerprint: fingerprint(cfg, &bbox), bbox })
}
