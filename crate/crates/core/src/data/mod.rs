//! Slices, ground truth, lesion specs and the dataset manifest.

mod nifti_io;
mod store;
mod synth;

pub use nifti_io::{load_volume, Volume};
pub use store::{read_manifest, read_slice, store_slice, write_manifest, DatasetManifest, ManifestEntry, Sidecar, Split};
pub use synth::{
    generate_healthy, generate_healthy_labeled, inject_lesion, tissue_components, Component, SynthSubject,
    SUPPORTED_SIZES,
};

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1like,
    T2like,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::T1like => "T1like",
            Modality::T2like => "T2like",
        })
    }
}

/// One 2D image with its brain mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub pixels: Array2<f32>,
    /// `true` inside the brain.
    pub mask: Array2<bool>,
    pub modality: Modality,
    pub subject_id: String,
    pub slice_index: usize,
}

impl Slice {
    pub fn new(pixels: Array2<f32>, mask: Array2<bool>, modality: Modality, subject_id: impl Into<String>, slice_index: usize) -> Result<Self> {
        let s = Slice { pixels, mask, modality, subject_id: subject_id.into(), slice_index };
        s.validate()?;
        Ok(s)
    }

    /// Shape agreement and finiteness. Mask population is checked separately
    /// by empty-slice removal.
    pub fn validate(&self) -> Result<()> {
        if self.pixels.dim() != self.mask.dim() {
            return Err(Error::Validation(format!(
                "pixels {:?} vs mask {:?} for {}#{}",
                self.pixels.dim(),
                self.mask.dim(),
                self.subject_id,
                self.slice_index
            )));
        }
        if self.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite pixel in {}#{}", self.subject_id, self.slice_index)));
        }
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// In-mask pixel values in row-major order.
    pub fn masked_values(&self) -> Vec<f32> {
        self.pixels.iter().zip(self.mask.iter()).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
    }

    pub fn key(&self) -> String {
        format!("{}_{:04}", self.subject_id, self.slice_index)
    }
}

/// Pixel-wise lesion labels aligned with a slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub labels: Array2<bool>,
}

impl GroundTruth {
    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Bright,
    Dark,
}

/// Parameters of a synthetic lesion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub polarity: Polarity,
    pub radius_px: u32,
    /// Signed intensity shift in the slice's units; sign must match polarity.
    pub intensity_offset: f64,
    /// Width of the soft edge as a fraction of the radius, in `[0, 1]`.
    pub softness: f64,
    pub count: u32,
}

impl LesionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radius_px == 0 {
            return Err(Error::Config("lesion radius must be > 0".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("lesion count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.softness) {
            return Err(Error::Config(format!("softness {} outside [0, 1]", self.softness)));
        }
        // zero offset is allowed: it marks geometry without changing pixels
        let ok = match self.polarity {
            Polarity::Bright => self.intensity_offset >= 0.0,
            Polarity::Dark => self.intensity_offset <= 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("offset {} contradicts {:?} polarity", self.intensity_offset, self.polarity)));
        }
        Ok(())
    }
}
