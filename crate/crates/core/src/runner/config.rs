//! Declarative experiment configuration (TOML).

use crate::baselines::EmConfig;
use crate::checkpoint::content_hash;
use crate::data::{LesionSpec, Modality, SUPPORTED_SIZES};
use crate::error::{Error, Result};
use crate::eval::GridSpec;
use crate::models::{Architecture, LatentShape, ModelKind, TrainConfig};
use crate::preprocess::PreprocessConfig;
use crate::supervised::UNetConfig;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory; relative paths resolve against the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_preprocess")]
    pub preprocess: PreprocessConfig,
    pub datasets: Vec<DatasetConfig>,
    pub detectors: Vec<DetectorConfig>,
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_preprocess() -> PreprocessConfig {
    PreprocessConfig { target_size: 64, min_mask_pixels: 1 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// ROC CSVs are thinned to at most this many points.
    #[serde(default = "default_roc_points")]
    pub roc_points: usize,
    /// Panels are drawn for the first `max_panels` test slices (all if absent).
    #[serde(default)]
    pub max_panels: Option<usize>,
}

fn default_roc_points() -> usize {
    1000
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { roc_points: default_roc_points(), max_panels: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifests: Option<ManifestPaths>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub modality: Modality,
    pub size: usize,
    /// Healthy training slices.
    pub train: usize,
    /// Healthy validation slices for early stopping.
    #[serde(default)]
    pub val: usize,
    /// Lesioned test slices.
    pub test: usize,
    /// Lesioned slices with labels for the supervised reference.
    #[serde(default)]
    pub labeled: usize,
    pub lesion: LesionSpec,
}

/// Pre-stored slice manifests (raw intensities; preprocessing still runs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPaths {
    pub train: PathBuf,
    #[serde(default)]
    pub val: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default)]
    pub labeled: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Mean,
    Gmm,
    UNet,
    Model(ModelKind),
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Mean => "mean",
            DetectorKind::Gmm => "GMM",
            DetectorKind::UNet => "UNET",
            DetectorKind::Model(k) => k.name(),
        }
    }

    pub fn default_grid(self) -> GridSpec {
        match self {
            DetectorKind::Gmm | DetectorKind::UNet => GridSpec::Probability,
            _ => GridSpec::Difference,
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "MEAN" => DetectorKind::Mean,
            "GMM" => DetectorKind::Gmm,
            "UNET" | "U_NET" => DetectorKind::UNet,
            "AE" => DetectorKind::Model(ModelKind::Ae),
            "DAE" => DetectorKind::Model(ModelKind::Dae),
            "VAE" => DetectorKind::Model(ModelKind::Vae),
            "VAE_BBB" => DetectorKind::Model(ModelKind::VaeBbb),
            "AAE" => DetectorKind::Model(ModelKind::Aae),
            "ALPHA_GAN" | "AGAN" => DetectorKind::Model(ModelKind::AlphaGan),
            _ => return Err(Error::Config(format!("unknown detector kind {s:?}"))),
        };
        Ok(k)
    }
}

impl Serialize for DetectorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for DetectorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Channel schedule and latent of a network detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub channels: Vec<usize>,
    pub latent: LatentShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drec_channels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Row label; must be unique.
    pub name: String,
    pub kind: DetectorKind,
    /// Resolution the detector works at; maps are upsampled back for
    /// evaluation. Defaults to the dataset resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// mean: per-pixel std map instead of sigma = 1.
    #[serde(default)]
    pub sigma_map: bool,
    /// GMM: number of tissue components.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    /// GMM: EM settings including the outlier likelihood.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<EmConfig>,
    /// Networks: omitted means the full-scale schedule for the input size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ArchitectureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unet: Option<UNetConfig>,
}

impl DetectorConfig {
    pub fn grid(&self) -> GridSpec {
        self.grid.unwrap_or_else(|| self.kind.default_grid())
    }

    pub fn components(&self) -> usize {
        self.components.unwrap_or(3)
    }

    pub fn em(&self) -> EmConfig {
        self.em.clone().unwrap_or_default()
    }

    pub fn input_size(&self, dataset_size: usize) -> usize {
        self.input_size.unwrap_or(dataset_size)
    }

    /// Architecture at `input_size`.
    pub fn architecture(&self, input_size: usize) -> Result<Architecture> {
        let DetectorKind::Model(kind) = self.kind else {
            return Err(Error::Config(format!("{} has no network architecture", self.name)));
        };
        match &self.architecture {
            None => Architecture::full_scale(kind, input_size),
            Some(spec) => {
                let mut a = Architecture::new(input_size, spec.channels.clone(), spec.latent)?;
                if let Some(h) = spec.critic_hidden {
                    a.critic_hidden = h;
                }
                if let Some(d) = &spec.drec_channels {
                    a.drec_channels = d.clone();
                }
                a.validate()?;
                Ok(a)
            }
        }
    }

    /// Training settings with the experiment seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone().unwrap_or_default() }
    }

    pub fn unet_config(&self, seed: u64) -> UNetConfig {
        UNetConfig { seed, ..self.unet.clone().unwrap_or_default() }
    }

    fn validate(&self, dataset_size: Option<usize>) -> Result<()> {
        let ctx = |m: String| Error::Config(format!("detector {}: {m}", self.name));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ctx("name must be non-empty and free of path separators".into()));
        }
        self.grid().thresholds().map_err(|e| ctx(e.to_string()))?;
        if self.input_size == Some(0) {
            return Err(ctx("input_size must be > 0".into()));
        }
        let misplaced = |field: &str, present: bool, allowed: bool| {
            if present && !allowed {
                Err(ctx(format!("`{field}` does not apply to kind {}", self.kind)))
            } else {
                Ok(())
            }
        };
        let is_model = matches!(self.kind, DetectorKind::Model(_));
        misplaced("sigma_map", self.sigma_map, self.kind == DetectorKind::Mean)?;
        misplaced("components", self.components.is_some(), self.kind == DetectorKind::Gmm)?;
        misplaced("em", self.em.is_some(), self.kind == DetectorKind::Gmm)?;
        misplaced("architecture", self.architecture.is_some(), is_model)?;
        misplaced("train", self.train.is_some(), is_model)?;
        misplaced("unet", self.unet.is_some(), self.kind == DetectorKind::UNet)?;
        if self.components == Some(0) {
            return Err(ctx("components must be >= 1".into()));
        }
        if let Some(em) = &self.em {
            if !(em.lambda_out >= 0.0 && em.lambda_out.is_finite()) || em.max_iter == 0 {
                return Err(ctx("lambda_out must be finite and >= 0, max_iter > 0".into()));
            }
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| ctx(e.to_string()))?;
        }
        if let Some(u) = &self.unet {
            u.validate().map_err(|e| ctx(e.to_string()))?;
        }
        if let (true, Some(size)) = (is_model, dataset_size) {
            self.architecture(self.input_size(size)).map_err(|e| ctx(e.to_string()))?;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        if self.datasets.is_empty() || self.detectors.is_empty() {
            return Err(Error::Config("at least one dataset and one detector are required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for d in &self.datasets {
            if d.name.is_empty() || d.name.contains(['/', '\\']) || !names.insert(&d.name) {
                return Err(Error::Config(format!("dataset name {:?} is empty, duplicated or contains a path separator", d.name)));
            }
            match (&d.synthetic, &d.manifests) {
                (Some(s), None) => {
                    if !SUPPORTED_SIZES.contains(&s.size) {
                        return Err(Error::Config(format!("dataset {}: unsupported size {}", d.name, s.size)));
                    }
                    if s.train == 0 || s.test == 0 {
                        return Err(Error::Config(format!("dataset {}: train and test counts must be > 0", d.name)));
                    }
                    s.lesion.validate()?;
                }
                (None, Some(_)) => {}
                _ => return Err(Error::Config(format!("dataset {}: set exactly one of `synthetic` or `manifests`", d.name))),
            }
        }
        let mut names = std::collections::HashSet::new();
        for det in &self.detectors {
            if !names.insert(&det.name) {
                return Err(Error::Config(format!("duplicate detector name {:?}", det.name)));
            }
            det.validate(Some(self.preprocess.target_size))?;
        }
        Ok(())
    }

    /// Keep only the named detectors, in config order.
    pub fn select_detectors(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.detectors.iter().any(|d| &d.name == n) {
                return Err(Error::Config(format!("no detector named {n:?} in the config")));
            }
        }
        self.detectors.retain(|d| names.contains(&d.name));
        Ok(())
    }

    pub fn dataset_needs_labels(&self) -> bool {
        self.detectors.iter().any(|d| d.kind == DetectorKind::UNet)
    }
}
