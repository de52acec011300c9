//! Auto-encoder family detectors: AE, DAE, VAE, Bayes-by-backprop VAE, AAE
//! with a WGAN-GP latent critic, and alpha-GAN.

mod infer;
pub mod losses;
pub mod net;
mod train;

pub use infer::{anomaly_map, anomaly_maps, encode, reconstruct, reconstruct_batch, InferenceOptions, LatentCode};
pub use losses::{alpha_gan_losses_for as alpha_gan_losses, elbo_loss, recon_loss};
pub use train::{train, untrained};

use crate::checkpoint::{read_bundle, write_bundle};
use crate::error::{Error, Result};
use lesionbench_nn::ParamStore;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "AE")]
    Ae,
    #[serde(rename = "DAE")]
    Dae,
    #[serde(rename = "VAE")]
    Vae,
    #[serde(rename = "VAE_BBB")]
    VaeBbb,
    #[serde(rename = "AAE")]
    Aae,
    #[serde(rename = "ALPHA_GAN")]
    AlphaGan,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::Ae, ModelKind::Dae, ModelKind::Vae, ModelKind::VaeBbb, ModelKind::Aae, ModelKind::AlphaGan];

    /// Encoder outputs a mean and a log-variance.
    pub fn is_stochastic(self) -> bool {
        matches!(self, ModelKind::Vae | ModelKind::VaeBbb | ModelKind::Aae)
    }

    pub fn has_latent_critic(self) -> bool {
        matches!(self, ModelKind::Aae | ModelKind::AlphaGan)
    }

    pub fn has_recon_critic(self) -> bool {
        self == ModelKind::AlphaGan
    }

    pub fn is_variational(self) -> bool {
        matches!(self, ModelKind::Vae | ModelKind::VaeBbb)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ae => "AE",
            ModelKind::Dae => "DAE",
            ModelKind::Vae => "VAE",
            ModelKind::VaeBbb => "VAE_BBB",
            ModelKind::Aae => "AAE",
            ModelKind::AlphaGan => "ALPHA_GAN",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LatentShape {
    /// Output of the last encoder convolution, `(h, w, c)`.
    Spatial { h: usize, w: usize, c: usize },
    /// Dense layer on top of the flattened last feature map.
    Flat { size: usize },
}

impl LatentShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            LatentShape::Spatial { h, w, c } => vec![h, w, c],
            LatentShape::Flat { size } => vec![size],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LatentShape::Spatial { h, w, c } => write!(f, "({h},{w},{c})"),
            LatentShape::Flat { size } => write!(f, "{size}"),
        }
    }
}

/// Stride-2 convolutional encoder (kernel 4, padding 1), mirrored
/// transposed-convolution decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    /// Output channels of each encoder stage; the last entry is the latent
    /// channel count for spatial latents.
    pub channels: Vec<usize>,
    pub latent: LatentShape,
    /// Hidden width of the two-layer latent critic.
    #[serde(default = "default_critic_hidden")]
    pub critic_hidden: usize,
    /// Stage channels of the reconstruction critic.
    #[serde(default = "default_drec_channels")]
    pub drec_channels: Vec<usize>,
}

fn default_critic_hidden() -> usize {
    64
}

fn default_drec_channels() -> Vec<usize> {
    vec![8, 16, 32]
}

impl Architecture {
    pub fn new(input_size: usize, channels: Vec<usize>, latent: LatentShape) -> Result<Self> {
        let a = Architecture {
            input_size,
            channels,
            latent,
            critic_hidden: default_critic_hidden(),
            drec_channels: default_drec_channels(),
        };
        a.validate()?;
        Ok(a)
    }

    /// Spatial extent after all encoder stages.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channel schedule must be non-empty and positive".into()));
        }
        let n = self.channels.len();
        if n >= usize::BITS as usize || !self.input_size.is_multiple_of(1 << n) || self.input_size >> n == 0 {
            return Err(Error::Config(format!("input {} not divisible by 2^{n}", self.input_size)));
        }
        if let LatentShape::Spatial { h, w, c } = self.latent {
            let s = self.feature_size();
            if (h, w, c) != (s, s, self.feature_channels()) {
                return Err(Error::Config(format!(
                    "spatial latent ({h},{w},{c}) does not match encoder output ({s},{s},{})",
                    self.feature_channels()
                )));
            }
        }
        if let LatentShape::Flat { size: 0 } = self.latent {
            return Err(Error::Config("flat latent size must be > 0".into()));
        }
        if self.input_size >> self.drec_channels.len() == 0 {
            return Err(Error::Config("reconstruction critic too deep for the input".into()));
        }
        Ok(())
    }

    /// Full-scale layout: six stages `(32, 64, 128, 128, 128, 64)` give a
    /// `(2,2,64)` latent at 128 px and `(4,4,64)` at 256 px.
    pub fn full_scale(kind: ModelKind, input_size: usize) -> Result<Self> {
        let channels = vec![32, 64, 128, 128, 128, 64];
        let s = input_size >> channels.len();
        let latent = match kind {
            ModelKind::Ae | ModelKind::Dae => LatentShape::Flat { size: 256 },
            ModelKind::AlphaGan => LatentShape::Flat { size: if input_size >= 256 { 256 } else { 128 } },
            _ => LatentShape::Spatial { h: s, w: s, c: 64 },
        };
        let mut a = Self::new(input_size, channels, latent)?;
        a.drec_channels = vec![32, 64, 128, 128];
        a.validate()?;
        Ok(a)
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on generator/optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop when validation reconstruction has not improved by more than
    /// `min_rel_improvement` for `patience` epochs.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub n_critic: usize,
    pub gp_coeff: f64,
    pub dae_sigma: f64,
    pub kl_beta: f64,
    pub bbb_samples: usize,
    pub bbb_init_logstd: f64,
    /// Weight of the latent adversarial term (AAE, alpha-GAN encoder).
    pub adv_weight: f64,
    /// Weight of the reconstruction-critic term (alpha-GAN generator).
    pub rec_adv_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            batch_size: 32,
            max_epochs: 100,
            max_steps: None,
            patience: 10,
            min_rel_improvement: 1e-3,
            n_critic: 5,
            gp_coeff: 10.0,
            dae_sigma: 0.5,
            kl_beta: 1.0,
            bbb_samples: 16,
            bbb_init_logstd: -6.0,
            adv_weight: 1.0,
            rec_adv_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.bbb_samples == 0 {
            return Err(Error::Config("batch_size, max_epochs and bbb_samples must be > 0".into()));
        }
        if !(self.lr > 0.0) || self.dae_sigma < 0.0 || self.gp_coeff < 0.0 || self.kl_beta < 0.0 {
            return Err(Error::Config("lr must be > 0; sigma, gp_coeff and kl_beta >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_recon: f64,
}

/// Parameters of a trained detector.
///
/// Parameter names are prefixed `enc.`, `dec.`, and for the critics
/// `critic.` (latent) and `drec.` (reconstruction). For `VAE_BBB` every
/// weight `w` is stored as `w.mu` and `w.logstd`.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub architecture: Architecture,
    pub params: ParamStore<f32>,
    pub critic: Option<ParamStore<f32>>,
    pub config: TrainConfig,
    /// Mean training objective per epoch.
    pub loss_history: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Number of training slices (scales the BBB weight KL).
    pub num_train: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: ModelKind,
    architecture: Architecture,
    config: TrainConfig,
    loss_history: Vec<f64>,
    epochs: Vec<EpochRecord>,
    num_train: usize,
    critic_names: Vec<String>,
}

impl TrainedModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors: Vec<(String, ndarray::ArrayD<f32>)> =
            self.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let mut critic_names = Vec::new();
        if let Some(c) = &self.critic {
            for (n, v) in c.iter() {
                critic_names.push(n.to_string());
                tensors.push((n.to_string(), v.clone()));
            }
        }
        let meta = ModelMeta {
            kind: self.kind,
            architecture: self.architecture.clone(),
            config: self.config.clone(),
            loss_history: self.loss_history.clone(),
            epochs: self.epochs.clone(),
            num_train: self.num_train,
            critic_names,
        };
        write_bundle(dir, &tensors, serde_json::to_value(meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (tensors, meta) = read_bundle(dir)?;
        let meta: ModelMeta =
            serde_json::from_value(meta).map_err(|e| Error::Integrity { path: dir.to_path_buf(), message: e.to_string() })?;
        let mut params = ParamStore::new();
        let mut critic = ParamStore::new();
        for (n, v) in tensors {
            if meta.critic_names.contains(&n) {
                critic.insert(n, v);
            } else {
                params.insert(n, v);
            }
        }
        Ok(TrainedModel {
            kind: meta.kind,
            architecture: meta.architecture,
            params,
            critic: (!critic.is_empty()).then_some(critic),
            config: meta.config,
            loss_history: meta.loss_history,
            epochs: meta.epochs,
            num_train: meta.num_train,
        })
    }
}

/// Present iff the kind has adversarial components.
pub fn critic_state(model: &TrainedModel) -> Option<&ParamStore<f32>> {
    model.critic.as_ref()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_latents_match_reference_shapes() {
        let v128 = Architecture::full_scale(ModelKind::Vae, 128).unwrap();
        assert_eq!(v128.latent, LatentShape::Spatial { h: 2, w: 2, c: 64 });
        let v256 = Architecture::full_scale(ModelKind::Aae, 256).unwrap();
        assert_eq!(v256.latent, LatentShape::Spatial { h: 4, w: 4, c: 64 });
        assert_eq!(Architecture::full_scale(ModelKind::AlphaGan, 128).unwrap().latent, LatentShape::Flat { size: 128 });
        assert_eq!(Architecture::full_scale(ModelKind::AlphaGan, 256).unwrap().latent, LatentShape::Flat { size: 256 });
        assert_eq!(Architecture::full_scale(ModelKind::Ae, 128).unwrap().latent, LatentShape::Flat { size: 256 });
    }

    #[test]
    fn spatial_latent_must_match_encoder() {
        assert!(Architecture::new(64, vec![8, 16], LatentShape::Spatial { h: 2, w: 2, c: 16 }).is_err());
        assert!(Architecture::new(64, vec![8, 16], LatentShape::Spatial { h: 16, w: 16, c: 16 }).is_ok());
        assert!(Architecture::new(48, vec![8, 16, 32, 64, 64], LatentShape::Flat { size: 8 }).is_err());
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in ModelKind::ALL {
            let s = serde_json::to_string(&k).unwrap();
            assert_eq!(s, format!("\"{}\"", k.name()));
            assert_eq!(serde_json::from_str::<ModelKind>(&s).unwrap(), k);
        }
    }
}
