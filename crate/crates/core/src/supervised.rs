//! U-Net segmentation reference trained on labeled lesioned slices.

use crate::checkpoint::{read_bundle, write_bundle};
use crate::data::{GroundTruth, Slice};
use crate::error::{Error, Result};
use crate::eval::DifferenceMap;
use crate::models::losses::batch_tensors;
use crate::rng;
use lesionbench_nn::layers::{conv2d, conv_transpose2d, init_conv2d, init_conv_transpose2d};
use lesionbench_nn::{no_grad, Adam, Float, ParamStore, Var, Weights};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

const SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub seed: u64,
    /// Resolution levels; the input is halved `depth - 1` times.
    pub depth: usize,
    pub base_channels: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { seed: 0, depth: 3, base_channels: 16, lr: 1e-3, beta1: 0.9, beta2: 0.999, batch_size: 16, epochs: 20, max_steps: None }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.batch_size == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("U-Net depth, channels, batch size, epochs and lr must be > 0".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug)]
pub struct UNetModel {
    pub params: ParamStore<f32>,
    pub config: UNetConfig,
    /// Mean masked BCE per epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct UNetMeta {
    kind: String,
    config: UNetConfig,
    loss_history: Vec<f64>,
}

impl UNetModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<(String, ArrayD<f32>)> = self.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let meta = UNetMeta { kind: "UNET".into(), config: self.config.clone(), loss_history: self.loss_history.clone() };
        write_bundle(dir, &tensors, serde_json::to_value(meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (tensors, meta) = read_bundle(dir)?;
        let meta: UNetMeta =
            serde_json::from_value(meta).map_err(|e| Error::Integrity { path: dir.to_path_buf(), message: e.to_string() })?;
        if meta.kind != "UNET" {
            return Err(Error::Integrity { path: dir.to_path_buf(), message: format!("kind {} is not UNET", meta.kind) });
        }
        let mut params = ParamStore::new();
        for (n, v) in tensors {
            params.insert(n, v);
        }
        Ok(Self { params, config: meta.config, loss_history: meta.loss_history })
    }
}

pub fn init_unet<F: Float, R: rand::Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &UNetConfig, rng: &mut R) {
    let d = cfg.depth;
    let mut cin = 1;
    for l in 0..d {
        let c = cfg.channels(l);
        init_conv2d(store, &format!("down{l}.a"), cin, c, 3, rng);
        init_conv2d(store, &format!("down{l}.b"), c, c, 3, rng);
        if l + 1 < d {
            init_conv2d(store, &format!("pool{l}"), c, c, 2, rng);
        }
        cin = c;
    }
    for l in (0..d - 1).rev() {
        let c = cfg.channels(l);
        init_conv_transpose2d(store, &format!("up{l}"), cfg.channels(l + 1), c, 2, 2, rng);
        init_conv2d(store, &format!("dec{l}.a"), 2 * c, c, 3, rng);
        init_conv2d(store, &format!("dec{l}.b"), c, c, 3, rng);
    }
    init_conv2d(store, "head", cfg.channels(0), 1, 1, rng);
}

fn block<F: Float>(w: &impl Weights<F>, name: &str, x: &Var<F>) -> Var<F> {
    let h = conv2d(w, &format!("{name}.a"), x, 3, 1, 1).leaky_relu(F::of(SLOPE));
    conv2d(w, &format!("{name}.b"), &h, 3, 1, 1).leaky_relu(F::of(SLOPE))
}

/// Logits `[1, B, H, W]` for `x: [1, B, H, W]`.
pub fn unet_forward<F: Float>(w: &impl Weights<F>, depth: usize, x: &Var<F>) -> Var<F> {
    let mut skips = Vec::with_capacity(depth);
    let mut h = x.clone();
    for l in 0..depth {
        h = block(w, &format!("down{l}"), &h);
        if l + 1 < depth {
            skips.push(h.clone());
            h = conv2d(w, &format!("pool{l}"), &h, 2, 2, 0).leaky_relu(F::of(SLOPE));
        }
    }
    for l in (0..depth - 1).rev() {
        let up = conv_transpose2d(w, &format!("up{l}"), &h, 2, 2, 0).leaky_relu(F::of(SLOPE));
        let skip = skips.pop().expect("one skip per level");
        h = block(w, &format!("dec{l}"), &Var::concat(&[skip, up], 0));
    }
    conv2d(w, "head", &h, 1, 1, 0)
}

/// Mean binary cross-entropy over in-mask pixels, computed from logits as
/// `softplus(l) - y l`.
pub fn masked_bce<F: Float>(logits: &Var<F>, labels: &Var<F>, mask: &Var<F>) -> Var<F> {
    let per = logits.softplus().sub(&labels.mul(logits)).mul(mask);
    let n = mask.value().sum().max(F::one());
    per.sum().scale(F::one() / n)
}

fn check_size(cfg: &UNetConfig, s: &Slice) -> Result<()> {
    let (h, w) = s.dim();
    let f = 1usize << (cfg.depth - 1);
    if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(Error::shape(&[h.div_ceil(f) * f, w.div_ceil(f) * f], &[h, w]));
    }
    Ok(())
}

fn label_tensor(items: &[&(Slice, GroundTruth)]) -> ArrayD<f32> {
    let (h, w) = items[0].0.dim();
    ArrayD::from_shape_fn(IxDyn(&[1, items.len(), h, w]), |i| if items[i[1]].1.labels[[i[2], i[3]]] { 1.0 } else { 0.0 })
}

/// Fit on labeled slices with Adam on the masked BCE.
pub fn train_unet(labeled: &[(Slice, GroundTruth)], cfg: &UNetConfig) -> Result<UNetModel> {
    cfg.validate()?;
    let Some(first) = labeled.first() else {
        return Err(Error::EmptyDataset("no labeled slices".into()));
    };
    for (s, gt) in labeled {
        check_size(cfg, s)?;
        if s.dim() != first.0.dim() {
            return Err(Error::shape(first.0.pixels.shape(), s.pixels.shape()));
        }
        if gt.labels.dim() != s.dim() {
            return Err(Error::shape(s.pixels.shape(), gt.labels.shape()));
        }
    }
    let positives =
        labeled.iter().map(|(s, gt)| gt.labels.iter().zip(s.mask.iter()).filter(|(&l, &m)| l && m).count()).sum::<usize>();
    if positives == 0 {
        return Err(Error::DegenerateLabels("no positive in-mask pixels in the training set".into()));
    }
    let mut params = ParamStore::<f32>::new();
    init_unet(&mut params, cfg, &mut rng::stream(cfg.seed, "unet-init", 0));
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::new();
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "unet-shuffle", epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|c| steps >= c) {
                break;
            }
            let items: Vec<&(Slice, GroundTruth)> = chunk.iter().map(|&i| &labeled[i]).collect();
            let slices: Vec<&Slice> = items.iter().map(|(s, _)| s).collect();
            let (x, m) = batch_tensors::<f32>(&slices);
            let y = label_tensor(&items);
            let bound = params.bind();
            let loss = masked_bce(&unet_forward(&bound, cfg.depth, &Var::constant(x)), &Var::constant(y), &Var::constant(m));
            let l = loss.item() as f64;
            steps += 1;
            if !l.is_finite() {
                return Err(Error::Divergence { kind: "UNET".into(), step: steps, checkpoint: None });
            }
            let g = loss.backward();
            opt.step(&mut params, &bound, &g);
            sum += l;
            count += 1;
        }
        if count == 0 {
            break;
        }
        history.push(sum / count as f64);
        log::info!("UNET epoch {epoch}: loss {:.4}", sum / count as f64);
    }
    Ok(UNetModel { params, config: cfg.clone(), loss_history: history })
}

/// Foreground probabilities in `[0, 1]`, one map per slice.
pub fn predict_batch(model: &UNetModel, slices: &[Slice]) -> Result<Vec<Array2<f64>>> {
    for s in slices {
        check_size(&model.config, s)?;
    }
    let mut out = Vec::with_capacity(slices.len());
    no_grad(|| {
        let w = model.params.bind_frozen();
        for chunk in slices.chunks(16) {
            let refs: Vec<&Slice> = chunk.iter().collect();
            if refs.iter().any(|s| s.dim() != refs[0].dim()) {
                // mixed sizes: one at a time
                for s in &refs {
                    out.push(predict_one(&w, model.config.depth, s));
                }
                continue;
            }
            let (x, _) = batch_tensors::<f32>(&refs);
            let logits = unet_forward(&w, model.config.depth, &Var::constant(x)).value().clone();
            let logits = logits.index_axis_move(Axis(0), 0);
            for b in 0..chunk.len() {
                let l = logits.index_axis(Axis(0), b);
                out.push(l.mapv(|v| sigmoid(v as f64)).into_dimensionality().expect("2d"));
            }
        }
    });
    Ok(out)
}

fn predict_one(w: &impl Weights<f32>, depth: usize, s: &Slice) -> Array2<f64> {
    let (x, _) = batch_tensors::<f32>(&[s]);
    let l = unet_forward(w, depth, &Var::constant(x)).value().clone();
    let (h, wd) = s.dim();
    l.into_shape_with_order((h, wd)).expect("one slice").mapv(|v| sigmoid(v as f64))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn predict(model: &UNetModel, slice: &Slice) -> Result<Array2<f64>> {
    Ok(predict_batch(model, std::slice::from_ref(slice))?.pop().expect("one slice"))
}

/// Probability maps in the evaluation format (zero outside the mask).
pub fn probability_maps(model: &UNetModel, slices: &[Slice]) -> Result<Vec<DifferenceMap>> {
    predict_batch(model, slices)?.into_iter().zip(slices).map(|(p, s)| DifferenceMap::masked(p, &s.mask, "UNET")).collect()
}
