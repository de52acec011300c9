use super::losses::{self, reparameterize};
use super::net::{self, SampledWeights};
use super::train::check_inputs;
use super::{LatentShape, ModelKind, TrainedModel};
use crate::data::Slice;
use crate::error::Result;
use crate::eval::DifferenceMap;
use crate::rng;
use lesionbench_nn::{no_grad, Var, Weights};
use ndarray::{Array2, ArrayD, Axis, IxDyn};

const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferenceOptions {
    /// Weight samples for VAE_BBB; `None` uses the model's `bbb_samples`.
    pub samples: Option<usize>,
    /// Sample `m` of a VAE_BBB reconstruction uses seed `seed + m`.
    pub seed: u64,
}

/// Latent code of one slice, arrays shaped like the latent (`(h, w, c)` or
/// `(n,)`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: ArrayD<f32>,
    pub log_variance: Option<ArrayD<f32>>,
    pub sample: ArrayD<f32>,
    /// Standard-normal draw behind `sample`, absent for deterministic encoders.
    pub eps: Option<ArrayD<f32>>,
}

/// Internal `[c, 1, h, w]` or `[1, n]` to the public latent layout.
fn to_public(v: &ArrayD<f32>, latent: LatentShape) -> ArrayD<f32> {
    match latent {
        LatentShape::Spatial { h, w, c } => {
            v.view().into_shape_with_order(IxDyn(&[c, h, w])).expect("one sample").permuted_axes(IxDyn(&[1, 2, 0])).to_owned()
        }
        LatentShape::Flat { size } => v.view().into_shape_with_order(IxDyn(&[size])).expect("one sample").to_owned(),
    }
}

/// Point weights used for encoding (posterior means for VAE_BBB).
fn point_weights(model: &TrainedModel) -> lesionbench_nn::ParamStore<f32> {
    if model.kind == ModelKind::VaeBbb {
        super::train::posterior_mean(&model.params)
    } else {
        model.params.clone()
    }
}

/// Encode one slice; the sample is drawn from `seed`.
pub fn encode(model: &TrainedModel, slice: &Slice, seed: u64) -> Result<LatentCode> {
    check_inputs(&model.architecture, std::slice::from_ref(slice), "input")?;
    let arch = &model.architecture;
    let params = point_weights(model);
    no_grad(|| {
        let w = params.bind_frozen();
        let (x, _) = losses::batch_tensors::<f32>(&[slice]);
        let (mu, lv) = net::encode(&w, arch, &Var::constant(x), model.kind.is_stochastic());
        let mean = to_public(mu.value(), arch.latent);
        Ok(match lv {
            None => LatentCode { sample: mean.clone(), mean, log_variance: None, eps: None },
            Some(lv) => {
                let mut r = rng::stream(seed, "encode", 0);
                let eps = net::standard_normal::<f32, _>(mu.shape(), &mut r);
                let z = reparameterize(&mu, &lv, &eps);
                LatentCode {
                    mean,
                    log_variance: Some(to_public(lv.value(), arch.latent)),
                    sample: to_public(z.value(), arch.latent),
                    eps: Some(to_public(&eps, arch.latent)),
                }
            }
        })
    })
}

fn forward_mean(w: &impl Weights<f32>, model: &TrainedModel, x: &Var<f32>) -> ArrayD<f32> {
    let arch = &model.architecture;
    let (z, _) = net::encode(w, arch, x, model.kind.is_stochastic());
    net::decode(w, arch, &z).value().clone()
}

/// Reconstructions (`[B, H, W]`), averaged over weight samples for VAE_BBB.
fn reconstruct_chunk(model: &TrainedModel, slices: &[&Slice], opts: &InferenceOptions) -> ArrayD<f64> {
    let (x, _) = losses::batch_tensors::<f32>(slices);
    let x = Var::constant(x);
    let out = if model.kind == ModelKind::VaeBbb {
        let m = opts.samples.unwrap_or(model.config.bbb_samples).max(1);
        let bound = model.params.bind_frozen();
        let mut acc: Option<ArrayD<f64>> = None;
        for k in 0..m {
            let mut r = rng::stream(opts.seed.wrapping_add(k as u64), "bbb-weights", 0);
            let sw = SampledWeights::draw(&bound, &mut r);
            let y = forward_mean(&sw, model, &x).mapv(f64::from);
            acc = Some(match acc {
                Some(a) => a + y,
                None => y,
            });
        }
        acc.expect("m >= 1") / m as f64
    } else {
        forward_mean(&model.params.bind_frozen(), model, &x).mapv(f64::from)
    };
    out.index_axis_move(Axis(0), 0)
}

fn reconstruct_f64(model: &TrainedModel, slices: &[Slice], opts: &InferenceOptions) -> Result<Vec<Array2<f64>>> {
    check_inputs(&model.architecture, slices, "input")?;
    let mut out = Vec::with_capacity(slices.len());
    no_grad(|| {
        for chunk in slices.chunks(CHUNK) {
            let refs: Vec<&Slice> = chunk.iter().collect();
            let y = reconstruct_chunk(model, &refs, opts);
            for b in 0..chunk.len() {
                out.push(y.index_axis(Axis(0), b).to_owned().into_dimensionality().expect("2d"));
            }
        }
    });
    Ok(out)
}

/// Reconstruction of each slice, same shape as the input.
pub fn reconstruct_batch(model: &TrainedModel, slices: &[Slice], opts: &InferenceOptions) -> Result<Vec<Array2<f32>>> {
    Ok(reconstruct_f64(model, slices, opts)?.into_iter().map(|a| a.mapv(|v| v as f32)).collect())
}

pub fn reconstruct(model: &TrainedModel, slice: &Slice, opts: &InferenceOptions) -> Result<Slice> {
    let y = reconstruct_batch(model, std::slice::from_ref(slice), opts)?.pop().expect("one slice");
    Ok(Slice { pixels: y, ..slice.clone() })
}

/// `|x - x'|` inside the mask, 0 outside.
pub fn anomaly_maps(model: &TrainedModel, slices: &[Slice], opts: &InferenceOptions) -> Result<Vec<DifferenceMap>> {
    let recs = reconstruct_f64(model, slices, opts)?;
    slices
        .iter()
        .zip(recs)
        .map(|(s, r)| {
            let d = ndarray::Zip::from(&s.pixels).and(&r).map_collect(|&x, &y| (x as f64 - y).abs());
            DifferenceMap::masked(d, &s.mask, model.kind.name())
        })
        .collect()
}

pub fn anomaly_map(model: &TrainedModel, slice: &Slice, opts: &InferenceOptions) -> Result<DifferenceMap> {
    Ok(anomaly_maps(model, std::slice::from_ref(slice), opts)?.pop().expect("one slice"))
}
