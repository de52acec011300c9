//! Per-pixel Gaussian (mean) model and the spatial-prior Gaussian mixture
//! with a constant-likelihood outlier component, fitted per image by EM.

use crate::checkpoint::{read_bundle, write_bundle};
use crate::data::Slice;
use crate::error::{Error, Result};
use crate::eval::DifferenceMap;
use ndarray::{Array2, Array3, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn check_uniform(slices: &[Slice]) -> Result<(usize, usize)> {
    let first = slices.first().ok_or_else(|| Error::EmptyDataset("no training slices".into()))?;
    let dim = first.dim();
    for s in slices {
        if s.dim() != dim {
            return Err(Error::shape(&[dim.0, dim.1], s.pixels.shape()));
        }
    }
    Ok(dim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanModel {
    pub mu: Array2<f32>,
    pub sigma: Array2<f32>,
}

/// Smallest per-pixel std used by the sigma-map variant.
pub const SIGMA_FLOOR: f32 = 1e-2;

/// Element-wise mean of the training slices; `sigma` is 1 unless
/// `sigma_map` asks for the per-pixel population std.
pub fn fit_mean_model(train: &[Slice], sigma_map: bool) -> Result<MeanModel> {
    let (h, w) = check_uniform(train)?;
    let n = train.len() as f64;
    let mut sum = Array2::<f64>::zeros((h, w));
    for s in train {
        sum.zip_mut_with(&s.pixels, |a, &v| *a += v as f64);
    }
    let mean = sum / n;
    let sigma = if sigma_map {
        let mut sq = Array2::<f64>::zeros((h, w));
        for s in train {
            ndarray::Zip::from(&mut sq).and(&s.pixels).and(&mean).for_each(|a, &v, &m| *a += (v as f64 - m).powi(2));
        }
        sq.mapv(|v| ((v / n).sqrt() as f32).max(SIGMA_FLOOR))
    } else {
        Array2::ones((h, w))
    };
    Ok(MeanModel { mu: mean.mapv(|v| v as f32), sigma })
}

/// `|x - mu| / sigma` inside the mask, 0 outside.
pub fn score_mean(model: &MeanModel, slice: &Slice) -> Result<DifferenceMap> {
    if slice.pixels.dim() != model.mu.dim() {
        return Err(Error::shape(model.mu.shape(), slice.pixels.shape()));
    }
    let mut scores = Array2::<f64>::zeros(slice.dim());
    ndarray::Zip::from(&mut scores)
        .and(&slice.pixels)
        .and(&model.mu)
        .and(&model.sigma)
        .and(&slice.mask)
        .for_each(|s, &x, &m, &sd, &inside| {
            if inside {
                *s = (x as f64 - m as f64).abs() / sd as f64;
            }
        });
    DifferenceMap::new(scores, slice.mask.clone(), "mean")
}

impl MeanModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_bundle(
            dir,
            &[("mu".into(), self.mu.clone().into_dyn()), ("sigma".into(), self.sigma.clone().into_dyn())],
            serde_json::json!({"kind": "mean"}),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (t, _) = read_bundle(dir)?;
        let get = |n: &str| -> Result<Array2<f32>> {
            let a = t.iter().find(|(k, _)| k == n).ok_or_else(|| integrity(dir, format!("missing {n}")))?;
            a.1.clone().into_dimensionality().map_err(|e| integrity(dir, e.to_string()))
        };
        Ok(MeanModel { mu: get("mu")?, sigma: get("sigma")? })
    }
}

fn integrity(dir: &Path, message: String) -> Error {
    Error::Integrity { path: dir.to_path_buf(), message }
}

fn log_normal(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -LN_SQRT_2PI - std.ln() - 0.5 * z * z
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Initial means at the `(i + 0.5) / K` quantiles and std = pooled std / K.
fn quantile_init(values: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let means = (0..k).map(|i| sorted[(((i as f64 + 0.5) / k as f64) * n as f64) as usize]).collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = (var.sqrt() / k as f64).max(1e-3);
    (means, vec![sd; k])
}

/// Ordinary 1D mixture with learned weights, components sorted by mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalGmm {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub log_likelihood_trace: Vec<f64>,
    pub variance_floored: bool,
}

impl GlobalGmm {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// Posterior over components at intensity `x`.
    pub fn posterior(&self, x: f64, out: &mut [f64]) {
        let mut logs: Vec<f64> =
            (0..self.k()).map(|i| self.weights[i].ln() + log_normal(x, self.means[i], self.stds[i])).collect();
        let z = log_sum_exp(&logs);
        for (o, l) in out.iter_mut().zip(logs.iter_mut()) {
            *o = (*l - z).exp();
        }
    }
}

/// EM for a K-component 1D mixture.
pub fn fit_global_gmm(values: &[f64], k: usize, cfg: &EmConfig) -> Result<GlobalGmm> {
    if k < 2 {
        return Err(Error::Config("K must be >= 2".into()));
    }
    if values.len() < k {
        return Err(Error::EmptyDataset(format!("{} values for {k} components", values.len())));
    }
    let (mut means, mut stds) = quantile_init(values, k);
    let mut weights = vec![1.0 / k as f64; k];
    let mut trace = Vec::new();
    let mut floored = false;
    let mut logs = vec![0.0; k];
    for it in 0..=cfg.max_iter {
        let mut ll = 0.0;
        let mut s0 = vec![0.0; k];
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        for &x in values {
            for i in 0..k {
                logs[i] = weights[i].ln() + log_normal(x, means[i], stds[i]);
            }
            let z = log_sum_exp(&logs);
            ll += z;
            for i in 0..k {
                let r = (logs[i] - z).exp();
                s0[i] += r;
                s1[i] += r * x;
                s2[i] += r * x * x;
            }
        }
        let converged = trace.last().is_some_and(|&prev: &f64| ll - prev < cfg.tol * prev.abs());
        trace.push(ll);
        if converged || it == cfg.max_iter {
            break;
        }
        let n = values.len() as f64;
        for i in 0..k {
            if s0[i] <= 0.0 {
                continue;
            }
            weights[i] = s0[i] / n;
            means[i] = s1[i] / s0[i];
            let mut var = s2[i] / s0[i] - means[i] * means[i];
            if var < cfg.var_floor {
                var = cfg.var_floor;
                floored = true;
            }
            stds[i] = var.sqrt();
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    Ok(GlobalGmm {
        weights: order.iter().map(|&i| weights[i]).collect(),
        means: order.iter().map(|&i| means[i]).collect(),
        stds: order.iter().map(|&i| stds[i]).collect(),
        log_likelihood_trace: trace,
        variance_floored: floored,
    })
}

/// Per-pixel prior weights `phi[[r, c, i]]` over K tissue components.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialPrior {
    pub phi: Array3<f32>,
    pub global: GlobalGmm,
}

/// Weight of the uniform distribution blended into the frequency prior so
/// that no component is impossible anywhere.
pub const PRIOR_BLEND: f64 = 1e-3;

/// Values pooled for the global fit are strided down to at most this many.
const MAX_POOLED: usize = 400_000;

pub fn build_spatial_prior(train: &[Slice], k: usize) -> Result<SpatialPrior> {
    let (h, w) = check_uniform(train)?;
    let pooled: Vec<f64> = train.iter().flat_map(|s| s.masked_values()).map(f64::from).collect();
    let stride = pooled.len().div_ceil(MAX_POOLED).max(1);
    let sample: Vec<f64> = pooled.iter().step_by(stride).copied().collect();
    let global = fit_global_gmm(&sample, k, &EmConfig::default())?;
    let mut acc = Array3::<f64>::zeros((h, w, k));
    let mut hits = Array2::<u32>::zeros((h, w));
    let mut post = vec![0.0; k];
    for s in train {
        for ((r, c), &m) in s.mask.indexed_iter() {
            if m {
                global.posterior(s.pixels[[r, c]] as f64, &mut post);
                for i in 0..k {
                    acc[[r, c, i]] += post[i];
                }
                hits[[r, c]] += 1;
            }
        }
    }
    let uniform = 1.0 / k as f64;
    let mut phi = Array3::<f32>::zeros((h, w, k));
    for r in 0..h {
        for c in 0..w {
            let n = hits[[r, c]];
            for i in 0..k {
                let freq = if n == 0 { uniform } else { acc[[r, c, i]] / n as f64 };
                phi[[r, c, i]] = ((1.0 - PRIOR_BLEND) * freq + PRIOR_BLEND * uniform) as f32;
            }
        }
    }
    Ok(SpatialPrior { phi, global })
}

impl SpatialPrior {
    pub fn k(&self) -> usize {
        self.phi.shape()[2]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_bundle(
            dir,
            &[("phi".into(), self.phi.clone().into_dyn())],
            serde_json::json!({"kind": "spatial_prior", "components": self.k(), "global": self.global}),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (t, meta) = read_bundle(dir)?;
        let phi: ArrayD<f32> = t.into_iter().find(|(k, _)| k == "phi").ok_or_else(|| integrity(dir, "missing phi".into()))?.1;
        let phi = phi.into_dimensionality().map_err(|e| integrity(dir, e.to_string()))?;
        let global = serde_json::from_value(meta["global"].clone()).map_err(|e| integrity(dir, e.to_string()))?;
        Ok(SpatialPrior { phi, global })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub lambda_out: f64,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    pub max_iter: usize,
    pub var_floor: f64,
    pub init: EmInit,
}

/// Starting point of the per-image fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmInit {
    /// K-quantiles of the slice's in-mask intensities, shared std = sd / K.
    #[default]
    Quantile,
    /// Tissue means and stds of the global mixture stored with the prior.
    Atlas,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { lambda_out: 0.01, tol: 1e-6, max_iter: 200, var_floor: 1e-4, init: EmInit::Quantile }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub lambda_out: f64,
    /// `[h, w, K + 1]`; the last channel is the outlier. Zero outside the mask.
    pub responsibilities: Array3<f64>,
    pub mask: Array2<bool>,
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub variance_floored: bool,
}

/// Posterior over K tissue components plus the outlier at intensity `x`.
/// Returns the log of the unnormalized total `sum_i phi_i N(x | mu_i, s_i) + lambda`.
pub fn responsibilities(x: f64, phi: &[f64], means: &[f64], stds: &[f64], lambda_out: f64, out: &mut [f64]) -> f64 {
    let k = means.len();
    for i in 0..k {
        out[i] = phi[i].ln() + log_normal(x, means[i], stds[i]);
    }
    out[k] = lambda_out.ln();
    let z = log_sum_exp(&out[..=k]);
    for v in out[..=k].iter_mut() {
        *v = (*v - z).exp();
    }
    z
}

pub fn em_fit(slice: &Slice, prior: &SpatialPrior, cfg: &EmConfig) -> Result<GmmFit> {
    match cfg.init {
        EmInit::Quantile => em_fit_with_init(slice, prior, cfg, None),
        EmInit::Atlas => em_fit_with_init(slice, prior, cfg, Some((&prior.global.means, &prior.global.stds))),
    }
}

/// [`em_fit`] with explicit initial `(means, stds)`; `None` uses the quantile rule.
pub fn em_fit_with_init(slice: &Slice, prior: &SpatialPrior, cfg: &EmConfig, init: Option<(&[f64], &[f64])>) -> Result<GmmFit> {
    if !(cfg.lambda_out >= 0.0) || !cfg.lambda_out.is_finite() {
        return Err(Error::Config(format!("lambda_out {} must be finite and >= 0", cfg.lambda_out)));
    }
    let (h, w) = slice.dim();
    if prior.phi.shape()[..2] != [h, w] {
        return Err(Error::shape(&prior.phi.shape()[..2], slice.pixels.shape()));
    }
    let k = prior.k();
    let coords: Vec<(usize, usize)> = slice.mask.indexed_iter().filter(|(_, &m)| m).map(|(p, _)| p).collect();
    if coords.len() < k {
        return Err(Error::DegenerateSlice(format!("{} has {} mask pixels for {k} components", slice.key(), coords.len())));
    }
    let xs: Vec<f64> = coords.iter().map(|&(r, c)| slice.pixels[[r, c]] as f64).collect();
    let phis: Vec<Vec<f64>> = coords.iter().map(|&(r, c)| (0..k).map(|i| prior.phi[[r, c, i]] as f64).collect()).collect();
    let (mut means, mut stds) = match init {
        Some((m, s)) => {
            if m.len() != k || s.len() != k || s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config("initial means/stds must have K entries with std > 0".into()));
            }
            (m.to_vec(), s.to_vec())
        }
        None => quantile_init(&xs, k),
    };
    let mut resp = vec![vec![0.0; k + 1]; xs.len()];
    let mut trace: Vec<f64> = Vec::new();
    let mut floored = false;
    let mut converged = false;
    for it in 0..=cfg.max_iter {
        let ll: f64 = xs.iter().zip(&phis).zip(resp.iter_mut()).map(|((&x, phi), r)| responsibilities(x, phi, &means, &stds, cfg.lambda_out, r)).sum();
        if let Some(&prev) = trace.last() {
            converged = ll - prev < cfg.tol * prev.abs();
        }
        trace.push(ll);
        if converged || it == cfg.max_iter {
            break;
        }
        // M-step over tissue components; the outlier has no parameters
        for i in 0..k {
            let (mut s0, mut s1) = (0.0, 0.0);
            for (r, &x) in resp.iter().zip(&xs) {
                s0 += r[i];
                s1 += r[i] * x;
            }
            if s0 <= f64::MIN_POSITIVE {
                continue;
            }
            let m = s1 / s0;
            let var = resp.iter().zip(&xs).map(|(r, &x)| r[i] * (x - m) * (x - m)).sum::<f64>() / s0;
            means[i] = m;
            stds[i] = if var < cfg.var_floor {
                floored = true;
                cfg.var_floor.sqrt()
            } else {
                var.sqrt()
            };
        }
    }
    let mut responsibilities = Array3::<f64>::zeros((h, w, k + 1));
    for (&(r, c), p) in coords.iter().zip(&resp) {
        for (i, &v) in p.iter().enumerate() {
            responsibilities[[r, c, i]] = v;
        }
    }
    Ok(GmmFit {
        means,
        stds,
        lambda_out: cfg.lambda_out,
        responsibilities,
        mask: slice.mask.clone(),
        log_likelihood_trace: trace,
        converged,
        variance_floored: floored,
    })
}

/// Outlier responsibility per pixel, 0 outside the mask.
pub fn outlier_map(fit: &GmmFit) -> DifferenceMap {
    let k = fit.responsibilities.shape()[2] - 1;
    let scores = fit.responsibilities.index_axis(Axis(2), k).to_owned();
    DifferenceMap::masked(scores, &fit.mask, format!("gmm-{}", fit.lambda_out)).expect("posterior in [0, 1]")
}
