//! Network builders. Tensors use the `[C, B, H, W]` layout; flat latents and
//! critic inputs are `[B, D]`. All functions are generic over the scalar so
//! the same code is gradient-checked in f64 and trained in f32.

use super::{Architecture, LatentShape};
use lesionbench_nn::layers::{
    conv2d, conv_transpose2d, flatten_cbhw, init_conv2d, init_conv_transpose2d, init_linear, linear, unflatten_cbhw,
};
use lesionbench_nn::{Bound, Float, ParamStore, Var, Weights};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

pub const SLOPE: f64 = 0.2;
const K: usize = 4;

fn act<F: Float>(x: &Var<F>) -> Var<F> {
    x.leaky_relu(F::of(SLOPE))
}

pub fn init_autoencoder<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, arch: &Architecture, stochastic: bool, rng: &mut R) {
    let n = arch.channels.len();
    let spatial = matches!(arch.latent, LatentShape::Spatial { .. });
    for i in 0..n {
        let cin = if i == 0 { 1 } else { arch.channels[i - 1] };
        let cout = arch.channels[i];
        if spatial && i == n - 1 {
            init_conv2d(store, "enc.mu", cin, cout, K, rng);
            if stochastic {
                init_conv2d(store, "enc.lv", cin, cout, K, rng);
            }
        } else {
            init_conv2d(store, &format!("enc.c{i}"), cin, cout, K, rng);
        }
    }
    if let LatentShape::Flat { size } = arch.latent {
        let feat = arch.feature_channels() * arch.feature_size().pow(2);
        init_linear(store, "enc.fc_mu", feat, size, rng);
        if stochastic {
            init_linear(store, "enc.fc_lv", feat, size, rng);
        }
        init_linear(store, "dec.fc", size, feat, rng);
    }
    for j in 0..n {
        let cin = arch.channels[n - 1 - j];
        let cout = if j == n - 1 { 1 } else { arch.channels[n - 2 - j] };
        init_conv_transpose2d(store, &format!("dec.t{j}"), cin, cout, K, 2, rng);
    }
}

/// `x: [1, B, H, W]` to the latent mean and (for stochastic encoders) log-variance.
pub fn encode<F: Float>(w: &impl Weights<F>, arch: &Architecture, x: &Var<F>, stochastic: bool) -> (Var<F>, Option<Var<F>>) {
    let n = arch.channels.len();
    let mut h = x.clone();
    match arch.latent {
        LatentShape::Spatial { .. } => {
            for i in 0..n - 1 {
                h = act(&conv2d(w, &format!("enc.c{i}"), &h, K, 2, 1));
            }
            let mu = conv2d(w, "enc.mu", &h, K, 2, 1);
            let lv = stochastic.then(|| conv2d(w, "enc.lv", &h, K, 2, 1));
            (mu, lv)
        }
        LatentShape::Flat { .. } => {
            for i in 0..n {
                h = act(&conv2d(w, &format!("enc.c{i}"), &h, K, 2, 1));
            }
            let f = flatten_cbhw(&h);
            let mu = linear(w, "enc.fc_mu", &f);
            let lv = stochastic.then(|| linear(w, "enc.fc_lv", &f));
            (mu, lv)
        }
    }
}

/// Latent (internal layout) to `[1, B, H, W]`.
pub fn decode<F: Float>(w: &impl Weights<F>, arch: &Architecture, z: &Var<F>) -> Var<F> {
    let n = arch.channels.len();
    let mut h = match arch.latent {
        LatentShape::Spatial { .. } => z.clone(),
        LatentShape::Flat { .. } => {
            let s = arch.feature_size();
            unflatten_cbhw(&act(&linear(w, "dec.fc", z)), arch.feature_channels(), s, s)
        }
    };
    for j in 0..n {
        h = conv_transpose2d(w, &format!("dec.t{j}"), &h, K, 2, 1);
        if j + 1 < n {
            h = act(&h);
        }
    }
    h
}

/// Latent in internal layout to `[B, D]`.
pub fn flatten_latent<F: Float>(z: &Var<F>, arch: &Architecture) -> Var<F> {
    match arch.latent {
        LatentShape::Spatial { .. } => flatten_cbhw(z),
        LatentShape::Flat { .. } => z.clone(),
    }
}

/// Shape of a latent batch in internal layout.
pub fn latent_batch_shape(arch: &Architecture, batch: usize) -> Vec<usize> {
    match arch.latent {
        LatentShape::Spatial { h, w, c } => vec![c, batch, h, w],
        LatentShape::Flat { size } => vec![batch, size],
    }
}

/// Index of the batch axis in the internal latent layout.
pub fn latent_batch_axis(arch: &Architecture) -> usize {
    match arch.latent {
        LatentShape::Spatial { .. } => 1,
        LatentShape::Flat { .. } => 0,
    }
}

pub fn standard_normal<F: Float, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let v: f64 = StandardNormal.sample(rng);
        F::of(v)
    })
}

pub fn init_latent_critic<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, dim: usize, hidden: usize, rng: &mut R) {
    init_linear(store, "critic.l0", dim, hidden, rng);
    init_linear(store, "critic.l1", hidden, hidden, rng);
    init_linear(store, "critic.out", hidden, 1, rng);
}

/// `[B, D] -> [B, 1]`.
pub fn latent_critic<F: Float>(w: &impl Weights<F>, z: &Var<F>) -> Var<F> {
    let h = act(&linear(w, "critic.l0", z));
    let h = act(&linear(w, "critic.l1", &h));
    linear(w, "critic.out", &h)
}

pub fn init_recon_critic<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, arch: &Architecture, rng: &mut R) {
    let mut cin = 1;
    for (i, &c) in arch.drec_channels.iter().enumerate() {
        init_conv2d(store, &format!("drec.c{i}"), cin, c, K, rng);
        cin = c;
    }
    let s = arch.input_size >> arch.drec_channels.len();
    init_linear(store, "drec.out", cin * s * s, 1, rng);
}

/// `[1, B, H, W] -> [B, 1]`.
pub fn recon_critic<F: Float>(w: &impl Weights<F>, arch: &Architecture, x: &Var<F>) -> Var<F> {
    let mut h = x.clone();
    for i in 0..arch.drec_channels.len() {
        h = act(&conv2d(w, &format!("drec.c{i}"), &h, K, 2, 1));
    }
    linear(w, "drec.out", &flatten_cbhw(&h))
}

/// Replace every parameter `p` by a factorized Gaussian posterior
/// `p.mu` (initialized to the point value) and `p.logstd`.
pub fn to_variational<F: Float>(store: &ParamStore<F>, init_logstd: f64) -> ParamStore<F> {
    let mut out = ParamStore::new();
    for (name, v) in store.iter() {
        out.insert(format!("{name}.mu"), v.clone());
        out.insert(format!("{name}.logstd"), ArrayD::from_elem(v.raw_dim(), F::of(init_logstd)));
    }
    out
}

/// Weights drawn once from a factorized Gaussian posterior,
/// `w = mu + exp(logstd) * eps`. Parameters without a posterior pass through.
pub struct SampledWeights<F: Float> {
    map: HashMap<String, Var<F>>,
}

impl<F: Float> SampledWeights<F> {
    pub fn draw<R: Rng + ?Sized>(bound: &Bound<F>, rng: &mut R) -> Self {
        let mut map = HashMap::new();
        for (name, var) in bound.iter() {
            if let Some(base) = name.strip_suffix(".mu") {
                let logstd = bound.var(&format!("{base}.logstd")).expect("posterior pairs");
                let eps = Var::constant(standard_normal(var.shape(), rng));
                map.insert(base.to_string(), var.add(&logstd.exp().mul(&eps)));
            } else if !name.ends_with(".logstd") {
                map.insert(name.to_string(), var.clone());
            }
        }
        SampledWeights { map }
    }
}

impl<F: Float> Weights<F> for SampledWeights<F> {
    fn get(&self, name: &str) -> Var<F> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}")).clone()
    }
}

/// Looks a name up in `first`, then in `second`.
pub struct Joined<'a, F: Float> {
    pub first: &'a Bound<F>,
    pub second: &'a Bound<F>,
}

impl<F: Float> Weights<F> for Joined<'_, F> {
    fn get(&self, name: &str) -> Var<F> {
        self.first
            .var(name)
            .or_else(|| self.second.var(name))
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .clone()
    }
}
