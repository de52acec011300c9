//! Objectives. Image batches are `[1, B, H, W]` with a 0/1 mask of the same
//! shape; latent batches follow [`super::net`].

use super::net::{self, SampledWeights};
use super::{Architecture, ModelKind, TrainedModel};
use crate::data::Slice;
use crate::error::{Error, Result};
use crate::rng;
use lesionbench_nn::{Bound, Float, Var, Weights};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Added under square roots so that zero differences stay differentiable.
pub const NORM_EPS: f64 = 1e-30;

/// Euclidean norm of the in-mask difference between two images.
pub fn recon_loss(x: &Array2<f32>, xr: &Array2<f32>, mask: &Array2<bool>) -> Result<f64> {
    if x.dim() != xr.dim() || x.dim() != mask.dim() {
        return Err(Error::shape(x.shape(), xr.shape()));
    }
    let ss: f64 = x
        .iter()
        .zip(xr.iter())
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(ss.sqrt())
}

fn batch_of<F: Float>(x: &Var<F>) -> F {
    F::of(x.shape()[1] as f64)
}

fn masked_sq_per_sample<F: Float>(x: &Var<F>, xr: &Var<F>, mask: &Var<F>) -> Var<F> {
    x.sub(xr).mul(mask).square().sum_keep_axis(1)
}

/// Batch mean of per-image in-mask L2 norms.
pub fn recon_norm<F: Float>(x: &Var<F>, xr: &Var<F>, mask: &Var<F>) -> Var<F> {
    masked_sq_per_sample(x, xr, mask).add_scalar(F::of(NORM_EPS)).sqrt().mean()
}

/// Batch mean of `0.5 * sum_mask (x - x')^2`, the unit-variance Gaussian
/// negative log-likelihood up to a constant.
pub fn half_sq_error<F: Float>(x: &Var<F>, xr: &Var<F>, mask: &Var<F>) -> Var<F> {
    masked_sq_per_sample(x, xr, mask).mean().scale(F::of(0.5))
}

/// `sum 0.5 (exp(lv) + m^2 - 1 - lv)` over every element.
pub fn kl_diag_gaussian<F: Float>(mean: &Var<F>, logvar: &Var<F>) -> Var<F> {
    logvar.exp().add(&mean.square()).sub(logvar).add_scalar(-F::one()).sum().scale(F::of(0.5))
}

pub fn kl_diag_gaussian_value(mean: &[f64], logvar: &[f64]) -> f64 {
    let m = Var::constant(ArrayD::from_shape_vec(IxDyn(&[mean.len()]), mean.to_vec()).expect("1d"));
    let l = Var::constant(ArrayD::from_shape_vec(IxDyn(&[logvar.len()]), logvar.to_vec()).expect("1d"));
    kl_diag_gaussian(&m, &l).item()
}

/// KL of the factorized weight posterior (`*.mu`, `*.logstd`) from N(0, 1).
pub fn bbb_weight_kl<F: Float>(bound: &Bound<F>) -> Var<F> {
    let mut total: Option<Var<F>> = None;
    for (name, mu) in bound.iter() {
        let Some(base) = name.strip_suffix(".mu") else { continue };
        let ls = bound.var(&format!("{base}.logstd")).expect("posterior pairs");
        let term = ls.scale(F::of(2.0)).exp().add(&mu.square()).sub(&ls.scale(F::of(2.0))).add_scalar(-F::one()).sum();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    total.map(|t| t.scale(F::of(0.5))).unwrap_or_else(|| Var::scalar(F::zero()))
}

pub struct Elbo<F: Float> {
    pub total: Var<F>,
    pub recon: Var<F>,
    pub kl: Var<F>,
}

/// Per-sample negative ELBO averaged over the batch:
/// `recon + beta * kl (+ weight_kl)`.
pub fn elbo_terms<F: Float>(
    x: &Var<F>,
    xr: &Var<F>,
    mean: &Var<F>,
    logvar: &Var<F>,
    mask: &Var<F>,
    beta: f64,
    weight_kl: Option<&Var<F>>,
) -> Elbo<F> {
    let recon = half_sq_error(x, xr, mask);
    let kl = kl_diag_gaussian(mean, logvar).div(&Var::scalar(batch_of(x)));
    let mut total = recon.add(&kl.scale(F::of(beta)));
    if let Some(w) = weight_kl {
        total = total.add(w);
    }
    Elbo { total, recon, kl }
}

/// `mean + exp(0.5 logvar) * eps`.
pub fn reparameterize<F: Float>(mean: &Var<F>, logvar: &Var<F>, eps: &ArrayD<F>) -> Var<F> {
    mean.add(&logvar.scale(F::of(0.5)).exp().mul(&Var::constant(eps.clone())))
}

pub struct WganGp<F: Float> {
    pub total: Var<F>,
    pub wasserstein: Var<F>,
    pub penalty: Var<F>,
}

/// `mean D(fake) - mean D(real) + gp * mean((||grad D(zhat)|| - 1)^2)` with
/// `zhat = e * real + (1 - e) * fake`, one `e` per sample along `batch_axis`.
pub fn wgan_gp_critic_loss<F: Float>(
    critic: impl Fn(&Var<F>) -> Var<F>,
    real: &ArrayD<F>,
    fake: &ArrayD<F>,
    batch_axis: usize,
    gp_coeff: f64,
    interp: &[F],
) -> WganGp<F> {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches differ in shape");
    assert_eq!(interp.len(), real.shape()[batch_axis], "one interpolation weight per sample");
    let wasserstein = critic(&Var::constant(fake.clone())).mean().sub(&critic(&Var::constant(real.clone())).mean());
    let e = ArrayD::from_shape_fn(real.raw_dim(), |idx| interp[idx[batch_axis]]);
    let zhat = &e * real + &(e.mapv(|v| F::one() - v) * fake);
    let zhat = Var::leaf(zhat);
    let grads = critic(&zhat).sum().backward_create_graph();
    let penalty = match grads.get(&zhat) {
        Some(g) => g.square().sum_keep_axis(batch_axis).add_scalar(F::of(NORM_EPS)).sqrt().add_scalar(-F::one()).square().mean(),
        // gradient identically zero: every norm is 0
        None => Var::scalar(F::one()),
    };
    let total = wasserstein.add(&penalty.scale(F::of(gp_coeff)));
    WganGp { total, wasserstein, penalty }
}

/// Uniform interpolation weights for a gradient penalty.
pub fn interp_weights<F: Float, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<F> {
    (0..n).map(|_| F::of(rng.random::<f64>())).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct AdversarialWeights {
    pub adv: f64,
    pub rec_adv: f64,
    pub gp: f64,
}

pub struct AlphaGanLosses<F: Float> {
    pub encoder: Var<F>,
    pub generator: Var<F>,
    pub latent_critic: Var<F>,
    pub recon_critic: Var<F>,
    pub recon: Var<F>,
}

/// The four alpha-GAN objectives on one batch.
///
/// encoder: `recon - adv * mean C(E(x))`;
/// generator: `recon - rec_adv * mean D_rec(x')`;
/// both critics use [`wgan_gp_critic_loss`] with the encoder/decoder
/// outputs as (detached) fakes.
#[allow(clippy::too_many_arguments)]
pub fn alpha_gan_losses<F: Float>(
    w: &impl Weights<F>,
    arch: &Architecture,
    x: &Var<F>,
    mask: &Var<F>,
    z_prior: &ArrayD<F>,
    interp_latent: &[F],
    interp_image: &[F],
    weights: AdversarialWeights,
) -> AlphaGanLosses<F> {
    let (z, _) = net::encode(w, arch, x, false);
    let xr = net::decode(w, arch, &z).mul(mask);
    let recon = recon_norm(x, &xr, mask);
    let c_fake = net::latent_critic(w, &net::flatten_latent(&z, arch)).mean();
    let d_fake = net::recon_critic(w, arch, &xr).mean();
    let encoder = recon.sub(&c_fake.scale(F::of(weights.adv)));
    let generator = recon.sub(&d_fake.scale(F::of(weights.rec_adv)));
    let latent_critic = wgan_gp_critic_loss(
        |v| net::latent_critic(w, &net::flatten_latent(v, arch)),
        z_prior,
        z.value(),
        net::latent_batch_axis(arch),
        weights.gp,
        interp_latent,
    )
    .total;
    let recon_critic =
        wgan_gp_critic_loss(|v| net::recon_critic(w, arch, v), x.value(), xr.value(), 1, weights.gp, interp_image).total;
    AlphaGanLosses { encoder, generator, latent_critic, recon_critic, recon }
}

/// Adds N(0, sigma^2) noise to in-mask pixels.
pub fn corrupt<R: Rng + ?Sized>(slice: &Slice, sigma: f64, rng: &mut R) -> Result<Slice> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {sigma} must be >= 0")));
    }
    let mut out = slice.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    out.pixels.zip_mut_with(&slice.mask, |v, &m| {
        if m {
            *v = (*v as f64 + n.sample(rng)) as f32;
        }
    });
    Ok(out)
}

/// Batch tensors `[1, B, H, W]` for pixels and mask.
pub fn batch_tensors<F: Float>(slices: &[&Slice]) -> (ArrayD<F>, ArrayD<F>) {
    let (h, w) = slices[0].dim();
    let b = slices.len();
    let x = ArrayD::from_shape_fn(IxDyn(&[1, b, h, w]), |i| F::of(slices[i[1]].pixels[[i[2], i[3]]] as f64));
    let m = ArrayD::from_shape_fn(IxDyn(&[1, b, h, w]), |i| if slices[i[1]].mask[[i[2], i[3]]] { F::one() } else { F::zero() });
    (x, m)
}

fn check_model_input(model: &TrainedModel, slices: &[Slice]) -> Result<()> {
    if slices.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let s = model.architecture.input_size;
    for sl in slices {
        if sl.dim() != (s, s) {
            return Err(Error::shape(&[s, s], sl.pixels.shape()));
        }
    }
    Ok(())
}

/// ELBO terms of a trained VAE / VAE_BBB on a batch, with noise drawn from `seed`.
pub fn elbo_loss(model: &TrainedModel, slices: &[Slice], seed: u64) -> Result<(f64, f64, f64)> {
    if !model.kind.is_variational() {
        return Err(Error::Contract(format!("elbo_loss needs VAE or VAE_BBB, got {}", model.kind)));
    }
    check_model_input(model, slices)?;
    let refs: Vec<&Slice> = slices.iter().collect();
    let (x, m) = batch_tensors::<f32>(&refs);
    let (x, m) = (Var::constant(x), Var::constant(m));
    let mut rng = rng::stream(seed, "elbo", 0);
    let bound = model.params.bind_frozen();
    let e = if model.kind == ModelKind::VaeBbb {
        let sw = SampledWeights::draw(&bound, &mut rng);
        let wkl = bbb_weight_kl(&bound).scale(1.0 / model.num_train.max(1) as f32);
        elbo_with(&sw, model, &x, &m, Some(&wkl), &mut rng)
    } else {
        elbo_with(&bound, model, &x, &m, None, &mut rng)
    };
    Ok((e.total.item() as f64, e.recon.item() as f64, e.kl.item() as f64))
}

fn elbo_with<R: Rng + ?Sized>(
    w: &impl Weights<f32>,
    model: &TrainedModel,
    x: &Var<f32>,
    m: &Var<f32>,
    wkl: Option<&Var<f32>>,
    rng: &mut R,
) -> Elbo<f32> {
    let arch = &model.architecture;
    let (mu, lv) = net::encode(w, arch, x, true);
    let lv = lv.expect("variational encoder");
    let eps = net::standard_normal(mu.shape(), rng);
    let z = reparameterize(&mu, &lv, &eps);
    let xr = net::decode(w, arch, &z);
    elbo_terms(x, &xr, &mu, &lv, m, model.config.kl_beta, wkl)
}

/// The four alpha-GAN losses of a trained model on a batch.
pub fn alpha_gan_losses_for(model: &TrainedModel, slices: &[Slice], seed: u64) -> Result<[(&'static str, f64); 4]> {
    if model.kind != ModelKind::AlphaGan {
        return Err(Error::Contract(format!("alpha_gan_losses needs ALPHA_GAN, got {}", model.kind)));
    }
    check_model_input(model, slices)?;
    let critic = model.critic.as_ref().ok_or_else(|| Error::Contract("alpha-GAN model without critics".into()))?;
    let mut all = model.params.clone();
    for (n, v) in critic.iter() {
        all.insert(n, v.clone());
    }
    let refs: Vec<&Slice> = slices.iter().collect();
    let (x, m) = batch_tensors::<f32>(&refs);
    let b = slices.len();
    let mut rng = rng::stream(seed, "alpha-gan-losses", 0);
    let arch = &model.architecture;
    let z_prior = net::standard_normal(&net::latent_batch_shape(arch, b), &mut rng);
    let il = interp_weights(b, &mut rng);
    let ii = interp_weights(b, &mut rng);
    let cfg = &model.config;
    let l = alpha_gan_losses(
        &all.bind_frozen(),
        arch,
        &Var::constant(x),
        &Var::constant(m),
        &z_prior,
        &il,
        &ii,
        AdversarialWeights { adv: cfg.adv_weight, rec_adv: cfg.rec_adv_weight, gp: cfg.gp_coeff },
    );
    Ok([
        ("encoder", l.encoder.item() as f64),
        ("generator", l.generator.item() as f64),
        ("latent_critic", l.latent_critic.item() as f64),
        ("recon_critic", l.recon_critic.item() as f64),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use lesionbench_nn::gradcheck::check_gradients;
    use lesionbench_nn::layers::{init_linear, linear};
    use lesionbench_nn::ParamStore;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], v: Vec<f64>) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn recon_loss_hand_values() {
        let x = Array2::from_elem((3, 3), 1.0f32);
        let mut mask = Array2::from_elem((3, 3), false);
        for i in 0..4 {
            mask[[i / 2, i % 2]] = true;
        }
        assert_eq!(recon_loss(&x, &x, &mask).unwrap(), 0.0);
        let xr = Array2::from_elem((3, 3), 0.0f32);
        assert_eq!(recon_loss(&x, &xr, &mask).unwrap(), 2.0);
        let y = array![[0.3f32, -1.0, 2.0], [0.0, 5.0, 1.0], [7.0, 7.0, 7.0]];
        assert_eq!(recon_loss(&x, &y, &mask).unwrap(), recon_loss(&y, &x, &mask).unwrap());
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_diag_gaussian_value(&[0.0], &[0.0]), 0.0);
        assert!((kl_diag_gaussian_value(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        let e2 = std::f64::consts::E.powi(2);
        assert!((kl_diag_gaussian_value(&[0.0], &[2.0]) - 0.5 * (e2 - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..20 {
            let m: f64 = rng.random_range(-2.0..2.0);
            let lv: f64 = rng.random_range(-2.0..1.5);
            let sd = (0.5 * lv).exp();
            // E_q[log q(z) - log p(z)]
            let n = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let e: f64 = std_normal.sample(&mut rng);
                let z = m + sd * e;
                acc += -0.5 * e * e - sd.ln() + 0.5 * z * z;
            }
            let mc = acc / n as f64;
            let closed = kl_diag_gaussian_value(&[m], &[lv]);
            assert!((closed - mc).abs() < 1e-2, "m={m} lv={lv}: {closed} vs {mc}");
        }
    }

    #[test]
    fn reparameterization_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mean = Var::constant(arr(&[1], vec![0.7]));
        let lv = Var::constant(arr(&[1], vec![-0.4]));
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| reparameterize(&mean, &lv, &net::standard_normal(&[1], &mut rng)).item())
            .collect();
        let m = samples.iter().sum::<f64>() / n as f64;
        let v = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - 0.7).abs() < 0.02 * 0.7);
        assert!((v - (-0.4f64).exp()).abs() < 0.02 * (-0.4f64).exp());
    }

    #[test]
    fn elbo_prior_posterior_has_zero_kl() {
        let x = Var::constant(arr(&[1, 2, 1, 2], vec![0.5, -0.5, 1.0, 0.0]));
        let m = Var::constant(arr(&[1, 2, 1, 2], vec![1.0; 4]));
        let zeros = Var::constant(arr(&[2, 3], vec![0.0; 6]));
        let e = elbo_terms(&x, &x, &zeros, &zeros, &m, 1.0, None);
        assert_eq!(e.kl.item(), 0.0);
        assert_eq!(e.total.item(), 0.0);
    }

    /// 2-pixel input, 1-d latent.
    fn toy_vae() -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        init_linear(&mut s, "mu", 2, 1, &mut rng);
        init_linear(&mut s, "lv", 2, 1, &mut rng);
        init_linear(&mut s, "dec", 1, 2, &mut rng);
        for (_, v) in s.iter_mut() {
            v.mapv_inplace(|x| x + 0.1);
        }
        s
    }

    fn toy_elbo(w: &impl Weights<f64>, beta: f64) -> Elbo<f64> {
        let xs = arr(&[3, 2], vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9]);
        let x = Var::constant(xs.clone());
        let mu = linear(w, "mu", &x);
        let lv = linear(w, "lv", &x);
        let eps = arr(&[3, 1], vec![0.4, -1.3, 0.8]);
        let z = reparameterize(&mu, &lv, &eps);
        let xr = linear(w, "dec", &z);
        // [B, 2] -> [1, B, 1, 2]
        let to_img = |v: &Var<f64>| v.reshape(&[1, 3, 1, 2]);
        let mask = Var::constant(arr(&[1, 3, 1, 2], vec![1.0; 6]));
        elbo_terms(&to_img(&x), &to_img(&xr), &mu, &lv, &mask, beta, None)
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let store = toy_vae();
        let r = check_gradients(&store, |b| toy_elbo(b, 1.0).total, 1e-6, 1e-7);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn beta_zero_is_reconstruction_only() {
        let store = toy_vae();
        let b = store.bind_frozen();
        let e = toy_elbo(&b, 0.0);
        assert_eq!(e.total.item(), e.recon.item());
    }

    #[test]
    fn bbb_kl_gradient_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = ParamStore::<f64>::new();
        init_linear(&mut s, "a", 3, 2, &mut rng);
        let mut v = net::to_variational(&s, -1.0);
        for (_, x) in v.iter_mut() {
            x.mapv_inplace(|t| t + 0.05);
        }
        let r = check_gradients(&v, bbb_weight_kl, 1e-6, 1e-7);
        assert!(r.passes(1e-4), "{r:?}");
        let mut prior = ParamStore::<f64>::new();
        prior.insert("w.mu", arr(&[4], vec![0.0; 4]));
        prior.insert("w.logstd", arr(&[4], vec![0.0; 4]));
        assert_eq!(bbb_weight_kl(&prior.bind_frozen()).item(), 0.0);
    }

    fn toy_critic(w: &impl Weights<f64>, z: &Var<f64>) -> Var<f64> {
        let h = linear(w, "c0", z).tanh();
        linear(w, "c1", &h)
    }

    #[test]
    fn wgan_gp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::<f64>::new();
        init_linear(&mut s, "c0", 3, 4, &mut rng);
        init_linear(&mut s, "c1", 4, 1, &mut rng);
        let real = net::standard_normal::<f64, _>(&[5, 3], &mut rng);
        let fake = net::standard_normal::<f64, _>(&[5, 3], &mut rng).mapv(|v| v * 0.5 + 1.0);
        let e = interp_weights::<f64, _>(5, &mut rng);
        assert!(s.num_scalars() <= 100);
        let r = check_gradients(&s, |b| wgan_gp_critic_loss(|z| toy_critic(b, z), &real, &fake, 0, 10.0, &e).total, 1e-6, 1e-7);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn linear_critic_penalty_is_exact() {
        let mut s = ParamStore::<f64>::new();
        s.insert("l.w", arr(&[3, 1], vec![0.5, -2.0, 1.0]));
        s.insert("l.b", arr(&[1], vec![0.3]));
        let b = s.bind_frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let real = net::standard_normal::<f64, _>(&[6, 3], &mut rng);
        let fake = net::standard_normal::<f64, _>(&[6, 3], &mut rng);
        let e = interp_weights::<f64, _>(6, &mut rng);
        let l = wgan_gp_critic_loss(|z| linear(&b, "l", z), &real, &fake, 0, 10.0, &e);
        let norm = (0.25f64 + 4.0 + 1.0).sqrt();
        assert!((l.penalty.item() - (norm - 1.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn zero_and_constant_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let real = net::standard_normal::<f64, _>(&[4, 2], &mut rng);
        let fake = net::standard_normal::<f64, _>(&[4, 2], &mut rng);
        let e = interp_weights::<f64, _>(4, &mut rng);
        let zero = |z: &Var<f64>| z.scale(0.0).sum_keep_axis(0).reshape(&[4, 1]);
        let l = wgan_gp_critic_loss(zero, &real, &fake, 0, 10.0, &e);
        assert!((l.total.item() - 10.0).abs() < 1e-12);
        let same = wgan_gp_critic_loss(|z| z.scale(0.0).sum_keep_axis(0).reshape(&[4, 1]).add_scalar(3.0), &real, &real, 0, 0.0, &e);
        assert_eq!(same.wasserstein.item(), 0.0);
    }

    fn toy_alpha_gan() -> (ParamStore<f64>, Architecture) {
        // 4x4 input, one stage of 1 channel -> 2x2 features, flat latent of 2
        let arch = Architecture {
            input_size: 4,
            channels: vec![1],
            latent: super::super::LatentShape::Flat { size: 2 },
            critic_hidden: 2,
            drec_channels: vec![1],
        };
        arch.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = ParamStore::new();
        net::init_autoencoder(&mut s, &arch, false, &mut rng);
        net::init_latent_critic(&mut s, 2, 2, &mut rng);
        net::init_recon_critic(&mut s, &arch, &mut rng);
        (s, arch)
    }

    #[test]
    fn alpha_gan_gradients_match_finite_differences() {
        let (store, arch) = toy_alpha_gan();
        assert!(store.num_scalars() <= 100, "{}", store.num_scalars());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = net::standard_normal::<f64, _>(&[1, 2, 4, 4], &mut rng);
        let mask = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |i| if i[2] == 3 && i[3] == 0 { 0.0 } else { 1.0 });
        let zp = net::standard_normal::<f64, _>(&[2, 2], &mut rng);
        let il = interp_weights::<f64, _>(2, &mut rng);
        let ii = interp_weights::<f64, _>(2, &mut rng);
        let wts = AdversarialWeights { adv: 1.0, rec_adv: 1.0, gp: 10.0 };
        let run = |w: &dyn Fn() -> AlphaGanLosses<f64>, pick: usize| {
            let l = w();
            [l.encoder, l.generator, l.latent_critic, l.recon_critic][pick].clone()
        };
        let losses_for = |w: &dyn Weights<f64>| {
            struct Dyn<'a>(&'a dyn Weights<f64>);
            impl Weights<f64> for Dyn<'_> {
                fn get(&self, n: &str) -> Var<f64> {
                    self.0.get(n)
                }
            }
            alpha_gan_losses(&Dyn(w), &arch, &Var::constant(x.clone()), &Var::constant(mask.clone()), &zp, &il, &ii, wts)
        };
        for pick in 0..2 {
            let r = check_gradients(&store, |b| run(&|| losses_for(b), pick), 1e-6, 1e-7);
            assert!(r.passes(1e-4), "loss {pick}: {r:?}");
        }
        // critic objectives treat the auto-encoder outputs as fixed samples
        let (mut ae, mut critics) = (ParamStore::new(), ParamStore::new());
        for (n, v) in store.iter() {
            if n.starts_with("critic.") || n.starts_with("drec.") {
                critics.insert(n, v.clone());
            } else {
                ae.insert(n, v.clone());
            }
        }
        let ae = ae.bind_frozen();
        for pick in 2..4 {
            let r = check_gradients(&critics, |b| run(&|| losses_for(&net::Joined { first: b, second: &ae }), pick), 1e-6, 1e-7);
            assert!(r.passes(1e-4), "loss {pick}: {r:?}");
        }
    }

    #[test]
    fn zero_recon_critic_reduces_generator_to_recon() {
        let (mut store, arch) = toy_alpha_gan();
        for (n, v) in store.iter_mut() {
            if n.starts_with("drec.") {
                v.fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = net::standard_normal::<f64, _>(&[1, 2, 4, 4], &mut rng);
        let mask = ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 1.0);
        let zp = net::standard_normal::<f64, _>(&[2, 2], &mut rng);
        let e = vec![0.5, 0.5];
        let wts = AdversarialWeights { adv: 1.0, rec_adv: 1.0, gp: 10.0 };
        let l = alpha_gan_losses(&store.bind_frozen(), &arch, &Var::constant(x), &Var::constant(mask), &zp, &e, &e, wts);
        assert_eq!(l.generator.item(), l.recon.item());
        for v in [&l.encoder, &l.generator, &l.latent_critic, &l.recon_critic] {
            assert!(v.item().is_finite());
        }
    }

    #[test]
    fn generator_step_decreases_loss_on_frozen_critic() {
        let (store, arch) = toy_alpha_gan();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = net::standard_normal::<f64, _>(&[1, 2, 4, 4], &mut rng);
        let mask = ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 1.0);
        let zp = net::standard_normal::<f64, _>(&[2, 2], &mut rng);
        let e = vec![0.3, 0.7];
        let wts = AdversarialWeights { adv: 1.0, rec_adv: 1.0, gp: 10.0 };
        let eval = |s: &ParamStore<f64>| {
            let b = s.bind();
            let l = alpha_gan_losses(&b, &arch, &Var::constant(x.clone()), &Var::constant(mask.clone()), &zp, &e, &e, wts);
            let g = l.generator.backward();
            let grads: Vec<(String, ArrayD<f64>)> = b.iter().map(|(n, v)| (n.to_string(), g.value_or_zeros(v))).collect();
            (l.generator.item(), grads)
        };
        let (before, grads) = eval(&store);
        let mut stepped = store.clone();
        for (n, g) in &grads {
            if n.starts_with("dec.") {
                let p = stepped.get_mut(n).unwrap();
                p.zip_mut_with(g, |p, &g| *p -= 1e-3 * g);
            }
        }
        let (after, _) = eval(&stepped);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn corrupt_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mask = Array2::from_shape_fn((400, 400), |(r, c)| (r + c) % 5 != 0);
        let s = Slice { pixels: Array2::zeros((400, 400)), mask, modality: crate::data::Modality::T1like, subject_id: "n".into(), slice_index: 0 };
        assert_eq!(corrupt(&s, 0.0, &mut rng).unwrap(), s);
        let c = corrupt(&s, 0.5, &mut rng).unwrap();
        let inside: Vec<f64> = c.pixels.iter().zip(s.mask.iter()).filter(|(_, &m)| m).map(|(&v, _)| v as f64).collect();
        assert!(inside.len() > 100_000);
        let sd = (inside.iter().map(|v| v * v).sum::<f64>() / inside.len() as f64).sqrt();
        assert!((sd - 0.5).abs() < 0.025, "{sd}");
        for ((&v, &m), &o) in c.pixels.iter().zip(s.mask.iter()).zip(s.pixels.iter()) {
            if !m {
                assert_eq!(v, o);
            }
        }
    }
}
