use lesionbench::data::{generate_healthy, inject_lesion};
use lesionbench::data::{LesionSpec, Modality, Polarity, Slice};
use lesionbench::error::Error;
use lesionbench::models::{
    self, alpha_gan_losses, anomaly_map, anomaly_maps, elbo_loss, encode, reconstruct, reconstruct_batch, train, untrained,
    Architecture, InferenceOptions, LatentShape, ModelKind, TrainConfig,
};
use lesionbench::preprocess::normalize;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 32;

fn healthy(seed: u64, n: usize) -> Vec<Slice> {
    generate_healthy(seed, n, SIZE, Modality::T2like).unwrap().iter().map(|s| normalize(s).unwrap()).collect()
}

fn flat_arch() -> Architecture {
    Architecture::new(SIZE, vec![8, 16, 32, 32], LatentShape::Flat { size: 32 }).unwrap()
}

fn spatial_arch() -> Architecture {
    Architecture::new(SIZE, vec![8, 16, 32, 16], LatentShape::Spatial { h: 2, w: 2, c: 16 }).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { lr: 1e-3, max_epochs: epochs, patience: epochs, ..TrainConfig::default() }
}

fn mean_recon(model: &models::TrainedModel, slices: &[Slice]) -> f64 {
    let recs = reconstruct_batch(model, slices, &InferenceOptions::default()).unwrap();
    slices.iter().zip(&recs).map(|(s, r)| models::recon_loss(&s.pixels, r, &s.mask).unwrap()).sum::<f64>() / slices.len() as f64
}

#[test]
fn ae_training_halves_reconstruction_error() {
    let data = healthy(1, 200);
    let cfg = config(20);
    let before = mean_recon(&untrained(ModelKind::Ae, &flat_arch(), &cfg).unwrap(), &data);
    let model = train(ModelKind::Ae, &flat_arch(), &data, &[], &cfg, None).unwrap();
    let after = mean_recon(&model, &data);
    assert!(after < 0.5 * before, "{after} vs {before}");
    assert!(model.loss_history.iter().all(|l| l.is_finite()));
    assert_eq!(model.loss_history.len(), model.epochs.len());

    // the same error against a model whose parameters were shuffled
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut permuted = model.clone();
    for (_, v) in permuted.params.iter_mut() {
        let mut flat: Vec<f32> = v.iter().copied().collect();
        flat.shuffle(&mut rng);
        for (d, s) in v.iter_mut().zip(flat) {
            *d = s;
        }
    }
    let first = &data[..1];
    assert!(mean_recon(&model, first) < mean_recon(&permuted, first));
}

#[test]
fn training_is_deterministic() {
    let data = healthy(2, 64);
    let cfg = TrainConfig { max_epochs: 3, batch_size: 16, ..config(3) };
    for kind in [ModelKind::Dae, ModelKind::VaeBbb] {
        let arch = if kind == ModelKind::Dae { flat_arch() } else { spatial_arch() };
        let a = train(kind, &arch, &data, &data[..8], &cfg, None).unwrap();
        let b = train(kind, &arch, &data, &data[..8], &cfg, None).unwrap();
        let bits = |m: &models::TrainedModel| m.loss_history.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b), "{kind}");
        assert_eq!(a.params.get("dec.t0.w.mu").or(a.params.get("dec.t0.w")), b.params.get("dec.t0.w.mu").or(b.params.get("dec.t0.w")));
    }
}

#[test]
fn vae_keeps_positive_kl() {
    let data = healthy(4, 96);
    let model = train(ModelKind::Vae, &spatial_arch(), &data, &[], &config(5), None).unwrap();
    let (total, recon, kl) = elbo_loss(&model, &data[..16], 0).unwrap();
    assert!(kl > 0.0, "{kl}");
    assert!((total - (recon + kl)).abs() < 1e-3 * total.abs().max(1.0));
}

/// Per-dimension mean and standard deviation of posterior samples over `data`.
fn latent_moments(model: &models::TrainedModel, data: &[Slice]) -> (Vec<f64>, Vec<f64>) {
    let zs: Vec<Vec<f64>> =
        data.iter().enumerate().map(|(i, s)| encode(model, s, i as u64).unwrap().sample.iter().map(|&v| v as f64).collect()).collect();
    let (n, d) = (zs.len() as f64, zs[0].len());
    let means: Vec<f64> = (0..d).map(|j| zs.iter().map(|z| z[j]).sum::<f64>() / n).collect();
    let sds = (0..d).map(|j| (zs.iter().map(|z| (z[j] - means[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()).collect();
    (means, sds)
}

#[test]
fn aae_critic_pulls_latents_towards_prior() {
    let data = healthy(5, 200);
    let cfg = TrainConfig { batch_size: 16, ..config(15) };
    let aae = train(ModelKind::Aae, &spatial_arch(), &data, &[], &cfg, None).unwrap();
    assert!(models::critic_state(&aae).is_some());
    let free = train(ModelKind::Aae, &spatial_arch(), &data, &[], &TrainConfig { adv_weight: 0.0, ..cfg }, None).unwrap();
    // distance of the aggregate posterior's first two moments from N(0, I)
    let gap = |m: &models::TrainedModel| {
        let (means, sds) = latent_moments(m, &data);
        means.iter().zip(&sds).map(|(mu, sd)| mu * mu + (sd - 1.0).powi(2)).sum::<f64>() / means.len() as f64
    };
    let (g_aae, g_free) = (gap(&aae), gap(&free));
    assert!(g_aae < 0.5 * g_free, "adversarial {g_aae} vs none {g_free}");
}

#[test]
fn vae_scores_bright_lesions_higher() {
    let data = healthy(6, 200);
    let model = train(ModelKind::Vae, &spatial_arch(), &data, &[], &config(10), None).unwrap();
    let spec = LesionSpec { polarity: Polarity::Bright, radius_px: 4, intensity_offset: 2.5, softness: 0.2, count: 1 };
    let mut inside = (0.0, 0usize);
    let mut outside = (0.0, 0usize);
    for (i, s) in healthy(60, 20).iter().enumerate() {
        let (les, gt) = inject_lesion(s, &spec, i as u64).unwrap();
        let map = anomaly_map(&model, &les, &InferenceOptions::default()).unwrap();
        for ((&v, &l), &m) in map.scores.iter().zip(gt.labels.iter()).zip(les.mask.iter()) {
            assert!(v >= 0.0);
            if !m {
                assert_eq!(v, 0.0);
            } else if l {
                inside = (inside.0 + v, inside.1 + 1);
            } else {
                outside = (outside.0 + v, outside.1 + 1);
            }
        }
    }
    let (a, b) = (inside.0 / inside.1 as f64, outside.0 / outside.1 as f64);
    assert!(a > b, "in-lesion {a} vs out-of-lesion {b}");
}

#[test]
fn encode_contracts() {
    let s = &healthy(7, 1)[0];
    let cfg = TrainConfig::default();
    let ae = untrained(ModelKind::Ae, &flat_arch(), &cfg).unwrap();
    let code = encode(&ae, s, 0).unwrap();
    assert!(code.log_variance.is_none() && code.eps.is_none());
    assert_eq!(code.sample, code.mean);

    let vae = untrained(ModelKind::Vae, &spatial_arch(), &cfg).unwrap();
    let a = encode(&vae, s, 9).unwrap();
    assert_eq!(a, encode(&vae, s, 9).unwrap());
    assert_ne!(a.sample, encode(&vae, s, 10).unwrap().sample);
    let (lv, eps) = (a.log_variance.as_ref().unwrap(), a.eps.as_ref().unwrap());
    for i in 0..a.mean.len() {
        let idx = ndarray::IxDyn(&[i / 32, (i / 16) % 2, i % 16]);
        let expect = a.mean[&idx] + (0.5 * lv[&idx]).exp() * eps[&idx];
        assert!((a.sample[&idx] - expect).abs() < 1e-5);
    }

    let big = Architecture::full_scale(ModelKind::Vae, 128).unwrap();
    let vae128 = untrained(ModelKind::Vae, &big, &cfg).unwrap();
    let s128 = &generate_healthy(7, 1, 128, Modality::T2like).unwrap()[0];
    assert_eq!(encode(&vae128, s128, 0).unwrap().mean.shape(), &[2, 2, 64]);

    assert!(matches!(encode(&vae, s128, 0), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(anomaly_map(&vae, s128, &InferenceOptions::default()), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn zero_final_layer_gives_constant_output() {
    let arch = flat_arch();
    let mut m = untrained(ModelKind::Ae, &arch, &TrainConfig::default()).unwrap();
    let last = format!("dec.t{}", arch.channels.len() - 1);
    m.params.get_mut(&format!("{last}.w")).unwrap().fill(0.0);
    m.params.get_mut(&format!("{last}.b")).unwrap().fill(0.25);
    for s in &healthy(8, 3) {
        let r = reconstruct(&m, s, &InferenceOptions::default()).unwrap();
        assert!(r.pixels.iter().all(|&v| v == 0.25));
        assert_eq!(r.mask, s.mask);
    }
}

#[test]
fn bbb_averages_weight_samples() {
    let data = healthy(9, 4);
    let cfg = TrainConfig { bbb_init_logstd: -2.0, ..TrainConfig::default() };
    let m = untrained(ModelKind::VaeBbb, &spatial_arch(), &cfg).unwrap();
    let seed = 100;
    let avg = reconstruct_batch(&m, &data, &InferenceOptions { samples: Some(16), seed }).unwrap();
    let singles: Vec<Vec<ndarray::Array2<f32>>> = (0..16)
        .map(|k| reconstruct_batch(&m, &data, &InferenceOptions { samples: Some(1), seed: seed + k }).unwrap())
        .collect();
    for (i, a) in avg.iter().enumerate() {
        let mut acc = ndarray::Array2::<f64>::zeros(a.dim());
        for s in &singles {
            acc += &s[i].mapv(f64::from);
        }
        let manual = (acc / 16.0).mapv(|v| v as f32);
        let diff = (&manual - a).mapv(f32::abs).fold(0.0f32, |x, &y| x.max(y));
        assert!(diff < 1e-6, "{diff}");
    }

    // spread of the anomaly score across independent runs
    let spread = |samples: usize| {
        let maps: Vec<_> = (0..12)
            .map(|r| anomaly_maps(&m, &data[..1], &InferenceOptions { samples: Some(samples), seed: 1000 * r }).unwrap().remove(0))
            .collect();
        let n = maps.len() as f64;
        let mut total = 0.0;
        for idx in 0..maps[0].scores.len() {
            let vals: Vec<f64> = maps.iter().map(|mp| mp.scores.as_slice().unwrap()[idx]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        }
        total
    };
    let (v1, v16) = (spread(1), spread(16));
    assert!(v1 > v16, "{v1} <= {v16}");
}

#[test]
fn wrong_kind_is_a_contract_error() {
    let s = healthy(10, 2);
    let ae = untrained(ModelKind::Ae, &flat_arch(), &TrainConfig::default()).unwrap();
    assert!(matches!(elbo_loss(&ae, &s, 0), Err(Error::Contract(_))));
    assert!(matches!(alpha_gan_losses(&ae, &s, 0), Err(Error::Contract(_))));
    let ag = untrained(ModelKind::AlphaGan, &flat_arch(), &TrainConfig::default()).unwrap();
    let l = alpha_gan_losses(&ag, &s, 0).unwrap();
    assert!(l.iter().all(|(_, v)| v.is_finite()));
}

#[test]
fn adversarial_models_train_and_roundtrip() {
    let data = healthy(11, 48);
    let cfg = TrainConfig { batch_size: 16, n_critic: 2, ..config(2) };
    let dir = tempfile::tempdir().unwrap();
    for (kind, arch) in [(ModelKind::Aae, spatial_arch()), (ModelKind::AlphaGan, flat_arch())] {
        let m = train(kind, &arch, &data, &data[..8], &cfg, None).unwrap();
        assert_eq!(m.epochs.len(), 2);
        let p = dir.path().join(kind.name());
        m.save(&p).unwrap();
        let back = models::TrainedModel::load(&p).unwrap();
        assert_eq!(back.kind, kind);
        assert_eq!(back.loss_history, m.loss_history);
        assert_eq!(back.critic.as_ref().unwrap().len(), m.critic.as_ref().unwrap().len());
        let o = InferenceOptions::default();
        let a = anomaly_maps(&m, &data[..2], &o).unwrap();
        let b = anomaly_maps(&back, &data[..2], &o).unwrap();
        assert_eq!(a[0].scores, b[0].scores);
    }
}

#[test]
fn divergence_aborts_with_diagnostic_checkpoint() {
    let data = healthy(12, 32);
    let cfg = TrainConfig { lr: 1e30, ..config(3) };
    let dir = tempfile::tempdir().unwrap();
    match train(ModelKind::Ae, &flat_arch(), &data, &[], &cfg, Some(dir.path())) {
        Err(Error::Divergence { checkpoint: Some(p), .. }) => {
            assert!(models::TrainedModel::load(&p).is_ok());
        }
        other => panic!("expected divergence, got {:?}", other.map(|m| m.loss_history)),
    }
}

#[test]
fn early_stopping_and_step_cap() {
    let data = healthy(13, 32);
    let capped = TrainConfig { max_steps: Some(3), batch_size: 8, ..config(50) };
    let m = train(ModelKind::Ae, &flat_arch(), &data, &[], &capped, None).unwrap();
    assert_eq!(m.epochs.last().unwrap().steps, 3);
    let impatient = TrainConfig { patience: 1, min_rel_improvement: 0.99, ..config(50) };
    let m = train(ModelKind::Ae, &flat_arch(), &data, &data[..4], &impatient, None).unwrap();
    assert_eq!(m.epochs.len(), 2);
}
