//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! straight to stderr (visible without `--nocapture`); the test fails if any
//! criterion fails.

use lesionbench::baselines::{em_fit, em_fit_with_init, EmConfig, GlobalGmm, SpatialPrior};
use lesionbench::data::{GroundTruth, Modality, Polarity, Slice};
use lesionbench::eval::{self, DifferenceMap, GridSpec};
use lesionbench::models::losses::{
    alpha_gan_losses, bbb_weight_kl, elbo_terms, interp_weights, kl_diag_gaussian_value, reparameterize, wgan_gp_critic_loss,
    AdversarialWeights,
};
use lesionbench::models::{net, Architecture, LatentShape};
use lesionbench::preprocess::{normalize, resize_nearest};
use lesionbench::runner::{self, load_maps, load_preprocessed, DetectorKind, ExperimentConfig, Layout, Report};
use lesionbench_nn::gradcheck::{check_gradients, GradCheckReport};
use lesionbench_nn::layers::{init_linear, linear};
use lesionbench_nn::{Bound, ParamStore, Var, Weights};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn slice(pixels: Array2<f32>) -> Slice {
    let mask = Array2::from_elem(pixels.dim(), true);
    Slice { pixels, mask, modality: Modality::T2like, subject_id: "a".into(), slice_index: 0 }
}

/// O(n^2) pair count: P(score_pos > score_neg) + 0.5 P(equal).
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn brute_force_mdsc(scores: &[f64], labels: &[bool], lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..n {
        let t = lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let (mut inter, mut pred, mut act) = (0u64, 0u64, 0u64);
        for (&s, &l) in scores.iter().zip(labels) {
            let p = s > t;
            inter += (p && l) as u64;
            pred += p as u64;
            act += l as u64;
        }
        let d = if pred + act == 0 { 1.0 } else { 2.0 * inter as f64 / (pred + act) as f64 };
        if d > best.0 {
            best = (d, t);
        }
    }
    best
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = rng.random_range(2..=1000);
        // coarse values on half the instances so ties occur
        let coarse = i % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..6.0);
                if coarse {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let mut labels: Vec<bool> = scores.iter().map(|&s| rng.random_bool((s / 8.0 + 0.1).min(0.9))).collect();
        labels[0] = true;
        labels[1] = false;
        let curve = eval::roc(&scores, &labels).map_err(|e| e.to_string())?;
        let diff = (eval::auc(&curve) - pairwise_auc(&scores, &labels)).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-9, || format!("instance {i}: AUC differs by {diff:e}"))?;
        let grid = if i % 3 == 0 { GridSpec::Probability } else { GridSpec::Difference };
        let (lo, hi, pts) = grid.bounds();
        let s: Vec<f64> = if i % 3 == 0 { scores.iter().map(|v| v / 6.0).collect() } else { scores.clone() };
        let sweep = eval::max_dice_sweep(&s, &labels, &grid).map_err(|e| e.to_string())?;
        let (mdsc, t) = brute_force_mdsc(&s, &labels, lo, hi, pts);
        ensure(sweep.mdsc.to_bits() == mdsc.to_bits() && sweep.best_threshold.to_bits() == t.to_bits(), || {
            format!("instance {i}: sweep ({}, {}) vs brute force ({mdsc}, {t})", sweep.mdsc, sweep.best_threshold)
        })?;
    }
    Ok(format!("200 instances, max AUC gap {worst:.1e}, mDSC bit-exact"))
}

fn hand_values() -> Outcome {
    let mut pred = Array2::from_elem((4, 4), false);
    let mut gt = Array2::from_elem((4, 4), false);
    for c in 0..4 {
        pred[[0, c]] = true;
    }
    gt[[0, 0]] = true;
    gt[[0, 1]] = true;
    gt[[1, 0]] = true;
    gt[[1, 1]] = true;
    let mask = Array2::from_elem((4, 4), true);
    let d = eval::dice(&pred, &gt, &mask).map_err(|e| e.to_string())?;
    ensure(d == 0.5, || format!("dice {d}"))?;
    let kl = kl_diag_gaussian_value(&[1.0], &[0.0]);
    ensure((kl - 0.5).abs() <= 1e-12, || format!("KL {kl}"))?;
    let n = normalize(&slice(ndarray::array![[1.0, 3.0]])).map_err(|e| e.to_string())?;
    ensure(n.pixels == ndarray::array![[-1.0f32, 1.0]], || format!("normalize {:?}", n.pixels))?;
    let src = slice(Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f32));
    let small = resize_nearest(&src, 2);
    let expected = Array2::from_shape_fn((2, 2), |(i, j)| src.pixels[[i * 4 / 2, j * 4 / 2]]);
    ensure(small.pixels == expected, || format!("resize {:?}", small.pixels))?;
    Ok("dice 0.5, KL 0.5, normalize {-1, 1}, resize index rule".into())
}

fn uniform_prior(h: usize, w: usize, k: usize) -> SpatialPrior {
    SpatialPrior {
        phi: Array3::from_elem((h, w, k), 1.0 / k as f32),
        global: GlobalGmm { weights: vec![], means: vec![], stds: vec![], log_likelihood_trace: vec![], variance_floored: false },
    }
}

fn two_gaussians(seed: u64) -> Slice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Normal::new(-2.0, 0.3).unwrap();
    let b = Normal::new(2.0, 0.3).unwrap();
    slice(Array2::from_shape_fn((100, 100), |(r, _)| if r % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) } as f32))
}

fn em_checks() -> Outcome {
    let prior3 = uniform_prior(100, 100, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut steps = 0;
    for run in 0..100u64 {
        let s = two_gaussians(100 + run);
        let means: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let stds: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..3.0)).collect();
        let lambda = [0.0, 0.001, 0.01, 0.1][run as usize % 4];
        let cfg = EmConfig { lambda_out: lambda, tol: 0.0, max_iter: 40, ..Default::default() };
        let fit = em_fit_with_init(&s, &prior3, &cfg, Some((&means, &stds))).map_err(|e| e.to_string())?;
        for w in fit.log_likelihood_trace.windows(2) {
            steps += 1;
            ensure(w[1] >= w[0] - 1e-8, || format!("run {run}: log-likelihood {} -> {}", w[0], w[1]))?;
        }
    }
    let s = two_gaussians(7);
    let prior2 = uniform_prior(100, 100, 2);
    let fit = em_fit(&s, &prior2, &EmConfig { lambda_out: 0.0, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut order: Vec<usize> = vec![0, 1];
    order.sort_by(|&a, &b| fit.means[a].total_cmp(&fit.means[b]));
    let (m, sd) = (order.iter().map(|&i| fit.means[i]).collect::<Vec<_>>(), order.iter().map(|&i| fit.stds[i]).collect::<Vec<_>>());
    ensure((m[0] + 2.0).abs() < 0.1 && (m[1] - 2.0).abs() < 0.1, || format!("means {m:?}"))?;
    ensure(sd.iter().all(|v| (v - 0.3).abs() < 0.1), || format!("stds {sd:?}"))?;
    let outlier = fit.responsibilities.index_axis(ndarray::Axis(2), 2);
    ensure(outlier.iter().all(|&v| v == 0.0), || "non-zero outlier posterior at lambda 0".into())?;
    Ok(format!("{steps} EM steps monotone over 100 runs; means {:.3}/{:.3}, stds {:.3}/{:.3}; lambda 0 gives 0", m[0], m[1], sd[0], sd[1]))
}

fn arr(shape: &[usize], v: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut reports: Vec<(&str, usize, GradCheckReport)> = Vec::new();

    // ELBO of a 2-pixel, 1-latent VAE
    let mut vae = ParamStore::<f64>::new();
    init_linear(&mut vae, "mu", 2, 1, &mut rng);
    init_linear(&mut vae, "lv", 2, 1, &mut rng);
    init_linear(&mut vae, "dec", 1, 2, &mut rng);
    for (_, v) in vae.iter_mut() {
        v.mapv_inplace(|x| x + 0.1);
    }
    let xs = arr(&[3, 2], vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9]);
    let eps = arr(&[3, 1], vec![0.4, -1.3, 0.8]);
    let elbo = |b: &Bound<f64>| {
        let x = Var::constant(xs.clone());
        let mu = linear(b, "mu", &x);
        let lv = linear(b, "lv", &x);
        let xr = linear(b, "dec", &reparameterize(&mu, &lv, &eps));
        let img = |v: &Var<f64>| v.reshape(&[1, 3, 1, 2]);
        elbo_terms(&img(&x), &img(&xr), &mu, &lv, &Var::constant(arr(&[1, 3, 1, 2], vec![1.0; 6])), 1.0, None).total
    };
    reports.push(("ELBO", vae.num_scalars(), check_gradients(&vae, elbo, 1e-6, 1e-7)));

    // WGAN-GP critic with the penalty term
    let mut critic = ParamStore::<f64>::new();
    init_linear(&mut critic, "c0", 3, 4, &mut rng);
    init_linear(&mut critic, "c1", 4, 1, &mut rng);
    let real = net::standard_normal::<f64, _>(&[5, 3], &mut rng);
    let fake = net::standard_normal::<f64, _>(&[5, 3], &mut rng).mapv(|v| v * 0.5 + 1.0);
    let e = interp_weights::<f64, _>(5, &mut rng);
    let r = check_gradients(
        &critic,
        |b| wgan_gp_critic_loss(|z| linear(b, "c1", &linear(b, "c0", z).tanh()), &real, &fake, 0, 10.0, &e).total,
        1e-6,
        1e-7,
    );
    reports.push(("WGAN-GP critic", critic.num_scalars(), r));

    // alpha-GAN encoder/generator and both critics on a 4x4 toy
    let arch = Architecture { input_size: 4, channels: vec![1], latent: LatentShape::Flat { size: 2 }, critic_hidden: 2, drec_channels: vec![1] };
    arch.validate().map_err(|e| e.to_string())?;
    let mut ag = ParamStore::<f64>::new();
    net::init_autoencoder(&mut ag, &arch, false, &mut rng);
    net::init_latent_critic(&mut ag, 2, 2, &mut rng);
    net::init_recon_critic(&mut ag, &arch, &mut rng);
    let x = net::standard_normal::<f64, _>(&[1, 2, 4, 4], &mut rng);
    let mask = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |i| if i[2] == 3 && i[3] == 0 { 0.0 } else { 1.0 });
    let zp = net::standard_normal::<f64, _>(&[2, 2], &mut rng);
    let il = interp_weights::<f64, _>(2, &mut rng);
    let ii = interp_weights::<f64, _>(2, &mut rng);
    let wts = AdversarialWeights { adv: 1.0, rec_adv: 1.0, gp: 10.0 };
    let pick = |w: &dyn Weights<f64>, k: usize| {
        struct Dyn<'a>(&'a dyn Weights<f64>);
        impl Weights<f64> for Dyn<'_> {
            fn get(&self, n: &str) -> Var<f64> {
                self.0.get(n)
            }
        }
        let l = alpha_gan_losses(&Dyn(w), &arch, &Var::constant(x.clone()), &Var::constant(mask.clone()), &zp, &il, &ii, wts);
        [l.encoder, l.generator, l.latent_critic, l.recon_critic][k].clone()
    };
    reports.push(("alpha-GAN encoder", ag.num_scalars(), check_gradients(&ag, |b| pick(b, 0), 1e-6, 1e-7)));
    reports.push(("alpha-GAN generator", ag.num_scalars(), check_gradients(&ag, |b| pick(b, 1), 1e-6, 1e-7)));
    let (mut ae, mut critics) = (ParamStore::new(), ParamStore::new());
    for (n, v) in ag.iter() {
        if n.starts_with("critic.") || n.starts_with("drec.") {
            critics.insert(n, v.clone());
        } else {
            ae.insert(n, v.clone());
        }
    }
    let frozen = ae.bind_frozen();
    for (k, name) in [(2, "alpha-GAN latent critic"), (3, "alpha-GAN recon critic")] {
        let r = check_gradients(&critics, |b| pick(&net::Joined { first: b, second: &frozen }, k), 1e-6, 1e-7);
        reports.push((name, critics.num_scalars(), r));
    }

    // Bayes-by-backprop weight KL
    let mut lin = ParamStore::<f64>::new();
    init_linear(&mut lin, "a", 3, 2, &mut rng);
    let mut var = net::to_variational(&lin, -1.0);
    for (_, x) in var.iter_mut() {
        x.mapv_inplace(|t| t + 0.05);
    }
    reports.push(("BBB KL", var.num_scalars(), check_gradients(&var, bbb_weight_kl, 1e-6, 1e-7)));

    let mut worst: f64 = 0.0;
    for (name, n, r) in &reports {
        ensure(*n <= 100, || format!("{name}: {n} parameters"))?;
        ensure(r.checked > 0 && r.passes(1e-4), || format!("{name}: {r:?}"))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(format!("{} losses, worst relative error {worst:.1e}", reports.len()))
}

fn kl_monte_carlo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for g in 0..20 {
        let d = 1 + g % 3;
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let logvar: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.0)).collect();
        let sd: Vec<f64> = logvar.iter().map(|l| (0.5 * l).exp()).collect();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for j in 0..d {
                let e: f64 = std_normal.sample(&mut rng);
                let z = mean[j] + sd[j] * e;
                // log q(z) - log p(z)
                acc += -0.5 * e * e - sd[j].ln() + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        let closed = kl_diag_gaussian_value(&mean, &logvar);
        let gap = (closed - mc).abs();
        worst = worst.max(gap);
        ensure(gap < 1e-2, || format!("gaussian {g}: closed {closed} vs MC {mc}"))?;
    }
    Ok(format!("20 diagonal Gaussians, worst gap {worst:.1e}"))
}

fn benchmark_config() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml")).expect("benchmark config")
}

fn polarity(cfg: &ExperimentConfig, dataset: &str) -> Option<Polarity> {
    cfg.datasets.iter().find(|d| d.name == dataset)?.synthetic.as_ref().map(|s| s.lesion.polarity)
}

fn run_benchmark(out: &Path) -> Result<(ExperimentConfig, Report, Duration), String> {
    let cfg = benchmark_config();
    let start = Instant::now();
    let report = runner::run(&cfg, out).map_err(|e| e.to_string())?;
    Ok((cfg, report, start.elapsed()))
}

fn benchmark(cfg: &ExperimentConfig, report: &Report, took: Duration) -> Outcome {
    ensure(report.failures.is_empty(), || format!("stage failures: {:?}", report.failures))?;
    for spec in cfg.datasets.iter().filter_map(|d| d.synthetic.as_ref()) {
        ensure(spec.size == 64 && spec.train == 2000 && spec.test == 200, || format!("dataset shape {spec:?}"))?;
    }
    let kind = |name: &str| cfg.detectors.iter().find(|d| d.name == name).map(|d| d.kind);
    let mut notes = Vec::new();
    let mut best_unsup = Vec::new();
    for ds in cfg.datasets.iter().map(|d| d.name.as_str()) {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.dataset == ds).collect();
        ensure(rows.len() == cfg.detectors.len(), || format!("{ds}: {} rows", rows.len()))?;
        if polarity(cfg, ds) == Some(Polarity::Bright) {
            for r in &rows {
                ensure(r.auc > 0.5, || format!("(a) {ds}/{}: AUC {}", r.detector, r.auc))?;
            }
        }
        let mean = rows.iter().find(|r| kind(&r.detector) == Some(DetectorKind::Mean)).ok_or("no mean row")?;
        for g in rows.iter().filter(|r| kind(&r.detector) == Some(DetectorKind::Gmm)) {
            ensure(g.auc >= mean.auc, || format!("(b) {ds}: {} AUC {:.4} < mean {:.4}", g.detector, g.auc, mean.auc))?;
        }
        let unet = rows.iter().find(|r| kind(&r.detector) == Some(DetectorKind::UNet)).ok_or("no U-Net row")?;
        let best = rows.iter().filter(|r| kind(&r.detector) != Some(DetectorKind::UNet)).max_by(|a, b| a.mdsc.total_cmp(&b.mdsc)).unwrap();
        ensure(unet.mdsc > best.mdsc, || format!("(b) {ds}: U-Net dice {:.4} <= {} mDSC {:.4}", unet.mdsc, best.detector, best.mdsc))?;
        notes.push(format!("{ds}: U-Net {:.3} > {} {:.3}", unet.mdsc, best.detector, best.mdsc));
        best_unsup.push((polarity(cfg, ds), best.mdsc));
    }
    let bright = best_unsup.iter().find(|(p, _)| *p == Some(Polarity::Bright)).ok_or("no bright dataset")?.1;
    let dark = best_unsup.iter().find(|(p, _)| *p == Some(Polarity::Dark)).ok_or("no dark dataset")?.1;
    ensure(bright > dark, || format!("(c) bright best mDSC {bright:.4} <= dark {dark:.4}"))?;
    ensure(took < Duration::from_secs(30 * 60), || format!("took {took:?}"))?;
    Ok(format!("{}; best unsupervised mDSC bright {bright:.3} > dark {dark:.3}; {:.0} s", notes.join(", "), took.as_secs_f64()))
}

fn determinism(first: &Path) -> Outcome {
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, report, took) = run_benchmark(second.path())?;
    ensure(report.failures.is_empty(), || format!("second run failures: {:?}", report.failures))?;
    let a = std::fs::read(first.join("metrics.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(second.path().join("metrics.csv")).map_err(|e| e.to_string())?;
    ensure(!a.is_empty() && a == b, || "metrics.csv differs between fresh runs".into())?;
    Ok(format!("metrics.csv byte-identical ({} bytes, second run {:.0} s)", a.len(), took.as_secs_f64()))
}

fn squared(map: &DifferenceMap) -> DifferenceMap {
    DifferenceMap::masked(map.scores.mapv(|v| v * v), &map.mask, "squared").unwrap()
}

fn monotone_invariance(out: Option<&Path>, cfg: &ExperimentConfig) -> Outcome {
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..50 {
        let (h, w) = (16, 16);
        let x = Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0f32..2.0));
        let xr = Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0f32..2.0));
        let gt = GroundTruth { labels: Array2::from_shape_fn((h, w), |(r, c)| (x[[r, c]] - xr[[r, c]]).abs() + rng.random_range(0.0f32..2.0) > 2.0) };
        let mask = Array2::from_shape_fn((h, w), |(r, _)| r > 0);
        let abs = DifferenceMap::masked((&x - &xr).mapv(|v| v.abs() as f64), &mask, "abs").unwrap();
        let (s1, l1) = eval::pool([(&abs, &gt)]).map_err(|e| e.to_string())?;
        if l1.iter().all(|&l| l) || l1.iter().all(|&l| !l) {
            continue;
        }
        let (s2, l2) = eval::pool([(&squared(&abs), &gt)]).map_err(|e| e.to_string())?;
        let a1 = eval::auc(&eval::roc(&s1, &l1).map_err(|e| e.to_string())?);
        let a2 = eval::auc(&eval::roc(&s2, &l2).map_err(|e| e.to_string())?);
        ensure((a1 - a2).abs() <= 1e-12, || format!("random instance {i}: {a1} vs {a2}"))?;
        checked += 1;
    }
    // difference maps of the trained detectors
    let mut rows = 0;
    if let Some(out) = out {
        let layout = Layout::new(out);
        for ds in &cfg.datasets {
            let test = load_preprocessed(&layout, &ds.name, "test").map_err(|e| e.to_string())?;
            let gts: Vec<&GroundTruth> = test.iter().filter_map(|(_, g)| g.as_ref()).collect();
            for det in cfg.detectors.iter().filter(|d| d.grid() == GridSpec::Difference) {
                let report_maps: PathBuf = out.join("scores").join(&ds.name).join(&det.name);
                let (_, maps) = load_maps(&report_maps).map_err(|e| e.to_string())?;
                let sq: Vec<DifferenceMap> = maps.iter().map(squared).collect();
                let (s1, l1) = eval::pool(maps.iter().zip(gts.iter().copied())).map_err(|e| e.to_string())?;
                let (s2, l2) = eval::pool(sq.iter().zip(gts.iter().copied())).map_err(|e| e.to_string())?;
                let a1 = eval::auc(&eval::roc(&s1, &l1).map_err(|e| e.to_string())?);
                let a2 = eval::auc(&eval::roc(&s2, &l2).map_err(|e| e.to_string())?);
                ensure((a1 - a2).abs() <= 1e-12, || format!("{}/{}: {a1} vs {a2}", ds.name, det.name))?;
                rows += 1;
            }
        }
    }
    Ok(format!("{checked} random instances and {rows} detector maps: abs and squared AUC equal"))
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report_line = |n: usize, name: &'static str, o: Outcome| {
        let line = match &o {
            Ok(detail) => format!("criterion {n} ({name}): PASS - {detail}"),
            Err(why) => format!("criterion {n} ({name}): FAIL - {why}"),
        };
        let _ = writeln!(std::io::stderr(), "{line}");
        results.push((n, name, o));
    };
    report_line(1, "metric oracles", metric_oracles());
    report_line(2, "hand values", hand_values());
    report_line(3, "EM correctness", em_checks());
    report_line(4, "gradient fidelity", gradient_checks());
    report_line(5, "KL vs Monte Carlo", kl_monte_carlo());

    let first = tempfile::tempdir().unwrap();
    let bench = run_benchmark(first.path());
    let cfg = benchmark_config();
    match &bench {
        Ok((cfg, report, took)) => {
            report_line(6, "synthetic benchmark", benchmark(cfg, report, *took));
            report_line(7, "determinism", determinism(first.path()));
        }
        Err(e) => {
            report_line(6, "synthetic benchmark", Err(e.clone()));
            report_line(7, "determinism", Err("first benchmark run failed".into()));
        }
    }
    report_line(8, "monotone-transform invariance", monotone_invariance(bench.is_ok().then_some(first.path()), &cfg));

    let failed: Vec<String> = results.iter().filter(|(_, _, o)| o.is_err()).map(|(n, name, _)| format!("{n} ({name})")).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
