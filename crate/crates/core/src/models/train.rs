use super::losses::{self, AdversarialWeights};
use super::net::{self, Joined, SampledWeights};
use super::{Architecture, EpochRecord, ModelKind, TrainConfig, TrainedModel};
use crate::data::Slice;
use crate::error::{Error, Result};
use crate::rng;
use lesionbench_nn::{no_grad, Adam, ParamStore, Var, Weights};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use std::path::Path;

type Store = ParamStore<f32>;

fn kind_index(kind: ModelKind) -> u64 {
    ModelKind::ALL.iter().position(|&k| k == kind).expect("listed") as u64
}

pub(crate) fn check_inputs(arch: &Architecture, slices: &[Slice], what: &str) -> Result<()> {
    if slices.is_empty() {
        return Err(Error::EmptyDataset(format!("no {what} slices")));
    }
    let s = arch.input_size;
    for sl in slices {
        if sl.dim() != (s, s) {
            return Err(Error::shape(&[s, s], sl.pixels.shape()));
        }
    }
    Ok(())
}

/// Fresh parameters for `kind`, plus critic parameters for adversarial kinds.
pub(crate) fn initialize(kind: ModelKind, arch: &Architecture, config: &TrainConfig) -> (Store, Option<Store>) {
    let mut r = rng::stream(config.seed, "init", kind_index(kind));
    let mut params = Store::new();
    net::init_autoencoder(&mut params, arch, kind.is_stochastic(), &mut r);
    if kind == ModelKind::VaeBbb {
        params = net::to_variational(&params, config.bbb_init_logstd);
    }
    let critic = kind.has_latent_critic().then(|| {
        let mut c = Store::new();
        net::init_latent_critic(&mut c, arch.latent.numel(), arch.critic_hidden, &mut r);
        if kind.has_recon_critic() {
            net::init_recon_critic(&mut c, arch, &mut r);
        }
        c
    });
    (params, critic)
}

struct Engine<'a> {
    kind: ModelKind,
    arch: &'a Architecture,
    cfg: &'a TrainConfig,
    num_train: usize,
    params: Store,
    critic: Option<Store>,
    opt: Adam<f32>,
    opt_dec: Adam<f32>,
    /// Adversarial encoder updates of the AAE.
    opt_reg: Adam<f32>,
    opt_critic: Adam<f32>,
    rng: rng::Rng,
}

impl Engine<'_> {
    fn adv(&self) -> AdversarialWeights {
        AdversarialWeights { adv: self.cfg.adv_weight, rec_adv: self.cfg.rec_adv_weight, gp: self.cfg.gp_coeff }
    }

    /// One generator step (preceded by critic steps for adversarial kinds,
    /// each on a fresh random batch of `data`). Returns the generator-side
    /// objective.
    fn step(&mut self, batch: &[&Slice], data: &[Slice]) -> f64 {
        let (x, m) = losses::batch_tensors::<f32>(batch);
        match self.kind {
            ModelKind::Ae | ModelKind::Dae => self.step_ae(x, m),
            ModelKind::Vae | ModelKind::VaeBbb => self.step_vae(x, m),
            ModelKind::Aae => {
                self.train_critic(batch.len(), data);
                self.step_aae(x, m)
            }
            ModelKind::AlphaGan => {
                self.train_critic(batch.len(), data);
                self.step_alpha_gan(x, m)
            }
        }
    }

    fn step_ae(&mut self, x: ArrayD<f32>, m: ArrayD<f32>) -> f64 {
        let input = if self.kind == ModelKind::Dae && self.cfg.dae_sigma > 0.0 {
            let noise: ArrayD<f32> = net::standard_normal(x.shape(), &mut self.rng);
            let s = self.cfg.dae_sigma as f32;
            &x + &(noise * &m * s)
        } else {
            x.clone()
        };
        let bound = self.params.bind();
        let (z, _) = net::encode(&bound, self.arch, &Var::constant(input), false);
        let xr = net::decode(&bound, self.arch, &z);
        let loss = losses::recon_norm(&Var::constant(x), &xr, &Var::constant(m));
        let g = loss.backward();
        self.opt.step(&mut self.params, &bound, &g);
        loss.item() as f64
    }

    fn step_vae(&mut self, x: ArrayD<f32>, m: ArrayD<f32>) -> f64 {
        let bound = self.params.bind();
        let (x, m) = (Var::constant(x), Var::constant(m));
        let loss = if self.kind == ModelKind::VaeBbb {
            let sw = SampledWeights::draw(&bound, &mut self.rng);
            let wkl = losses::bbb_weight_kl(&bound).scale(1.0 / self.num_train as f32);
            vae_objective(&sw, self.arch, &x, &m, self.cfg.kl_beta, Some(&wkl), &mut self.rng)
        } else {
            vae_objective(&bound, self.arch, &x, &m, self.cfg.kl_beta, None, &mut self.rng)
        };
        let g = loss.backward();
        self.opt.step(&mut self.params, &bound, &g);
        loss.item() as f64
    }

    /// Latent codes and masked reconstructions of `x` under frozen weights.
    fn fakes(&mut self, x: &Var<f32>, m: &Var<f32>) -> (ArrayD<f32>, Option<ArrayD<f32>>) {
        let arch = self.arch;
        let stochastic = self.kind.is_stochastic();
        let with_recon = self.kind.has_recon_critic();
        let frozen = self.params.bind_frozen();
        let rng = &mut self.rng;
        no_grad(|| {
            let (mu, lv) = net::encode(&frozen, arch, x, stochastic);
            let z = match lv {
                Some(lv) => losses::reparameterize(&mu, &lv, &net::standard_normal(mu.shape(), rng)),
                None => mu,
            };
            let xr = with_recon.then(|| net::decode(&frozen, arch, &z).mul(m).value().clone());
            (z.value().clone(), xr)
        })
    }

    /// `n_critic` WGAN-GP updates of the latent critic (and, for alpha-GAN,
    /// the reconstruction critic).
    fn train_critic(&mut self, b: usize, data: &[Slice]) {
        let arch = self.arch;
        for _ in 0..self.cfg.n_critic {
            let picks = rand::seq::index::sample(&mut self.rng, data.len(), b.min(data.len()));
            let batch: Vec<&Slice> = picks.iter().map(|i| &data[i]).collect();
            let (x, m) = losses::batch_tensors::<f32>(&batch);
            let (xv, mv) = (Var::constant(x.clone()), Var::constant(m));
            let (z_fake, x_fake) = self.fakes(&xv, &mv);
            let z_real = net::standard_normal(z_fake.shape(), &mut self.rng);
            let el = losses::interp_weights(batch.len(), &mut self.rng);
            let ei = losses::interp_weights(batch.len(), &mut self.rng);
            let critic = self.critic.as_mut().expect("adversarial kinds have critics");
            let cb = critic.bind();
            let mut total = losses::wgan_gp_critic_loss(
                |v| net::latent_critic(&cb, &net::flatten_latent(v, arch)),
                &z_real,
                &z_fake,
                net::latent_batch_axis(arch),
                self.cfg.gp_coeff,
                &el,
            )
            .total;
            if let Some(x_fake) = x_fake {
                let ld = losses::wgan_gp_critic_loss(|v| net::recon_critic(&cb, arch, v), &x, &x_fake, 1, self.cfg.gp_coeff, &ei);
                total = total.add(&ld.total);
            }
            let g = total.backward();
            self.opt_critic.step(critic, &cb, &g);
        }
    }

    /// Reconstruction phase on encoder and decoder, then a regularization
    /// phase that moves the encoder towards the prior through the critic.
    /// The phases keep separate optimizer state.
    fn step_aae(&mut self, x: ArrayD<f32>, m: ArrayD<f32>) -> f64 {
        let (x, m) = (Var::constant(x), Var::constant(m));
        let arch = self.arch;
        let bound = self.params.bind();
        let (mu, lv) = net::encode(&bound, arch, &x, true);
        let eps = net::standard_normal(mu.shape(), &mut self.rng);
        let z = losses::reparameterize(&mu, &lv.expect("stochastic"), &eps);
        let recon = losses::recon_norm(&x, &net::decode(&bound, arch, &z), &m);
        let g = recon.backward();
        self.opt.step(&mut self.params, &bound, &g);

        let bound = self.params.bind();
        let cf = self.critic.as_ref().expect("AAE has a critic").bind_frozen();
        let (mu, lv) = net::encode(&bound, arch, &x, true);
        let eps = net::standard_normal(mu.shape(), &mut self.rng);
        let z = losses::reparameterize(&mu, &lv.expect("stochastic"), &eps);
        let adv = net::latent_critic(&cf, &net::flatten_latent(&z, arch)).mean().scale(-(self.cfg.adv_weight as f32));
        let g = adv.backward();
        self.opt_reg.step_filtered(&mut self.params, &bound, &g, |n| n.starts_with("enc."));
        recon.item() as f64 + adv.item() as f64
    }

    fn step_alpha_gan(&mut self, x: ArrayD<f32>, m: ArrayD<f32>) -> f64 {
        let arch = self.arch;
        let (xv, mv) = (Var::constant(x), Var::constant(m));
        let bound = self.params.bind();
        let cf = self.critic.as_ref().expect("alpha-GAN has critics").bind_frozen();
        let w = Joined { first: &bound, second: &cf };
        let adv = self.adv();
        let (z, _) = net::encode(&w, arch, &xv, false);
        let xr = net::decode(&w, arch, &z).mul(&mv);
        let recon = losses::recon_norm(&xv, &xr, &mv);
        let enc_loss = recon.sub(&net::latent_critic(&w, &net::flatten_latent(&z, arch)).mean().scale(adv.adv as f32));
        let gen_loss = recon.sub(&net::recon_critic(&w, arch, &xr).mean().scale(adv.rec_adv as f32));
        let ge = enc_loss.backward();
        let gg = gen_loss.backward();
        self.opt.step_filtered(&mut self.params, &bound, &ge, |n| n.starts_with("enc."));
        self.opt_dec.step_filtered(&mut self.params, &bound, &gg, |n| n.starts_with("dec."));
        gen_loss.item() as f64
    }

    /// Mean per-slice in-mask L2 reconstruction error of the deterministic
    /// reconstruction (posterior-mean weights for VAE_BBB).
    fn validation_recon(&self, slices: &[Slice]) -> f64 {
        let params = if self.kind == ModelKind::VaeBbb { posterior_mean(&self.params) } else { self.params.clone() };
        let mut total = 0.0;
        no_grad(|| {
            let w = params.bind_frozen();
            for chunk in slices.chunks(32) {
                let refs: Vec<&Slice> = chunk.iter().collect();
                let (x, m) = losses::batch_tensors::<f32>(&refs);
                let (x, m) = (Var::constant(x), Var::constant(m));
                let (z, _) = net::encode(&w, self.arch, &x, self.kind.is_stochastic());
                let xr = net::decode(&w, self.arch, &z);
                let per = x.sub(&xr).mul(&m).square().sum_keep_axis(1).sqrt();
                total += per.value().iter().map(|&v| v as f64).sum::<f64>();
            }
        });
        total / slices.len() as f64
    }

    fn into_model(self, loss_history: Vec<f64>, epochs: Vec<EpochRecord>) -> TrainedModel {
        TrainedModel {
            kind: self.kind,
            architecture: self.arch.clone(),
            params: self.params,
            critic: self.critic,
            config: self.cfg.clone(),
            loss_history,
            epochs,
            num_train: self.num_train,
        }
    }
}

fn vae_objective<R: rand::Rng + ?Sized>(
    w: &impl Weights<f32>,
    arch: &Architecture,
    x: &Var<f32>,
    m: &Var<f32>,
    beta: f64,
    wkl: Option<&Var<f32>>,
    rng: &mut R,
) -> Var<f32> {
    let (mu, lv) = net::encode(w, arch, x, true);
    let lv = lv.expect("stochastic");
    let eps = net::standard_normal(mu.shape(), rng);
    let z = losses::reparameterize(&mu, &lv, &eps);
    let xr = net::decode(w, arch, &z);
    losses::elbo_terms(x, &xr, &mu, &lv, m, beta, wkl).total
}

/// Point weights `w = w.mu` of a factorized posterior.
pub(crate) fn posterior_mean(store: &Store) -> Store {
    let mut out = Store::new();
    for (n, v) in store.iter() {
        if let Some(base) = n.strip_suffix(".mu") {
            out.insert(base, v.clone());
        }
    }
    out
}

/// Train a detector of `kind` on healthy `train` slices.
///
/// `val` drives early stopping (no relative improvement above
/// `min_rel_improvement` for `patience` epochs); when empty, the training
/// objective is used instead. A non-finite loss aborts with
/// [`Error::Divergence`], after writing the offending state to
/// `diagnostic_dir` when given.
pub fn train(
    kind: ModelKind,
    arch: &Architecture,
    train: &[Slice],
    val: &[Slice],
    config: &TrainConfig,
    diagnostic_dir: Option<&Path>,
) -> Result<TrainedModel> {
    arch.validate()?;
    config.validate()?;
    check_inputs(arch, train, "training")?;
    if !val.is_empty() {
        check_inputs(arch, val, "validation")?;
    }
    let (params, critic) = initialize(kind, arch, config);
    let adam = || Adam::new(config.lr, config.beta1, config.beta2);
    let mut eng = Engine {
        kind,
        arch,
        cfg: config,
        num_train: train.len(),
        params,
        critic,
        opt: adam(),
        opt_dec: adam(),
        opt_reg: adam(),
        opt_critic: adam(),
        rng: rng::stream(config.seed, "train", kind_index(kind)),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut steps = 0usize;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    'outer: for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|cap| steps >= cap) {
                break;
            }
            let batch: Vec<&Slice> = chunk.iter().map(|&i| &train[i]).collect();
            let l = eng.step(&batch, train);
            steps += 1;
            if !l.is_finite() {
                let checkpoint = diagnostic_dir.map(|d| -> Result<_> {
                    let p = d.join(format!("diverged-{}-step{steps}", kind.name().to_lowercase()));
                    eng.clone_model(&history, &epochs).save(&p)?;
                    Ok(p)
                });
                let checkpoint = checkpoint.transpose()?;
                return Err(Error::Divergence { kind: kind.name().into(), step: steps, checkpoint });
            }
            sum += l;
            count += 1;
        }
        if count == 0 {
            break;
        }
        let train_loss = sum / count as f64;
        let val_recon = if val.is_empty() { train_loss } else { eng.validation_recon(val) };
        history.push(train_loss);
        epochs.push(EpochRecord { epoch, steps, train_loss, val_recon });
        log::info!("{kind} epoch {epoch}: loss {train_loss:.4} val {val_recon:.4} steps {steps}");
        if val_recon < best * (1.0 - config.min_rel_improvement) {
            best = val_recon;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break 'outer;
            }
        }
        if config.max_steps.is_some_and(|cap| steps >= cap) {
            break;
        }
    }
    Ok(eng.into_model(history, epochs))
}

impl Engine<'_> {
    fn clone_model(&self, history: &[f64], epochs: &[EpochRecord]) -> TrainedModel {
        TrainedModel {
            kind: self.kind,
            architecture: self.arch.clone(),
            params: self.params.clone(),
            critic: self.critic.clone(),
            config: self.cfg.clone(),
            loss_history: history.to_vec(),
            epochs: epochs.to_vec(),
            num_train: self.num_train,
        }
    }
}

/// A model at its initialization, before any update.
pub fn untrained(kind: ModelKind, arch: &Architecture, config: &TrainConfig) -> Result<TrainedModel> {
    arch.validate()?;
    config.validate()?;
    let (params, critic) = initialize(kind, arch, config);
    Ok(TrainedModel {
        kind,
        architecture: arch.clone(),
        params,
        critic,
        config: config.clone(),
        loss_history: Vec::new(),
        epochs: Vec::new(),
        num_train: 0,
    })
}
