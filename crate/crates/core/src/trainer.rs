//! VAE warm-up, the transition to a clipped MoG prior, and the alternating
//! three-player loop. Also hosts the encoder-overfit probe.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data2d::{dataset_rng, Dataset};
use crate::distributions::{
    batch_expected_responsibilities, normalized_entropy, standard_normal,
};
use crate::error::{Error, Result};
use crate::nets::{Decoder, Encoder};
use crate::objective::{
    decoder_step_graph, encoder_probe_graph, encoder_step_graph, prior_step_graph, warmup_graph,
    batch_elbo_terms, GameHyper, KlMode, LossOptions, Models, Player, PlayerLosses, PosteriorNoise,
    StepGraph, StepNoise,
};
use crate::optim::Adam;
use crate::prior::{vamp_to_mog, MixturePrior, VampPseudoInputs};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    #[serde(rename = "sg")]
    StandardGaussian,
    #[serde(rename = "mog")]
    Mog,
    #[serde(rename = "vamp-to-mog")]
    VampToMog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub modes: usize,
    pub learnable_contributions: bool,
    /// Train the prior as a third player during the adversarial phase.
    pub intro_prior: bool,
    /// Standard deviation of the initial means of a plain MoG prior.
    pub init_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kind: PriorKind::VampToMog,
            modes: 64,
            learnable_contributions: false,
            intro_prior: true,
            init_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub enabled: bool,
    pub rho: f64,
    /// Use this steepness instead of solving for it from `rho`.
    pub k: Option<f64>,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            enabled: true,
            rho: 0.85,
            k: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub encoder: f64,
    pub decoder: f64,
    pub prior: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            encoder: 2e-4,
            decoder: 2e-4,
            prior: 2e-4,
        }
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: String,
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub prior: PriorConfig,
    pub hyper: GameHyper,
    /// Monte-Carlo samples per KL estimate.
    pub t: usize,
    pub kl_mode: KlMode,
    pub recon_as_fake: bool,
    pub warmup_epochs: usize,
    pub adversarial_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: LearningRates,
    pub clip: ClipConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: "8gaussian".into(),
            latent_dim: 2,
            hidden_width: 256,
            prior: PriorConfig::default(),
            hyper: GameHyper::default(),
            t: 100,
            kl_mode: KlMode::Mc,
            recon_as_fake: false,
            warmup_epochs: 20,
            adversarial_epochs: 100,
            steps_per_epoch: 100,
            batch_size: 512,
            lr: LearningRates::default(),
            clip: ClipConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.parse::<Dataset>()?;
        self.hyper.validate()?;
        let counts = [
            ("latent_dim", self.latent_dim),
            ("hidden_width", self.hidden_width),
            ("prior.modes", self.prior.modes),
            ("t", self.t),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.warmup_epochs + self.adversarial_epochs == 0 {
            return Err(Error::InvalidArgument("a run needs at least one epoch".into()));
        }
        for (name, v) in [("lr.encoder", self.lr.encoder), ("lr.decoder", self.lr.decoder), ("lr.prior", self.lr.prior)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.clip.enabled && !(self.clip.rho > 0.0 && self.clip.rho < 1.0) {
            return Err(Error::InvalidArgument(format!("clip.rho must be in (0, 1), got {}", self.clip.rho)));
        }
        if self.kl_mode == KlMode::Closed && self.prior.kind != PriorKind::StandardGaussian {
            return Err(Error::InvalidArgument("closed-form KL needs prior.kind = \"sg\"".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Dataset {
        self.dataset.parse().expect("validated dataset name")
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            t: self.t,
            kl_mode: self.kl_mode,
            recon_as_fake: self.recon_as_fake,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.adversarial_epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Adversarial,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Adversarial => "adversarial",
        }
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Mean warm-up losses over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WarmupLosses {
    pub rec: f64,
    pub kl: f64,
    pub loss: f64,
}

/// What one epoch did.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub warmup: Option<WarmupLosses>,
    pub losses: Option<PlayerLosses>,
    /// Normalized entropy of the batch-expected responsibilities at the end
    /// of the epoch (0 for a unimodal prior).
    pub resp_entropy_norm: f64,
    /// Per mode, the largest batch-expected responsibility seen by an
    /// encoder step during the epoch.
    pub max_responsibility: Vec<f64>,
    pub weights_start: Vec<f64>,
    pub weights_end: Vec<f64>,
    pub optimizer_updates: u64,
}

impl EpochRecord {
    /// Modes whose responsibility stayed below `threshold` all epoch.
    pub fn inactive_modes(&self, threshold: f64) -> Vec<usize> {
        self.max_responsibility
            .iter()
            .enumerate()
            .filter(|(_, &c)| c < threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Full training state: parameters, optimizer moments, generators.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: MixturePrior,
    pub vamp: Option<VampPseudoInputs>,
    pub opt_encoder: Adam,
    pub opt_decoder: Adam,
    pub opt_prior: Adam,
    pub opt_vamp: Option<Adam>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches.
    pub step: u64,
    pub transitioned: bool,
    pub optimizer_updates: u64,
    pub noise_rng: ChaCha8Rng,
    pub data_rng: ChaCha8Rng,
    /// Responsibilities from the latest encoder step.
    pub last_responsibilities: Option<Vec<f64>>,
}

fn round_all(ms: Vec<&mut Matrix>) {
    for m in ms {
        m.round_to_f32();
    }
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset();
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(0);
        let d = config.latent_dim;
        let mut encoder = Encoder::new(&mut init, 2, d, config.hidden_width);
        let mut decoder = Decoder::new(&mut init, d, 2, config.hidden_width);
        let p = &config.prior;
        let (mut prior, mut vamp) = match p.kind {
            PriorKind::StandardGaussian => (MixturePrior::standard(d), None),
            PriorKind::Mog => {
                let mut prior = MixturePrior::random(&mut init, p.modes, d, p.init_scale);
                prior.learnable_contributions = p.learnable_contributions;
                (prior, None)
            }
            PriorKind::VampToMog => {
                let pseudo = dataset.sample(p.modes, &mut init);
                let vamp = VampPseudoInputs::new(pseudo)?;
                // Placeholder until the transition replaces it.
                let mut prior = MixturePrior::standard(d);
                prior.learnable_params = false;
                (prior, Some(vamp))
            }
        };
        round_all(encoder.net.tensors_mut());
        round_all(decoder.net.tensors_mut());
        round_all(vec![&mut prior.means, &mut prior.raw_log_vars, &mut prior.energy_logits]);
        if let Some(v) = vamp.as_mut() {
            round_all(vec![&mut v.pseudo_inputs, &mut v.energy_logits]);
        }
        let opt_encoder = Adam::new(config.lr.encoder, &encoder.net.tensors());
        let opt_decoder = Adam::new(config.lr.decoder, &decoder.net.tensors());
        let opt_prior = Adam::new(config.lr.prior, &prior_tensors(&prior));
        let opt_vamp = vamp
            .as_ref()
            .map(|v| Adam::new(config.lr.prior, &[&v.pseudo_inputs, &v.energy_logits]));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(100);
        let data_rng = dataset_rng(dataset, config.seed);
        Ok(TrainState {
            config,
            encoder,
            decoder,
            prior,
            vamp,
            opt_encoder,
            opt_decoder,
            opt_prior,
            opt_vamp,
            epoch: 0,
            step: 0,
            transitioned: false,
            optimizer_updates: 0,
            noise_rng,
            data_rng,
            last_responsibilities: None,
        })
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            encoder: &self.encoder,
            decoder: &self.decoder,
            prior: &self.prior,
        }
    }

    pub fn phase(&self) -> Phase {
        if self.epoch < self.config.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Adversarial
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    /// The prior as currently evaluated: during a VampPrior warm-up, the
    /// mixture of encoder posteriors at the pseudo-inputs.
    pub fn current_prior(&self) -> Result<MixturePrior> {
        match (&self.vamp, self.transitioned) {
            (Some(v), false) => vamp_to_mog(v, |x| self.encoder.encode(x)),
            _ => Ok(self.prior.clone()),
        }
    }

    fn batch(&mut self) -> Matrix {
        self.config.dataset().sample(self.config.batch_size, &mut self.data_rng)
    }

    fn non_finite(&self, loss: &'static str, x: &Matrix, detail: &str) -> Error {
        let rows: Vec<String> = (0..x.rows()).map(|r| format!("{} {}", x.get(r, 0), x.get(r, 1))).collect();
        Error::NonFiniteLoss {
            loss,
            epoch: self.epoch,
            step: self.step as usize,
            detail: format!("{detail}; batch:\n{}", rows.join("\n")),
        }
    }

    /// One joint β-ELBO step over encoder, decoder and prior.
    pub fn warmup_step(&mut self, x: &Matrix) -> Result<WarmupLosses> {
        let opts = self.config.loss_options();
        let noise = PosteriorNoise::draw(&mut self.noise_rng, x.rows(), self.config.latent_dim, &opts);
        let h = self.config.hyper;
        let lc = self.config.prior.learnable_contributions;
        let wg = warmup_graph(&self.models(), self.vamp.as_ref().map(|v| (v, lc)), x, &noise, &h, &opts)?;
        let loss = wg.graph.scalar(wg.loss);
        if !loss.is_finite() {
            return Err(self.non_finite("warm-up", x, &format!("rec {} kl {}", wg.rec, wg.kl)));
        }
        let grads = wg.graph.backward(wg.loss);
        let enc: Vec<Matrix> = wg.encoder.leaves.iter().map(|&v| grads.wrt(v)).collect();
        let dec: Vec<Matrix> = wg.decoder.leaves.iter().map(|&v| grads.wrt(v)).collect();
        self.opt_encoder.update(&mut self.encoder.net.tensors_mut(), &enc);
        self.opt_decoder.update(&mut self.decoder.net.tensors_mut(), &dec);
        self.optimizer_updates += 2;
        match (&mut self.vamp, wg.vamp) {
            (Some(v), Some(vv)) => {
                let g = [grads.wrt(vv.pseudo_inputs), grads.wrt(vv.energy_logits)];
                let opt = self.opt_vamp.as_mut().expect("vamp optimizer");
                opt.update(&mut [&mut v.pseudo_inputs, &mut v.energy_logits], &g);
                self.optimizer_updates += 1;
            }
            _ if self.prior.learnable_params => {
                let g = [
                    grads.wrt(wg.prior.means),
                    grads.wrt(wg.prior.raw_log_vars),
                    grads.wrt(wg.prior.energy_logits),
                ];
                let (means, lv, logits) = (&mut self.prior.means, &mut self.prior.raw_log_vars, &mut self.prior.energy_logits);
                self.opt_prior.update(&mut [means, lv, logits], &g);
                self.optimizer_updates += 1;
            }
            _ => {}
        }
        Ok(WarmupLosses {
            rec: wg.rec,
            kl: wg.kl,
            loss,
        })
    }

    /// Switches to the adversarial phase: a VampPrior becomes a MoG, clip
    /// ranges are fixed, and the prior's learnability follows `intro_prior`.
    pub fn transition_to_adversarial(&mut self) -> Result<()> {
        if self.transitioned {
            return Ok(());
        }
        self.transitioned = true;
        let cfg = &self.config.prior;
        if cfg.kind == PriorKind::StandardGaussian {
            return Ok(());
        }
        let mut prior = match self.vamp.take() {
            Some(v) => {
                let mut p = vamp_to_mog(&v, |x| self.encoder.encode(x))?;
                p.learnable_contributions = cfg.learnable_contributions;
                round_all(vec![&mut p.means, &mut p.raw_log_vars]);
                self.opt_vamp = None;
                p
            }
            None => self.prior.clone(),
        };
        prior.clipping_enabled = self.config.clip.enabled;
        if self.config.clip.enabled {
            prior = prior.init_clip_ranges(self.config.clip.rho, self.config.clip.k)?;
        }
        // Contributions learned during warm-up stay as they are; whether
        // anything moves from here on is decided by `learnable_params`.
        prior.learnable_params = cfg.intro_prior;
        prior.validate()?;
        self.opt_prior = Adam::new(self.config.lr.prior, &prior_tensors(&prior));
        self.prior = prior;
        Ok(())
    }

    fn check_step(&self, sg: &StepGraph, name: &'static str, x: &Matrix) -> Result<()> {
        let v = sg.loss_value();
        if !v.is_finite() {
            return Err(self.non_finite(name, x, &format!("{name} loss {v}")));
        }
        Ok(())
    }

    /// Encoder, then decoder, then (with `intro_prior`) prior, each on fresh
    /// noise with one optimizer update.
    pub fn adversarial_step(&mut self, x: &Matrix) -> Result<PlayerLosses> {
        self.adversarial_step_observed(x, |_, _| {})
    }

    /// [`TrainState::adversarial_step`] calling `after` once each player has
    /// been updated.
    pub fn adversarial_step_observed(
        &mut self,
        x: &Matrix,
        mut after: impl FnMut(Player, &TrainState),
    ) -> Result<PlayerLosses> {
        if !self.transitioned {
            return Err(Error::InvalidArgument("adversarial step before the transition".into()));
        }
        let opts = self.config.loss_options();
        let h = self.config.hyper;
        let n = x.rows();

        let noise = StepNoise::draw(&mut self.noise_rng, &self.prior, n, &opts);
        let sg = encoder_step_graph(&self.models(), x, &noise, &h, &opts)?;
        self.check_step(&sg, "encoder", x)?;
        let grads = sg.gradients();
        debug_assert!(grads.is_zero(Player::Decoder) && grads.is_zero(Player::Prior));
        self.opt_encoder.update(&mut self.encoder.net.tensors_mut(), &grads.encoder);
        self.optimizer_updates += 1;
        let encoder = sg.encoder_terms.unwrap();
        self.last_responsibilities = sg.responsibilities.clone();
        after(Player::Encoder, self);

        let noise = StepNoise::draw(&mut self.noise_rng, &self.prior, n, &opts);
        let sg = decoder_step_graph(&self.models(), x, &noise, &h, &opts)?;
        self.check_step(&sg, "decoder", x)?;
        let grads = sg.gradients();
        debug_assert!(grads.is_zero(Player::Encoder) && grads.is_zero(Player::Prior));
        self.opt_decoder.update(&mut self.decoder.net.tensors_mut(), &grads.decoder);
        self.optimizer_updates += 1;
        let decoder = sg.decoder_terms.unwrap();
        after(Player::Decoder, self);

        let mut prior = None;
        if self.config.prior.intro_prior && self.prior.learnable_params {
            let noise = StepNoise::draw(&mut self.noise_rng, &self.prior, n, &opts);
            let sg = prior_step_graph(&self.models(), x, &noise, &h, &opts)?;
            self.check_step(&sg, "prior", x)?;
            let grads = sg.gradients();
            debug_assert!(grads.is_zero(Player::Encoder) && grads.is_zero(Player::Decoder));
            let p = &mut self.prior;
            self.opt_prior.update(&mut [&mut p.means, &mut p.raw_log_vars, &mut p.energy_logits], &grads.prior);
            self.optimizer_updates += 1;
            prior = sg.prior_terms;
            assert!(self.prior.within_envelope(), "prior log-variance left the clip envelope");
            after(Player::Prior, self);
        }
        Ok(PlayerLosses {
            encoder,
            decoder,
            prior,
        })
    }

    /// Runs one epoch, performing the transition first when warm-up is over.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.finished() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let phase = self.phase();
        if phase == Phase::Adversarial {
            self.transition_to_adversarial()?;
        }
        let updates_before = self.optimizer_updates;
        let weights_start = self.current_prior()?.weights();
        let m = weights_start.len();
        let mut max_resp = vec![0.0f64; m];
        let mut warm = Vec::new();
        let mut adv = Vec::new();
        let mut last = None;
        for _ in 0..self.config.steps_per_epoch {
            let x = self.batch();
            match phase {
                Phase::Warmup => warm.push(self.warmup_step(&x)?),
                Phase::Adversarial => {
                    adv.push(self.adversarial_step(&x)?);
                    if let Some(c) = self.last_responsibilities.take() {
                        for (a, b) in max_resp.iter_mut().zip(c) {
                            *a = a.max(b);
                        }
                    }
                }
            }
            self.step += 1;
            last = Some(x);
        }
        self.epoch += 1;
        let prior_now = self.current_prior()?;
        let resp_entropy_norm = match last {
            Some(x) if prior_now.components() > 1 => {
                let (mu, lv) = self.encoder.encode(&x)?;
                let eps = standard_normal(&mut self.noise_rng, x.rows(), self.config.latent_dim);
                let z = Matrix::from_fn(x.rows(), mu.cols(), |i, j| {
                    mu.get(i, j) + (0.5 * lv.get(i, j)).exp() * eps.get(i, j)
                });
                normalized_entropy(&batch_expected_responsibilities(&z, &prior_now.export_density())?)
            }
            _ => 0.0,
        };
        let warmup = (!warm.is_empty()).then(|| {
            let n = warm.len() as f64;
            WarmupLosses {
                rec: warm.iter().map(|w| w.rec).sum::<f64>() / n,
                kl: warm.iter().map(|w| w.kl).sum::<f64>() / n,
                loss: warm.iter().map(|w| w.loss).sum::<f64>() / n,
            }
        });
        let losses = (!adv.is_empty()).then(|| PlayerLosses::mean(&adv));
        if phase == Phase::Adversarial && self.prior.clipping_enabled && !self.prior.within_envelope() {
            return Err(Error::InvalidArgument("prior log-variance left the clip envelope".into()));
        }
        Ok(EpochRecord {
            epoch: self.epoch,
            phase,
            warmup,
            losses,
            resp_entropy_norm,
            max_responsibility: if phase == Phase::Adversarial { max_resp } else { Vec::new() },
            weights_start,
            weights_end: prior_now.weights(),
            optimizer_updates: self.optimizer_updates - updates_before,
        })
    }
}

fn prior_tensors(p: &MixturePrior) -> [&Matrix; 3] {
    [&p.means, &p.raw_log_vars, &p.energy_logits]
}

/// Receives each finished epoch.
pub trait TrainObserver {
    fn on_epoch(&mut self, state: &TrainState, record: &EpochRecord) -> Result<()>;
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &TrainState, _: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&TrainState, &EpochRecord) -> Result<()>> TrainObserver for F {
    fn on_epoch(&mut self, state: &TrainState, record: &EpochRecord) -> Result<()> {
        self(state, record)
    }
}

/// Trains `state` to the end of its schedule.
pub fn continue_run(state: &mut TrainState, observer: &mut dyn TrainObserver) -> Result<Vec<EpochRecord>> {
    let mut records = Vec::new();
    while !state.finished() {
        let r = state.run_epoch()?;
        observer.on_epoch(state, &r)?;
        records.push(r);
    }
    Ok(records)
}

/// Warm-up, transition and adversarial epochs from a fresh state.
pub fn train_run(config: TrainConfig, observer: &mut dyn TrainObserver) -> Result<(TrainState, Vec<EpochRecord>)> {
    let mut state = TrainState::new(config)?;
    let records = continue_run(&mut state, observer)?;
    Ok((state, records))
}

/// The synthetic real/fake sets of the encoder-overfit probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeSetup {
    /// Real and fake sets are the same samples.
    Equal,
    /// One real sample; every sample is fake, including that one.
    SingleReal,
    /// Every sample is real; one of them is also the only fake.
    SingleFake,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSets {
    pub real: Matrix,
    pub fake: Matrix,
}

impl ProbeSets {
    /// Builds the sets from one sample per mode; sample 0 is the single one.
    pub fn build(setup: ProbeSetup, samples: &Matrix) -> Self {
        let first = samples.select_rows(&[0]);
        match setup {
            ProbeSetup::Equal => ProbeSets {
                real: samples.clone(),
                fake: samples.clone(),
            },
            ProbeSetup::SingleReal => ProbeSets {
                real: first,
                fake: samples.clone(),
            },
            ProbeSetup::SingleFake => ProbeSets {
                real: samples.clone(),
                fake: first,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub beta_neg: f64,
    pub steps: usize,
    pub lr: f64,
    pub t: usize,
    pub record_every: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            beta_neg: 1.0,
            steps: 2000,
            lr: 2e-4,
            t: 100,
            record_every: 50,
            seed: 0,
        }
    }
}

/// Per-sample terms at one recorded step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbePoint {
    pub rec: f64,
    pub kl: f64,
}

impl ProbePoint {
    pub fn neg_elbo(&self) -> f64 {
        self.rec + self.kl
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCurves {
    pub steps: Vec<usize>,
    /// `real[i][k]`: real sample `i` at `steps[k]`.
    pub real: Vec<Vec<ProbePoint>>,
    pub fake: Vec<Vec<ProbePoint>>,
}

impl ProbeCurves {
    /// Start and end of the single-real setup's two trajectories: the mean KL
    /// of the fake-only samples and the negative ELBO of the enclosed sample
    /// (fake sample 0, which is also the real one).
    pub fn single_real_direction(&self) -> Option<ProbeDirection> {
        if self.fake.len() < 2 || self.steps.len() < 2 {
            return None;
        }
        let last = self.steps.len() - 1;
        let fake_kl = |k: usize| {
            self.fake[1..].iter().map(|c| c[k].kl).sum::<f64>() / (self.fake.len() - 1) as f64
        };
        Some(ProbeDirection {
            fake_kl: (fake_kl(0), fake_kl(last)),
            enclosed_neg_elbo: (self.fake[0][0].neg_elbo(), self.fake[0][last].neg_elbo()),
        })
    }
}

/// `(start, end)` pairs of the single-real directional check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeDirection {
    pub fake_kl: (f64, f64),
    pub enclosed_neg_elbo: (f64, f64),
}

impl ProbeDirection {
    pub fn passed(&self) -> bool {
        self.fake_kl.1 > self.fake_kl.0 && self.enclosed_neg_elbo.1 < self.enclosed_neg_elbo.0
    }
}

/// One held-out sample per mode: the draw nearest to each mode point among
/// `pool` fresh samples.
pub fn probe_samples(dataset: Dataset, pool: usize, seed: u64) -> Matrix {
    let mut rng = dataset_rng(dataset, seed);
    let draws = dataset.sample(pool.max(1), &mut rng);
    let modes = dataset.mode_points();
    let rows: Vec<usize> = (0..modes.rows())
        .map(|m| {
            let dist = |r: usize| {
                (0..2).map(|j| (draws.get(r, j) - modes.get(m, j)).powi(2)).sum::<f64>()
            };
            (0..draws.rows()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap()
        })
        .collect();
    draws.select_rows(&rows)
}

/// Minimizes `L_E` over the encoder alone with batch size 1, alternating
/// through the real and fake sets, and records every sample's terms under
/// fixed evaluation noise.
pub fn probe_encoder_overfit(
    encoder: &Encoder,
    decoder: &Decoder,
    prior: &MixturePrior,
    sets: &ProbeSets,
    hyper: &GameHyper,
    cfg: &ProbeConfig,
) -> Result<ProbeCurves> {
    if sets.real.rows() == 0 || sets.fake.rows() == 0 {
        return Err(Error::Empty("probe set"));
    }
    if cfg.record_every == 0 {
        return Err(Error::InvalidArgument("record_every must be >= 1".into()));
    }
    let opts = LossOptions {
        t: cfg.t,
        kl_mode: KlMode::Mc,
        recon_as_fake: false,
    };
    let h = GameHyper {
        beta_neg: cfg.beta_neg,
        ..*hyper
    };
    let d = encoder.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = sets.real.rows().max(sets.fake.rows());
    // Sample i of either set is scored with the same noise.
    let eval_noise = PosteriorNoise::draw(&mut rng, rows, d, &opts);
    let mut enc = encoder.clone();
    let mut opt = Adam::new(cfg.lr, &enc.net.tensors());
    let mut curves = ProbeCurves {
        steps: Vec::new(),
        real: vec![Vec::new(); sets.real.rows()],
        fake: vec![Vec::new(); sets.fake.rows()],
    };
    let record = |enc: &Encoder, step: usize, curves: &mut ProbeCurves| -> Result<()> {
        let models = Models {
            encoder: enc,
            decoder,
            prior,
        };
        curves.steps.push(step);
        for (set, out) in [(&sets.real, &mut curves.real), (&sets.fake, &mut curves.fake)] {
            let noise = eval_noise.head(set.rows(), &opts);
            let (rec, kl) = batch_elbo_terms(&models, set, &noise, &opts)?;
            for (i, o) in out.iter_mut().enumerate() {
                o.push(ProbePoint { rec: rec[i], kl: kl[i] });
            }
        }
        Ok(())
    };
    record(&enc, 0, &mut curves)?;
    for step in 0..cfg.steps {
        let xr = sets.real.select_rows(&[step % sets.real.rows()]);
        let xf = sets.fake.select_rows(&[step % sets.fake.rows()]);
        let rn = PosteriorNoise::draw(&mut rng, 1, d, &opts);
        let fnz = PosteriorNoise::draw(&mut rng, 1, d, &opts);
        let models = Models {
            encoder: &enc,
            decoder,
            prior,
        };
        let sg = encoder_probe_graph(&models, &xr, &xf, &rn, &fnz, &h, &opts)?;
        let grads = sg.gradients();
        opt.update(&mut enc.net.tensors_mut(), &grads.encoder);
        if (step + 1) % cfg.record_every == 0 || step + 1 == cfg.steps {
            record(&enc, step + 1, &mut curves)?;
        }
    }
    Ok(curves)
}
