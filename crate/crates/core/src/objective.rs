//! The β-ELBO and the encoder, decoder and prior losses with their
//! stop-gradient contracts.
//!
//! Each `*_step_graph` builds one player's loss on a fresh tape. All three
//! players' parameters are bound as leaves on every tape; the two players that
//! are not being updated are read through detached copies, so their gradients
//! are exactly zero by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::distributions::{
    kl_closed, kl_mc, kl_standard_closed_graph, log_prob_mog_graph, sample_reparam,
    sample_reparam_graph, standard_normal, DiagGaussian, MixtureDensity, MixtureVars,
    ResponsibilityVector,
};
use crate::error::{Error, Result};
use crate::nets::{Decoder, Encoder, MlpVars};
use crate::prior::{mixture_weights_graph, MixturePrior, PriorVars, VampPseudoInputs};
use crate::tensor::Matrix;

/// Weights and constants of the introspective game.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameHyper {
    pub alpha: f64,
    pub gamma: f64,
    pub gamma_rho: f64,
    pub beta_rec: f64,
    pub beta_kl: f64,
    pub beta_neg: f64,
    pub r_entropy: f64,
    /// Bound on the magnitude of the exponent in the exp-ELBO term.
    pub exp_clamp: f64,
}

impl Default for GameHyper {
    fn default() -> Self {
        GameHyper {
            alpha: 2.0,
            gamma: 1.0,
            gamma_rho: 1e-8,
            beta_rec: 1.0,
            beta_kl: 1.0,
            beta_neg: 1.0,
            r_entropy: 0.0,
            exp_clamp: 50.0,
        }
    }
}

impl GameHyper {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("gamma", self.gamma),
            ("gamma_rho", self.gamma_rho),
            ("beta_rec", self.beta_rec),
            ("beta_kl", self.beta_kl),
            ("beta_neg", self.beta_neg),
            ("r_entropy", self.r_entropy),
        ];
        if !(self.alpha >= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.exp_clamp > 0.0) {
            return Err(Error::InvalidArgument("exp_clamp must be > 0".into()));
        }
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// Closed form against a unimodal prior.
    Closed,
    /// Monte-Carlo with `T` draws per posterior.
    Mc,
}

/// Settings shared by all loss builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub t: usize,
    pub kl_mode: KlMode,
    /// Also repel reconstructions of real data, as the original two-player
    /// method does. Off by default.
    pub recon_as_fake: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            t: 100,
            kl_mode: KlMode::Mc,
            recon_as_fake: false,
        }
    }
}

/// Reconstruction and KL parts of a (negative) ELBO, in nats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub rec: f64,
    pub kl: f64,
}

impl ElboTerms {
    /// An MC KL estimate this negative hints at a problem.
    pub fn kl_suspicious(&self) -> bool {
        self.kl < -0.1
    }
}

/// Single-sample ELBO terms: `rec = ½‖x − D(z)‖²` at one reparameterized `z`,
/// `kl` by Monte-Carlo over the rows of `kl_noise` or in closed form.
pub fn elbo_terms(
    x: &[f64],
    posterior: &DiagGaussian,
    prior: &MixtureDensity,
    decode: impl Fn(&[f64]) -> Result<Vec<f64>>,
    rec_noise: &[f64],
    kl_noise: &Matrix,
    kl_mode: KlMode,
) -> Result<ElboTerms> {
    let z = sample_reparam(posterior, rec_noise)?;
    let xr = decode(&z)?;
    crate::error::check_dim(x.len(), xr.len())?;
    let rec = 0.5 * x.iter().zip(&xr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let kl = match kl_mode {
        KlMode::Mc => kl_mc(posterior, prior, kl_noise)?,
        KlMode::Closed => {
            if prior.components() != 1 {
                return Err(Error::InvalidArgument(
                    "closed-form KL needs a unimodal prior".into(),
                ));
            }
            kl_closed(posterior, &prior.component(0))?
        }
    };
    Ok(ElboTerms { rec, kl })
}

/// `(1/α)·exp(clamp(−α(β_rec·rec + β_neg·kl), ±exp_clamp))`.
pub fn exp_elbo_term(fake: &ElboTerms, h: &GameHyper) -> f64 {
    let arg = -h.alpha * (h.beta_rec * fake.rec + h.beta_neg * fake.kl);
    arg.clamp(-h.exp_clamp, h.exp_clamp).exp() / h.alpha
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EncoderTerms {
    pub real_rec: f64,
    pub real_kl: f64,
    pub fake_rec: f64,
    pub fake_kl: f64,
    pub exp_elbo_term: f64,
    /// `H(C)` in nats.
    pub entropy: f64,
    /// `r_entropy · H(C)`.
    pub entropy_reg: f64,
    pub loss: f64,
}

impl EncoderTerms {
    pub fn recompose(&self, h: &GameHyper) -> f64 {
        h.beta_rec * self.real_rec + h.beta_kl * self.real_kl + self.exp_elbo_term - self.entropy_reg
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecoderTerms {
    pub real_rec: f64,
    /// Reconstruction of fakes against their own stop-gradient copy.
    pub fake_rec: f64,
    pub fake_kl: f64,
    pub loss: f64,
}

impl DecoderTerms {
    pub fn recompose(&self, h: &GameHyper) -> f64 {
        h.beta_rec * self.real_rec
            + h.gamma * (h.gamma_rho * h.beta_rec * self.fake_rec + h.beta_kl * self.fake_kl)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PriorTerms {
    pub real_kl: f64,
    /// Fake KL with the prior as source only.
    pub fake_kl: f64,
    pub loss: f64,
}

impl PriorTerms {
    pub fn recompose(&self, h: &GameHyper) -> f64 {
        h.beta_kl * self.real_kl + h.gamma * h.beta_kl * self.fake_kl
    }
}

/// `L_E` for single-sample terms; `c` are expected responsibilities on reals.
pub fn loss_encoder(
    real: &ElboTerms,
    fake: &ElboTerms,
    c: &ResponsibilityVector,
    h: &GameHyper,
) -> EncoderTerms {
    let entropy = crate::distributions::entropy(c);
    let mut t = EncoderTerms {
        real_rec: real.rec,
        real_kl: real.kl,
        fake_rec: fake.rec,
        fake_kl: fake.kl,
        exp_elbo_term: exp_elbo_term(fake, h),
        entropy,
        entropy_reg: h.r_entropy * entropy,
        loss: 0.0,
    };
    t.loss = t.recompose(h);
    t
}

/// `L_D = β_rec·rec + γ(γ_ρ·β_rec·rec_sg + β_KL·kl_fake)`.
pub fn loss_decoder(real: &ElboTerms, fake_rec_to_own_sg_target: f64, fake_kl: f64, h: &GameHyper) -> DecoderTerms {
    let mut t = DecoderTerms {
        real_rec: real.rec,
        fake_rec: fake_rec_to_own_sg_target,
        fake_kl,
        loss: 0.0,
    };
    t.loss = t.recompose(h);
    t
}

/// `L_P = β_KL·kl_real + γ·β_KL·kl_fake`.
pub fn loss_prior(real_kl: f64, fake_kl_source_only: f64, h: &GameHyper) -> PriorTerms {
    let mut t = PriorTerms {
        real_kl,
        fake_kl: fake_kl_source_only,
        loss: 0.0,
    };
    t.loss = t.recompose(h);
    t
}

/// Per-step losses of all players that were updated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlayerLosses {
    pub encoder: EncoderTerms,
    pub decoder: DecoderTerms,
    /// `None` when the prior step was skipped.
    pub prior: Option<PriorTerms>,
}

impl PlayerLosses {
    pub fn l_e(&self) -> f64 {
        self.encoder.loss
    }

    pub fn l_d(&self) -> f64 {
        self.decoder.loss
    }

    pub fn l_p(&self) -> Option<f64> {
        self.prior.map(|p| p.loss)
    }

    /// Named sub-terms in a fixed order; skipped prior terms are NaN.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let p = self.prior.unwrap_or(PriorTerms {
            real_kl: f64::NAN,
            fake_kl: f64::NAN,
            loss: f64::NAN,
        });
        vec![
            ("l_e", self.encoder.loss),
            ("l_d", self.decoder.loss),
            ("l_p", p.loss),
            ("enc_real_rec", self.encoder.real_rec),
            ("enc_real_kl", self.encoder.real_kl),
            ("enc_fake_rec", self.encoder.fake_rec),
            ("enc_fake_kl", self.encoder.fake_kl),
            ("enc_exp_elbo", self.encoder.exp_elbo_term),
            ("enc_entropy", self.encoder.entropy),
            ("enc_entropy_reg", self.encoder.entropy_reg),
            ("dec_real_rec", self.decoder.real_rec),
            ("dec_fake_rec", self.decoder.fake_rec),
            ("dec_fake_kl", self.decoder.fake_kl),
            ("prior_real_kl", p.real_kl),
            ("prior_fake_kl", p.fake_kl),
        ]
    }

    /// Elementwise mean over steps.
    pub fn mean(items: &[PlayerLosses]) -> PlayerLosses {
        let n = items.len().max(1) as f64;
        let mut out = PlayerLosses::default();
        let mut prior = PriorTerms::default();
        let mut any_prior = false;
        for l in items {
            let (e, d) = (&l.encoder, &l.decoder);
            out.encoder.real_rec += e.real_rec / n;
            out.encoder.real_kl += e.real_kl / n;
            out.encoder.fake_rec += e.fake_rec / n;
            out.encoder.fake_kl += e.fake_kl / n;
            out.encoder.exp_elbo_term += e.exp_elbo_term / n;
            out.encoder.entropy += e.entropy / n;
            out.encoder.entropy_reg += e.entropy_reg / n;
            out.encoder.loss += e.loss / n;
            out.decoder.real_rec += d.real_rec / n;
            out.decoder.fake_rec += d.fake_rec / n;
            out.decoder.fake_kl += d.fake_kl / n;
            out.decoder.loss += d.loss / n;
            if let Some(p) = l.prior {
                any_prior = true;
                prior.real_kl += p.real_kl / n;
                prior.fake_kl += p.fake_kl / n;
                prior.loss += p.loss / n;
            }
        }
        out.prior = any_prior.then_some(prior);
        out
    }
}

/// The three players.
#[derive(Clone, Copy, Debug)]
pub struct Models<'a> {
    pub encoder: &'a Encoder,
    pub decoder: &'a Decoder,
    pub prior: &'a MixturePrior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Player {
    Encoder,
    Decoder,
    Prior,
}

/// Noise for evaluating one batch of posteriors: one reconstruction draw and
/// `T` KL draws per row (none in closed mode).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorNoise {
    pub rec: Matrix,
    pub kl: Matrix,
}

impl PosteriorNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize, opts: &LossOptions) -> Self {
        let rec = standard_normal(rng, n, dim);
        let kl = match opts.kl_mode {
            KlMode::Mc => standard_normal(rng, n * opts.t, dim),
            KlMode::Closed => Matrix::zeros(0, dim),
        };
        PosteriorNoise { rec, kl }
    }

    pub fn rows(&self) -> usize {
        self.rec.rows()
    }

    /// Noise for the first `n` rows only.
    pub fn head(&self, n: usize, opts: &LossOptions) -> Self {
        let t = if self.kl.rows() == 0 { 0 } else { opts.t };
        PosteriorNoise {
            rec: self.rec.select_rows(&(0..n).collect::<Vec<_>>()),
            kl: self.kl.select_rows(&(0..n * t).collect::<Vec<_>>()),
        }
    }
}

/// All randomness consumed by one player update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub real: PosteriorNoise,
    /// Prior component of each fake latent.
    pub fake_ids: Vec<usize>,
    pub fake_latent: Matrix,
    /// Posterior noise for the fake batch (twice as many rows when
    /// reconstructions are also treated as fakes).
    pub fake: PosteriorNoise,
}

impl StepNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, prior: &MixturePrior, n: usize, opts: &LossOptions) -> Self {
        let d = prior.dim();
        let real = PosteriorNoise::draw(rng, n, d, opts);
        let fake_ids = prior.draw_components(n, rng);
        let fake_latent = standard_normal(rng, n, d);
        let n_fake = if opts.recon_as_fake { 2 * n } else { n };
        let fake = PosteriorNoise::draw(rng, n_fake, d, opts);
        StepNoise {
            real,
            fake_ids,
            fake_latent,
            fake,
        }
    }
}

/// Per-row posterior quantities on a tape.
struct PosteriorEval {
    rec: Option<Var>,
    kl: Option<Var>,
    /// `(n·T) × M` joint scores of the KL draws (MC mode only).
    scores: Option<Var>,
    /// The reconstruction latent.
    z: Var,
}

struct EvalSpec<'a> {
    rec: bool,
    kl: bool,
    noise: &'a PosteriorNoise,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_posterior(
    g: &mut Graph,
    models: &Models,
    ev: &MlpVars,
    dv: &MlpVars,
    target: &MixtureVars,
    x_in: Var,
    x_target: Var,
    spec: EvalSpec,
    opts: &LossOptions,
) -> PosteriorEval {
    let (mu, lv) = models.encoder.encode_graph(g, ev, x_in);
    let z = sample_reparam_graph(g, mu, lv, &spec.noise.rec, 1);
    let rec = spec.rec.then(|| {
        let xr = models.decoder.decode_graph(g, dv, z);
        let diff = g.sub(xr, x_target);
        let sq = g.square(diff);
        let s = g.sum_cols(sq);
        g.scale(s, 0.5)
    });
    let mut scores = None;
    let kl = spec.kl.then(|| match opts.kl_mode {
        KlMode::Closed => kl_standard_closed_graph(g, mu, lv),
        KlMode::Mc => {
            let t = opts.t;
            let zt = sample_reparam_graph(g, mu, lv, &spec.noise.kl, t);
            let mu_t = g.repeat_rows(mu, t);
            let lv_t = g.repeat_rows(lv, t);
            let log_q = g.diag_log_prob(zt, mu_t, lv_t);
            let s = g.component_scores(zt, target.means, target.log_vars, target.log_weights);
            scores = Some(s);
            let log_p = g.logsumexp_rows(s);
            let diff = g.sub(log_q, log_p);
            g.mean_groups(diff, t)
        }
    });
    PosteriorEval { rec, kl, scores, z }
}

fn mean_value(g: &mut Graph, v: Var) -> (Var, f64) {
    let m = g.mean_all(v);
    (m, g.scalar(m))
}

/// A player's loss on a tape together with handles to every parameter leaf.
pub struct StepGraph {
    pub graph: Graph,
    pub loss: Var,
    pub encoder: MlpVars,
    pub decoder: MlpVars,
    pub prior: PriorVars,
    pub player: Player,
    pub encoder_terms: Option<EncoderTerms>,
    pub decoder_terms: Option<DecoderTerms>,
    pub prior_terms: Option<PriorTerms>,
    /// Batch-expected responsibilities of the real KL draws (encoder step,
    /// Monte-Carlo mode only).
    pub responsibilities: Option<Vec<f64>>,
}

/// Gradients for every parameter block, in [`crate::nets::Mlp::tensors`]
/// order for the networks and `(means, raw_log_vars, energy_logits)` for the
/// prior.
#[derive(Clone, Debug)]
pub struct PlayerGradients {
    pub encoder: Vec<Matrix>,
    pub decoder: Vec<Matrix>,
    pub prior: Vec<Matrix>,
}

impl PlayerGradients {
    pub fn of(&self, p: Player) -> &[Matrix] {
        match p {
            Player::Encoder => &self.encoder,
            Player::Decoder => &self.decoder,
            Player::Prior => &self.prior,
        }
    }

    /// True when every entry of the block is exactly zero.
    pub fn is_zero(&self, p: Player) -> bool {
        self.of(p).iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0))
    }
}

impl StepGraph {
    pub fn loss_value(&self) -> f64 {
        self.graph.scalar(self.loss)
    }

    pub fn gradients(&self) -> PlayerGradients {
        let grads = self.graph.backward(self.loss);
        PlayerGradients {
            encoder: self.encoder.leaves.iter().map(|&v| grads.wrt(v)).collect(),
            decoder: self.decoder.leaves.iter().map(|&v| grads.wrt(v)).collect(),
            prior: [self.prior.means, self.prior.raw_log_vars, self.prior.energy_logits]
                .iter()
                .map(|&v| grads.wrt(v))
                .collect(),
        }
    }
}

fn check_kl_mode(models: &Models, opts: &LossOptions) -> Result<()> {
    if opts.kl_mode == KlMode::Closed {
        let p = models.prior;
        let standard = p.components() == 1
            && p.means.as_slice().iter().all(|&v| v == 0.0)
            && p.log_vars().as_slice().iter().all(|&v| v == 0.0);
        if !standard {
            return Err(Error::InvalidArgument(
                "closed-form KL is only available for the standard normal prior".into(),
            ));
        }
    }
    if opts.kl_mode == KlMode::Mc && opts.t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    Ok(())
}

fn check_batch(models: &Models, x: &Matrix, noise: &StepNoise, opts: &LossOptions) -> Result<()> {
    crate::error::check_dim(models.encoder.data_dim(), x.cols())?;
    let n = x.rows();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let n_fake = if opts.recon_as_fake { 2 * n } else { n };
    crate::error::check_dim(n, noise.real.rows())?;
    crate::error::check_dim(n, noise.fake_ids.len())?;
    crate::error::check_dim(n_fake, noise.fake.rows())?;
    check_kl_mode(models, opts)
}

struct Bound {
    g: Graph,
    ev: MlpVars,
    dv: MlpVars,
    pv: PriorVars,
    x: Var,
}

fn bind_all(models: &Models, x: &Matrix, live: Player) -> Bound {
    let mut g = Graph::new();
    let ev = MlpVars::bind(&mut g, &models.encoder.net, live == Player::Encoder);
    let dv = MlpVars::bind(&mut g, &models.decoder.net, live == Player::Decoder);
    let pv = PriorVars::bind(&mut g, models.prior, live == Player::Prior);
    let x = g.constant(x.clone());
    Bound { g, ev, dv, pv, x }
}

/// `L_E`: encoder live; decoder and prior frozen; fakes are constants.
pub fn encoder_step_graph(
    models: &Models,
    x: &Matrix,
    noise: &StepNoise,
    h: &GameHyper,
    opts: &LossOptions,
) -> Result<StepGraph> {
    check_batch(models, x, noise, opts)?;
    encoder_graph(models, x, Fakes::Generated(noise), &noise.real, &noise.fake, h, opts)
}

/// `L_E` with the fake batch given directly instead of generated. Used by
/// the encoder-overfit probe.
#[allow(clippy::too_many_arguments)]
pub fn encoder_probe_graph(
    models: &Models,
    x_real: &Matrix,
    x_fake: &Matrix,
    real_noise: &PosteriorNoise,
    fake_noise: &PosteriorNoise,
    h: &GameHyper,
    opts: &LossOptions,
) -> Result<StepGraph> {
    crate::error::check_dim(models.encoder.data_dim(), x_real.cols())?;
    crate::error::check_dim(models.encoder.data_dim(), x_fake.cols())?;
    crate::error::check_dim(x_real.rows(), real_noise.rows())?;
    crate::error::check_dim(x_fake.rows(), fake_noise.rows())?;
    check_kl_mode(models, opts)?;
    let opts = LossOptions { recon_as_fake: false, ..*opts };
    encoder_graph(models, x_real, Fakes::Given(x_fake), real_noise, fake_noise, h, &opts)
}

enum Fakes<'a> {
    Generated(&'a StepNoise),
    Given(&'a Matrix),
}

fn encoder_graph(
    models: &Models,
    x: &Matrix,
    fakes: Fakes,
    real_noise: &PosteriorNoise,
    fake_noise: &PosteriorNoise,
    h: &GameHyper,
    opts: &LossOptions,
) -> Result<StepGraph> {
    let Bound { mut g, ev, dv, pv, x } = bind_all(models, x, Player::Encoder);
    let g = &mut g;
    let target = pv.density;

    let real = evaluate_posterior(
        g,
        models,
        &ev,
        &dv,
        &target,
        x,
        x,
        EvalSpec { rec: true, kl: true, noise: real_noise },
        opts,
    );

    let xf = match fakes {
        Fakes::Generated(noise) => {
            let zl = pv.sample(g, &noise.fake_ids, &noise.fake_latent);
            let xf = models.decoder.decode_graph(g, &dv, zl);
            let mut xf = g.detach(xf);
            if opts.recon_as_fake {
                let xr = models.decoder.decode_graph(g, &dv, real.z);
                let xr = g.detach(xr);
                xf = g.concat_rows(xf, xr);
            }
            xf
        }
        Fakes::Given(m) => g.constant(m.clone()),
    };
    let fake = evaluate_posterior(
        g,
        models,
        &ev,
        &dv,
        &target,
        xf,
        xf,
        EvalSpec { rec: true, kl: true, noise: fake_noise },
        opts,
    );

    let (rec_r, kl_r) = (real.rec.unwrap(), real.kl.unwrap());
    let (rec_f, kl_f) = (fake.rec.unwrap(), fake.kl.unwrap());
    let a = g.scale(rec_f, h.beta_rec);
    let b = g.scale(kl_f, h.beta_neg);
    let s = g.add(a, b);
    let s = g.scale(s, -h.alpha);
    let s = g.clamp(s, -h.exp_clamp, h.exp_clamp);
    let e = g.exp(s);
    let e = g.scale(e, 1.0 / h.alpha);
    let (exp_mean, exp_v) = mean_value(g, e);

    let (rec_m, rec_v) = mean_value(g, rec_r);
    let (kl_m, kl_v) = mean_value(g, kl_r);
    let (_, fake_rec_v) = mean_value(g, rec_f);
    let (_, fake_kl_v) = mean_value(g, kl_f);

    let l = g.scale(rec_m, h.beta_rec);
    let k = g.scale(kl_m, h.beta_kl);
    let mut loss = g.add(l, k);
    loss = g.add(loss, exp_mean);
    let mut entropy_v = 0.0;
    let mut responsibilities = None;
    if let Some(scores) = real.scores {
        let p = g.softmax_rows(scores);
        let c = g.mean_rows(p);
        responsibilities = Some(g.value(c).as_slice().to_vec());
        let hc = g.entropy(c);
        entropy_v = g.scalar(hc);
        let reg = g.scale(hc, -h.r_entropy);
        loss = g.add(loss, reg);
    }
    let terms = EncoderTerms {
        real_rec: rec_v,
        real_kl: kl_v,
        fake_rec: fake_rec_v,
        fake_kl: fake_kl_v,
        exp_elbo_term: exp_v,
        entropy: entropy_v,
        entropy_reg: h.r_entropy * entropy_v,
        loss: g.scalar(loss),
    };
    Ok(StepGraph {
        graph: std::mem::take(g),
        loss,
        encoder: ev,
        decoder: dv,
        prior: pv,
        player: Player::Encoder,
        encoder_terms: Some(terms),
        decoder_terms: None,
        prior_terms: None,
        responsibilities,
    })
}

/// `L_D`: decoder live; encoder and prior frozen.
pub fn decoder_step_graph(
    models: &Models,
    x: &Matrix,
    noise: &StepNoise,
    h: &GameHyper,
    opts: &LossOptions,
) -> Result<StepGraph> {
    check_batch(models, x, noise, opts)?;
    let Bound { mut g, ev, dv, pv, x } = bind_all(models, x, Player::Decoder);
    let g = &mut g;
    let target = pv.density;

    let real = evaluate_posterior(
        g,
        models,
        &ev,
        &dv,
        &target,
        x,
        x,
        EvalSpec { rec: true, kl: false, noise: &noise.real },
        opts,
    );
    let zl = pv.sample(g, &noise.fake_ids, &noise.fake_latent);
    let mut xf = models.decoder.decode_graph(g, &dv, zl);
    if opts.recon_as_fake {
        let xr = models.decoder.decode_graph(g, &dv, real.z);
        xf = g.concat_rows(xf, xr);
    }
    let sg_target = g.detach(xf);
    let fake = evaluate_posterior(
        g,
        models,
        &ev,
        &dv,
        &target,
        xf,
        sg_target,
        EvalSpec { rec: true, kl: true, noise: &noise.fake },
        opts,
    );

    let (rec_m, rec_v) = mean_value(g, real.rec.unwrap());
    let (frec_m, frec_v) = mean_value(g, fake.rec.unwrap());
    let (fkl_m, fkl_v) = mean_value(g, fake.kl.unwrap());
    let a = g.scale(rec_m, h.beta_rec);
    let b = g.scale(frec_m, h.gamma * h.gamma_rho * h.beta_rec);
    let c = g.scale(fkl_m, h.gamma * h.beta_kl);
    let loss = g.add(a, b);
    let loss = g.add(loss, c);
    let terms = DecoderTerms {
        real_rec: rec_v,
        fake_rec: frec_v,
        fake_kl: fkl_v,
        loss: g.scalar(loss),
    };
    Ok(StepGraph {
        graph: std::mem::take(g),
        loss,
        encoder: ev,
        decoder: dv,
        prior: pv,
        player: Player::Decoder,
        encoder_terms: None,
        decoder_terms: Some(terms),
        prior_terms: None,
        responsibilities: None,
    })
}

/// `L_P`: prior live; encoder and decoder frozen. The real KL uses the prior
/// as target; the fake KL reaches the prior only through the sampled latent.
pub fn prior_step_graph(
    models: &Models,
    x: &Matrix,
    noise: &StepNoise,
    h: &GameHyper,
    opts: &LossOptions,
) -> Result<StepGraph> {
    check_batch(models, x, noise, opts)?;
    let Bound { mut g, ev, dv, pv, x } = bind_all(models, x, Player::Prior);
    let g = &mut g;
    let live_target = pv.density;
    let frozen_target = live_target.detached(g);

    let real = evaluate_posterior(
        g,
        models,
        &ev,
        &dv,
        &live_target,
        x,
        x,
        EvalSpec { rec: false, kl: true, noise: &noise.real },
        opts,
    );
    let zl = pv.sample(g, &noise.fake_ids, &noise.fake_latent);
    let xf = models.decoder.decode_graph(g, &dv, zl);
    let fake_noise = noise.fake.head(noise.fake_ids.len(), opts);
    let fake = evaluate_posterior(
        g,
        models,
        &ev,
        &dv,
        &frozen_target,
        xf,
        xf,
        EvalSpec { rec: false, kl: true, noise: &fake_noise },
        opts,
    );
    let (rkl_m, rkl_v) = mean_value(g, real.kl.unwrap());
    let (fkl_m, fkl_v) = mean_value(g, fake.kl.unwrap());
    let a = g.scale(rkl_m, h.beta_kl);
    let b = g.scale(fkl_m, h.gamma * h.beta_kl);
    let loss = g.add(a, b);
    let terms = PriorTerms {
        real_kl: rkl_v,
        fake_kl: fkl_v,
        loss: g.scalar(loss),
    };
    Ok(StepGraph {
        graph: std::mem::take(g),
        loss,
        encoder: ev,
        decoder: dv,
        prior: pv,
        player: Player::Prior,
        encoder_terms: None,
        decoder_terms: None,
        prior_terms: Some(terms),
        responsibilities: None,
    })
}

/// Leaves of a VampPrior on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VampVars {
    pub pseudo_inputs: Var,
    pub energy_logits: Var,
}

/// The joint β-ELBO warm-up loss.
pub struct WarmupGraph {
    pub graph: Graph,
    pub loss: Var,
    pub encoder: MlpVars,
    pub decoder: MlpVars,
    pub prior: PriorVars,
    pub vamp: Option<VampVars>,
    pub rec: f64,
    pub kl: f64,
}

/// `β_rec·rec + β_KL·kl` over the batch, with encoder, decoder and prior all
/// trainable. With `vamp` the prior is the mixture of encoder posteriors at
/// the pseudo-inputs; otherwise `models.prior` is used as bound by its flags.
pub fn warmup_graph(
    models: &Models,
    vamp: Option<(&VampPseudoInputs, bool)>,
    x: &Matrix,
    noise: &PosteriorNoise,
    h: &GameHyper,
    opts: &LossOptions,
) -> Result<WarmupGraph> {
    crate::error::check_dim(models.encoder.data_dim(), x.cols())?;
    crate::error::check_dim(x.rows(), noise.rows())?;
    if vamp.is_none() {
        check_kl_mode(models, opts)?;
    } else if opts.kl_mode == KlMode::Closed {
        return Err(Error::InvalidArgument("a VampPrior needs Monte-Carlo KL".into()));
    }
    let mut g = Graph::new();
    let ev = MlpVars::bind(&mut g, &models.encoder.net, true);
    let dv = MlpVars::bind(&mut g, &models.decoder.net, true);
    let pv = PriorVars::bind(&mut g, models.prior, vamp.is_none());
    let xv = g.constant(x.clone());
    let (target, vamp_vars) = match vamp {
        Some((v, learn_weights)) => {
            let pseudo = g.param(&v.pseudo_inputs);
            let logits = g.param(&v.energy_logits);
            let active_logits = if learn_weights { logits } else { g.detach(logits) };
            let (mu, lv) = models.encoder.encode_graph(&mut g, &ev, pseudo);
            let lw = mixture_weights_graph(&mut g, active_logits);
            (
                MixtureVars {
                    means: mu,
                    log_vars: lv,
                    log_weights: lw,
                },
                Some(VampVars {
                    pseudo_inputs: pseudo,
                    energy_logits: logits,
                }),
            )
        }
        None => (pv.density, None),
    };
    let post = evaluate_posterior(
        &mut g,
        models,
        &ev,
        &dv,
        &target,
        xv,
        xv,
        EvalSpec { rec: true, kl: true, noise },
        opts,
    );
    let (rec_m, rec_v) = mean_value(&mut g, post.rec.unwrap());
    let (kl_m, kl_v) = mean_value(&mut g, post.kl.unwrap());
    let a = g.scale(rec_m, h.beta_rec);
    let b = g.scale(kl_m, h.beta_kl);
    let loss = g.add(a, b);
    Ok(WarmupGraph {
        graph: g,
        loss,
        encoder: ev,
        decoder: dv,
        prior: pv,
        vamp: vamp_vars,
        rec: rec_v,
        kl: kl_v,
    })
}

/// Mean per-row `(rec, kl)` of a batch under the given models, without a
/// gradient. Used for evaluation and probes.
pub fn batch_elbo_terms(models: &Models, x: &Matrix, noise: &PosteriorNoise, opts: &LossOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    check_kl_mode(models, opts)?;
    crate::error::check_dim(x.rows(), noise.rows())?;
    let mut g = Graph::new();
    let ev = MlpVars::bind(&mut g, &models.encoder.net, false);
    let dv = MlpVars::bind(&mut g, &models.decoder.net, false);
    let target = MixtureVars::constant(&mut g, &models.prior.export_density());
    let xv = g.constant(x.clone());
    let post = evaluate_posterior(
        &mut g,
        models,
        &ev,
        &dv,
        &target,
        xv,
        xv,
        EvalSpec { rec: true, kl: true, noise },
        opts,
    );
    Ok((
        g.value(post.rec.unwrap()).as_slice().to_vec(),
        g.value(post.kl.unwrap()).as_slice().to_vec(),
    ))
}

/// Log-density of each row of `z` under the prior, without gradient.
pub fn prior_log_density(prior: &MixturePrior, z: &Matrix) -> Vec<f64> {
    let mut g = Graph::new();
    let m = MixtureVars::constant(&mut g, &prior.export_density());
    let zv = g.constant(z.clone());
    let lp = log_prob_mog_graph(&mut g, zv, &m);
    g.value(lp).as_slice().to_vec()
}
