//! Shared by the property tests and the acceptance target.
#![allow(dead_code)]

use introprior_core::objective::{
    decoder_step_graph, encoder_step_graph, prior_step_graph, PosteriorNoise, StepNoise,
};
use introprior_core::{
    Decoder, Encoder, GameHyper, KlMode, LossOptions, Matrix, MixturePrior, Mlp, Models, Player,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A plain two-player Soft-IntroVAE with a standard-normal prior, written
/// from scratch on `Vec<f64>`.
pub struct Net {
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl Net {
    fn from(m: &Mlp) -> Net {
        let layers = m
            .weights
            .iter()
            .zip(&m.biases)
            .map(|(w, b)| ((0..w.rows()).map(|i| w.row(i).to_vec()).collect(), b.as_slice().to_vec()))
            .collect();
        Net { layers }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let mut out = b.clone();
            for (i, hi) in h.iter().enumerate() {
                for (o, wij) in out.iter_mut().zip(&w[i]) {
                    *o += hi * wij;
                }
            }
            if l + 1 < self.layers.len() {
                for v in out.iter_mut() {
                    *v /= 1.0 + (-*v).exp();
                }
            }
            h = out;
        }
        h
    }
}

pub struct TwoPlayer {
    enc: Net,
    dec: Net,
    d: usize,
}

pub struct Neg {
    rec: f64,
    kl: f64,
}

impl TwoPlayer {
    pub fn new(e: &Encoder, d: &Decoder) -> Self {
        TwoPlayer { enc: Net::from(&e.net), dec: Net::from(&d.net), d: e.latent_dim }
    }

    /// Negative ELBO parts of `x` against target `y`, using row `r` of the
    /// reconstruction noise and rows `r·T..(r+1)·T` of the KL noise.
    fn neg_elbo(&self, x: &[f64], y: &[f64], rec_eps: &[f64], kl_eps: &[Vec<f64>], closed: bool) -> Neg {
        let out = self.enc.apply(x);
        let (mu, lv) = out.split_at(self.d);
        let z: Vec<f64> = (0..self.d).map(|j| mu[j] + (0.5 * lv[j]).exp() * rec_eps[j]).collect();
        let xr = self.dec.apply(&z);
        let rec = 0.5 * xr.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let kl = if closed {
            0.5 * (0..self.d).map(|j| mu[j] * mu[j] + lv[j].exp() - 1.0 - lv[j]).sum::<f64>()
        } else {
            let ln2pi = (2.0 * std::f64::consts::PI).ln();
            kl_eps
                .iter()
                .map(|eps| {
                    (0..self.d)
                        .map(|j| {
                            let zt = mu[j] + (0.5 * lv[j]).exp() * eps[j];
                            let log_q = -0.5 * (ln2pi + lv[j] + eps[j] * eps[j]);
                            let log_p = -0.5 * (ln2pi + zt * zt);
                            log_q - log_p
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
                / kl_eps.len() as f64
        };
        Neg { rec, kl }
    }

    fn batch(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], noise: &PosteriorNoise, t: usize, closed: bool) -> Vec<Neg> {
        (0..xs.len())
            .map(|r| {
                let kl_eps: Vec<Vec<f64>> = if closed {
                    Vec::new()
                } else {
                    (r * t..(r + 1) * t).map(|k| noise.kl.row(k).to_vec()).collect()
                };
                self.neg_elbo(&xs[r], &ys[r], noise.rec.row(r), &kl_eps, closed)
            })
            .collect()
    }

    fn fakes(&self, noise: &StepNoise) -> Vec<Vec<f64>> {
        (0..noise.fake_latent.rows()).map(|r| self.dec.apply(noise.fake_latent.row(r))).collect()
    }

    pub fn loss_encoder(&self, xs: &[Vec<f64>], noise: &StepNoise, h: &GameHyper, t: usize, closed: bool) -> f64 {
        let n = xs.len() as f64;
        let real = self.batch(xs, xs, &noise.real, t, closed);
        let xf = self.fakes(noise);
        let fake = self.batch(&xf, &xf, &noise.fake, t, closed);
        let real_part: f64 = real.iter().map(|r| h.beta_rec * r.rec + h.beta_kl * r.kl).sum::<f64>() / n;
        let fake_part: f64 = fake
            .iter()
            .map(|f| (-h.alpha * (h.beta_rec * f.rec + h.beta_neg * f.kl)).exp() / h.alpha)
            .sum::<f64>()
            / n;
        real_part + fake_part
    }

    pub fn loss_decoder(&self, xs: &[Vec<f64>], noise: &StepNoise, h: &GameHyper, t: usize, closed: bool) -> f64 {
        let n = xs.len() as f64;
        let real = self.batch(xs, xs, &noise.real, t, closed);
        let xf = self.fakes(noise);
        let fake = self.batch(&xf, &xf, &noise.fake, t, closed);
        let rec: f64 = real.iter().map(|r| r.rec).sum::<f64>() / n;
        let frec: f64 = fake.iter().map(|f| f.rec).sum::<f64>() / n;
        let fkl: f64 = fake.iter().map(|f| f.kl).sum::<f64>() / n;
        h.beta_rec * rec + h.gamma * (h.gamma_rho * h.beta_rec * frec + h.beta_kl * fkl)
    }
}

pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0)
}

pub fn random_hyper(rng: &mut ChaCha8Rng) -> GameHyper {
    GameHyper {
        alpha: rng.random_range(1.0..3.0),
        gamma: rng.random_range(0.0..2.0),
        gamma_rho: rng.random_range(0.0..1.0),
        beta_rec: rng.random_range(0.1..1.5),
        beta_kl: rng.random_range(0.1..1.5),
        beta_neg: rng.random_range(0.1..1.5),
        r_entropy: 0.0,
        ..GameHyper::default()
    }
}


/// Largest relative gap between the library's `L_E`, `L_D` and the
/// two-player oracle on one random batch; also checks that a fixed prior
/// receives no gradient from its own step.
pub fn reduction_gap(seed: u64, n: usize, t: usize, width: usize, latent: usize, closed: bool) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(&mut rng, 2, latent, width);
    let decoder = Decoder::new(&mut rng, latent, 2, width);
    let prior = MixturePrior::standard(latent);
    let h = random_hyper(&mut rng);
    let kl_mode = if closed { KlMode::Closed } else { KlMode::Mc };
    let opts = LossOptions { t, kl_mode, recon_as_fake: false };
    let x = Matrix::from_fn(n, 2, |_, _| rng.random_range(-3.0..3.0));
    let models = Models { encoder: &encoder, decoder: &decoder, prior: &prior };
    let oracle = TwoPlayer::new(&encoder, &decoder);
    let xs = rows(&x);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    let err = |e: introprior_core::Error| e.to_string();

    let noise = StepNoise::draw(&mut rng, &prior, n, &opts);
    let sg = encoder_step_graph(&models, &x, &noise, &h, &opts).map_err(err)?;
    let gap_e = rel(sg.loss_value(), oracle.loss_encoder(&xs, &noise, &h, t, closed));
    if sg.encoder_terms.unwrap().entropy != 0.0 {
        return Err("entropy of a one-mode prior is not zero".into());
    }

    let noise = StepNoise::draw(&mut rng, &prior, n, &opts);
    let sg = decoder_step_graph(&models, &x, &noise, &h, &opts).map_err(err)?;
    let gap_d = rel(sg.loss_value(), oracle.loss_decoder(&xs, &noise, &h, t, closed));

    let noise = StepNoise::draw(&mut rng, &prior, n, &opts);
    let sg = prior_step_graph(&models, &x, &noise, &h, &opts).map_err(err)?;
    if !sg.gradients().is_zero(Player::Prior) {
        return Err("fixed prior received gradient".into());
    }
    Ok(gap_e.max(gap_d))
}

pub struct Case {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: MixturePrior,
    pub x: Matrix,
    pub h: GameHyper,
    pub opts: LossOptions,
}

pub fn case(seed: u64, m: usize, n: usize, clipped: bool, recon_as_fake: bool) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(&mut rng, 2, 2, 6);
    let decoder = Decoder::new(&mut rng, 2, 2, 6);
    let mut prior = MixturePrior::random(&mut rng, m, 2, 1.5);
    prior.learnable_contributions = true;
    for v in prior.raw_log_vars.as_mut_slice() {
        *v = rng.random_range(-1.5..0.5);
    }
    for v in prior.energy_logits.as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    prior.clipping_enabled = clipped;
    if clipped {
        prior = prior.init_clip_ranges(0.85, None).unwrap();
    }
    let h = GameHyper {
        gamma: rng.random_range(0.5..1.5),
        r_entropy: rng.random_range(0.0..5.0),
        ..GameHyper::default()
    };
    let x = Matrix::from_fn(n, 2, |_, _| rng.random_range(-3.0..3.0));
    let opts = LossOptions { t: 3, kl_mode: KlMode::Mc, recon_as_fake };
    Case { encoder, decoder, prior, x, h, opts }
}

pub fn nonzero(g: &[Matrix]) -> bool {
    g.iter().any(|m| m.as_slice().iter().any(|&v| v != 0.0))
}


/// Every step's frozen players get exactly zero gradient and the live one a
/// nonzero gradient.
pub fn stop_gradient_violation(seed: u64, m: usize, n: usize, clipped: bool, recon_as_fake: bool) -> Option<String> {
    let c = case(seed, m, n, clipped, recon_as_fake);
    let models = Models { encoder: &c.encoder, decoder: &c.decoder, prior: &c.prior };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = StepNoise::draw(&mut rng, &c.prior, n, &c.opts);
    let steps = [
        (Player::Encoder, encoder_step_graph(&models, &c.x, &noise, &c.h, &c.opts)),
        (Player::Decoder, decoder_step_graph(&models, &c.x, &noise, &c.h, &c.opts)),
        (Player::Prior, prior_step_graph(&models, &c.x, &noise, &c.h, &c.opts)),
    ];
    for (live, sg) in steps {
        let g = match sg {
            Ok(sg) => sg.gradients(),
            Err(e) => return Some(e.to_string()),
        };
        for p in [Player::Encoder, Player::Decoder, Player::Prior] {
            if p != live && !g.is_zero(p) {
                return Some(format!("{p:?} gradient nonzero in the {live:?} step"));
            }
        }
        let own = if live == Player::Prior { &g.prior[..1] } else { g.of(live) };
        if !nonzero(own) {
            return Some(format!("{live:?} step gave its own player no gradient"));
        }
    }
    None
}

/// The prior step's energy gradient is the same with and without the fake
/// term.
pub fn fake_energy_violation(seed: u64, m: usize, n: usize) -> Option<String> {
    let c = case(seed, m, n, false, false);
    let models = Models { encoder: &c.encoder, decoder: &c.decoder, prior: &c.prior };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfade);
    let noise = StepNoise::draw(&mut rng, &c.prior, n, &c.opts);
    let real_only = GameHyper { gamma: 0.0, ..c.h };
    let with_fake = prior_step_graph(&models, &c.x, &noise, &c.h, &c.opts).ok()?.gradients();
    let without = prior_step_graph(&models, &c.x, &noise, &real_only, &c.opts).ok()?.gradients();
    if with_fake.prior[2] != without.prior[2] {
        return Some("fake term moved the energies".into());
    }
    if !nonzero(&with_fake.prior[2..]) || with_fake.prior[0] == without.prior[0] {
        return Some("prior step gradients degenerate".into());
    }
    None
}
