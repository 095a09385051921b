//! The learnable mixture prior: energies, soft-clipped log-variances, sampling
//! and the VampPrior-to-MoG conversion.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::autodiff::{logsumexp, soft_clip_value, Graph, Var};
use crate::distributions::{standard_normal, MixtureDensity, MixtureVars};
use crate::error::{check_dim, Error, Result};
use crate::tensor::Matrix;

/// Coarse search grid for [`solve_k`].
pub const K_GRID: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

/// Widening applied to a degenerate clip range.
pub const DEGENERATE_WIDTH: f64 = 1e-3;

/// Per-dimension soft-clip bounds and the shared steepness `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRanges {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub k: f64,
}

impl ClipRanges {
    /// `β_j = K / (b_j − a_j)`.
    pub fn beta(&self, j: usize) -> f64 {
        self.k / (self.hi[j] - self.lo[j])
    }

    /// The envelope `(a_j − 2/β_j, b_j + 2/β_j)`.
    pub fn envelope(&self, j: usize) -> (f64, f64) {
        let slack = 2.0 / self.beta(j);
        (self.lo[j] - slack, self.hi[j] + slack)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrior {
    pub means: Matrix,
    /// Log-variances before soft clipping.
    pub raw_log_vars: Matrix,
    /// `1 × M`, with energies `e_i = exp(θ_i)`.
    pub energy_logits: Matrix,
    /// Unset until [`MixturePrior::init_clip_ranges`].
    pub clip: Option<ClipRanges>,
    pub learnable_contributions: bool,
    pub learnable_params: bool,
    pub clipping_enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VampPseudoInputs {
    /// `M × data_dim`.
    pub pseudo_inputs: Matrix,
    /// `1 × M`.
    pub energy_logits: Matrix,
}

impl VampPseudoInputs {
    pub fn new(pseudo_inputs: Matrix) -> Result<Self> {
        if pseudo_inputs.rows() == 0 {
            return Err(Error::Empty("pseudo-inputs"));
        }
        let m = pseudo_inputs.rows();
        Ok(VampPseudoInputs {
            pseudo_inputs,
            energy_logits: Matrix::zeros(1, m),
        })
    }

    pub fn components(&self) -> usize {
        self.pseudo_inputs.rows()
    }
}

/// `log w_i = θ_i − log Σ_l exp θ_l`.
pub fn mixture_weights(energy_logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(energy_logits);
    energy_logits.iter().map(|t| t - lse).collect()
}

/// Normalized log-weights on the tape for a `1 × M` logit row.
pub fn mixture_weights_graph(g: &mut Graph, logits: Var) -> Var {
    let lse = g.logsumexp_rows(logits);
    g.sub(logits, lse)
}

/// `f_c(x) = x + (1/β)·log[(1 + e^{β(a−x)}) / (1 + e^{β(x−b)})]`, `β = K/(b−a)`.
pub fn soft_clip(x: f64, a: f64, b: f64, k: f64) -> Result<f64> {
    if !(a < b) {
        return Err(Error::InvalidArgument(format!(
            "soft_clip needs a < b, got [{a}, {b}]"
        )));
    }
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("soft_clip needs K > 0, got {k}")));
    }
    Ok(soft_clip_value(x, a, b, k))
}

/// Fraction of `[a, b]` kept by soft clipping with steepness `K`, which is
/// `1 − (log 4 − 2 log(1 + e^{−K})) / K` independent of the range.
pub fn retention(k: f64) -> f64 {
    1.0 - retention_gap(k) / k
}

/// `log 4 − 2 log(1 + e^{−K})`, written as `2·log1p(tanh(K/2))`.
fn retention_gap(k: f64) -> f64 {
    2.0 * (0.5 * k).tanh().ln_1p()
}

fn retains(rho: f64, k: f64) -> bool {
    (1.0 - rho) * k >= retention_gap(k)
}

/// Smallest `K` with `(1−ρ)K ≥ log 4 − 2 log(1 + e^{−K})`: the first point of
/// [`K_GRID`] that satisfies it, refined by bisection against the previous
/// grid point.
pub fn solve_k(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retention fraction must lie in (0, 1), got {rho}"
        )));
    }
    let mut lo = 0.0;
    let mut hi = None;
    for &k in &K_GRID {
        if retains(rho, k) {
            hi = Some(k);
            break;
        }
        lo = k;
    }
    let mut hi = match hi {
        Some(h) => h,
        None => {
            let mut k = *K_GRID.last().unwrap();
            while !retains(rho, k) {
                lo = k;
                k *= 2.0;
            }
            k
        }
    };
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if retains(rho, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // Keep a margin so that independent evaluations of the inequality agree.
    Ok(hi * (1.0 + 1e-10))
}

impl MixturePrior {
    /// The fixed standard normal prior (one component, nothing learnable).
    pub fn standard(dim: usize) -> Self {
        MixturePrior {
            means: Matrix::zeros(1, dim),
            raw_log_vars: Matrix::zeros(1, dim),
            energy_logits: Matrix::zeros(1, 1),
            clip: None,
            learnable_contributions: false,
            learnable_params: false,
            clipping_enabled: false,
        }
    }

    /// An M-component prior with unit variances, equal energies and means
    /// drawn from `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, m: usize, dim: usize, scale: f64) -> Self {
        MixturePrior {
            means: standard_normal(rng, m, dim).map(|v| v * scale),
            raw_log_vars: Matrix::zeros(m, dim),
            energy_logits: Matrix::zeros(1, m),
            clip: None,
            learnable_contributions: false,
            learnable_params: true,
            clipping_enabled: true,
        }
    }

    pub fn components(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Soft clipping only takes effect once ranges exist and it is enabled.
    pub fn active_clip(&self) -> Option<&ClipRanges> {
        if self.clipping_enabled {
            self.clip.as_ref()
        } else {
            None
        }
    }

    pub fn log_weights(&self) -> Vec<f64> {
        mixture_weights(self.energy_logits.as_slice())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights().iter().map(|w| w.exp()).collect()
    }

    /// Clipped log-variances as exported in the density.
    pub fn log_vars(&self) -> Matrix {
        match self.active_clip() {
            Some(c) => Matrix::from_fn(self.components(), self.dim(), |i, j| {
                soft_clip_value(self.raw_log_vars.get(i, j), c.lo[j], c.hi[j], c.k)
            }),
            None => self.raw_log_vars.clone(),
        }
    }

    pub fn export_density(&self) -> MixtureDensity {
        MixtureDensity {
            means: self.means.clone(),
            log_vars: self.log_vars(),
            log_weights: self.log_weights(),
        }
    }

    /// True when every exported log-variance lies inside the soft-clip
    /// envelope (vacuously true without active clipping).
    pub fn within_envelope(&self) -> bool {
        let Some(c) = self.active_clip() else {
            return true;
        };
        let lv = self.log_vars();
        (0..self.components()).all(|i| {
            (0..self.dim()).all(|j| {
                let (lo, hi) = c.envelope(j);
                let v = lv.get(i, j);
                v > lo && v < hi
            })
        })
    }

    /// Largest exported log-variance per latent dimension.
    pub fn max_log_var(&self) -> Vec<f64> {
        let lv = self.log_vars();
        (0..self.dim())
            .map(|j| (0..self.components()).map(|i| lv.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Draws component indices categorically from the mixture weights.
    pub fn draw_components<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let w = self.weights();
        if w.len() == 1 {
            return vec![0; n];
        }
        let dist = WeightedIndex::new(&w).expect("mixture weights are positive and finite");
        (0..n).map(|_| dist.sample(rng)).collect()
    }

    /// `n` latents and their component ids.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Matrix, Vec<usize>) {
        let ids = self.draw_components(n, rng);
        let noise = standard_normal(rng, n, self.dim());
        (self.sample_with(&ids, &noise), ids)
    }

    /// `μ_{id} + exp(lv_{id}/2) ⊙ ε` for given ids and noise.
    pub fn sample_with(&self, ids: &[usize], noise: &Matrix) -> Matrix {
        let lv = self.log_vars();
        Matrix::from_fn(ids.len(), self.dim(), |r, j| {
            let i = ids[r];
            self.means.get(i, j) + (0.5 * lv.get(i, j)).exp() * noise.get(r, j)
        })
    }

    /// Sets `[a_j, b_j]` to the column-wise range of the raw log-variances
    /// and `K` from the retention fraction, unless `k_override` is given.
    pub fn init_clip_ranges(mut self, rho: f64, k_override: Option<f64>) -> Result<Self> {
        let k = match k_override {
            Some(k) if k > 0.0 => k,
            Some(k) => return Err(Error::InvalidArgument(format!("clip K must be > 0, got {k}"))),
            None => solve_k(rho)?,
        };
        let (m, d) = self.raw_log_vars.shape();
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for j in 0..d {
            let col = (0..m).map(|i| self.raw_log_vars.get(i, j));
            let a = col.clone().fold(f64::INFINITY, f64::min);
            let b = col.fold(f64::NEG_INFINITY, f64::max);
            if a < b {
                lo.push(a);
                hi.push(b);
            } else {
                lo.push(a - DEGENERATE_WIDTH);
                hi.push(b + DEGENERATE_WIDTH);
            }
        }
        self.clip = Some(ClipRanges { lo, hi, k });
        Ok(self)
    }

    /// Checks structural invariants.
    pub fn validate(&self) -> Result<()> {
        let (m, d) = self.means.shape();
        check_dim(m * d, self.raw_log_vars.len())?;
        check_dim(m, self.energy_logits.len())?;
        if let Some(c) = &self.clip {
            check_dim(d, c.lo.len())?;
            check_dim(d, c.hi.len())?;
            if !(c.k > 0.0) || c.lo.iter().zip(&c.hi).any(|(a, b)| a > b) {
                return Err(Error::InvalidArgument("invalid clip ranges".into()));
            }
        }
        if !self.learnable_contributions {
            let first = self.energy_logits.as_slice()[0];
            if self.energy_logits.as_slice().iter().any(|&t| t != first) {
                return Err(Error::InvalidArgument(
                    "energies must be equal without learnable contributions".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A prior bound to a tape. `means`, `raw_log_vars` and `energy_logits` are
/// always trainable leaves so callers can inspect their gradients; `density`
/// is built from detached copies wherever the prior must not learn.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub means: Var,
    pub raw_log_vars: Var,
    pub energy_logits: Var,
    pub density: MixtureVars,
}

impl PriorVars {
    /// `live` selects whether the prior is the player being updated. Even
    /// when live, only the parameters its flags mark learnable carry gradient.
    pub fn bind(g: &mut Graph, prior: &MixturePrior, live: bool) -> Self {
        let means = g.param(&prior.means);
        let raw_log_vars = g.param(&prior.raw_log_vars);
        let energy_logits = g.param(&prior.energy_logits);
        let params_live = live && prior.learnable_params;
        let weights_live = params_live && prior.learnable_contributions;
        let (m, lv) = if params_live {
            (means, raw_log_vars)
        } else {
            (g.detach(means), g.detach(raw_log_vars))
        };
        let logits = if weights_live { energy_logits } else { g.detach(energy_logits) };
        let lv = match prior.active_clip() {
            Some(c) => g.soft_clip(lv, &c.lo, &c.hi, c.k),
            None => lv,
        };
        let log_weights = mixture_weights_graph(g, logits);
        PriorVars {
            means,
            raw_log_vars,
            energy_logits,
            density: MixtureVars {
                means: m,
                log_vars: lv,
                log_weights,
            },
        }
    }

    /// Reparameterized prior samples for fixed ids and noise. The index carries
    /// no gradient; the selected component's mean and log-variance do.
    pub fn sample(&self, g: &mut Graph, ids: &[usize], noise: &Matrix) -> Var {
        let mu = g.gather_rows(self.density.means, ids);
        let lv = g.gather_rows(self.density.log_vars, ids);
        let half = g.scale(lv, 0.5);
        let std = g.exp(half);
        let eps = g.constant(noise.clone());
        let scaled = g.mul(std, eps);
        g.add(mu, scaled)
    }
}

/// Converts pseudo-inputs to a MoG by encoding each one once. The returned
/// prior has no clip ranges yet.
pub fn vamp_to_mog(
    v: &VampPseudoInputs,
    encode: impl FnOnce(&Matrix) -> Result<(Matrix, Matrix)>,
) -> Result<MixturePrior> {
    let (means, log_vars) = encode(&v.pseudo_inputs)?;
    check_dim(v.components(), means.rows())?;
    check_dim(means.len(), log_vars.len())?;
    let logits = v.energy_logits.as_slice();
    Ok(MixturePrior {
        means,
        raw_log_vars: log_vars,
        energy_logits: v.energy_logits.clone(),
        clip: None,
        learnable_contributions: logits.iter().any(|&t| t != logits[0]),
        learnable_params: true,
        clipping_enabled: true,
    })
}
