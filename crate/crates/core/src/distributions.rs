//! Diagonal Gaussians, Gaussian mixtures, KL divergences and responsibilities.
//!
//! Plain `f64` kernels live next to tape-based versions (`*_graph`) that the
//! objective uses when gradients are needed. Both share
//! [`log_normal_coord`](crate::autodiff) so they agree bit for bit.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{component_scores_value, log_normal_coord, logsumexp, Graph, Var};
use crate::error::{check_dim, Error, Result};
use crate::tensor::Matrix;

/// `N(mean, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), log_var.len())?;
        if mean.is_empty() {
            return Err(Error::Empty("gaussian dimension"));
        }
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `p(z) = Σ_i w_i N(z | μ_i, diag(exp(lv_i)))` with normalized log-weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDensity {
    pub means: Matrix,
    pub log_vars: Matrix,
    pub log_weights: Vec<f64>,
}

impl MixtureDensity {
    pub fn new(means: Matrix, log_vars: Matrix, log_weights: Vec<f64>) -> Result<Self> {
        if means.rows() == 0 || means.cols() == 0 {
            return Err(Error::Empty("mixture components"));
        }
        check_dim(means.rows(), log_vars.rows())?;
        check_dim(means.cols(), log_vars.cols())?;
        check_dim(means.rows(), log_weights.len())?;
        if !(means.all_finite() && log_vars.all_finite()) {
            return Err(Error::NonFinite("mixture parameters"));
        }
        let total: f64 = log_weights.iter().map(|w| w.exp()).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(MixtureDensity {
            means,
            log_vars,
            log_weights,
        })
    }

    /// A one-component mixture.
    pub fn unimodal(g: &DiagGaussian) -> Self {
        MixtureDensity {
            means: Matrix::row_vector(&g.mean),
            log_vars: Matrix::row_vector(&g.log_var),
            log_weights: vec![0.0],
        }
    }

    pub fn standard(dim: usize) -> Self {
        Self::unimodal(&DiagGaussian::standard(dim))
    }

    pub fn components(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn component(&self, i: usize) -> DiagGaussian {
        DiagGaussian {
            mean: self.means.row(i).to_vec(),
            log_var: self.log_vars.row(i).to_vec(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }
}

/// Responsibilities `c_i`, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponsibilityVector {
    pub values: Vec<f64>,
}

impl ResponsibilityVector {
    pub fn uniform(m: usize) -> Self {
        ResponsibilityVector {
            values: vec![1.0 / m as f64; m],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Result of [`responsibilities`]; `underflow` is set when no component had
/// a finite log-density and the uniform fallback was used.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    pub vector: ResponsibilityVector,
    pub underflow: bool,
}

pub fn log_prob_diag(z: &[f64], g: &DiagGaussian) -> Result<f64> {
    check_dim(g.dim(), z.len())?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("latent"));
    }
    Ok(z.iter()
        .zip(&g.mean)
        .zip(&g.log_var)
        .map(|((&z, &m), &l)| log_normal_coord(z - m, l))
        .sum())
}

/// `μ + exp(lv/2) ⊙ ε`.
pub fn sample_reparam(g: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(g.dim(), noise.len())?;
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((&m, &l), &e)| m + (0.5 * l).exp() * e)
        .collect())
}

/// Closed-form `KL[q ‖ p]` between diagonal Gaussians.
pub fn kl_closed(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    Ok((0..q.dim())
        .map(|j| kl_closed_coord(q.mean[j], q.log_var[j], p.mean[j], p.log_var[j]))
        .sum())
}

#[inline]
fn kl_closed_coord(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let d = mq - mp;
    0.5 * ((lq - lp).exp() + d * d * (-lp).exp() - 1.0 + lp - lq)
}

pub fn log_prob_mog(z: &[f64], m: &MixtureDensity) -> Result<f64> {
    check_dim(m.dim(), z.len())?;
    let scores = component_scores_value(
        &Matrix::row_vector(z),
        &m.means,
        &m.log_vars,
        &m.log_weights,
    );
    Ok(logsumexp(scores.as_slice()))
}

/// Monte-Carlo estimate `(1/T) Σ_t [log q(z_t) − log p(z_t)]` with
/// `z_t = μ + σ ⊙ ε_t`, one row of `noise` per draw.
pub fn kl_mc(q: &DiagGaussian, m: &MixtureDensity, noise: &Matrix) -> Result<f64> {
    if noise.rows() < 1 {
        return Err(Error::InvalidArgument("kl_mc needs T >= 1".into()));
    }
    check_dim(q.dim(), noise.cols())?;
    check_dim(m.dim(), q.dim())?;
    let mut total = 0.0;
    for t in 0..noise.rows() {
        let z = sample_reparam(q, noise.row(t))?;
        total += log_prob_diag(&z, q)? - log_prob_mog(&z, m)?;
    }
    Ok(total / noise.rows() as f64)
}

/// Responsibilities from unnormalized joint log-scores `log w_i + log N_i(z)`.
pub fn responsibilities_from_scores(scores: &[f64]) -> Responsibilities {
    let m = scores.len();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Responsibilities {
            vector: ResponsibilityVector::uniform(m),
            underflow: true,
        };
    }
    let mut values: Vec<f64> = scores.iter().map(|&s| (s - top).exp()).collect();
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    Responsibilities {
        vector: ResponsibilityVector { values },
        underflow: false,
    }
}

pub fn responsibilities(z: &[f64], m: &MixtureDensity) -> Result<Responsibilities> {
    check_dim(m.dim(), z.len())?;
    let scores = component_scores_value(
        &Matrix::row_vector(z),
        &m.means,
        &m.log_vars,
        &m.log_weights,
    );
    Ok(responsibilities_from_scores(scores.as_slice()))
}

/// Mean of per-sample responsibilities over the rows of `zs`.
pub fn batch_expected_responsibilities(
    zs: &Matrix,
    m: &MixtureDensity,
) -> Result<ResponsibilityVector> {
    if zs.rows() == 0 {
        return Err(Error::Empty("responsibility batch"));
    }
    check_dim(m.dim(), zs.cols())?;
    let scores = component_scores_value(zs, &m.means, &m.log_vars, &m.log_weights);
    let mut acc = vec![0.0; m.components()];
    for i in 0..zs.rows() {
        let r = responsibilities_from_scores(scores.row(i));
        for (a, v) in acc.iter_mut().zip(&r.vector.values) {
            *a += v;
        }
    }
    let n = zs.rows() as f64;
    Ok(ResponsibilityVector {
        values: acc.into_iter().map(|a| a / n).collect(),
    })
}

/// `−Σ c log c` in nats with `0·log 0 = 0`.
pub fn entropy(c: &ResponsibilityVector) -> f64 {
    c.values
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// `H(C) / log M`, defined as 0 for a single component.
pub fn normalized_entropy(c: &ResponsibilityVector) -> f64 {
    if c.len() <= 1 {
        return 0.0;
    }
    (entropy(c) / (c.len() as f64).ln()).clamp(0.0, 1.0)
}

/// A `rows × cols` block of independent standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Mixture parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub means: Var,
    pub log_vars: Var,
    /// `1 × M` normalized log-weights.
    pub log_weights: Var,
}

impl MixtureVars {
    pub fn constant(g: &mut Graph, m: &MixtureDensity) -> Self {
        MixtureVars {
            means: g.constant(m.means.clone()),
            log_vars: g.constant(m.log_vars.clone()),
            log_weights: g.constant(Matrix::row_vector(&m.log_weights)),
        }
    }

    /// Trainable leaves holding the mixture's parameters.
    pub fn params(g: &mut Graph, m: &MixtureDensity) -> Self {
        MixtureVars {
            means: g.param(&m.means),
            log_vars: g.param(&m.log_vars),
            log_weights: g.param(&Matrix::row_vector(&m.log_weights)),
        }
    }

    /// The same density with every gradient path cut.
    pub fn detached(&self, g: &mut Graph) -> Self {
        MixtureVars {
            means: g.detach(self.means),
            log_vars: g.detach(self.log_vars),
            log_weights: g.detach(self.log_weights),
        }
    }

    pub fn to_density(&self, g: &Graph) -> MixtureDensity {
        MixtureDensity {
            means: g.value(self.means).clone(),
            log_vars: g.value(self.log_vars).clone(),
            log_weights: g.value(self.log_weights).as_slice().to_vec(),
        }
    }
}

/// Whether the mixture acts as a differentiable KL target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetGrad {
    Live,
    Constant,
}

/// `n × M` joint log-scores on the tape.
pub fn component_scores_graph(g: &mut Graph, z: Var, m: &MixtureVars) -> Var {
    g.component_scores(z, m.means, m.log_vars, m.log_weights)
}

/// `n × 1` mixture log-density on the tape.
pub fn log_prob_mog_graph(g: &mut Graph, z: Var, m: &MixtureVars) -> Var {
    let s = component_scores_graph(g, z, m);
    g.logsumexp_rows(s)
}

/// Reparameterized latents `μ + exp(lv/2) ⊙ ε`, repeated `t` times per row:
/// `mean, log_var: n × D`, `noise: (n·t) × D`.
pub fn sample_reparam_graph(g: &mut Graph, mean: Var, log_var: Var, noise: &Matrix, t: usize) -> Var {
    let mu = g.repeat_rows(mean, t);
    let lv = g.repeat_rows(log_var, t);
    let half = g.scale(lv, 0.5);
    let std = g.exp(half);
    let eps = g.constant(noise.clone());
    let scaled = g.mul(std, eps);
    g.add(mu, scaled)
}

/// Per-row Monte-Carlo KL estimate on the tape (`n × 1`), plus the latent
/// draws `(n·t) × D` it used.
pub fn kl_mc_graph(
    g: &mut Graph,
    mean: Var,
    log_var: Var,
    target: &MixtureVars,
    noise: &Matrix,
    t: usize,
    target_grad: TargetGrad,
) -> (Var, Var) {
    assert!(t >= 1, "kl_mc needs T >= 1");
    let z = sample_reparam_graph(g, mean, log_var, noise, t);
    let mu = g.repeat_rows(mean, t);
    let lv = g.repeat_rows(log_var, t);
    let log_q = g.diag_log_prob(z, mu, lv);
    let target = match target_grad {
        TargetGrad::Live => *target,
        TargetGrad::Constant => target.detached(g),
    };
    let log_p = log_prob_mog_graph(g, z, &target);
    let diff = g.sub(log_q, log_p);
    (g.mean_groups(diff, t), z)
}

/// Per-row closed-form KL to a standard normal on the tape (`n × 1`).
pub fn kl_standard_closed_graph(g: &mut Graph, mean: Var, log_var: Var) -> Var {
    // 0.5·Σ (exp lv + μ² − 1 − lv)
    let e = g.exp(log_var);
    let m2 = g.square(mean);
    let s = g.add(e, m2);
    let s = g.sub(s, log_var);
    let s = g.add_scalar(s, -1.0);
    let s = g.sum_cols(s);
    g.scale(s, 0.5)
}

/// Gradients of [`kl_mc`] with respect to every parameter of `q` and `m`.
#[derive(Clone, Debug)]
pub struct KlMcGradients {
    pub value: f64,
    pub d_mean: Vec<f64>,
    pub d_log_var: Vec<f64>,
    pub d_means: Matrix,
    pub d_log_vars: Matrix,
    pub d_log_weights: Vec<f64>,
}

pub fn kl_mc_gradients(
    q: &DiagGaussian,
    m: &MixtureDensity,
    noise: &Matrix,
    target_grad: TargetGrad,
) -> Result<KlMcGradients> {
    if noise.rows() < 1 {
        return Err(Error::InvalidArgument("kl_mc needs T >= 1".into()));
    }
    check_dim(q.dim(), noise.cols())?;
    check_dim(m.dim(), q.dim())?;
    let mut g = Graph::new();
    let mean = g.param(&Matrix::row_vector(&q.mean));
    let lv = g.param(&Matrix::row_vector(&q.log_var));
    let mv = MixtureVars::params(&mut g, m);
    let (kl, _) = kl_mc_graph(&mut g, mean, lv, &mv, noise, noise.rows(), target_grad);
    let loss = g.sum_all(kl);
    let grads = g.backward(loss);
    Ok(KlMcGradients {
        value: g.scalar(loss),
        d_mean: grads.wrt(mean).into_vec(),
        d_log_var: grads.wrt(lv).into_vec(),
        d_means: grads.wrt(mv.means),
        d_log_vars: grads.wrt(mv.log_vars),
        d_log_weights: grads.wrt(mv.log_weights).into_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, central_difference_vec, relative_error, relative_error_slices};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g1(m: f64, lv: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![lv]).unwrap()
    }

    /// Trapezoid rule on `[lo, hi]`.
    fn integrate(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            s += f(lo + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn log_prob_diag_examples() {
        assert_abs_diff_eq!(
            log_prob_diag(&[0.0], &g1(0.0, 0.0)).unwrap(),
            -0.918_938_533_204_672_8,
            epsilon = 1e-15
        );
        let g = DiagGaussian::new(vec![0.7, -1.2], vec![0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(
            log_prob_diag(&[0.7, -1.2], &g).unwrap(),
            -(2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn log_prob_diag_matches_quadrature_normalized_density() {
        // Oracle: normalize exp(−z²/8) numerically, then take the log at z=1.
        let unnorm = |z: f64| (-z * z / 8.0).exp();
        let oracle = (unnorm(1.0) / integrate(-60.0, 60.0, 200_000, unnorm)).ln();
        const FROZEN: f64 = -1.737_085_713_764_618;
        assert_abs_diff_eq!(oracle, FROZEN, epsilon = 1e-9);
        let got = log_prob_diag(&[1.0], &g1(0.0, 4f64.ln())).unwrap();
        assert_abs_diff_eq!(got, FROZEN, epsilon = 1e-12);
    }

    #[test]
    fn log_prob_diag_errors() {
        assert!(log_prob_diag(&[0.0, 1.0], &g1(0.0, 0.0)).is_err());
        assert!(log_prob_diag(&[f64::NAN], &g1(0.0, 0.0)).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn sample_reparam_examples() {
        let g = DiagGaussian::new(vec![1.5, -2.0], vec![0.3, -0.7]).unwrap();
        assert_eq!(sample_reparam(&g, &[0.0, 0.0]).unwrap(), g.mean);
        let unit = DiagGaussian::new(vec![1.5, -2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(sample_reparam(&unit, &[0.25, 1.0]).unwrap(), vec![1.75, -1.0]);
        assert!(sample_reparam(&g, &[0.0]).is_err());
    }

    #[test]
    fn sample_reparam_statistics() {
        let g = DiagGaussian::new(vec![0.5, -1.0], vec![0.4, -1.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let noise = standard_normal(&mut rng, n, 2);
        for j in 0..2 {
            let xs: Vec<f64> = (0..n)
                .map(|i| sample_reparam(&g, noise.row(i)).unwrap()[j])
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let true_var = g.log_var[j].exp();
            assert!((mean - g.mean[j]).abs() < 3.0 * (true_var / n as f64).sqrt());
            // Var of the sample variance for a Gaussian is 2σ⁴/(n−1).
            let se_var = (2.0 * true_var * true_var / (n - 1) as f64).sqrt();
            assert!((var - true_var).abs() < 3.0 * se_var);
        }
    }

    #[test]
    fn kl_closed_examples() {
        let q = g1(0.3, -0.2);
        assert_eq!(kl_closed(&q, &q).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_closed(&g1(1.0, 0.0), &g1(0.0, 0.0)).unwrap(), 0.5, epsilon = 1e-15);
        assert!(kl_closed(&q, &DiagGaussian::standard(2)).is_err());
    }

    #[test]
    fn kl_closed_matches_numeric_integral() {
        // q = N(0, e), p = N(0, 1): ∫ q log(q/p) by quadrature.
        let q = g1(0.0, 1.0);
        let p = g1(0.0, 0.0);
        let oracle = integrate(-40.0, 40.0, 400_000, |z| {
            let lq = log_prob_diag(&[z], &q).unwrap();
            let lp = log_prob_diag(&[z], &p).unwrap();
            lq.exp() * (lq - lp)
        });
        const FROZEN: f64 = 0.359_140_914_229_522_6;
        assert_abs_diff_eq!(oracle, FROZEN, epsilon = 1e-9);
        assert_abs_diff_eq!(kl_closed(&q, &p).unwrap(), FROZEN, epsilon = 1e-14);
    }

    #[test]
    fn log_prob_mog_examples() {
        let g = DiagGaussian::new(vec![0.2, 1.0], vec![-0.5, 0.3]).unwrap();
        let z = [0.9, -0.4];
        let single = MixtureDensity::unimodal(&g);
        assert_eq!(log_prob_mog(&z, &single).unwrap(), log_prob_diag(&z, &g).unwrap());
        let doubled = MixtureDensity::new(
            Matrix::from_rows(&[g.mean.clone(), g.mean.clone()]),
            Matrix::from_rows(&[g.log_var.clone(), g.log_var.clone()]),
            vec![0.5f64.ln(); 2],
        )
        .unwrap();
        assert_abs_diff_eq!(
            log_prob_mog(&z, &doubled).unwrap(),
            log_prob_diag(&z, &g).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn log_prob_mog_symmetric_modes_direct_sum() {
        let m = MixtureDensity::new(
            Matrix::column_vector(&[-1.0, 1.0]),
            Matrix::column_vector(&[0.0, 0.0]),
            vec![0.5f64.ln(); 2],
        )
        .unwrap();
        let density = |z: f64, mu: f64| (-(z - mu).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let oracle = (0.5 * (density(0.0, -1.0) + density(0.0, 1.0))).ln();
        const FROZEN: f64 = -1.418_938_533_204_672_7;
        assert_abs_diff_eq!(oracle, FROZEN, epsilon = 1e-14);
        assert_abs_diff_eq!(log_prob_mog(&[0.0], &m).unwrap(), FROZEN, epsilon = 1e-14);
    }

    #[test]
    fn kl_mc_is_zero_against_itself() {
        let q = DiagGaussian::new(vec![0.3, -1.1, 2.0], vec![0.5, -2.0, 1.2]).unwrap();
        let m = MixtureDensity::unimodal(&q);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in [1, 7, 100] {
            let noise = standard_normal(&mut rng, t, 3);
            assert_eq!(kl_mc(&q, &m, &noise).unwrap(), 0.0);
        }
        assert!(kl_mc(&q, &m, &Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn kl_mc_matches_closed_form_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = 10_000;
        for _ in 0..100 {
            let d = rng.random_range(1..=3);
            let rand_g = |rng: &mut ChaCha8Rng| {
                DiagGaussian::new(
                    (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let q = rand_g(&mut rng);
            let p = rand_g(&mut rng);
            let m = MixtureDensity::unimodal(&p);
            let noise = standard_normal(&mut rng, t, d);
            let terms: Vec<f64> = (0..t)
                .map(|i| kl_mc(&q, &m, &Matrix::row_vector(noise.row(i))).unwrap())
                .collect();
            let est = kl_mc(&q, &m, &noise).unwrap();
            let mean = terms.iter().sum::<f64>() / t as f64;
            assert_abs_diff_eq!(est, mean, epsilon = 1e-9);
            let sd = (terms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt();
            let exact = kl_closed(&q, &p).unwrap();
            assert!(
                (est - exact).abs() <= 3.0 * sd / (t as f64).sqrt(),
                "mc {est} closed {exact} sd {sd}"
            );
        }
    }

    fn random_mixture(rng: &mut ChaCha8Rng, m: usize, d: usize) -> MixtureDensity {
        let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lse = logsumexp(&logits);
        MixtureDensity::new(
            Matrix::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0)),
            Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0)),
            logits.iter().map(|l| l - lse).collect(),
        )
        .unwrap()
    }

    #[test]
    fn kl_mc_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-4;
        for _ in 0..20 {
            let d = rng.random_range(1..=3);
            let mc = rng.random_range(1..=4);
            let q = DiagGaussian::new(
                (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let m = random_mixture(&mut rng, mc, d);
            let noise = standard_normal(&mut rng, 5, d);
            let grads = kl_mc_gradients(&q, &m, &noise, TargetGrad::Live).unwrap();
            assert_abs_diff_eq!(grads.value, kl_mc(&q, &m, &noise).unwrap(), epsilon = 1e-12);

            let fd_mean = central_difference_vec(&q.mean, h, |v| {
                let q2 = DiagGaussian { mean: v.to_vec(), log_var: q.log_var.clone() };
                kl_mc(&q2, &m, &noise).unwrap()
            });
            let fd_lv = central_difference_vec(&q.log_var, h, |v| {
                let q2 = DiagGaussian { mean: q.mean.clone(), log_var: v.to_vec() };
                kl_mc(&q2, &m, &noise).unwrap()
            });
            let fd_means = central_difference(&m.means, h, |p| {
                let m2 = MixtureDensity { means: p.clone(), ..m.clone() };
                kl_mc(&q, &m2, &noise).unwrap()
            });
            let fd_lvs = central_difference(&m.log_vars, h, |p| {
                let m2 = MixtureDensity { log_vars: p.clone(), ..m.clone() };
                kl_mc(&q, &m2, &noise).unwrap()
            });
            let fd_w = central_difference_vec(&m.log_weights, h, |w| {
                let m2 = MixtureDensity { log_weights: w.to_vec(), ..m.clone() };
                kl_mc(&q, &m2, &noise).unwrap()
            });
            for (name, err) in [
                ("mean", relative_error_slices(&grads.d_mean, &fd_mean)),
                ("log_var", relative_error_slices(&grads.d_log_var, &fd_lv)),
                ("means", relative_error(&grads.d_means, &fd_means)),
                ("log_vars", relative_error(&grads.d_log_vars, &fd_lvs)),
                ("log_weights", relative_error_slices(&grads.d_log_weights, &fd_w)),
            ] {
                assert!(err <= 1e-4, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn kl_mc_constant_target_has_no_mixture_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let m = random_mixture(&mut rng, 3, 2);
        let q = DiagGaussian::new(vec![0.1, 0.2], vec![-0.3, 0.4]).unwrap();
        let noise = standard_normal(&mut rng, 8, 2);
        let live = kl_mc_gradients(&q, &m, &noise, TargetGrad::Live).unwrap();
        let frozen = kl_mc_gradients(&q, &m, &noise, TargetGrad::Constant).unwrap();
        assert_eq!(live.value, frozen.value);
        assert_eq!(live.d_mean, frozen.d_mean);
        assert!(frozen.d_means.as_slice().iter().all(|&v| v == 0.0));
        assert!(frozen.d_log_vars.as_slice().iter().all(|&v| v == 0.0));
        assert!(frozen.d_log_weights.iter().all(|&v| v == 0.0));
        assert!(live.d_means.max_abs() > 0.0);
    }

    #[test]
    fn responsibilities_examples() {
        let sym = MixtureDensity::new(
            Matrix::column_vector(&[-1.0, 1.0]),
            Matrix::column_vector(&[0.0, 0.0]),
            vec![0.5f64.ln(); 2],
        )
        .unwrap();
        let r = responsibilities(&[0.0], &sym).unwrap();
        assert_eq!(r.vector.values, vec![0.5, 0.5]);
        assert!(!r.underflow);

        let same = MixtureDensity::new(
            Matrix::column_vector(&[0.3, 0.3]),
            Matrix::column_vector(&[0.2, 0.2]),
            vec![0.9f64.ln(), 0.1f64.ln()],
        )
        .unwrap();
        let r = responsibilities(&[1.7], &same).unwrap();
        assert_abs_diff_eq!(r.vector.values[0], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(r.vector.values[1], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn responsibilities_match_density_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let m = random_mixture(&mut rng, 3, 2);
        let z = [0.4, -0.3];
        let dens: Vec<f64> = (0..3)
            .map(|i| m.log_weights[i].exp() * log_prob_diag(&z, &m.component(i)).unwrap().exp())
            .collect();
        let total: f64 = dens.iter().sum();
        let r = responsibilities(&z, &m).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(r.vector.values[i], dens[i] / total, epsilon = 1e-12);
        }
    }

    #[test]
    fn responsibilities_underflow_falls_back_to_uniform() {
        // exp(800) overflows, so every component log-density is −∞.
        let m = MixtureDensity::new(
            Matrix::column_vector(&[0.0, 1.0, 2.0]),
            Matrix::column_vector(&[-800.0, -800.0, -800.0]),
            vec![(1.0f64 / 3.0).ln(); 3],
        )
        .unwrap();
        let r = responsibilities(&[50.0], &m).unwrap();
        assert!(r.underflow);
        assert_eq!(r.vector, ResponsibilityVector::uniform(3));
    }

    #[test]
    fn batch_expected_responsibilities_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let m = random_mixture(&mut rng, 4, 2);
        let z = Matrix::from_rows(&[vec![0.2, 0.1]]);
        let single = batch_expected_responsibilities(&z, &m).unwrap();
        assert_eq!(single, responsibilities(z.row(0), &m).unwrap().vector);

        let far = MixtureDensity::new(
            Matrix::column_vector(&[-50.0, 50.0, 0.0]),
            Matrix::column_vector(&[0.0, 0.0, 0.0]),
            vec![(1.0f64 / 3.0).ln(); 3],
        )
        .unwrap();
        let zs = Matrix::column_vector(&[-50.0, 50.0]);
        let c = batch_expected_responsibilities(&zs, &far).unwrap();
        assert_abs_diff_eq!(c.values[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.values[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.values[2], 0.0, epsilon = 1e-12);

        let zs = standard_normal(&mut rng, 10, 2);
        let c = batch_expected_responsibilities(&zs, &m).unwrap();
        for k in 0..4 {
            let manual: f64 = (0..10)
                .map(|i| responsibilities(zs.row(i), &m).unwrap().vector.values[k])
                .sum::<f64>()
                / 10.0;
            assert_abs_diff_eq!(c.values[k], manual, epsilon = 1e-14);
        }
        assert!(batch_expected_responsibilities(&Matrix::zeros(0, 2), &m).is_err());
    }

    #[test]
    fn normalized_entropy_examples() {
        assert_abs_diff_eq!(normalized_entropy(&ResponsibilityVector::uniform(10)), 1.0, epsilon = 1e-12);
        let one_hot = ResponsibilityVector { values: vec![0.0, 1.0, 0.0] };
        assert_eq!(normalized_entropy(&one_hot), 0.0);
        let half = ResponsibilityVector { values: vec![0.5, 0.5, 0.0, 0.0] };
        assert_abs_diff_eq!(normalized_entropy(&half), 0.5, epsilon = 1e-15);
        assert_eq!(normalized_entropy(&ResponsibilityVector { values: vec![1.0] }), 0.0);
    }

    fn gaussian_strategy(d: usize) -> impl Strategy<Value = DiagGaussian> {
        (
            prop::collection::vec(-3.0..3.0f64, d),
            prop::collection::vec(-2.0..2.0f64, d),
        )
            .prop_map(|(mean, log_var)| DiagGaussian { mean, log_var })
    }

    proptest! {
        #[test]
        fn kl_closed_is_nonnegative(q in gaussian_strategy(3), p in gaussian_strategy(3)) {
            let kl = kl_closed(&q, &p).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_closed(&q, &q).unwrap().abs() <= 1e-9);
            if q != p {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn log_prob_mog_permutation_and_split_invariant(seed in 0u64..1000, z in prop::collection::vec(-3.0..3.0f64, 2)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mixture(&mut rng, 3, 2);
            let base = log_prob_mog(&z, &m).unwrap();
            let perm = [2usize, 0, 1];
            let permuted = MixtureDensity {
                means: m.means.select_rows(&perm),
                log_vars: m.log_vars.select_rows(&perm),
                log_weights: perm.iter().map(|&i| m.log_weights[i]).collect(),
            };
            prop_assert!((log_prob_mog(&z, &permuted).unwrap() - base).abs() < 1e-12);
            let mut lw = m.log_weights.clone();
            lw[0] -= 2f64.ln();
            lw.push(lw[0]);
            let split = MixtureDensity {
                means: m.means.vstack(&m.means.select_rows(&[0])),
                log_vars: m.log_vars.vstack(&m.log_vars.select_rows(&[0])),
                log_weights: lw,
            };
            prop_assert!((log_prob_mog(&z, &split).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn responsibilities_shift_invariant(scores in prop::collection::vec(-30.0..30.0f64, 1..8), shift in -500.0..500.0f64) {
            let a = responsibilities_from_scores(&scores);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let b = responsibilities_from_scores(&shifted);
            let total: f64 = a.vector.values.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (x, y) in a.vector.values.iter().zip(&b.vector.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
