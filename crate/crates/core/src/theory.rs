//! Closed-form gradients of the prior game, the piecewise optimal ELBO, a
//! brute-force discrete-game oracle, and a runnable verification suite.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distributions::{log_prob_diag, log_prob_mog, DiagGaussian, MixtureDensity};
use crate::error::{check_dim, Error, Result};
use crate::gradcheck::{central_difference_vec, relative_error_slices};
use crate::prior::{retention, soft_clip};
use crate::tensor::Matrix;

/// Upper end of the KL search in [`discrete_optimal_q_oracle`].
pub const K_MAX: f64 = 100.0;
/// Grid step of the KL search.
pub const K_STEP: f64 = 1e-4;

/// Unnormalized, strictly positive probability masses.
#[derive(Clone, Debug, PartialEq)]
pub struct MassVector {
    e: Vec<f64>,
}

impl MassVector {
    pub fn new(e: Vec<f64>) -> Result<Self> {
        if e.is_empty() {
            return Err(Error::Empty("mass vector"));
        }
        if let Some(bad) = e.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("masses must be positive, got {bad}")));
        }
        Ok(MassVector { e })
    }

    pub fn values(&self) -> &[f64] {
        &self.e
    }

    pub fn total(&self) -> f64 {
        self.e.iter().sum()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let s = self.total();
        self.e.iter().map(|v| v / s).collect()
    }
}

/// `H(e) = −Σ w_i log w_i` with `w = e / Σe`.
pub fn entropy_of_masses(e: &[f64]) -> f64 {
    let s: f64 = e.iter().sum();
    -e.iter()
        .map(|v| v / s)
        .filter(|&w| w > 0.0)
        .map(|w| w * w.ln())
        .sum::<f64>()
}

/// `A(e) = Σ (e_i / Σe)^{α+1}`.
pub fn alpha_order_of_masses(e: &[f64], alpha: f64) -> f64 {
    let s: f64 = e.iter().sum();
    e.iter().map(|v| (v / s).powf(alpha + 1.0)).sum()
}

/// `∂H/∂e_k = (1/Σe)·(Σ_i (e_i/Σe)·log e_i − log e_k)`.
pub fn entropy_mass_gradient(e: &MassVector) -> Vec<f64> {
    let s = e.total();
    let mean_log: f64 = e.values().iter().map(|v| v / s * v.ln()).sum();
    e.values().iter().map(|v| (mean_log - v.ln()) / s).collect()
}

/// `∂A/∂e_k = ((α+1)/(Σe)^{α+1})·(e_k^α − Σ_i (e_i/Σe)·e_i^α)`.
pub fn alpha_order_gradient(e: &MassVector, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha >= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 1, got {alpha}")));
    }
    let s = e.total();
    let weighted: f64 = e.values().iter().map(|v| v / s * v.powf(alpha)).sum();
    let scale = (alpha + 1.0) / s.powf(alpha + 1.0);
    Ok(e.values().iter().map(|v| scale * (v.powf(alpha) - weighted)).collect())
}

/// Component densities `N_i(z)` and their mixture responsibilities.
fn component_densities(z: &[f64], m: &MixtureDensity) -> Vec<f64> {
    (0..m.components())
        .map(|i| log_prob_diag(z, &m.component(i)).map(f64::exp).unwrap_or(0.0))
        .collect()
}

fn responsibilities_of(z: &[f64], m: &MixtureDensity) -> Vec<f64> {
    let w = m.weights();
    let dens = component_densities(z, m);
    let mix: Vec<f64> = w.iter().zip(&dens).map(|(a, b)| a * b).collect();
    let total: f64 = mix.iter().sum();
    mix.iter().map(|v| v / total).collect()
}

/// Gradient of `log q(z) − log p_λ(z)` with respect to `z`, computed directly
/// (`lhs`) and as the responsibility-weighted sum of unimodal gradients
/// (`rhs`).
pub fn kl_latent_gradient_decomposition(
    z: &[f64],
    q: &DiagGaussian,
    m: &MixtureDensity,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(q.dim(), z.len())?;
    check_dim(m.dim(), z.len())?;
    let d = z.len();
    let w = m.weights();
    let dens = component_densities(z, m);
    let p: f64 = w.iter().zip(&dens).map(|(a, b)| a * b).sum();
    let score_q: Vec<f64> = (0..d).map(|j| (q.mean[j] - z[j]) / q.log_var[j].exp()).collect();
    let score_i = |i: usize, j: usize| (m.means.get(i, j) - z[j]) / m.log_vars.get(i, j).exp();

    let mut lhs = score_q.clone();
    for (i, (wi, ni)) in w.iter().zip(&dens).enumerate() {
        for (j, l) in lhs.iter_mut().enumerate() {
            *l -= wi * ni * score_i(i, j) / p;
        }
    }

    let c = responsibilities_of(z, m);
    let mut rhs = vec![0.0; d];
    for (i, ci) in c.iter().enumerate() {
        for (j, r) in rhs.iter_mut().enumerate() {
            *r += ci * (score_q[j] - score_i(i, j));
        }
    }
    Ok((lhs, rhs))
}

/// Gradients of the single-sample KL integrand `−log p_λ(z)` with respect to
/// the prior means, standard deviations and unnormalized masses. The masses
/// are taken as the mixture weights, so `Σe = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorParamGradients {
    pub d_mu: Matrix,
    pub d_sigma: Matrix,
    pub d_e: Vec<f64>,
}

pub fn kl_prior_param_gradients(z: &[f64], m: &MixtureDensity) -> Result<PriorParamGradients> {
    check_dim(m.dim(), z.len())?;
    let (k, d) = (m.components(), m.dim());
    let c = responsibilities_of(z, m);
    let e = m.weights();
    let dens = component_densities(z, m);
    let total_e: f64 = e.iter().sum();
    let w: Vec<f64> = e.iter().map(|v| v / total_e).collect();
    let mixture: f64 = w.iter().zip(&dens).map(|(a, b)| a * b).sum();
    let unnormalized: f64 = e.iter().zip(&dens).map(|(a, b)| a * b).sum();

    let mut d_mu = Matrix::zeros(k, d);
    let mut d_sigma = Matrix::zeros(k, d);
    for i in 0..k {
        for j in 0..d {
            let var = m.log_vars.get(i, j).exp();
            let sigma = var.sqrt();
            let diff = z[j] - m.means.get(i, j);
            d_mu.set(i, j, -c[i] * diff / var);
            d_sigma.set(i, j, -c[i] * (diff * diff - var) / (var * sigma));
        }
    }
    let d_e = dens.iter().map(|n| (mixture - n) / unnormalized).collect();
    Ok(PriorParamGradients { d_mu, d_sigma, d_e })
}

/// A real number or `−∞`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtendedReal {
    NegInfinity,
    Finite(f64),
}

impl ExtendedReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            ExtendedReal::NegInfinity => None,
        }
    }

    /// `log x` for `x ≥ 0`.
    pub fn ln(x: f64) -> Self {
        if x == 0.0 {
            ExtendedReal::NegInfinity
        } else {
            ExtendedReal::Finite(x.ln())
        }
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedReal::NegInfinity => write!(f, "-inf"),
            ExtendedReal::Finite(v) => write!(f, "{v}"),
        }
    }
}

fn check_density_pair(p_data: f64, p_d: f64, alpha: f64) -> Result<()> {
    if !(p_data >= 0.0 && p_d >= 0.0 && p_data.is_finite() && p_d.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "densities must be finite and non-negative, got p_data={p_data}, p_d={p_d}"
        )));
    }
    if !(alpha >= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 1, got {alpha}")));
    }
    Ok(())
}

/// Optimal ELBO at a point with data density `p_data` and decoder density `p_d`.
pub fn optimal_elbo_piecewise(p_data: f64, p_d: f64, alpha: f64) -> Result<ExtendedReal> {
    check_density_pair(p_data, p_d, alpha)?;
    if p_data == 0.0 && p_d == 0.0 {
        return Err(Error::InvalidArgument(
            "both densities are zero: the point lies outside the domain".into(),
        ));
    }
    if p_data == 0.0 {
        return Ok(ExtendedReal::NegInfinity);
    }
    if p_d.powf(alpha + 1.0) > p_data {
        Ok(ExtendedReal::Finite((p_data / p_d).ln() / alpha))
    } else {
        Ok(ExtendedReal::ln(p_d))
    }
}

/// `∂G/∂k = −p_data + p_d^{α+1}·e^{−αk}` for the per-outcome contribution `G`.
pub fn contribution_slope(p_data: f64, p_d: f64, alpha: f64, k: f64) -> f64 {
    -p_data + p_d.powf(alpha + 1.0) * (-alpha * k).exp()
}

/// Categorical data and decoder distributions over `N` outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteGameInstance {
    pub p_data: Vec<f64>,
    pub p_d: Vec<f64>,
    pub alpha: f64,
}

impl DiscreteGameInstance {
    pub fn new(p_data: Vec<f64>, p_d: Vec<f64>, alpha: f64) -> Result<Self> {
        check_dim(p_data.len(), p_d.len())?;
        if p_data.is_empty() {
            return Err(Error::Empty("outcomes"));
        }
        for (name, p) in [("p_data", &p_data), ("p_d", &p_d)] {
            if p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("{name} has a negative entry")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("{name} sums to {s}, not 1")));
            }
        }
        if !(alpha >= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 1, got {alpha}")));
        }
        Ok(DiscreteGameInstance { p_data, p_d, alpha })
    }
}

/// Argmax over the KL grid `{0, K_STEP, …, K_MAX}` of
/// `p_data·(log p_d − k) − (1/α)·p_d^{α+1}·e^{−αk}` at one outcome.
pub fn discrete_optimal_q_oracle(g: &DiscreteGameInstance, outcome: usize) -> Result<f64> {
    if outcome >= g.p_data.len() {
        return Err(Error::InvalidArgument(format!(
            "outcome {outcome} out of range for {} outcomes",
            g.p_data.len()
        )));
    }
    Ok(optimal_kl_search(g.p_data[outcome], g.p_d[outcome], g.alpha, K_MAX, K_STEP))
}

/// Dense search behind [`discrete_optimal_q_oracle`]. The `p_data·log p_d`
/// term does not depend on `k` and is dropped.
pub fn optimal_kl_search(p_data: f64, p_d: f64, alpha: f64, k_max: f64, step: f64) -> f64 {
    let a = p_d.powf(alpha + 1.0) / alpha;
    let n = (k_max / step).round() as usize;
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..=n {
        let k = i as f64 * step;
        let v = -p_data * k - a * (-alpha * k).exp();
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Which mass functional a descent run minimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MassObjective {
    Entropy,
    AlphaOrder(f64),
}

impl MassObjective {
    pub fn value(self, e: &[f64]) -> f64 {
        match self {
            MassObjective::Entropy => entropy_of_masses(e),
            MassObjective::AlphaOrder(a) => alpha_order_of_masses(e, a),
        }
    }

    pub fn gradient(self, e: &MassVector) -> Vec<f64> {
        match self {
            MassObjective::Entropy => entropy_mass_gradient(e),
            MassObjective::AlphaOrder(a) => {
                alpha_order_gradient(e, a).expect("alpha validated by the caller")
            }
        }
    }
}

/// Smallest mass kept by the projection in [`mass_descent`].
pub const MASS_FLOOR: f64 = 1e-30;

/// Gradient descent on normalized masses with the closed-form gradient,
/// projected to `[MASS_FLOOR, ∞)` and rescaled to unit total (both
/// objectives are scale invariant). Returns the iterates, starting with the
/// normalized input. Stops early once `stop` holds.
pub fn mass_descent(
    e: &MassVector,
    objective: MassObjective,
    eta: f64,
    steps: usize,
    stop: impl Fn(&[f64]) -> bool,
) -> Vec<Vec<f64>> {
    let mut cur = e.normalized();
    let mut path = vec![cur.clone()];
    for _ in 0..steps {
        if stop(&cur) {
            break;
        }
        let grad = objective.gradient(&MassVector { e: cur.clone() });
        let mut next: Vec<f64> = cur
            .iter()
            .zip(&grad)
            .map(|(v, g)| (v - eta * g).max(MASS_FLOOR))
            .collect();
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        cur = next;
        path.push(cur.clone());
    }
    path
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Settings of [`run_theory_suite`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheorySuiteConfig {
    /// Relative error allowed between closed-form and finite-difference gradients.
    pub tolerance: f64,
    pub instances: usize,
    pub triples: usize,
    pub seed: u64,
}

impl Default for TheorySuiteConfig {
    fn default() -> Self {
        TheorySuiteConfig {
            tolerance: 1e-6,
            instances: 50,
            triples: 1000,
            seed: 0,
        }
    }
}

/// One line of the suite's pass/fail table.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryCheck {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed error, or the failing quantity for directional checks.
    pub worst: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheck>,
    pub seconds: f64,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{:<4} {:<34} cases={:<6} worst={:<12.3e} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.worst,
                c.detail
            ));
        }
        s.push_str(&format!("elapsed {:.2}s\n", self.seconds));
        s
    }
}

/// Finite-difference step used by the suite.
const FD_STEP: f64 = 1e-5;

fn random_masses<R: Rng>(rng: &mut R) -> Vec<f64> {
    let n = rng.random_range(2..=8);
    (0..n).map(|_| rng.random_range(0.05..3.0)).collect()
}

/// A random mixture with `M ∈ [1, 5]`, `D ∈ [1, 4]`, and a point near one of
/// its components.
pub fn random_mixture_instance<R: Rng>(rng: &mut R) -> (MixtureDensity, Vec<f64>) {
    let m = rng.random_range(1..=5);
    let d = rng.random_range(1..=4);
    let means = Matrix::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0));
    let log_vars = Matrix::from_fn(m, d, |_, _| rng.random_range(-1.5..1.0));
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
    let s: f64 = raw.iter().sum();
    let log_weights = raw.iter().map(|v| (v / s).ln()).collect();
    let anchor = rng.random_range(0..m);
    let z = (0..d)
        .map(|j| means.get(anchor, j) + rng.random_range(-1.5..1.5))
        .collect();
    let density = MixtureDensity::new(means, log_vars, log_weights).expect("valid random mixture");
    (density, z)
}

/// `−log p(z)` for a mixture given by means, standard deviations and
/// unnormalized masses.
fn neg_log_mixture(z: &[f64], means: &[f64], sigmas: &[f64], masses: &[f64]) -> f64 {
    let d = z.len();
    let s: f64 = masses.iter().sum();
    let p: f64 = masses
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut dens = e / s;
            for j in 0..d {
                let sd = sigmas[i * d + j];
                let u = (z[j] - means[i * d + j]) / sd;
                dens *= (-0.5 * u * u).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            }
            dens
        })
        .sum();
    -p.ln()
}

fn check_entropy_gradient<R: Rng>(rng: &mut R, cfg: &TheorySuiteConfig) -> TheoryCheck {
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.instances {
        let e = random_masses(rng);
        let closed = entropy_mass_gradient(&MassVector::new(e.clone()).unwrap());
        let fd = central_difference_vec(&e, FD_STEP, entropy_of_masses);
        worst = worst.max(relative_error_slices(&closed, &fd));
    }
    fd_check("entropy-mass gradient", worst, cfg)
}

fn fd_check(name: &'static str, worst: f64, cfg: &TheorySuiteConfig) -> TheoryCheck {
    TheoryCheck {
        name,
        passed: worst <= cfg.tolerance,
        cases: cfg.instances,
        worst,
        detail: format!("max rel err vs central differences (tol {:e})", cfg.tolerance),
    }
}

fn check_alpha_gradient<R: Rng>(rng: &mut R, cfg: &TheorySuiteConfig) -> TheoryCheck {
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.instances {
        let e = random_masses(rng);
        let alpha = rng.random_range(1.0..4.0);
        let closed = alpha_order_gradient(&MassVector::new(e.clone()).unwrap(), alpha).unwrap();
        let fd = central_difference_vec(&e, FD_STEP, |v| alpha_order_of_masses(v, alpha));
        worst = worst.max(relative_error_slices(&closed, &fd));
    }
    fd_check("alpha-order gradient", worst, cfg)
}

fn check_kl_decomposition<R: Rng>(rng: &mut R, cfg: &TheorySuiteConfig) -> TheoryCheck {
    let mut worst: f64 = 0.0;
    let mut identity: f64 = 0.0;
    for _ in 0..cfg.instances {
        let (m, z) = random_mixture_instance(rng);
        let d = z.len();
        let q = DiagGaussian::new(
            (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..d).map(|_| rng.random_range(-1.5..1.0)).collect(),
        )
        .unwrap();
        let (lhs, rhs) = kl_latent_gradient_decomposition(&z, &q, &m).unwrap();
        let fd = central_difference_vec(&z, FD_STEP, |v| {
            log_prob_diag(v, &q).unwrap() - log_prob_mog(v, &m).unwrap()
        });
        identity = identity.max(lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        worst = worst
            .max(relative_error_slices(&lhs, &fd))
            .max(relative_error_slices(&rhs, &fd));
    }
    TheoryCheck {
        name: "KL latent decomposition",
        passed: worst <= cfg.tolerance && identity <= 1e-10,
        cases: cfg.instances,
        worst,
        detail: format!(
            "max rel err vs central differences (tol {:e}); max |lhs - rhs| = {identity:.2e}",
            cfg.tolerance
        ),
    }
}

fn check_prior_param_gradients<R: Rng>(rng: &mut R, cfg: &TheorySuiteConfig) -> TheoryCheck {
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.instances {
        let (m, z) = random_mixture_instance(rng);
        let grads = kl_prior_param_gradients(&z, &m).unwrap();
        let means = m.means.as_slice().to_vec();
        let sigmas: Vec<f64> = m.log_vars.as_slice().iter().map(|v| (0.5 * v).exp()).collect();
        let masses = m.weights();
        let fd_mu = central_difference_vec(&means, FD_STEP, |v| neg_log_mixture(&z, v, &sigmas, &masses));
        let fd_sigma = central_difference_vec(&sigmas, FD_STEP, |v| neg_log_mixture(&z, &means, v, &masses));
        let fd_e = central_difference_vec(&masses, FD_STEP, |v| neg_log_mixture(&z, &means, &sigmas, v));
        worst = worst
            .max(relative_error_slices(grads.d_mu.as_slice(), &fd_mu))
            .max(relative_error_slices(grads.d_sigma.as_slice(), &fd_sigma))
            .max(relative_error_slices(&grads.d_e, &fd_e));
    }
    fd_check("prior-parameter KL gradients", worst, cfg)
}

fn check_entropy_descent<R: Rng>(rng: &mut R, cfg: &TheorySuiteConfig) -> TheoryCheck {
    let mut failures = 0;
    let mut worst_max: f64 = 1.0;
    for _ in 0..cfg.instances {
        let e = MassVector::new(random_masses(rng)).unwrap();
        let path = mass_descent(&e, MassObjective::Entropy, 0.02, 20_000, |w| max_of(w) > 0.999);
        let decreasing = path
            .windows(2)
            .all(|p| entropy_of_masses(&p[1]) < entropy_of_masses(&p[0]));
        let top = max_of(path.last().unwrap());
        worst_max = worst_max.min(top);
        if !decreasing || top <= 0.999 {
            failures += 1;
        }
    }
    TheoryCheck {
        name: "entropy descent toward one-hot",
        passed: failures == 0,
        cases: cfg.instances,
        worst: 1.0 - worst_max,
        detail: format!("{failures} failing runs; worst is 1 - final max mass"),
    }
}

fn check_alpha_descent<R: Rng>(rng: &mut R, cfg: &TheorySuiteConfig) -> TheoryCheck {
    let mut failures = 0;
    let mut worst_spread: f64 = 0.0;
    for _ in 0..cfg.instances {
        let e = MassVector::new(random_masses(rng)).unwrap();
        let alpha = [1.0, 2.0, 4.0][rng.random_range(0..3)];
        let obj = MassObjective::AlphaOrder(alpha);
        let path = mass_descent(&e, obj, 0.05, 50_000, |w| max_of(w) - min_of(w) < 1e-3);
        let decreasing = path.windows(2).all(|p| obj.value(&p[1]) < obj.value(&p[0]));
        let last = path.last().unwrap();
        let spread = max_of(last) - min_of(last);
        worst_spread = worst_spread.max(spread);
        if !decreasing || spread >= 1e-3 {
            failures += 1;
        }
    }
    TheoryCheck {
        name: "alpha-order descent toward uniform",
        passed: failures == 0,
        cases: cfg.instances,
        worst: worst_spread,
        detail: format!("{failures} failing runs; worst is final max - min mass"),
    }
}

fn check_boundary_continuity<R: Rng>(rng: &mut R, cfg: &TheorySuiteConfig) -> TheoryCheck {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for &alpha in &[1.0, 2.0, 4.0] {
        for _ in 0..cfg.instances {
            let p_d: f64 = rng.random_range(0.01..0.99);
            let boundary = p_d.powf(alpha + 1.0);
            let h = 1e-9 * boundary;
            let below = optimal_elbo_piecewise(boundary - h, p_d, alpha).unwrap().finite().unwrap();
            let above = optimal_elbo_piecewise(boundary + h, p_d, alpha).unwrap().finite().unwrap();
            let middle = (boundary / p_d).ln() / alpha;
            worst = worst
                .max((below - above).abs())
                .max((middle - p_d.ln()).abs());
            cases += 1;
        }
    }
    TheoryCheck {
        name: "optimal ELBO boundary continuity",
        passed: worst <= 1e-8,
        cases,
        worst,
        detail: "max jump across the branch boundary".into(),
    }
}

fn check_oracle_agreement<R: Rng>(rng: &mut R, cfg: &TheorySuiteConfig) -> TheoryCheck {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..cfg.triples {
        let alpha = rng.random_range(1.0..4.0);
        let p_d = rng.random_range(0.01..1.0);
        let p_data = if i % 50 == 0 { 0.0 } else { rng.random_range(1e-4..1.0) };
        let game = DiscreteGameInstance::new(vec![p_data, 1.0 - p_data], vec![p_d, 1.0 - p_d], alpha).unwrap();
        let k = discrete_optimal_q_oracle(&game, 0).unwrap();
        let w = optimal_elbo_piecewise(p_data, p_d, alpha).unwrap();
        match w {
            ExtendedReal::NegInfinity => {
                if k != K_MAX {
                    failures += 1;
                }
            }
            ExtendedReal::Finite(v) => {
                let err = (p_d.ln() - k - v).abs();
                worst = worst.max(err);
                if err > K_STEP {
                    failures += 1;
                }
            }
        }
    }
    TheoryCheck {
        name: "optimal ELBO vs discrete oracle",
        passed: failures == 0,
        cases: cfg.triples,
        worst,
        detail: format!("{failures} disagreements; tol one grid step ({K_STEP:e})"),
    }
}

fn check_soft_clip_retention() -> TheoryCheck {
    let (rho, k) = (0.85, 10.0);
    let ranges = [(-1.0, 1.0), (-5.0, 2.0), (0.0, 0.1), (-10.0, 10.0), (-3.0, -2.9)];
    let mut worst: f64 = 1.0;
    for &(a, b) in &ranges {
        let kept = (soft_clip(b, a, b, k).unwrap() - soft_clip(a, a, b, k).unwrap()) / (b - a);
        worst = worst.min(kept);
    }
    TheoryCheck {
        name: "soft-clip retention (0.85, K=10)",
        passed: worst >= rho && retention(k) >= rho,
        cases: ranges.len(),
        worst,
        detail: format!("worst retained fraction; closed form {:.6}", retention(k)),
    }
}

/// Runs every check of the module and times the run.
pub fn run_theory_suite(cfg: &TheorySuiteConfig) -> TheoryReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let checks = vec![
        check_entropy_gradient(&mut rng, cfg),
        check_alpha_gradient(&mut rng, cfg),
        check_kl_decomposition(&mut rng, cfg),
        check_prior_param_gradients(&mut rng, cfg),
        check_entropy_descent(&mut rng, cfg),
        check_alpha_descent(&mut rng, cfg),
        check_boundary_continuity(&mut rng, cfg),
        check_oracle_agreement(&mut rng, cfg),
        check_soft_clip_retention(),
    ];
    TheoryReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}
