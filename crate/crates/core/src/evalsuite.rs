//! 2D metrics (gnELBO, histogram KL and JSD), responsibility and
//! cross-entropy diagnostics, and figures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{component_scores_value, log_normal_coord, logsumexp};
use crate::data2d::{dataset_rng, BoundingBox, Dataset};
use crate::distributions::{
    batch_expected_responsibilities, normalized_entropy, standard_normal, ResponsibilityVector,
};
use crate::error::{check_dim, Error, Result};
use crate::objective::Models;
use crate::tensor::Matrix;

/// Rows per parallel work item.
const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub grid_bins: usize,
    pub hist_bins: usize,
    pub epsilon: f64,
    pub hist_samples: usize,
    pub t_eval: usize,
    pub heldout: usize,
    /// Batch for the responsibility and cross-entropy diagnostics.
    pub diag_batch: usize,
    pub t_ce: usize,
    /// Multiplies the metric triple in side-by-side tables only.
    pub report_scale: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid_bins: 120,
            hist_bins: 100,
            epsilon: 1e-10,
            hist_samples: 500_000,
            t_eval: 10,
            heldout: 10_000,
            diag_batch: 4096,
            t_ce: 10,
            report_scale: 1.0,
            seed: 1234,
        }
    }
}

/// Metrics of one model on one dataset, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub gnelbo: f64,
    pub hist_kl: f64,
    pub hist_jsd: f64,
    pub resp_entropy_norm: f64,
    /// False for a unimodal prior, where the entropy is defined as 0.
    pub resp_applicable: bool,
    pub ce_diag: f64,
    pub ce_stderr: f64,
    pub real_samples: usize,
    pub gen_samples: usize,
    pub heldout: usize,
    pub grid_bins: usize,
    pub hist_bins: usize,
    pub epsilon: f64,
    pub t_eval: usize,
}

const REPORT_KEYS: [&str; 14] = [
    "gnelbo",
    "hist_kl",
    "hist_jsd",
    "resp_entropy_norm",
    "resp_applicable",
    "ce_diag",
    "ce_stderr",
    "real_samples",
    "gen_samples",
    "heldout",
    "grid_bins",
    "hist_bins",
    "epsilon",
    "t_eval",
];

impl EvalReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("gnelbo", self.gnelbo.to_string()),
            ("hist_kl", self.hist_kl.to_string()),
            ("hist_jsd", self.hist_jsd.to_string()),
            ("resp_entropy_norm", self.resp_entropy_norm.to_string()),
            ("resp_applicable", self.resp_applicable.to_string()),
            ("ce_diag", self.ce_diag.to_string()),
            ("ce_stderr", self.ce_stderr.to_string()),
            ("real_samples", self.real_samples.to_string()),
            ("gen_samples", self.gen_samples.to_string()),
            ("heldout", self.heldout.to_string()),
            ("grid_bins", self.grid_bins.to_string()),
            ("hist_bins", self.hist_bins.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("t_eval", self.t_eval.to_string()),
        ]
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed report line `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("report is missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("report field `{k}` is not a number")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("report field `{k}` is not an integer")))
        };
        for k in REPORT_KEYS {
            get(k)?;
        }
        Ok(EvalReport {
            gnelbo: num("gnelbo")?,
            hist_kl: num("hist_kl")?,
            hist_jsd: num("hist_jsd")?,
            resp_entropy_norm: num("resp_entropy_norm")?,
            resp_applicable: get("resp_applicable")? == "true",
            ce_diag: num("ce_diag")?,
            ce_stderr: num("ce_stderr")?,
            real_samples: int("real_samples")?,
            gen_samples: int("gen_samples")?,
            heldout: int("heldout")?,
            grid_bins: int("grid_bins")?,
            hist_bins: int("hist_bins")?,
            epsilon: num("epsilon")?,
            t_eval: int("t_eval")?,
        })
    }

    /// `(gnelbo, hist_kl, hist_jsd)` multiplied by `scale`.
    pub fn scaled_triple(&self, scale: f64) -> (f64, f64, f64) {
        (self.gnelbo * scale, self.hist_kl * scale, self.hist_jsd * scale)
    }
}

/// Independent seeded stream for work item `chunk`.
fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1_000 + chunk as u64);
    r
}

/// Unweighted ELBO per row of `x` with `t` posterior draws shared by the
/// reconstruction and KL terms. The Gaussian likelihood's constant is kept.
pub fn elbo_values(models: &Models, x: &Matrix, t: usize, seed: u64) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    check_dim(models.encoder.data_dim(), x.cols())?;
    let density = models.prior.export_density();
    let n = x.rows();
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let parts: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|&c| {
            let rows: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
            let xc = x.select_rows(&rows);
            let (mu, lv) = models.encoder.encode(&xc)?;
            let d = mu.cols();
            let eps = standard_normal(&mut chunk_rng(seed, c), rows.len() * t, d);
            let z = Matrix::from_fn(rows.len() * t, d, |r, j| {
                let i = r / t;
                mu.get(i, j) + (0.5 * lv.get(i, j)).exp() * eps.get(r, j)
            });
            let xr = models.decoder.decode(&z)?;
            let scores = component_scores_value(&z, &density.means, &density.log_vars, &density.log_weights);
            let dx = xc.cols();
            let mut out = Vec::with_capacity(rows.len());
            for i in 0..rows.len() {
                let mut acc = 0.0;
                for s in 0..t {
                    let r = i * t + s;
                    let mut log_lik = 0.0;
                    for j in 0..dx {
                        log_lik += log_normal_coord(xc.get(i, j) - xr.get(r, j), 0.0);
                    }
                    let mut log_q = 0.0;
                    for j in 0..d {
                        log_q += log_normal_coord(z.get(r, j) - mu.get(i, j), lv.get(i, j));
                    }
                    acc += log_lik - log_q + logsumexp(scores.row(r));
                }
                out.push(acc / t as f64);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(n);
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

/// Cell-centre grid over a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub bins: usize,
    pub bbox: BoundingBox,
}

impl GridSpec {
    pub fn cell_area(&self) -> f64 {
        self.bbox.area() / (self.bins * self.bins) as f64
    }

    /// Cell centres, row-major in `(ix, iy)`.
    pub fn centres(&self) -> Matrix {
        let b = self.bins;
        let (dx, dy) = self.steps();
        Matrix::from_fn(b * b, 2, |r, c| {
            let (ix, iy) = (r / b, r % b);
            if c == 0 {
                self.bbox.x.0 + (ix as f64 + 0.5) * dx
            } else {
                self.bbox.y.0 + (iy as f64 + 0.5) * dy
            }
        })
    }

    fn steps(&self) -> (f64, f64) {
        (
            (self.bbox.x.1 - self.bbox.x.0) / self.bins as f64,
            (self.bbox.y.1 - self.bbox.y.0) / self.bins as f64,
        )
    }

    /// Index of the cell containing `p`, clamped to the box.
    pub fn cell_of(&self, p: &[f64]) -> usize {
        let (dx, dy) = self.steps();
        let last = self.bins as f64 - 1.0;
        let ix = ((p[0] - self.bbox.x.0) / dx).floor().clamp(0.0, last) as usize;
        let iy = ((p[1] - self.bbox.y.0) / dy).floor().clamp(0.0, last) as usize;
        ix * self.bins + iy
    }
}

/// `ℓ(g) = W(g) − log(Σ_g' exp W(g') · ΔA)` for per-cell values `w`.
pub fn grid_log_density(w: &[f64], cell_area: f64) -> Result<Vec<f64>> {
    let z = logsumexp(w);
    if !z.is_finite() {
        return Err(Error::NonFinite("grid ELBO normalizer"));
    }
    let norm = z + cell_area.ln();
    Ok(w.iter().map(|v| v - norm).collect())
}

/// `−mean ℓ(nearest cell)` over `heldout`.
pub fn grid_cross_entropy(log_density: &[f64], grid: &GridSpec, heldout: &Matrix) -> Result<f64> {
    if heldout.rows() == 0 {
        return Err(Error::Empty("held-out samples"));
    }
    check_dim(grid.bins * grid.bins, log_density.len())?;
    let total: f64 = (0..heldout.rows()).map(|r| log_density[grid.cell_of(heldout.row(r))]).sum();
    Ok(-total / heldout.rows() as f64)
}

/// gnELBO: the grid-normalized ELBO's cross-entropy on held-out reals.
pub fn grid_normalized_elbo(
    models: &Models,
    grid: &GridSpec,
    t_eval: usize,
    heldout: &Matrix,
    seed: u64,
) -> Result<f64> {
    if grid.bins < 50 {
        return Err(Error::InvalidArgument(format!("grid needs >= 50 bins per side, got {}", grid.bins)));
    }
    let w = elbo_values(models, &grid.centres(), t_eval, seed)?;
    let l = grid_log_density(&w, grid.cell_area())?;
    grid_cross_entropy(&l, grid, heldout)
}

/// Normalized `bins × bins` histogram with `epsilon` added to every cell.
/// Points outside the box count towards the nearest edge cell.
pub fn histogram2d(samples: &Matrix, bbox: BoundingBox, bins: usize, epsilon: f64) -> Result<Vec<f64>> {
    if samples.rows() == 0 {
        return Err(Error::Empty("histogram samples"));
    }
    check_dim(2, samples.cols())?;
    let grid = GridSpec { bins, bbox };
    let mut h = vec![0.0; bins * bins];
    for r in 0..samples.rows() {
        let p = samples.row(r);
        if p[0].is_finite() && p[1].is_finite() {
            h[grid.cell_of(p)] += 1.0;
        }
    }
    let n: f64 = h.iter().sum();
    let total = n + epsilon * h.len() as f64;
    if !(total > 0.0) {
        return Err(Error::Empty("finite histogram samples"));
    }
    Ok(h.into_iter().map(|c| (c + epsilon) / total).collect())
}

/// `KL(p‖q)` for normalized histograms.
pub fn kl_hist(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - b.ln()) } else { 0.0 })
        .sum()
}

/// `0.5·KL(P‖M) + 0.5·KL(Q‖M)` with `M = (P+Q)/2`; symmetric by
/// construction.
pub fn jsd_hist(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a.ln() - m.ln()) } else { 0.0 };
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * term(a, m) + 0.5 * term(b, m)
        })
        .sum()
}

/// `(KL(real‖gen), JSD(real, gen))` on `bins × bins` histograms.
pub fn histogram_divergences(
    real: &Matrix,
    gen: &Matrix,
    bbox: BoundingBox,
    bins: usize,
    epsilon: f64,
) -> Result<(f64, f64)> {
    let p = histogram2d(real, bbox, bins, epsilon)?;
    let q = histogram2d(gen, bbox, bins, epsilon)?;
    Ok((kl_hist(&p, &q), jsd_hist(&p, &q)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponsibilityReport {
    pub entropy_norm: f64,
    pub responsibilities: ResponsibilityVector,
    /// Modes with `c_i < 1/(10M)`.
    pub inactive: Vec<usize>,
    pub applicable: bool,
}

/// Batch-expected responsibilities of one posterior draw per real sample.
pub fn responsibility_report(models: &Models, real: &Matrix, seed: u64) -> Result<ResponsibilityReport> {
    let density = models.prior.export_density();
    let m = density.components();
    if m == 1 {
        return Ok(ResponsibilityReport {
            entropy_norm: 0.0,
            responsibilities: ResponsibilityVector { values: vec![1.0] },
            inactive: Vec::new(),
            applicable: false,
        });
    }
    let (mu, lv) = models.encoder.encode(real)?;
    let eps = standard_normal(&mut chunk_rng(seed, 0), real.rows(), mu.cols());
    let z = Matrix::from_fn(real.rows(), mu.cols(), |i, j| {
        mu.get(i, j) + (0.5 * lv.get(i, j)).exp() * eps.get(i, j)
    });
    let c = batch_expected_responsibilities(&z, &density)?;
    let cut = 1.0 / (10.0 * m as f64);
    let inactive = c.values.iter().enumerate().filter(|(_, &v)| v < cut).map(|(i, _)| i).collect();
    Ok(ResponsibilityReport {
        entropy_norm: normalized_entropy(&c),
        responsibilities: c,
        inactive,
        applicable: true,
    })
}

/// Monte-Carlo estimate of `−E_x E_{q(z|x)} log p_λ(z)` and its standard
/// error.
pub fn aggregated_ce_diagnostic(models: &Models, real: &Matrix, t: usize, seed: u64) -> Result<(f64, f64)> {
    if real.rows() == 0 {
        return Err(Error::Empty("cross-entropy batch"));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let density = models.prior.export_density();
    let (mu, lv) = models.encoder.encode(real)?;
    let d = mu.cols();
    let eps = standard_normal(&mut chunk_rng(seed, 1), real.rows() * t, d);
    let z = Matrix::from_fn(real.rows() * t, d, |r, j| {
        let i = r / t;
        mu.get(i, j) + (0.5 * lv.get(i, j)).exp() * eps.get(r, j)
    });
    let scores = component_scores_value(&z, &density.means, &density.log_vars, &density.log_weights);
    // One value per real sample so the error reflects both sources of noise.
    let per_x: Vec<f64> = (0..real.rows())
        .map(|i| -(0..t).map(|s| logsumexp(scores.row(i * t + s))).sum::<f64>() / t as f64)
        .collect();
    let n = per_x.len() as f64;
    let mean = per_x.iter().sum::<f64>() / n;
    let var = if per_x.len() > 1 {
        per_x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, (var / n).sqrt()))
}

/// Decoder means at `n` prior samples.
pub fn generate(models: &Models, n: usize, seed: u64) -> Result<Matrix> {
    let mut rng = chunk_rng(seed, 2);
    let (z, _) = models.prior.sample(n, &mut rng);
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK * 8)).collect();
    let parts: Vec<Result<Matrix>> = chunks
        .par_iter()
        .map(|&c| {
            let rows: Vec<usize> = (c * CHUNK * 8..((c + 1) * CHUNK * 8).min(n)).collect();
            models.decoder.decode(&z.select_rows(&rows))
        })
        .collect();
    let mut out: Option<Matrix> = None;
    for p in parts {
        let p = p?;
        out = Some(match out {
            None => p,
            Some(o) => o.vstack(&p),
        });
    }
    out.ok_or(Error::Empty("generated samples"))
}

/// The full report for `models` on `dataset`.
pub fn evaluate(models: &Models, dataset: Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let bbox = dataset.bounding_box();
    let mut data = dataset_rng(dataset, cfg.seed);
    let heldout = dataset.sample(cfg.heldout, &mut data);
    let real = dataset.sample(cfg.hist_samples, &mut data);
    let diag = dataset.sample(cfg.diag_batch, &mut data);
    let grid = GridSpec {
        bins: cfg.grid_bins,
        bbox,
    };
    let gnelbo = grid_normalized_elbo(models, &grid, cfg.t_eval, &heldout, cfg.seed)?;
    let gen = generate(models, cfg.hist_samples, cfg.seed)?;
    let (hist_kl, hist_jsd) = histogram_divergences(&real, &gen, bbox, cfg.hist_bins, cfg.epsilon)?;
    let resp = responsibility_report(models, &diag, cfg.seed)?;
    let (ce_diag, ce_stderr) = aggregated_ce_diagnostic(models, &diag, cfg.t_ce, cfg.seed)?;
    Ok(EvalReport {
        gnelbo,
        hist_kl,
        hist_jsd,
        resp_entropy_norm: resp.entropy_norm,
        resp_applicable: resp.applicable,
        ce_diag,
        ce_stderr,
        real_samples: cfg.hist_samples,
        gen_samples: cfg.hist_samples,
        heldout: cfg.heldout,
        grid_bins: cfg.grid_bins,
        hist_bins: cfg.hist_bins,
        epsilon: cfg.epsilon,
        t_eval: cfg.t_eval,
    })
}

pub const PLOT_SIZE: u32 = 512;
const MAX_MARKER_RADIUS: f64 = 12.0;
const MIN_MARKER_RADIUS: f64 = 2.0;

/// One prior-mean marker of the latent plot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
    pub radius: f64,
}

/// Paths written by [`emit_plots`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlotFiles {
    pub real: PathBuf,
    pub generated: PathBuf,
    pub latent: PathBuf,
    pub markers: PathBuf,
}

struct Canvas {
    img: RgbImage,
    bbox: BoundingBox,
}

impl Canvas {
    fn new(bbox: BoundingBox) -> Self {
        Canvas {
            img: RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, Rgb([255, 255, 255])),
            bbox,
        }
    }

    fn pixel(&self, x: f64, y: f64) -> Option<(i64, i64)> {
        let s = PLOT_SIZE as f64;
        let px = (x - self.bbox.x.0) / (self.bbox.x.1 - self.bbox.x.0) * s;
        let py = (self.bbox.y.1 - y) / (self.bbox.y.1 - self.bbox.y.0) * s;
        (px.is_finite() && py.is_finite()).then_some((px.floor() as i64, py.floor() as i64))
    }

    fn put(&mut self, px: i64, py: i64, colour: [u8; 3], strength: f64) {
        if px < 0 || py < 0 || px >= PLOT_SIZE as i64 || py >= PLOT_SIZE as i64 {
            return;
        }
        let p = self.img.get_pixel_mut(px as u32, py as u32);
        for c in 0..3 {
            let v = p.0[c] as f64;
            p.0[c] = (v + (colour[c] as f64 - v) * strength).round() as u8;
        }
    }

    fn scatter(&mut self, pts: &Matrix, colour: [u8; 3]) {
        for r in 0..pts.rows() {
            if let Some((px, py)) = self.pixel(pts.get(r, 0), pts.get(r, 1)) {
                self.put(px, py, colour, 0.35);
            }
        }
    }

    fn disc(&mut self, x: f64, y: f64, radius: f64, colour: [u8; 3]) {
        let Some((cx, cy)) = self.pixel(x, y) else { return };
        let r = radius.ceil() as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy) as f64) <= radius * radius {
                    self.put(cx + dx, cy + dy, colour, 1.0);
                }
            }
        }
    }
}

/// Square box around the central 98% of `pts` and all `extra` points.
fn latent_box(pts: &Matrix, extra: &Matrix) -> BoundingBox {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in 0..2 {
        let mut col: Vec<f64> = (0..pts.rows()).map(|r| pts.get(r, c)).filter(|v| v.is_finite()).collect();
        col.sort_by(f64::total_cmp);
        if !col.is_empty() {
            lo[c] = col[col.len() / 100];
            hi[c] = col[col.len() - 1 - col.len() / 100];
        }
        for r in 0..extra.rows() {
            lo[c] = lo[c].min(extra.get(r, c));
            hi[c] = hi[c].max(extra.get(r, c));
        }
        if !(lo[c] < hi[c]) {
            lo[c] = lo[c].min(-1.0);
            hi[c] = hi[c].max(1.0);
        }
    }
    let half = 0.55 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let (mx, my) = (0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]));
    BoundingBox {
        x: (mx - half, mx + half),
        y: (my - half, my + half),
    }
}

/// Marker radii grow with `sqrt(w_i / max w)`.
pub fn markers(prior_means: &Matrix, weights: &[f64]) -> Vec<Marker> {
    let wmax = weights.iter().cloned().fold(0.0, f64::max);
    (0..prior_means.rows())
        .map(|i| {
            let frac = if wmax > 0.0 { (weights[i] / wmax).sqrt() } else { 1.0 };
            Marker {
                x: prior_means.get(i, 0),
                y: prior_means.get(i, 1),
                weight: weights[i],
                radius: MIN_MARKER_RADIUS + (MAX_MARKER_RADIUS - MIN_MARKER_RADIUS) * frac,
            }
        })
        .collect()
}

pub fn write_markers(path: &Path, ms: &[Marker]) -> Result<()> {
    let mut s = String::from("# x y weight radius\n");
    for m in ms {
        let _ = writeln!(s, "{} {} {} {}", m.x, m.y, m.weight, m.radius);
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_markers(path: &Path) -> Result<Vec<Marker>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::InvalidArgument(format!("bad marker line `{l}`"))))
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(Error::InvalidArgument(format!("bad marker line `{l}`")));
            }
            Ok(Marker {
                x: v[0],
                y: v[1],
                weight: v[2],
                radius: v[3],
            })
        })
        .collect()
}

/// Writes `real.png`, `generated.png`, `latent.png` and the marker sidecar
/// `latent_markers.txt`. The latent plot shows the first two latent
/// coordinates of posterior draws with one marker per prior mean.
pub fn emit_plots(models: &Models, dataset: Dataset, out_dir: &Path, n: usize, seed: u64) -> Result<PlotFiles> {
    fs::create_dir_all(out_dir)?;
    let bbox = dataset.bounding_box();
    let real = dataset.sample(n, &mut dataset_rng(dataset, seed));
    let gen = generate(models, n, seed)?;
    let files = PlotFiles {
        real: out_dir.join("real.png"),
        generated: out_dir.join("generated.png"),
        latent: out_dir.join("latent.png"),
        markers: out_dir.join("latent_markers.txt"),
    };
    let mut c = Canvas::new(bbox);
    c.scatter(&real, [20, 60, 160]);
    c.img.save(&files.real)?;
    let mut c = Canvas::new(bbox);
    c.scatter(&gen, [180, 40, 40]);
    c.img.save(&files.generated)?;

    let (mu, lv) = models.encoder.encode(&real)?;
    let eps = standard_normal(&mut chunk_rng(seed, 3), real.rows(), mu.cols());
    let z = Matrix::from_fn(real.rows(), mu.cols(), |i, j| {
        mu.get(i, j) + (0.5 * lv.get(i, j)).exp() * eps.get(i, j)
    });
    let density = models.prior.export_density();
    let z2 = plane(&z);
    let means2 = plane(&density.means);
    let ms = markers(&means2, &density.weights());
    let mut c = Canvas::new(latent_box(&z2, &means2));
    c.scatter(&z2, [40, 140, 60]);
    for m in &ms {
        c.disc(m.x, m.y, m.radius, [0, 0, 0]);
    }
    c.img.save(&files.latent)?;
    write_markers(&files.markers, &ms)?;
    Ok(files)
}

/// First two columns, padding a one-dimensional latent with zeros.
fn plane(z: &Matrix) -> Matrix {
    Matrix::from_fn(z.rows(), 2, |r, c| if c < z.cols() { z.get(r, c) } else { 0.0 })
}
