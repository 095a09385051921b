//! Seeded generators for the 2D toy densities.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const GAUSSIAN_RADIUS: f64 = 2.0;
pub const GAUSSIAN_STD: f64 = 0.2;
pub const SPIRAL_TURNS: f64 = 3.0 * PI;
pub const SPIRAL_NOISE: f64 = 0.1;
pub const RING_RADII: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
pub const RING_NOISE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dataset {
    EightGaussian,
    TwoSpirals,
    Checkerboard,
    Rings,
}

/// Axis-aligned box `[x_lo, x_hi] × [y_lo, y_hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl BoundingBox {
    pub fn square(half: f64) -> Self {
        BoundingBox {
            x: (-half, half),
            y: (-half, half),
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p[0] >= self.x.0 && p[0] <= self.x.1 && p[1] >= self.y.0 && p[1] <= self.y.1
    }

    pub fn area(&self) -> f64 {
        (self.x.1 - self.x.0) * (self.y.1 - self.y.0)
    }
}

impl Dataset {
    pub const ALL: [Dataset; 4] = [
        Dataset::EightGaussian,
        Dataset::TwoSpirals,
        Dataset::Checkerboard,
        Dataset::Rings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::EightGaussian => "8gaussian",
            Dataset::TwoSpirals => "2spirals",
            Dataset::Checkerboard => "checkerboard",
            Dataset::Rings => "rings",
        }
    }

    pub fn bounding_box(self) -> BoundingBox {
        match self {
            Dataset::Rings => BoundingBox::square(4.5),
            _ => BoundingBox::square(4.0),
        }
    }

    /// One representative point per mode: Gaussian centres, arm midpoints,
    /// cell centres, or a point on each ring.
    pub fn mode_points(self) -> Matrix {
        let rows: Vec<Vec<f64>> = match self {
            Dataset::EightGaussian => (0..8)
                .map(|k| {
                    let a = k as f64 * PI / 4.0;
                    vec![GAUSSIAN_RADIUS * a.cos(), GAUSSIAN_RADIUS * a.sin()]
                })
                .collect(),
            Dataset::TwoSpirals => {
                let theta = SPIRAL_TURNS * 0.5f64.sqrt();
                let r = theta / 3.0;
                let p = vec![r * theta.cos(), r * theta.sin()];
                vec![p.clone(), vec![-p[0], -p[1]]]
            }
            Dataset::Checkerboard => black_cells()
                .map(|(i, j)| vec![-3.0 + 2.0 * i as f64, -3.0 + 2.0 * j as f64])
                .collect(),
            Dataset::Rings => RING_RADII.iter().map(|&r| vec![r, 0.0]).collect(),
        };
        Matrix::from_rows(&rows)
    }

    /// Draws one point.
    pub fn sample_point<R: Rng + ?Sized>(self, rng: &mut R) -> [f64; 2] {
        match self {
            Dataset::EightGaussian => {
                let k = rng.random_range(0..8) as f64;
                let a = k * PI / 4.0;
                let nx: f64 = StandardNormal.sample(rng);
                let ny: f64 = StandardNormal.sample(rng);
                [
                    GAUSSIAN_RADIUS * a.cos() + GAUSSIAN_STD * nx,
                    GAUSSIAN_RADIUS * a.sin() + GAUSSIAN_STD * ny,
                ]
            }
            Dataset::TwoSpirals => {
                let u: f64 = rng.random();
                let theta = u.sqrt() * SPIRAL_TURNS;
                let n: f64 = StandardNormal.sample(rng);
                let r = theta / 3.0 + SPIRAL_NOISE * n;
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                [sign * r * theta.cos(), sign * r * theta.sin()]
            }
            Dataset::Checkerboard => {
                let (i, j) = black_cells().nth(rng.random_range(0..8)).unwrap();
                let x = -4.0 + 2.0 * i as f64 + 2.0 * rng.random::<f64>();
                let y = -4.0 + 2.0 * j as f64 + 2.0 * rng.random::<f64>();
                [x, y]
            }
            Dataset::Rings => {
                let r0 = RING_RADII[rng.random_range(0..RING_RADII.len())];
                let a = 2.0 * PI * rng.random::<f64>();
                let n: f64 = StandardNormal.sample(rng);
                let r = r0 + RING_NOISE * n;
                [r * a.cos(), r * a.sin()]
            }
        }
    }

    /// `n × 2` samples from `rng`.
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Matrix {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            data.extend_from_slice(&self.sample_point(rng));
        }
        Matrix::from_vec(n, 2, data)
    }

    /// The true density at `p`, where it has a closed form.
    pub fn density(self, p: &[f64]) -> Option<f64> {
        let (x, y) = (p[0], p[1]);
        match self {
            Dataset::EightGaussian => {
                let s2 = GAUSSIAN_STD * GAUSSIAN_STD;
                let total: f64 = (0..8)
                    .map(|k| {
                        let a = k as f64 * PI / 4.0;
                        let dx = x - GAUSSIAN_RADIUS * a.cos();
                        let dy = y - GAUSSIAN_RADIUS * a.sin();
                        (-(dx * dx + dy * dy) / (2.0 * s2)).exp() / (2.0 * PI * s2)
                    })
                    .sum();
                Some(total / 8.0)
            }
            Dataset::Checkerboard => {
                if !(-4.0..4.0).contains(&x) || !(-4.0..4.0).contains(&y) {
                    return Some(0.0);
                }
                let i = ((x + 4.0) / 2.0).floor() as i64;
                let j = ((y + 4.0) / 2.0).floor() as i64;
                Some(if (i + j) % 2 == 0 { 1.0 / 32.0 } else { 0.0 })
            }
            Dataset::Rings => {
                let r = (x * x + y * y).sqrt();
                if r == 0.0 {
                    return Some(0.0);
                }
                let s = RING_NOISE;
                let radial: f64 = RING_RADII
                    .iter()
                    .map(|&r0| (-(r - r0) * (r - r0) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt()))
                    .sum::<f64>()
                    / RING_RADII.len() as f64;
                Some(radial / (2.0 * PI * r))
            }
            Dataset::TwoSpirals => None,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::UnknownDataset(s.to_string()))
    }
}

fn black_cells() -> impl Iterator<Item = (usize, usize)> {
    (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).filter(|(i, j)| (i + j) % 2 == 0)
}

/// A generator for `(dataset, seed)`. Each dataset draws from its own ChaCha
/// stream, so datasets sharing a seed do not share random numbers.
pub fn dataset_rng(dataset: Dataset, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + Dataset::ALL.iter().position(|&d| d == dataset).unwrap() as u64);
    rng
}

/// `n × 2` samples, fully determined by `(name, n, seed)`.
pub fn sample_dataset(name: &str, n: usize, seed: u64) -> Result<Matrix> {
    let d: Dataset = name.parse()?;
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    Ok(d.sample(n, &mut dataset_rng(d, seed)))
}
