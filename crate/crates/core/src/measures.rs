//! Discrete marginals, the correlated Gaussian reference measure, and seeded sampling.
//!
//! The reference `γ` is the law of `(X, Y)` with
//! `X = μ₀ + Z₀` and `Y = μ₁ + ρ Z₀ + √(1-ρ²) Z₁` for independent standard normals
//! `Z₀, Z₁` in `ℝᵈ`. Its covariance is `[[I, ρI], [ρI, I]]`, so the density has a
//! closed form and every block is isotropic.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Deviation from total mass one that is silently renormalized away.
const RENORMALIZE_TOL: f64 = 1e-9;

/// Deterministic generator for `(seed, stream)`. Distinct streams are independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A finitely supported probability measure `Σ wᵢ δ_{pᵢ}` on `ℝᵈ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    /// Row-major `len × dim`.
    points: Vec<f64>,
    weights: Vec<f64>,
    half_sq_norms: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidMeasure("no support points".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::InvalidMeasure("points have dimension 0".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite coordinate".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidMeasure(format!(
                "weights must be positive, found {w}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let weights = if total == 1.0 {
            weights
        } else {
            weights.into_iter().map(|w| w / total).collect()
        };
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(Error::InvalidMeasure(format!(
                        "support points {j} and {i} coincide"
                    )));
                }
            }
        }
        let half_sq_norms = points.iter().map(|p| 0.5 * dot(p, p)).collect();
        Ok(Self {
            dim,
            points: points.into_iter().flatten().collect(),
            weights,
            half_sq_norms,
        })
    }

    /// Equal weights `1/len` on the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.0 / points.len().max(1) as f64;
        let weights = vec![w; points.len()];
        Self::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major coordinates of all support points.
    pub fn flat_points(&self) -> &[f64] {
        &self.points
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.points.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `½‖pᵢ‖²` for every support point.
    pub fn half_sq_norms(&self) -> &[f64] {
        &self.half_sq_norms
    }
}

/// Correlated Gaussian reference measure with unit isotropic blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianReference {
    dim: usize,
    mean_x: Vec<f64>,
    mean_y: Vec<f64>,
    corr: f64,
    log_norm: f64,
    inv_one_minus_c2: f64,
}

impl GaussianReference {
    pub fn new(mean_x: Vec<f64>, mean_y: Vec<f64>, corr: f64) -> Result<Self> {
        let dim = mean_x.len();
        if dim == 0 {
            return Err(Error::InvalidReference("dimension 0".into()));
        }
        if mean_y.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: mean_y.len(),
            });
        }
        if mean_x.iter().chain(&mean_y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidReference("non-finite mean".into()));
        }
        // |corr| < 1 is exactly positive definiteness of [[I, cI], [cI, I]].
        if !(corr.is_finite() && corr.abs() < 1.0) {
            return Err(Error::InvalidReference(format!(
                "correlation {corr} outside (-1, 1)"
            )));
        }
        let one_minus_c2 = 1.0 - corr * corr;
        let d = dim as f64;
        Ok(Self {
            dim,
            log_norm: -d * (2.0 * PI).ln() - 0.5 * d * one_minus_c2.ln(),
            inv_one_minus_c2: 1.0 / one_minus_c2,
            mean_x,
            mean_y,
            corr,
        })
    }

    /// Standard product reference `N(0, I) ⊗ N(0, I)`.
    pub fn standard(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![0.0; dim], 0.0).expect("valid standard reference")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean_x(&self) -> &[f64] {
        &self.mean_x
    }

    pub fn mean_y(&self) -> &[f64] {
        &self.mean_y
    }

    pub fn corr(&self) -> f64 {
        self.corr
    }

    /// Upper bound of the density, attained at the mean.
    pub fn max_density(&self) -> f64 {
        self.log_norm.exp()
    }

    pub fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "x has wrong dimension");
        assert_eq!(y.len(), self.dim, "y has wrong dimension");
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for k in 0..self.dim {
            let u = x[k] - self.mean_x[k];
            let v = y[k] - self.mean_y[k];
            xx += u * u;
            xy += u * v;
            yy += v * v;
        }
        let quad = (xx - 2.0 * self.corr * xy + yy) * self.inv_one_minus_c2;
        self.log_norm - 0.5 * quad
    }

    /// Joint density `ρ(x, y)`.
    pub fn density(&self, x: &[f64], y: &[f64]) -> f64 {
        self.log_density(x, y).exp()
    }

    /// `exp(-½‖x‖² - ½‖y‖²) ρ(x, y)`.
    pub fn weighted_density(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.log_density(x, y) - 0.5 * dot(x, x) - 0.5 * dot(y, y)).exp()
    }

    /// `n` i.i.d. draws from the reference, reproducible from `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> SampleBatch {
        self.sample_stream(n, seed, 0)
    }

    /// Like [`sample`](Self::sample) but on an independent sub-stream, used for
    /// per-iteration batch refreshes.
    pub fn sample_stream(&self, n: usize, seed: u64, stream: u64) -> SampleBatch {
        assert!(n >= 1, "batch size must be positive");
        let d = self.dim;
        let mut rng = stream_rng(seed, stream);
        let s = (1.0 - self.corr * self.corr).sqrt();
        let mut xs = Vec::with_capacity(n * d);
        let mut ys = Vec::with_capacity(n * d);
        let mut z0 = vec![0.0; d];
        for _ in 0..n {
            for z in z0.iter_mut() {
                *z = rng.sample(StandardNormal);
            }
            for k in 0..d {
                let z1: f64 = rng.sample(StandardNormal);
                xs.push(self.mean_x[k] + z0[k]);
                ys.push(self.mean_y[k] + self.corr * z0[k] + s * z1);
            }
        }
        SampleBatch {
            dim: d,
            xs,
            ys,
            seed,
            stream,
        }
    }
}

/// A Monte Carlo batch of reference draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    seed: u64,
    stream: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.xs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.dim..(k + 1) * self.dim]
    }

    pub fn y(&self, k: usize) -> &[f64] {
        &self.ys[k * self.dim..(k + 1) * self.dim]
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
}

/// Support points drawn uniformly from `[-1, 1]ᵈ` (for `μ`) and `[-2, 1]ᵈ` (for `ν`),
/// with uniform weights.
pub fn generate_marginals(
    n: usize,
    m: usize,
    dim: usize,
    seed: u64,
) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    if n == 0 || m == 0 || dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "sizes must be positive (n={n}, m={m}, dim={dim})"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let mut box_points = |count: usize, lo: f64, hi: f64| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| (0..dim).map(|_| rng.random_range(lo..hi)).collect())
            .collect()
    };
    let xs = box_points(n, -1.0, 1.0);
    let ys = box_points(m, -2.0, 1.0);
    Ok((DiscreteMeasure::uniform(xs)?, DiscreteMeasure::uniform(ys)?))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
