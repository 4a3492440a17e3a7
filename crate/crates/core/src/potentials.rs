//! Dual potentials, the quotient norms on `ℝⁿ⁺ᵐ/∼⊕`, max-affine potentials with
//! Laguerre-cell lookup, and their log-sum-exp smoothings.
//!
//! Two potentials are `⊕`-equivalent when they differ by `(r𝟏, -r𝟏)`. Every dual
//! quantity depends on `(α, β)` only through the sums `αᵢ + βⱼ`, so distances are
//! measured on that `n × m` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl DualPotentials {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        Self { alpha, beta }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self::new(vec![0.0; n], vec![0.0; m])
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn m(&self) -> usize {
        self.beta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).all(|v| v.is_finite())
    }

    /// `(α + r𝟏, β - r𝟏)`, a member of the same `⊕`-class.
    pub fn shifted(&self, r: f64) -> Self {
        Self::new(
            self.alpha.iter().map(|a| a + r).collect(),
            self.beta.iter().map(|b| b - r).collect(),
        )
    }

    /// Canonical class representative with `mean(α) = mean(β)`.
    pub fn gauge_fixed(&self) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let r = 0.5 * (mean(&self.beta) - mean(&self.alpha));
        self.shifted(r)
    }

    pub fn check_shape(&self, n: usize, m: usize) -> Result<()> {
        if self.n() != n || self.m() != m {
            return Err(Error::ShapeMismatch(format!(
                "potentials are {}+{}, problem is {n}+{m}",
                self.n(),
                self.m()
            )));
        }
        Ok(())
    }

    fn difference(&self, other: &Self) -> Result<(Vec<f64>, Vec<f64>)> {
        other.check_shape(self.n(), self.m())?;
        let da = self.alpha.iter().zip(&other.alpha).map(|(p, q)| p - q);
        let db = self.beta.iter().zip(&other.beta).map(|(p, q)| p - q);
        Ok((da.collect(), db.collect()))
    }
}

/// `‖(Δαᵢ + Δβⱼ)ᵢⱼ‖₂` for `Δ = p - q`.
pub fn norm_l2_oplus(p: &DualPotentials, q: &DualPotentials) -> Result<f64> {
    let (da, db) = p.difference(q)?;
    let sum: f64 = da
        .iter()
        .flat_map(|a| db.iter().map(move |b| (a + b) * (a + b)))
        .sum();
    Ok(sum.sqrt())
}

/// `maxᵢⱼ |Δαᵢ + Δβⱼ|`, evaluated as `max(max Δα + max Δβ, -(min Δα + min Δβ))`.
pub fn norm_linf_oplus(p: &DualPotentials, q: &DualPotentials) -> Result<f64> {
    let (da, db) = p.difference(q)?;
    let (amax, amin) = extrema(&da);
    let (bmax, bmin) = extrema(&db);
    Ok((amax + bmax).max(-(amin + bmin)).max(0.0))
}

fn extrema(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &x| {
            (hi.max(x), lo.min(x))
        })
}

/// Affine score `⟨x, pᵢ⟩ + shiftᵢ` for every support point, written into `out`.
#[inline]
pub fn affine_scores(x: &[f64], points: &[f64], shift: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, s) in out.iter_mut().enumerate() {
        *s = dot(x, &points[i * d..(i + 1) * d]) + shift[i];
    }
}

/// Index and value of the largest entry; ties go to the lowest index.
#[inline]
pub fn argmax(scores: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut val = scores[0];
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > val {
            best = i;
            val = s;
        }
    }
    (best, val)
}

/// `f(x, α) = maxᵢ ⟨x, xᵢ⟩ + αᵢ` over row-major `points`.
pub fn f_maxaffine(x: &[f64], points: &[f64], alpha: &[f64]) -> f64 {
    max_affine(x, points, alpha).1
}

/// `g(y, β)`; the same function as [`f_maxaffine`] with the roles of the marginals swapped.
pub fn g_maxaffine(y: &[f64], points: &[f64], beta: &[f64]) -> f64 {
    max_affine(y, points, beta).1
}

/// Zero-based Laguerre cell containing `x`; ties are broken towards the lowest index.
pub fn cell_index(x: &[f64], points: &[f64], alpha: &[f64]) -> usize {
    max_affine(x, points, alpha).0
}

fn max_affine(x: &[f64], points: &[f64], shift: &[f64]) -> (usize, f64) {
    assert_eq!(points.len(), x.len() * shift.len(), "points/potential shape");
    let d = x.len();
    let mut best = 0;
    let mut val = f64::NEG_INFINITY;
    for (i, s) in shift.iter().enumerate() {
        let v = dot(x, &points[i * d..(i + 1) * d]) + s;
        if v > val {
            best = i;
            val = v;
        }
    }
    (best, val)
}

/// `log φ_λ(x, α) = λ⁻¹ log Σᵢ exp(λ(⟨x, xᵢ⟩ + αᵢ))`.
pub fn log_phi_lambda(x: &[f64], points: &[f64], alpha: &[f64], lambda: f64) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    let mut scores = vec![0.0; alpha.len()];
    affine_scores(x, points, alpha, &mut scores);
    soft_max(&scores, lambda)
}

/// `log ψ_λ(y, β)`.
pub fn log_psi_lambda(y: &[f64], points: &[f64], beta: &[f64], lambda: f64) -> f64 {
    log_phi_lambda(y, points, beta, lambda)
}

/// `λ⁻¹ log Σ exp(λ sᵢ)` with the maximum factored out.
#[inline]
pub fn soft_max(scores: &[f64], lambda: f64) -> f64 {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail: f64 = scores.iter().map(|s| (lambda * (s - top)).exp()).sum();
    top + tail.ln() / lambda
}
