//! Monte Carlo estimators for the dual objective and everything derived from it.
//!
//! Two samplers are provided:
//!
//! * [`SampleBatch`] draws from the reference `γ` itself. This is the plain estimator:
//!   each integral is a batch mean of `exp(ε⁻¹(f + g - ½‖x‖² - ½‖y‖²))` times a cell
//!   indicator.
//! * [`LocalizedKernel`] importance-samples each product cell `Aᵢ × Bⱼ` from
//!   `N(xᵢ, εI) ⊗ N(yⱼ, εI)`. On that cell the integrand is a Gaussian bump of width
//!   `√ε` centred at `(xᵢ, yⱼ)`, so the ratio integrand / proposal reduces to
//!   `exp(sᵢⱼ/ε) (2πε)ᵈ ρ(X, Y)` and stays bounded for every `ε`. The plain estimator
//!   cannot resolve those bumps once `εᵈ ≪ 1/N`.
//!
//! All reductions are split into fixed-size chunks and summed in chunk order, so
//! results do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measures::{dot, SampleBatch};
use crate::potentials::{affine_scores, argmax, DualPotentials};
use crate::problem::Problem;

/// Exponents above this are clamped and the estimate is flagged.
pub const MAX_EXPONENT: f64 = 700.0;

/// Effective sample size below which importance-weighted estimates are flagged.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 10.0;

const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Set when an exponent was clamped or the weights degenerated.
    pub flagged: bool,
}

impl Estimate {
    /// `√(se₁² + se₂²)`.
    pub fn combined_se(&self, other: &Estimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

/// Gradient of a dual objective with respect to `(α, β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGradient {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl DualGradient {
    /// Accumulated with `hypot`, so gradients near `f64::MAX` from clamped exponents keep a
    /// finite norm.
    pub fn norm_l2(&self) -> f64 {
        self.alpha.iter().chain(&self.beta).fold(0.0, |acc, g| acc.hypot(*g))
    }
}

/// One evaluation of `U^ε` with its gradient and the marginal masses behind it.
#[derive(Debug, Clone)]
pub struct DualEvaluation {
    pub objective: Estimate,
    pub gradient: DualGradient,
    /// `Σⱼ πᵢⱼ` estimates (the `μ`-side cell masses).
    pub row_mass: Vec<Estimate>,
    /// `Σᵢ πᵢⱼ` estimates.
    pub col_mass: Vec<Estimate>,
    pub total_mass: Estimate,
}

impl DualEvaluation {
    pub fn overflow(&self) -> bool {
        self.objective.flagged
    }

    /// `‖(a - row mass, b - column mass)‖₂`, i.e. `ε‖∇U^ε‖₂`. Scale-free stationarity measure.
    pub fn marginal_residual(&self, prob: &Problem) -> f64 {
        let ra = prob.mu.weights().iter().zip(&self.row_mass);
        let rb = prob.nu.weights().iter().zip(&self.col_mass);
        ra.chain(rb)
            .map(|(w, e)| (w - e.value).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Joint masses of products of Laguerre cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMassMatrix {
    pub n: usize,
    pub m: usize,
    /// Row-major `n × m`.
    pub masses: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub total: f64,
    pub row_sums: Vec<Estimate>,
    pub col_sums: Vec<Estimate>,
    pub total_mass: Estimate,
    pub flagged: bool,
}

impl CellMassMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.masses[i * self.m + j]
    }
}

/// Self-normalized importance estimates of `E_π[½‖X - x_{cell(X)}‖²]`, the same for `Y`,
/// and of `E_π[log dπ/dγ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportCosts {
    pub cost_x: Estimate,
    pub cost_y: Estimate,
    pub entropy: Estimate,
    pub effective_samples: f64,
}

/// Smoothed first-order integrals at `(α, β)`:
/// `Fᵢ = ∫ φ_λ^{1-λ} ψ_λ exp(λ⟨x, xᵢ⟩ + λαᵢ) dγ̃` and `Gⱼ` symmetrically. At a fixed point of
/// the Sinkhorn-type map `Fᵢ = aᵢ` and `Gⱼ = bⱼ`. The integrals without the `exp(λαᵢ)`
/// factor are `exp(ln Fᵢ - λαᵢ)`; see [`SinkhornIntegrals::log_unscaled_alpha`].
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornIntegrals {
    pub lambda: f64,
    pub alpha: Vec<Estimate>,
    pub beta: Vec<Estimate>,
    /// `U_λ(α, β)`, the smoothed dual objective.
    pub objective: Estimate,
}

impl SinkhornIntegrals {
    pub fn log_unscaled_alpha(&self, pots: &DualPotentials) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&pots.alpha)
            .map(|(e, a)| e.value.ln() - self.lambda * a)
            .collect()
    }

    pub fn log_unscaled_beta(&self, pots: &DualPotentials) -> Vec<f64> {
        self.beta
            .iter()
            .zip(&pots.beta)
            .map(|(e, b)| e.value.ln() - self.lambda * b)
            .collect()
    }
}

/// `ε⁻¹ (Σ aᵢ(αᵢ + ½‖xᵢ‖²) + Σ bⱼ(βⱼ + ½‖yⱼ‖²))`, the linear part of `U^ε`.
///
/// At a stationary point of `U^ε` this equals the primal optimum `I^ε(π^{*,ε})` because the
/// integral term is then exactly 1. Away from stationarity it is not a primal value.
pub fn primal_value_from_duals(prob: &Problem, pots: &DualPotentials, eps: f64) -> f64 {
    let side = |w: &[f64], half: &[f64], v: &[f64]| -> f64 {
        w.iter()
            .zip(half)
            .zip(v)
            .map(|((w, h), v)| w * (v + h))
            .sum()
    };
    let lin = side(prob.mu.weights(), prob.mu.half_sq_norms(), &pots.alpha)
        + side(prob.nu.weights(), prob.nu.half_sq_norms(), &pots.beta);
    lin / eps
}

// ---------------------------------------------------------------------------
// moment accumulation

/// Per-unit sums. A unit is one reference draw (plain sampler) or one shared pair of
/// base normals (localized sampler). Every quantity is a mean over units.
#[derive(Debug, Clone)]
struct Moments {
    units: usize,
    t: f64,
    t2: f64,
    rows: Vec<f64>,
    rows2: Vec<f64>,
    cols: Vec<f64>,
    cols2: Vec<f64>,
    cells: Vec<f64>,
    cells2: Vec<f64>,
    cost_x: RatioSums,
    cost_y: RatioSums,
    log_w: RatioSums,
    overflow: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct RatioSums {
    num: f64,
    num2: f64,
    num_den: f64,
}

impl RatioSums {
    #[inline]
    fn add(&mut self, num: f64, den: f64) {
        self.num += num;
        self.num2 += num * num;
        self.num_den += num * den;
    }

    fn merge(&mut self, o: &RatioSums) {
        self.num += o.num;
        self.num2 += o.num2;
        self.num_den += o.num_den;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Want {
    cells: bool,
    costs: bool,
}

impl Moments {
    fn new(n: usize, m: usize, want: Want) -> Self {
        let cells = if want.cells { n * m } else { 0 };
        Self {
            units: 0,
            t: 0.0,
            t2: 0.0,
            rows: vec![0.0; n],
            rows2: vec![0.0; n],
            cols: vec![0.0; m],
            cols2: vec![0.0; m],
            cells: vec![0.0; cells],
            cells2: vec![0.0; cells],
            cost_x: RatioSums::default(),
            cost_y: RatioSums::default(),
            log_w: RatioSums::default(),
            overflow: false,
        }
    }

    fn merge(mut self, o: &Moments) -> Self {
        self.units += o.units;
        self.t += o.t;
        self.t2 += o.t2;
        for (a, b) in [
            (&mut self.rows, &o.rows),
            (&mut self.rows2, &o.rows2),
            (&mut self.cols, &o.cols),
            (&mut self.cols2, &o.cols2),
            (&mut self.cells, &o.cells),
            (&mut self.cells2, &o.cells2),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.cost_x.merge(&o.cost_x);
        self.cost_y.merge(&o.cost_y);
        self.log_w.merge(&o.log_w);
        self.overflow |= o.overflow;
        self
    }

    fn mean(&self, sum: f64, sum2: f64, seed: u64) -> Estimate {
        let k = self.units as f64;
        let mean = sum / k;
        let var = (sum2 / k - mean * mean).max(0.0);
        Estimate {
            value: mean,
            std_error: (var / k).sqrt(),
            batch_size: self.units,
            seed,
            flagged: self.overflow,
        }
    }

    /// Ratio estimator `Σ num / Σ t` with its delta-method standard error.
    fn ratio(&self, r: &RatioSums, seed: u64) -> Estimate {
        let ratio = r.num / self.t;
        let resid = (r.num2 - 2.0 * ratio * r.num_den + ratio * ratio * self.t2).max(0.0);
        Estimate {
            value: ratio,
            std_error: resid.sqrt() / self.t,
            batch_size: self.units,
            seed,
            flagged: self.overflow || self.effective_samples() < MIN_EFFECTIVE_SAMPLES,
        }
    }

    fn effective_samples(&self) -> f64 {
        if self.t2 > 0.0 {
            self.t * self.t / self.t2
        } else {
            0.0
        }
    }

    fn evaluation(&self, prob: &Problem, pots: &DualPotentials, eps: f64, seed: u64) -> DualEvaluation {
        let total = self.mean(self.t, self.t2, seed);
        let lin = primal_value_from_duals(prob, pots, eps);
        let objective = Estimate {
            value: lin - total.value + 1.0,
            ..total
        };
        let row_mass: Vec<Estimate> = (0..self.rows.len())
            .map(|i| self.mean(self.rows[i], self.rows2[i], seed))
            .collect();
        let col_mass: Vec<Estimate> = (0..self.cols.len())
            .map(|j| self.mean(self.cols[j], self.cols2[j], seed))
            .collect();
        let grad = |w: &[f64], mass: &[Estimate]| -> Vec<f64> {
            w.iter().zip(mass).map(|(w, e)| (w - e.value) / eps).collect()
        };
        DualEvaluation {
            objective,
            gradient: DualGradient {
                alpha: grad(prob.mu.weights(), &row_mass),
                beta: grad(prob.nu.weights(), &col_mass),
            },
            row_mass,
            col_mass,
            total_mass: total,
        }
    }

    fn cell_matrix(&self, seed: u64) -> CellMassMatrix {
        let (n, m) = (self.rows.len(), self.cols.len());
        let est: Vec<Estimate> = (0..n * m)
            .map(|c| self.mean(self.cells[c], self.cells2[c], seed))
            .collect();
        let masses: Vec<f64> = est.iter().map(|e| e.value).collect();
        CellMassMatrix {
            n,
            m,
            total: masses.iter().sum(),
            std_errors: est.iter().map(|e| e.std_error).collect(),
            masses,
            row_sums: (0..n).map(|i| self.mean(self.rows[i], self.rows2[i], seed)).collect(),
            col_sums: (0..m).map(|j| self.mean(self.cols[j], self.cols2[j], seed)).collect(),
            total_mass: self.mean(self.t, self.t2, seed),
            flagged: self.overflow,
        }
    }

    fn costs(&self, seed: u64) -> TransportCosts {
        TransportCosts {
            cost_x: self.ratio(&self.cost_x, seed),
            cost_y: self.ratio(&self.cost_y, seed),
            entropy: self.ratio(&self.log_w, seed),
            effective_samples: self.effective_samples(),
        }
    }
}

fn chunked<F>(units: usize, n: usize, m: usize, want: Want, body: F) -> Moments
where
    F: Fn(usize, &mut Moments) + Sync,
{
    let chunks: Vec<Moments> = (0..units.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Moments::new(n, m, want);
            for k in c * CHUNK..((c + 1) * CHUNK).min(units) {
                body(k, &mut acc);
            }
            acc.units = ((c + 1) * CHUNK).min(units) - c * CHUNK;
            acc
        })
        .collect();
    chunks
        .iter()
        .fold(Moments::new(n, m, want), |acc, c| acc.merge(c))
}

#[inline]
fn clamp_exponent(e: f64, overflow: &mut bool) -> f64 {
    if e > MAX_EXPONENT {
        *overflow = true;
        MAX_EXPONENT
    } else {
        e
    }
}

// ---------------------------------------------------------------------------
// plain reference-batch estimators

fn batch_moments(prob: &Problem, pots: &DualPotentials, eps: f64, batch: &SampleBatch, want: Want) -> Moments {
    let (n, m) = (prob.n(), prob.m());
    assert_eq!(pots.n(), n, "alpha has wrong length");
    assert_eq!(pots.m(), m, "beta has wrong length");
    assert_eq!(batch.dim(), prob.dim(), "batch dimension");
    assert!(eps > 0.0, "eps must be positive");
    let xp = prob.mu.flat_points();
    let yp = prob.nu.flat_points();
    chunked(batch.len(), n, m, want, |k, acc| {
        let (x, y) = (batch.x(k), batch.y(k));
        let mut sx = [0.0; 64];
        let mut sy = [0.0; 64];
        let (i, fx, j, gy) = if n <= 64 && m <= 64 {
            affine_scores(x, xp, &pots.alpha, &mut sx[..n]);
            affine_scores(y, yp, &pots.beta, &mut sy[..m]);
            let (i, fx) = argmax(&sx[..n]);
            let (j, gy) = argmax(&sy[..m]);
            (i, fx, j, gy)
        } else {
            let mut vx = vec![0.0; n];
            let mut vy = vec![0.0; m];
            affine_scores(x, xp, &pots.alpha, &mut vx);
            affine_scores(y, yp, &pots.beta, &mut vy);
            let (i, fx) = argmax(&vx);
            let (j, gy) = argmax(&vy);
            (i, fx, j, gy)
        };
        let expo = clamp_exponent(
            (fx + gy - 0.5 * dot(x, x) - 0.5 * dot(y, y)) / eps,
            &mut acc.overflow,
        );
        let w = expo.exp();
        acc.t += w;
        acc.t2 += w * w;
        acc.rows[i] += w;
        acc.rows2[i] += w * w;
        acc.cols[j] += w;
        acc.cols2[j] += w * w;
        if want.cells {
            acc.cells[i * m + j] += w;
            acc.cells2[i * m + j] += w * w;
        }
        if want.costs {
            let half_dist = |z: &[f64], p: &[f64]| -> f64 {
                0.5 * z.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            };
            let d = x.len();
            acc.cost_x.add(w * half_dist(x, &xp[i * d..(i + 1) * d]), w);
            acc.cost_y.add(w * half_dist(y, &yp[j * d..(j + 1) * d]), w);
            acc.log_w.add(w * expo, w);
        }
    })
}

/// `U^ε(α, β)`, its gradient, and the marginal cell masses on a reference batch.
pub fn evaluate_eps(prob: &Problem, pots: &DualPotentials, eps: f64, batch: &SampleBatch) -> DualEvaluation {
    let want = Want {
        cells: false,
        costs: false,
    };
    batch_moments(prob, pots, eps, batch, want).evaluation(prob, pots, eps, batch.seed())
}

/// Batch estimate of `U(α, β)`.
pub fn dual_objective(prob: &Problem, pots: &DualPotentials, batch: &SampleBatch) -> Estimate {
    dual_objective_eps(prob, pots, 1.0, batch)
}

/// Batch gradient of `U(α, β)`. The cell indicator uses the lowest-index tie-break.
pub fn dual_gradient(prob: &Problem, pots: &DualPotentials, batch: &SampleBatch) -> DualGradient {
    dual_gradient_eps(prob, pots, 1.0, batch)
}

pub fn dual_objective_eps(prob: &Problem, pots: &DualPotentials, eps: f64, batch: &SampleBatch) -> Estimate {
    evaluate_eps(prob, pots, eps, batch).objective
}

pub fn dual_gradient_eps(prob: &Problem, pots: &DualPotentials, eps: f64, batch: &SampleBatch) -> DualGradient {
    evaluate_eps(prob, pots, eps, batch).gradient
}

/// Batch estimate of `πᵢⱼ = ∫_{Aᵢ×Bⱼ} exp(ε⁻¹(f + g - ½‖x‖² - ½‖y‖²)) dγ`.
pub fn cell_mass_matrix(prob: &Problem, pots: &DualPotentials, eps: f64, batch: &SampleBatch) -> CellMassMatrix {
    let want = Want {
        cells: true,
        costs: false,
    };
    batch_moments(prob, pots, eps, batch, want).cell_matrix(batch.seed())
}

/// Importance-weighted transport costs of the two marginals of `π^ε` to `μ` and `ν`,
/// plus the relative entropy `H(π^ε|γ)` as the weighted mean of log-weights.
/// Meaningful only at (approximately) stationary potentials.
pub fn marginal_transport_cost(
    prob: &Problem,
    pots: &DualPotentials,
    eps: f64,
    batch: &SampleBatch,
) -> TransportCosts {
    let want = Want {
        cells: false,
        costs: true,
    };
    batch_moments(prob, pots, eps, batch, want).costs(batch.seed())
}

/// First-order integrals of the smoothed objective `U_λ` (see [`SinkhornIntegrals`]).
pub fn sinkhorn_integrals(
    prob: &Problem,
    pots: &DualPotentials,
    lambda: f64,
    batch: &SampleBatch,
) -> SinkhornIntegrals {
    let (n, m) = (prob.n(), prob.m());
    assert_eq!(pots.n(), n, "alpha has wrong length");
    assert_eq!(pots.m(), m, "beta has wrong length");
    assert!(lambda > 0.0, "lambda must be positive");
    let xp = prob.mu.flat_points();
    let yp = prob.nu.flat_points();
    let want = Want {
        cells: false,
        costs: false,
    };
    let acc = chunked(batch.len(), n, m, want, |k, acc| {
        let (x, y) = (batch.x(k), batch.y(k));
        let mut sx = vec![0.0; n];
        let mut sy = vec![0.0; m];
        affine_scores(x, xp, &pots.alpha, &mut sx);
        affine_scores(y, yp, &pots.beta, &mut sy);
        let lphi = softmax_in_place(&mut sx, lambda);
        let lpsi = softmax_in_place(&mut sy, lambda);
        let expo = clamp_exponent(lphi + lpsi - 0.5 * dot(x, x) - 0.5 * dot(y, y), &mut acc.overflow);
        let e = expo.exp();
        acc.t += e;
        acc.t2 += e * e;
        for (i, w) in sx.iter().enumerate() {
            let v = w * e;
            acc.rows[i] += v;
            acc.rows2[i] += v * v;
        }
        for (j, w) in sy.iter().enumerate() {
            let v = w * e;
            acc.cols[j] += v;
            acc.cols2[j] += v * v;
        }
    });
    let seed = batch.seed();
    let total = acc.mean(acc.t, acc.t2, seed);
    let lin = primal_value_from_duals(prob, pots, 1.0);
    SinkhornIntegrals {
        lambda,
        alpha: (0..n).map(|i| acc.mean(acc.rows[i], acc.rows2[i], seed)).collect(),
        beta: (0..m).map(|j| acc.mean(acc.cols[j], acc.cols2[j], seed)).collect(),
        objective: Estimate {
            value: lin - total.value + 1.0,
            ..total
        },
    }
}

/// Replaces scores by softmax weights `exp(λ(sᵢ - log φ_λ))` and returns `log φ_λ`.
fn softmax_in_place(scores: &mut [f64], lambda: f64) -> f64 {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (lambda * (*s - top)).exp();
        z += *s;
    }
    for s in scores.iter_mut() {
        *s /= z;
    }
    top + z.ln() / lambda
}

// ---------------------------------------------------------------------------
// cell-localized importance sampler

/// Shared standard-normal base draws `(uₖ, vₖ)` for the localized sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedBatch {
    dim: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    seed: u64,
}

impl LocalizedBatch {
    pub fn new(dim: usize, n: usize, seed: u64) -> Self {
        Self::new_stream(dim, n, seed, 0)
    }

    /// Independent draws for each `stream`, all reproducible from `seed`.
    pub fn new_stream(dim: usize, n: usize, seed: u64, stream: u64) -> Self {
        use rand::Rng;
        use rand_distr::StandardNormal;
        assert!(n >= 1, "batch size must be positive");
        let mut rng = crate::measures::stream_rng(seed, (1 << 40) | stream);
        let mut draw = |count: usize| -> Vec<f64> {
            (0..count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let u = draw(n * dim);
        let v = draw(n * dim);
        Self { dim, u, v, seed }
    }

    pub fn len(&self) -> usize {
        self.u.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Localized sampler specialised to one `(problem, ε)`: proposal points, their affine
/// scores against every support point, and the reference density at every pair.
#[derive(Debug, Clone)]
pub struct LocalizedKernel<'a> {
    prob: &'a Problem,
    eps: f64,
    units: usize,
    seed: u64,
    /// `⟨xᵢ + √ε uₖ, xₗ⟩`, indexed `[(i·K + k)·n + l]`.
    x_scores: Vec<f64>,
    y_scores: Vec<f64>,
    /// `ρ(xᵢ + √ε uₖ, yⱼ + √ε vₖ)`, indexed `[(k·n + i)·m + j]`.
    density: Vec<f64>,
    /// `½ε‖uₖ‖²` and `½ε‖vₖ‖²`.
    half_u: Vec<f64>,
    half_v: Vec<f64>,
}

impl<'a> LocalizedKernel<'a> {
    pub fn new(prob: &'a Problem, eps: f64, batch: &LocalizedBatch) -> Self {
        assert!(eps > 0.0, "eps must be positive");
        assert_eq!(batch.dim, prob.dim(), "batch dimension");
        let (n, m, d) = (prob.n(), prob.m(), prob.dim());
        let k_len = batch.len();
        let s = eps.sqrt();
        let shifted = |pts: &[f64], base: &[f64], count: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(count * k_len * d);
            for i in 0..count {
                for k in 0..k_len {
                    for c in 0..d {
                        out.push(pts[i * d + c] + s * base[k * d + c]);
                    }
                }
            }
            out
        };
        let xs = shifted(prob.mu.flat_points(), &batch.u, n);
        let ys = shifted(prob.nu.flat_points(), &batch.v, m);
        let scores = |zs: &[f64], pts: &[f64], count: usize| -> Vec<f64> {
            let mut out = vec![0.0; count * k_len * count];
            let zero = vec![0.0; count];
            out.par_chunks_mut(count)
                .enumerate()
                .for_each(|(row, o)| affine_scores(&zs[row * d..(row + 1) * d], pts, &zero, o));
            out
        };
        let x_scores = scores(&xs, prob.mu.flat_points(), n);
        let y_scores = scores(&ys, prob.nu.flat_points(), m);
        let mut density = vec![0.0; k_len * n * m];
        density
            .par_chunks_mut(n * m)
            .enumerate()
            .for_each(|(k, out)| {
                for i in 0..n {
                    let x = &xs[(i * k_len + k) * d..(i * k_len + k + 1) * d];
                    for j in 0..m {
                        let y = &ys[(j * k_len + k) * d..(j * k_len + k + 1) * d];
                        out[i * m + j] = prob.reference.density(x, y);
                    }
                }
            });
        let half = |base: &[f64]| -> Vec<f64> {
            base.chunks(d).map(|z| 0.5 * eps * dot(z, z)).collect()
        };
        Self {
            prob,
            eps,
            units: k_len,
            seed: batch.seed,
            x_scores,
            y_scores,
            density,
            half_u: half(&batch.u),
            half_v: half(&batch.v),
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn batch_size(&self) -> usize {
        self.units
    }

    pub fn problem(&self) -> &Problem {
        self.prob
    }

    /// Whether the proposal point `xᵢ + √ε uₖ` lies in `Aᵢ(α)` (lowest-index tie-break).
    fn in_own_cell(scores: &[f64], shift: &[f64], i: usize) -> bool {
        let own = scores[i] + shift[i];
        scores[..i]
            .iter()
            .zip(&shift[..i])
            .all(|(s, a)| s + a < own)
            && scores[i + 1..]
                .iter()
                .zip(&shift[i + 1..])
                .all(|(s, a)| s + a <= own)
    }

    fn moments(&self, pots: &DualPotentials, want: Want) -> Moments {
        let prob = self.prob;
        let (n, m, d) = (prob.n(), prob.m(), prob.dim() as f64);
        assert_eq!(pots.n(), n, "alpha has wrong length");
        assert_eq!(pots.m(), m, "beta has wrong length");
        let k_len = self.units;
        let eps = self.eps;
        // log of exp(sᵢⱼ/ε)(2πε)ᵈ
        let log_norm = d * (2.0 * std::f64::consts::PI * eps).ln();
        let mut overflow = false;
        let mut log_scale = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let s = pots.alpha[i]
                    + pots.beta[j]
                    + prob.mu.half_sq_norms()[i]
                    + prob.nu.half_sq_norms()[j];
                log_scale[i * m + j] = clamp_exponent(s / eps + log_norm, &mut overflow);
            }
        }
        let scale: Vec<f64> = log_scale.iter().map(|l| l.exp()).collect();
        let mut acc = chunked(k_len, n, m, want, |k, acc| {
            let mut in_x = [false; 64];
            let mut in_y = [false; 64];
            let (mut vx, mut vy);
            let (in_x, in_y): (&mut [bool], &mut [bool]) = if n <= 64 && m <= 64 {
                (&mut in_x[..n], &mut in_y[..m])
            } else {
                vx = vec![false; n];
                vy = vec![false; m];
                (&mut vx[..], &mut vy[..])
            };
            for (i, flag) in in_x.iter_mut().enumerate() {
                let row = (i * k_len + k) * n;
                *flag = Self::in_own_cell(&self.x_scores[row..row + n], &pots.alpha, i);
            }
            for (j, flag) in in_y.iter_mut().enumerate() {
                let row = (j * k_len + k) * m;
                *flag = Self::in_own_cell(&self.y_scores[row..row + m], &pots.beta, j);
            }
            let dens = &self.density[k * n * m..(k + 1) * n * m];
            let mut t = 0.0;
            let mut log_num = 0.0;
            let mut cols = [0.0; 64];
            let mut col_vec;
            let cols: &mut [f64] = if m <= 64 {
                &mut cols[..m]
            } else {
                col_vec = vec![0.0; m];
                &mut col_vec[..]
            };
            let hw = self.half_u[k] + self.half_v[k];
            for i in 0..n {
                if !in_x[i] {
                    continue;
                }
                let mut r = 0.0;
                for j in 0..m {
                    if !in_y[j] {
                        continue;
                    }
                    let c = i * m + j;
                    let w = scale[c] * dens[c];
                    r += w;
                    cols[j] += w;
                    if want.cells {
                        acc.cells[c] += w;
                        acc.cells2[c] += w * w;
                    }
                    if want.costs {
                        log_num += w * (log_scale[c] - log_norm - hw / eps);
                    }
                }
                acc.rows[i] += r;
                acc.rows2[i] += r * r;
                t += r;
            }
            for (j, c) in cols.iter().enumerate() {
                acc.cols[j] += c;
                acc.cols2[j] += c * c;
            }
            acc.t += t;
            acc.t2 += t * t;
            if want.costs {
                acc.cost_x.add(t * self.half_u[k], t);
                acc.cost_y.add(t * self.half_v[k], t);
                acc.log_w.add(log_num, t);
            }
        });
        acc.overflow |= overflow;
        acc
    }

    /// `U^ε(α, β)` with gradient, estimated by cell-localized importance sampling.
    pub fn evaluate(&self, pots: &DualPotentials) -> DualEvaluation {
        let want = Want {
            cells: false,
            costs: false,
        };
        self.moments(pots, want)
            .evaluation(self.prob, pots, self.eps, self.seed)
    }

    pub fn cell_mass_matrix(&self, pots: &DualPotentials) -> CellMassMatrix {
        let want = Want {
            cells: true,
            costs: false,
        };
        self.moments(pots, want).cell_matrix(self.seed)
    }

    /// Transport costs of both marginals and `H(π^ε|γ)`, all under `π^ε` as sampled by the
    /// localized proposal.
    pub fn transport_costs(&self, pots: &DualPotentials) -> TransportCosts {
        let want = Want {
            cells: false,
            costs: true,
        };
        self.moments(pots, want).costs(self.seed)
    }
}
