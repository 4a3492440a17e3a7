//! Gradient ascent on `U^ε` and the Sinkhorn-type fixed-point iteration `Ψ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    evaluate_eps, sinkhorn_integrals, DualEvaluation, Estimate, LocalizedBatch, LocalizedKernel,
    SinkhornIntegrals,
};
use crate::measures::{stream_rng, SampleBatch};
use crate::potentials::{norm_l2_oplus, norm_linf_oplus, DualPotentials};
use crate::problem::Problem;

/// Objective decreases smaller than this (relative to `max(1, |U|)`) are treated as ties.
const ASCENT_SLACK: f64 = 1e-12;
const MAX_HALVINGS: usize = 40;

/// How the integral term of `U^ε` is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Draws from the reference measure.
    #[default]
    Reference,
    /// Cell-localized importance sampling, accurate for small `ε`. Its batch objective
    /// jumps when a proposal point changes cell, so ascent runs without backtracking.
    Localized,
}

/// Whether the configured step multiplies `∇U^ε` directly or `ε²∇U^ε`.
///
/// The Hessian of `U^ε` scales like `ε⁻²`, so a fixed plain step diverges as `ε → 0`.
/// With [`StepScaling::EpsSquared`] the update on `p = (α + ½‖x‖² + (d/2)ε ln ε)/ε`
/// becomes `p ← p + η (a - row mass)`, independent of `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScaling {
    #[default]
    Plain,
    EpsSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientAscentConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// Stop once the batch gradient has `l²` norm at most this.
    pub grad_tol: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eps: f64,
    pub refresh_batch: bool,
    /// Halve steps that would lower the objective. Only applies to a frozen reference batch.
    pub backtrack: bool,
    pub sampler: Sampler,
    pub step_scaling: StepScaling,
}

impl Default for GradientAscentConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            max_iters: 2000,
            grad_tol: 0.0,
            batch_size: 8000,
            seed: 1,
            eps: 1.0,
            refresh_batch: false,
            backtrack: true,
            sampler: Sampler::Reference,
            step_scaling: StepScaling::Plain,
        }
    }
}

impl GradientAscentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.max_iters < 1 {
            return Err(invalid("max_iters must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch_size must be at least 1".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(invalid(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(invalid(format!("grad_tol must be nonnegative, got {}", self.grad_tol)));
        }
        Ok(())
    }

    fn effective_step(&self) -> f64 {
        match self.step_scaling {
            StepScaling::Plain => self.step_size,
            StepScaling::EpsSquared => self.step_size * self.eps * self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once `‖Ψ(p) - p‖_{l∞⊕}` is at most this.
    pub fixed_point_tol: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub refresh_batch: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            max_iters: 500,
            fixed_point_tol: 0.0,
            batch_size: 8000,
            seed: 1,
            refresh_batch: false,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 2.0) {
            return Err(invalid(format!("lambda must exceed 2, got {}", self.lambda)));
        }
        if self.max_iters < 1 {
            return Err(invalid("max_iters must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch_size must be at least 1".into()));
        }
        if !(self.fixed_point_tol >= 0.0) {
            return Err(invalid(format!(
                "fixed_point_tol must be nonnegative, got {}",
                self.fixed_point_tol
            )));
        }
        Ok(())
    }
}

fn invalid(msg: String) -> Error {
    Error::InvalidConfig(msg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GradientAscent,
    Sinkhorn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum Termination {
    MaxIters,
    Converged,
    NonFinite { iter: usize },
}

/// State at one iterate. Iterate 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// `U^ε` for gradient ascent, the smoothed `U_λ` for Sinkhorn.
    pub objective: Estimate,
    /// Batch `‖∇U^ε‖₂` for gradient ascent, `‖Ψ(p) - p‖_{l∞⊕}` for Sinkhorn.
    pub grad_or_step_norm: f64,
    pub residual_l2: f64,
    pub residual_linf: f64,
    /// Step actually taken from this iterate (after any halving).
    pub step_size: f64,
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveTrace {
    pub method: Method,
    pub records: Vec<TraceRecord>,
    #[serde(skip)]
    pub iterates: Vec<DualPotentials>,
    pub final_potentials: DualPotentials,
    pub termination: Termination,
    /// Iterations at which the step was halved to keep the frozen objective from decreasing.
    pub backtracks: Vec<usize>,
}

impl SolveTrace {
    fn new(method: Method, init: &DualPotentials) -> Self {
        Self {
            method,
            records: Vec::new(),
            iterates: Vec::new(),
            final_potentials: init.clone(),
            termination: Termination::MaxIters,
            backtracks: Vec::new(),
        }
    }

    pub fn overflow_iters(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.overflow).map(|r| r.iter).collect()
    }

    pub fn any_overflow(&self) -> bool {
        self.records.iter().any(|r| r.overflow)
    }

    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace has at least the initial record")
    }

    /// Mean of the last `count` iterates. Averaging removes the zigzag that fixed-step
    /// ascent shows around kinks of a frozen-batch objective.
    pub fn tail_average(&self, count: usize) -> DualPotentials {
        let tail = &self.iterates[self.iterates.len().saturating_sub(count.max(1))..];
        let k = tail.len() as f64;
        let mean = |get: fn(&DualPotentials) -> &Vec<f64>| -> Vec<f64> {
            let mut acc = vec![0.0; get(&tail[0]).len()];
            for it in tail {
                for (a, v) in acc.iter_mut().zip(get(it)) {
                    *a += v;
                }
            }
            acc.into_iter().map(|a| a / k).collect()
        };
        DualPotentials::new(mean(|p| &p.alpha), mean(|p| &p.beta))
    }

    /// `Err` if the run stopped on a non-finite iterate.
    pub fn check(&self) -> Result<()> {
        match self.termination {
            Termination::NonFinite { iter } => Err(Error::NonFinite { iter }),
            _ => Ok(()),
        }
    }

    /// Fills `residual_l2` / `residual_linf` with the distance of every iterate to the last.
    fn backfill(&mut self) {
        let last = self.final_potentials.clone();
        for (rec, it) in self.records.iter_mut().zip(&self.iterates) {
            rec.residual_l2 = norm_l2_oplus(it, &last).expect("shapes fixed by solver");
            rec.residual_linf = norm_linf_oplus(it, &last).expect("shapes fixed by solver");
        }
    }
}

/// `Ψ(α, β)` evaluated on a batch, together with the integrals it was built from.
pub fn psi_map(
    prob: &Problem,
    pots: &DualPotentials,
    lambda: f64,
    batch: &SampleBatch,
) -> (DualPotentials, SinkhornIntegrals) {
    let si = sinkhorn_integrals(prob, pots, lambda, batch);
    let update = |w: &[f64], f: &[Estimate], v: &[f64]| -> Vec<f64> {
        w.iter()
            .zip(f)
            .zip(v)
            .map(|((w, f), v)| v + (w.ln() - f.value.ln()) / lambda)
            .collect()
    };
    let next = DualPotentials::new(
        update(prob.mu.weights(), &si.alpha, &pots.alpha),
        update(prob.nu.weights(), &si.beta, &pots.beta),
    );
    (next, si)
}

/// Canonical representative of the `⊕`-class with `mean(α) = mean(β)`.
pub fn gauge_fix(pots: &DualPotentials) -> DualPotentials {
    pots.gauge_fixed()
}

enum Oracle<'a> {
    Reference(SampleBatch),
    Localized(LocalizedKernel<'a>),
}

impl<'a> Oracle<'a> {
    fn build(prob: &'a Problem, cfg: &GradientAscentConfig, stream: u64) -> Self {
        match cfg.sampler {
            Sampler::Reference => Oracle::Reference(prob.reference.sample_stream(
                cfg.batch_size,
                cfg.seed,
                stream,
            )),
            Sampler::Localized => {
                let lb = LocalizedBatch::new_stream(prob.dim(), cfg.batch_size, cfg.seed, stream);
                Oracle::Localized(LocalizedKernel::new(prob, cfg.eps, &lb))
            }
        }
    }

    fn evaluate(&self, prob: &Problem, pots: &DualPotentials, eps: f64) -> DualEvaluation {
        match self {
            Oracle::Reference(b) => evaluate_eps(prob, pots, eps, b),
            Oracle::Localized(k) => k.evaluate(pots),
        }
    }
}

/// `U^ε` and its gradient on the batch that ascent with `cfg` uses at record `iter`
/// (always the first batch unless `refresh_batch` is set).
pub fn ascent_evaluation(
    prob: &Problem,
    pots: &DualPotentials,
    cfg: &GradientAscentConfig,
    iter: usize,
) -> DualEvaluation {
    let stream = if cfg.refresh_batch { iter as u64 } else { 0 };
    Oracle::build(prob, cfg, stream).evaluate(prob, pots, cfg.eps)
}

fn axpy(pots: &DualPotentials, step: f64, grad: &crate::estimators::DualGradient) -> DualPotentials {
    DualPotentials::new(
        pots.alpha.iter().zip(&grad.alpha).map(|(p, g)| p + step * g).collect(),
        pots.beta.iter().zip(&grad.beta).map(|(p, g)| p + step * g).collect(),
    )
}

/// Gradient ascent `(α, β) ← (α, β) + η ∇U^ε(α, β)` with Monte Carlo gradients.
///
/// On a frozen reference batch with `backtrack` set the step is halved whenever it would lower the batch objective;
/// each halving is recorded in [`SolveTrace::backtracks`]. A non-finite iterate stops the
/// run with [`Termination::NonFinite`]; the returned potentials are then the last finite
/// iterate.
pub fn solve_gradient_ascent(
    prob: &Problem,
    init: &DualPotentials,
    cfg: &GradientAscentConfig,
) -> Result<(DualPotentials, SolveTrace)> {
    cfg.validate()?;
    init.check_shape(prob.n(), prob.m())?;
    if !init.is_finite() {
        return Err(invalid("initial potentials must be finite".into()));
    }
    let mut trace = SolveTrace::new(Method::GradientAscent, init);
    let mut oracle = Oracle::build(prob, cfg, 0);
    let mut pots = init.clone();
    let mut eval = oracle.evaluate(prob, &pots, cfg.eps);
    let base_step = cfg.effective_step();
    for t in 0..=cfg.max_iters {
        let grad_norm = eval.gradient.norm_l2();
        trace.iterates.push(pots.clone());
        trace.records.push(TraceRecord {
            iter: t,
            objective: eval.objective,
            grad_or_step_norm: grad_norm,
            residual_l2: 0.0,
            residual_linf: 0.0,
            step_size: 0.0,
            overflow: eval.overflow(),
        });
        if t == cfg.max_iters {
            break;
        }
        if grad_norm <= cfg.grad_tol {
            trace.termination = Termination::Converged;
            break;
        }
        if cfg.refresh_batch {
            oracle = Oracle::build(prob, cfg, t as u64 + 1);
        }
        let mut step = base_step;
        let (next, next_eval) = loop {
            let cand = axpy(&pots, step, &eval.gradient);
            let cand_eval = oracle.evaluate(prob, &cand, cfg.eps);
            let u0 = eval.objective.value;
            let drop = u0 - cand_eval.objective.value;
            let decreased =
                drop > ASCENT_SLACK * u0.abs().max(1.0) || !cand_eval.objective.value.is_finite();
            let can_halve = step > base_step * 0.5f64.powi(MAX_HALVINGS as i32);
            let monotone = cfg.backtrack && !cfg.refresh_batch && cfg.sampler == Sampler::Reference;
            if monotone && decreased && can_halve {
                trace.backtracks.push(t);
                step *= 0.5;
                continue;
            }
            break (cand, cand_eval);
        };
        trace.records[t].step_size = step;
        if !next.is_finite() || !next_eval.objective.value.is_finite() {
            trace.termination = Termination::NonFinite { iter: t + 1 };
            break;
        }
        pots = next;
        eval = next_eval;
    }
    trace.final_potentials = pots.clone();
    trace.backfill();
    Ok((pots, trace))
}

/// Jacobi iteration `(α, β) ← Ψ(α, β)` of the smoothed first-order conditions.
pub fn solve_sinkhorn(
    prob: &Problem,
    init: &DualPotentials,
    cfg: &SinkhornConfig,
) -> Result<(DualPotentials, SolveTrace)> {
    cfg.validate()?;
    init.check_shape(prob.n(), prob.m())?;
    if !init.is_finite() {
        return Err(invalid("initial potentials must be finite".into()));
    }
    let mut trace = SolveTrace::new(Method::Sinkhorn, init);
    let mut batch = prob.reference.sample_stream(cfg.batch_size, cfg.seed, 0);
    let mut pots = init.clone();
    for t in 0..=cfg.max_iters {
        if cfg.refresh_batch && t > 0 {
            batch = prob.reference.sample_stream(cfg.batch_size, cfg.seed, t as u64);
        }
        let (next, si) = psi_map(prob, &pots, cfg.lambda, &batch);
        let finite = next.is_finite();
        let step = if finite {
            norm_linf_oplus(&next, &pots)?
        } else {
            f64::INFINITY
        };
        trace.iterates.push(pots.clone());
        trace.records.push(TraceRecord {
            iter: t,
            objective: si.objective,
            grad_or_step_norm: step,
            residual_l2: 0.0,
            residual_linf: 0.0,
            step_size: 1.0,
            overflow: si.objective.flagged,
        });
        if t == cfg.max_iters {
            trace.records[t].step_size = 0.0;
            break;
        }
        if !finite {
            trace.termination = Termination::NonFinite { iter: t + 1 };
            break;
        }
        if step <= cfg.fixed_point_tol {
            trace.records[t].step_size = 0.0;
            trace.termination = Termination::Converged;
            break;
        }
        pots = next;
    }
    trace.final_potentials = pots.clone();
    trace.backfill();
    Ok((pots, trace))
}

/// Ratios `‖Ψ(p) - Ψ(q)‖_{l∞⊕} / ‖p - q‖_{l∞⊕}` for random pairs in the box of half-width
/// `radius` around `center`, all on one frozen batch.
pub fn contraction_probe(
    prob: &Problem,
    center: &DualPotentials,
    radius: f64,
    pairs: usize,
    lambda: f64,
    batch: &SampleBatch,
    seed: u64,
) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0xc0de);
    let mut jitter = |v: &[f64]| -> Vec<f64> {
        v.iter().map(|x| x + rng.random_range(-radius..=radius)).collect()
    };
    (0..pairs)
        .map(|_| {
            let p = DualPotentials::new(jitter(&center.alpha), jitter(&center.beta));
            let q = DualPotentials::new(jitter(&center.alpha), jitter(&center.beta));
            let (pp, _) = psi_map(prob, &p, lambda, batch);
            let (qq, _) = psi_map(prob, &q, lambda, batch);
            norm_linf_oplus(&pp, &qq).expect("same shapes") / norm_linf_oplus(&p, &q).expect("same shapes")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ProblemSeeds;

    fn bench() -> Problem {
        Problem::benchmark(ProblemSeeds::default())
    }

    #[test]
    fn configs_are_validated() {
        let bad = GradientAscentConfig {
            step_size: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = SinkhornConfig {
            lambda: 2.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let prob = bench();
        let wrong = DualPotentials::zeros(3, 10);
        assert!(solve_gradient_ascent(&prob, &wrong, &GradientAscentConfig::default()).is_err());
    }

    #[test]
    fn gauge_fix_examples() {
        let p = DualPotentials::new(vec![1.0, 3.0], vec![0.0, 2.0, 4.0]);
        let g = gauge_fix(&p);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&g.alpha) - mean(&g.beta)).abs() < 1e-15);
        assert_eq!(gauge_fix(&g), g);
        let shifted = gauge_fix(&p.shifted(5.0));
        for (x, y) in shifted.alpha.iter().chain(&shifted.beta).zip(g.alpha.iter().chain(&g.beta)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn toy_gradient_ascent_reaches_closed_form() {
        let prob = Problem::single_atom(2);
        let cfg = GradientAscentConfig {
            batch_size: 100_000,
            ..Default::default()
        };
        let (pots, trace) = solve_gradient_ascent(&prob, &DualPotentials::zeros(1, 1), &cfg).unwrap();
        assert!(trace.last().grad_or_step_norm < 1e-8);
        let s = pots.alpha[0] + pots.beta[0];
        // batch optimum: s = -ln(mean e^{-½|X|²-½|Y|²}); its standard error by the delta method
        let batch = prob.reference.sample(100_000, cfg.seed);
        let vals: Vec<f64> = (0..batch.len())
            .map(|k| {
                let (x, y) = (batch.x(k), batch.y(k));
                (-0.5 * (x[0] * x[0] + x[1] * x[1] + y[0] * y[0] + y[1] * y[1])).exp()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let se = (var / vals.len() as f64).sqrt() / mean;
        assert!((s + mean.ln()).abs() < 1e-8);
        assert!((s - 2.0 * 2f64.ln()).abs() < 5.0 * se);
    }

    #[test]
    fn frozen_objective_never_decreases() {
        let prob = bench();
        let cfg = GradientAscentConfig {
            max_iters: 300,
            batch_size: 4000,
            ..Default::default()
        };
        let (_, trace) = solve_gradient_ascent(&prob, &DualPotentials::zeros(10, 10), &cfg).unwrap();
        for w in trace.records.windows(2) {
            let (a, b) = (w[0].objective.value, w[1].objective.value);
            assert!(b >= a - ASCENT_SLACK * a.abs().max(1.0), "{a} -> {b} at {}", w[1].iter);
        }
        assert_eq!(trace.records.len(), 301);
        assert_eq!(trace.last().residual_l2, 0.0);
        let r0 = norm_l2_oplus(&DualPotentials::zeros(10, 10), &trace.final_potentials).unwrap();
        assert_eq!(trace.records[0].residual_l2, r0);
    }

    #[test]
    fn ascent_without_backtracking_keeps_the_full_step() {
        let prob = bench();
        let cfg = GradientAscentConfig {
            step_size: 0.5,
            max_iters: 50,
            batch_size: 2000,
            backtrack: false,
            ..Default::default()
        };
        let (_, trace) = solve_gradient_ascent(&prob, &DualPotentials::zeros(10, 10), &cfg).unwrap();
        assert!(trace.backtracks.is_empty());
        assert!(trace.records[..50].iter().all(|r| r.step_size == 0.5));
        let avg = trace.tail_average(2);
        let (a, b) = (&trace.iterates[49], &trace.iterates[50]);
        assert!((avg.alpha[3] - 0.5 * (a.alpha[3] + b.alpha[3])).abs() < 1e-15);
        let eval = ascent_evaluation(&prob, &trace.final_potentials, &cfg, 50);
        assert_eq!(eval.objective.value, trace.last().objective.value);
        assert_eq!(eval.gradient.norm_l2(), trace.last().grad_or_step_norm);
    }

    #[test]
    fn solvers_are_oplus_equivariant() {
        let prob = bench();
        let init = DualPotentials::new(vec![0.1; 10], vec![-0.2; 10]);
        let shifted = init.shifted(2.5);
        let ga = GradientAscentConfig {
            max_iters: 50,
            batch_size: 2000,
            ..Default::default()
        };
        let (_, a) = solve_gradient_ascent(&prob, &init, &ga).unwrap();
        let (_, b) = solve_gradient_ascent(&prob, &shifted, &ga).unwrap();
        for (p, q) in a.iterates.iter().zip(&b.iterates) {
            assert!(norm_linf_oplus(p, q).unwrap() < 1e-9);
        }
        let sk = SinkhornConfig {
            max_iters: 30,
            batch_size: 2000,
            ..Default::default()
        };
        let (_, a) = solve_sinkhorn(&prob, &init, &sk).unwrap();
        let (_, b) = solve_sinkhorn(&prob, &shifted, &sk).unwrap();
        for (p, q) in a.iterates.iter().zip(&b.iterates) {
            assert!(norm_linf_oplus(p, q).unwrap() < 1e-9);
        }
    }

    #[test]
    fn psi_commutes_with_oplus_shift() {
        let prob = bench();
        let batch = prob.reference.sample(3000, 3);
        let p = DualPotentials::new((0..10).map(|i| 0.02 * i as f64).collect(), vec![-0.7; 10]);
        let (a, _) = psi_map(&prob, &p, 10.0, &batch);
        let (b, _) = psi_map(&prob, &p.shifted(1.3), 10.0, &batch);
        let a_shift = a.shifted(1.3);
        for (x, y) in a_shift.alpha.iter().chain(&a_shift.beta).zip(b.alpha.iter().chain(&b.beta)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn solvers_are_deterministic() {
        let prob = bench();
        let init = DualPotentials::zeros(10, 10);
        let ga = GradientAscentConfig {
            max_iters: 40,
            batch_size: 2000,
            refresh_batch: true,
            ..Default::default()
        };
        assert_eq!(
            solve_gradient_ascent(&prob, &init, &ga).unwrap().1,
            solve_gradient_ascent(&prob, &init, &ga).unwrap().1
        );
        let sk = SinkhornConfig {
            max_iters: 20,
            batch_size: 2000,
            ..Default::default()
        };
        assert_eq!(
            solve_sinkhorn(&prob, &init, &sk).unwrap().1,
            solve_sinkhorn(&prob, &init, &sk).unwrap().1
        );
    }

    #[test]
    fn sinkhorn_reaches_a_fixed_point_and_contracts() {
        let prob = bench();
        let cfg = SinkhornConfig {
            batch_size: 4000,
            ..Default::default()
        };
        let (pots, trace) = solve_sinkhorn(&prob, &DualPotentials::zeros(10, 10), &cfg).unwrap();
        // on a frozen batch the map is deterministic, so the fixed point is reached to rounding
        assert!(trace.last().grad_or_step_norm < 1e-10);
        let batch = prob.reference.sample(4000, cfg.seed);
        let (_, si) = psi_map(&prob, &pots, 10.0, &batch);
        for (f, a) in si.alpha.iter().zip(prob.mu.weights()) {
            assert!((f.value - a).abs() < 1e-9);
        }
        let ratios = contraction_probe(&prob, &pots, 0.5, 20, 10.0, &batch, 4);
        assert!(ratios.iter().all(|&r| r < 1.0), "{ratios:?}");
    }

    #[test]
    fn sinkhorn_single_atom_fixed_point() {
        let prob = Problem::single_atom(2);
        let cfg = SinkhornConfig {
            batch_size: 100_000,
            fixed_point_tol: 1e-13,
            ..Default::default()
        };
        let (pots, trace) = solve_sinkhorn(&prob, &DualPotentials::zeros(1, 1), &cfg).unwrap();
        assert_eq!(trace.termination, Termination::Converged);
        let batch = prob.reference.sample(100_000, cfg.seed);
        let (_, si) = psi_map(&prob, &pots, 10.0, &batch);
        assert!((si.alpha[0].value - 1.0).abs() < 5.0 * si.alpha[0].std_error);
        let s = pots.alpha[0] + pots.beta[0];
        assert!((s - 2.0 * 2f64.ln()).abs() < 0.05);
    }

    #[test]
    fn localized_ascent_satisfies_marginals_on_an_independent_batch() {
        // the localized estimator is unbiased but noisy at eps = 1, so the check is phrased
        // in its own standard errors on fresh draws
        let prob = bench();
        let cfg = GradientAscentConfig {
            step_size: 0.1,
            max_iters: 400,
            batch_size: 8000,
            sampler: Sampler::Localized,
            ..Default::default()
        };
        let (pots, trace) = solve_gradient_ascent(&prob, &DualPotentials::zeros(10, 10), &cfg).unwrap();
        assert!(trace.backtracks.is_empty());
        assert!(trace.last().grad_or_step_norm < 0.01);
        let fresh = LocalizedBatch::new_stream(2, 200_000, 77, 3);
        let ev = LocalizedKernel::new(&prob, 1.0, &fresh).evaluate(&pots);
        // distance of the batch optimum from the true one is of the order of the batch noise
        let batch_se = ev.total_mass.std_error * (200_000.0f64 / 8000.0).sqrt();
        assert!(
            (ev.total_mass.value - 1.0).abs() < 5.0 * batch_se,
            "{:?} vs batch se {batch_se}",
            ev.total_mass
        );
    }

    #[test]
    fn non_finite_iterates_stop_the_run() {
        let prob = bench();
        let cfg = GradientAscentConfig {
            step_size: 1e308,
            max_iters: 5,
            batch_size: 500,
            refresh_batch: true,
            ..Default::default()
        };
        let (pots, trace) = solve_gradient_ascent(&prob, &DualPotentials::zeros(10, 10), &cfg).unwrap();
        assert!(matches!(trace.termination, Termination::NonFinite { .. }));
        assert!(trace.check().is_err());
        assert!(pots.is_finite());
    }
}
