//! Classical discrete Schrödinger bridges and the small-ε limit objects.
//!
//! Given a positive `n × m` matrix `σ` and marginals `a`, `b`, the bridge is the unique
//! `π ∈ Π(a, b)` minimizing `H(π|σ)`. It has the form `πᵢⱼ = σᵢⱼ exp(pᵢ + qⱼ)`.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::potentials::DualPotentials;
use crate::problem::Problem;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteBridgeProblem {
    n: usize,
    m: usize,
    /// Row-major `n × m`.
    sigma: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl DiscreteBridgeProblem {
    pub fn new(sigma: Vec<Vec<f64>>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let n = sigma.len();
        if n == 0 || n != a.len() {
            return Err(Error::ShapeMismatch(format!(
                "sigma has {n} rows but a has {} entries",
                a.len()
            )));
        }
        let m = sigma[0].len();
        if m == 0 || m != b.len() || sigma.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeMismatch(format!(
                "sigma rows must all have {} entries",
                b.len()
            )));
        }
        let sigma: Vec<f64> = sigma.into_iter().flatten().collect();
        if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidMeasure("sigma entries must be positive and finite".into()));
        }
        for (name, w) in [("a", &a), ("b", &b)] {
            if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::InvalidMeasure(format!("{name} must be positive")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidMeasure(format!("{name} sums to {s}, not 1")));
            }
        }
        Ok(Self { n, m, sigma, a, b })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sigma(&self, i: usize, j: usize) -> f64 {
        self.sigma[i * self.m + j]
    }

    pub fn sigma_rows(&self) -> Vec<Vec<f64>> {
        self.sigma.chunks(self.m).map(<[f64]>::to_vec).collect()
    }

    /// The same problem with `σ` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sigma: self.sigma.iter().map(|s| s * c).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteBridgeSolution {
    /// `πᵢⱼ` as rows.
    pub coupling: Vec<Vec<f64>>,
    /// Gauge-fixed `(p, q)`.
    pub potentials: DualPotentials,
    /// `H(π|σ) = Σ aᵢpᵢ + Σ bⱼqⱼ`.
    pub entropy: f64,
    pub iterations: usize,
    /// Largest absolute row or column marginal error of `coupling`.
    pub marginal_violation: f64,
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    top + terms.map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// Alternating log-domain Sinkhorn, starting from `q = 0`.
pub fn solve_discrete_sinkhorn(
    dbp: &DiscreteBridgeProblem,
    tol: f64,
    max_iters: usize,
) -> Result<DiscreteBridgeSolution> {
    solve_discrete_sinkhorn_from(dbp, &vec![0.0; dbp.m], tol, max_iters)
}

/// Alternating log-domain Sinkhorn from a given column potential `q`.
pub fn solve_discrete_sinkhorn_from(
    dbp: &DiscreteBridgeProblem,
    q_init: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<DiscreteBridgeSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tol must be positive, got {tol}")));
    }
    if q_init.len() != dbp.m {
        return Err(Error::ShapeMismatch(format!(
            "q has {} entries, expected {}",
            q_init.len(),
            dbp.m
        )));
    }
    let (n, m) = (dbp.n, dbp.m);
    let log_sigma: Vec<f64> = dbp.sigma.iter().map(|s| s.ln()).collect();
    let ln_a: Vec<f64> = dbp.a.iter().map(|a| a.ln()).collect();
    let ln_b: Vec<f64> = dbp.b.iter().map(|b| b.ln()).collect();
    let mut p = vec![0.0; n];
    let mut q = q_init.to_vec();
    let mut violation = f64::INFINITY;
    for iter in 1..=max_iters {
        for i in 0..n {
            let row = &log_sigma[i * m..(i + 1) * m];
            p[i] = ln_a[i] - log_sum_exp(row.iter().zip(&q).map(|(s, q)| s + q));
        }
        for j in 0..m {
            q[j] = ln_b[j] - log_sum_exp((0..n).map(|i| log_sigma[i * m + j] + p[i]));
        }
        if !p.iter().chain(&q).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { iter });
        }
        // columns are exact after the q-update, so only rows can be violated
        violation = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| (log_sigma[i * m + j] + p[i] + q[j]).exp())
                    .sum();
                (row - dbp.a[i]).abs()
            })
            .fold(0.0, f64::max);
        if violation < tol {
            return Ok(finish(dbp, &log_sigma, p, q, iter));
        }
    }
    Err(Error::NotConverged {
        iters: max_iters,
        violation,
    })
}

fn finish(
    dbp: &DiscreteBridgeProblem,
    log_sigma: &[f64],
    p: Vec<f64>,
    q: Vec<f64>,
    iterations: usize,
) -> DiscreteBridgeSolution {
    let (n, m) = (dbp.n, dbp.m);
    let potentials = DualPotentials::new(p, q).gauge_fixed();
    let coupling: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (log_sigma[i * m + j] + potentials.alpha[i] + potentials.beta[j]).exp())
                .collect()
        })
        .collect();
    let rows = (0..n).map(|i| (coupling[i].iter().sum::<f64>() - dbp.a[i]).abs());
    let cols = (0..m).map(|j| ((0..n).map(|i| coupling[i][j]).sum::<f64>() - dbp.b[j]).abs());
    let marginal_violation = rows.chain(cols).fold(0.0, f64::max);
    let entropy = dbp.a.iter().zip(&potentials.alpha).map(|(a, p)| a * p).sum::<f64>()
        + dbp.b.iter().zip(&potentials.beta).map(|(b, q)| b * q).sum::<f64>();
    DiscreteBridgeSolution {
        coupling,
        potentials,
        entropy,
        iterations,
        marginal_violation,
    }
}

/// `σᵢⱼ = (2π)ᵈ ρ(xᵢ, yⱼ)`.
pub fn build_limit_sigma(prob: &Problem) -> Vec<Vec<f64>> {
    let scale = (2.0 * PI).powi(prob.dim() as i32);
    (0..prob.n())
        .map(|i| {
            (0..prob.m())
                .map(|j| scale * prob.reference.density(prob.mu.point(i), prob.nu.point(j)))
                .collect()
        })
        .collect()
}

/// The limit objects of the small-ε regime.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitReference {
    pub sigma: Vec<Vec<f64>>,
    pub solution: DiscreteBridgeSolution,
}

impl LimitReference {
    pub fn entropy(&self) -> f64 {
        self.solution.entropy
    }

    pub fn coupling(&self) -> &[Vec<f64>] {
        &self.solution.coupling
    }
}

pub fn blowup_reference_values(prob: &Problem) -> Result<LimitReference> {
    let sigma = build_limit_sigma(prob);
    let dbp = DiscreteBridgeProblem::new(
        sigma.clone(),
        prob.mu.weights().to_vec(),
        prob.nu.weights().to_vec(),
    )?;
    let solution = solve_discrete_sinkhorn(&dbp, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    Ok(LimitReference { sigma, solution })
}

/// `α = -½‖x‖² - (d/2) ε ln ε + ε p`, and likewise for `β`.
pub fn potentials_from_expansion(prob: &Problem, pq: &DualPotentials, eps: f64) -> DualPotentials {
    let shift = -0.5 * prob.dim() as f64 * eps * eps.ln();
    let map = |half: &[f64], v: &[f64]| -> Vec<f64> {
        half.iter().zip(v).map(|(h, v)| -h + shift + eps * v).collect()
    };
    DualPotentials::new(
        map(prob.mu.half_sq_norms(), &pq.alpha),
        map(prob.nu.half_sq_norms(), &pq.beta),
    )
}

/// Inverse of [`potentials_from_expansion`]: `p = (α + ½‖x‖² + (d/2) ε ln ε) / ε`.
pub fn expansion_residuals(prob: &Problem, pots: &DualPotentials, eps: f64) -> DualPotentials {
    let shift = -0.5 * prob.dim() as f64 * eps * eps.ln();
    let map = |half: &[f64], v: &[f64]| -> Vec<f64> {
        half.iter().zip(v).map(|(h, v)| (v + h - shift) / eps).collect()
    };
    DualPotentials::new(
        map(prob.mu.half_sq_norms(), &pots.alpha),
        map(prob.nu.half_sq_norms(), &pots.beta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{stream_rng, GaussianReference};
    use crate::potentials::norm_linf_oplus;
    use crate::problem::ProblemSeeds;
    use proptest::prelude::*;
    use rand::Rng;

    fn half() -> Vec<f64> {
        vec![0.5, 0.5]
    }

    #[test]
    fn all_ones_gives_uniform_coupling() {
        let dbp = DiscreteBridgeProblem::new(vec![vec![1.0; 2]; 2], half(), half()).unwrap();
        let sol = solve_discrete_sinkhorn(&dbp, 1e-12, 1000).unwrap();
        for row in &sol.coupling {
            for v in row {
                assert!((v - 0.25).abs() < 1e-10);
            }
        }
        assert!((sol.entropy - 0.25f64.ln()).abs() < 1e-10);
        assert!(sol.marginal_violation < 1e-12);
    }

    /// Symmetric couplings are `[[t, ½-t], [½-t, t]]`; stationarity of `H(π|σ)` for
    /// `σ = [[2,1],[1,2]]` reads `ln(t/2) = ln(½-t)`.
    fn kkt_bisection() -> f64 {
        let g = |t: f64| (t / 2.0).ln() - (0.5 - t).ln();
        let (mut lo, mut hi) = (1e-12, 0.5 - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn two_by_two_matches_kkt_oracle() {
        let t = kkt_bisection();
        assert!((t - 1.0 / 3.0).abs() < 1e-14);
        let dbp =
            DiscreteBridgeProblem::new(vec![vec![2.0, 1.0], vec![1.0, 2.0]], half(), half()).unwrap();
        let sol = solve_discrete_sinkhorn(&dbp, 1e-12, 1000).unwrap();
        let want = [[t, 0.5 - t], [0.5 - t, t]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((sol.coupling[i][j] - want[i][j]).abs() < 1e-10);
            }
        }
        assert!(sol.marginal_violation < 1e-12);
    }

    #[test]
    fn single_atom_bridge() {
        let dbp = DiscreteBridgeProblem::new(vec![vec![0.3]], vec![1.0], vec![1.0]).unwrap();
        let sol = solve_discrete_sinkhorn(&dbp, 1e-12, 10).unwrap();
        assert!((sol.coupling[0][0] - 1.0).abs() < 1e-14);
        let p = &sol.potentials;
        assert!((p.alpha[0] + p.beta[0] + 0.3f64.ln()).abs() < 1e-14);
        assert!((sol.entropy + 0.3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn sigma_of_standard_one_d_atom_is_one() {
        let prob = Problem::single_atom(1);
        assert!((build_limit_sigma(&prob)[0][0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sigma_is_symmetric_for_symmetric_reference() {
        let reference = GaussianReference::new(vec![0.2, -0.1], vec![0.2, -0.1], 0.6).unwrap();
        let mu = crate::measures::generate_marginals(5, 5, 2, 9).unwrap().0;
        let prob = Problem::new(mu.clone(), mu, reference, ProblemSeeds::default()).unwrap();
        let s = build_limit_sigma(&prob);
        for i in 0..5 {
            for j in 0..5 {
                assert!((s[i][j] - s[j][i]).abs() < 1e-15 * s[i][j].max(1.0));
            }
        }
    }

    #[test]
    fn benchmark_sigma_is_positive_and_finite() {
        let prob = Problem::benchmark(ProblemSeeds::default());
        for row in build_limit_sigma(&prob) {
            for s in row {
                assert!(s.is_finite() && s > 0.0);
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let prob = Problem::benchmark(ProblemSeeds::default());
        let dbp = DiscreteBridgeProblem::new(
            build_limit_sigma(&prob),
            prob.mu.weights().to_vec(),
            prob.nu.weights().to_vec(),
        )
        .unwrap();
        assert!(matches!(
            solve_discrete_sinkhorn(&dbp, 1e-300, 3),
            Err(Error::NotConverged { iters: 3, .. })
        ));
    }

    #[test]
    fn expansion_round_trip() {
        let prob = Problem::benchmark(ProblemSeeds::default());
        let pq = DualPotentials::new((0..10).map(|i| i as f64 * 0.1).collect(), vec![-0.3; 10]);
        for eps in [1.0, 0.25, 1e-4] {
            let back = expansion_residuals(&prob, &potentials_from_expansion(&prob, &pq, eps), eps);
            for (x, y) in back.alpha.iter().chain(&back.beta).zip(pq.alpha.iter().chain(&pq.beta)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    fn random_problem(seed: u64, n: usize, m: usize) -> DiscreteBridgeProblem {
        let mut rng = stream_rng(seed, 0);
        let mut weights = |k: usize| {
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let a = weights(n);
        let b = weights(m);
        let sigma = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(0.05..2.0)).collect())
            .collect();
        DiscreteBridgeProblem::new(sigma, a, b).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn solution_identities(seed in any::<u64>(), n in 1usize..7, m in 1usize..7) {
            let dbp = random_problem(seed, n, m);
            let sol = solve_discrete_sinkhorn(&dbp, 1e-12, DEFAULT_MAX_ITERS).unwrap();
            prop_assert!(sol.marginal_violation < 1e-11);
            let mut plogp = 0.0;
            for i in 0..n {
                for j in 0..m {
                    let pi = sol.coupling[i][j];
                    prop_assert!(pi > 0.0);
                    let model = dbp.sigma(i, j) * (sol.potentials.alpha[i] + sol.potentials.beta[j]).exp();
                    prop_assert!((pi - model).abs() < 1e-10);
                    plogp += pi * (pi / dbp.sigma(i, j)).ln();
                }
            }
            prop_assert!((plogp - sol.entropy).abs() < 1e-10);
        }

        #[test]
        fn rescaling_sigma_shifts_entropy(seed in any::<u64>(), c in 0.1f64..10.0) {
            let dbp = random_problem(seed, 4, 3);
            let base = solve_discrete_sinkhorn(&dbp, 1e-12, DEFAULT_MAX_ITERS).unwrap();
            let scaled = solve_discrete_sinkhorn(&dbp.scaled(c), 1e-12, DEFAULT_MAX_ITERS).unwrap();
            prop_assert!((scaled.entropy - (base.entropy - c.ln())).abs() < 1e-10);
            for (r, s) in base.coupling.iter().zip(&scaled.coupling) {
                for (x, y) in r.iter().zip(s) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }
            let shifted = DualPotentials::new(
                base.potentials.alpha.iter().map(|p| p - c.ln()).collect(),
                base.potentials.beta.clone(),
            );
            prop_assert!(norm_linf_oplus(&shifted, &scaled.potentials).unwrap() < 1e-9);
        }

        #[test]
        fn unique_up_to_gauge(seed in any::<u64>()) {
            let dbp = random_problem(seed, 5, 4);
            let one = solve_discrete_sinkhorn(&dbp, 1e-12, DEFAULT_MAX_ITERS).unwrap();
            let q0 = [3.0, -1.0, 0.5, 7.0];
            let two = solve_discrete_sinkhorn_from(&dbp, &q0, 1e-12, DEFAULT_MAX_ITERS).unwrap();
            prop_assert!(norm_linf_oplus(&one.potentials, &two.potentials).unwrap() < 1e-10);
        }

        #[test]
        fn stable_under_small_perturbations(seed in any::<u64>()) {
            let dbp = random_problem(seed, 4, 4);
            let base = solve_discrete_sinkhorn(&dbp, 1e-13, DEFAULT_MAX_ITERS).unwrap();
            let mut rng = stream_rng(seed, 1);
            let sigma: Vec<Vec<f64>> = dbp
                .sigma_rows()
                .into_iter()
                .map(|r| r.into_iter().map(|s| s * (1.0 + 1e-6 * rng.random_range(-1.0..1.0))).collect())
                .collect();
            let pert = DiscreteBridgeProblem::new(sigma, dbp.a.clone(), dbp.b.clone()).unwrap();
            let moved = solve_discrete_sinkhorn(&pert, 1e-13, DEFAULT_MAX_ITERS).unwrap();
            for (r, s) in base.coupling.iter().zip(&moved.coupling) {
                for (x, y) in r.iter().zip(s) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }
}
