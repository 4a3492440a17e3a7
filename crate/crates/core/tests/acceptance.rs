//! End-to-end acceptance checks on the 2-d benchmark and the closed-form toy problems.
//!
//! Runs as a plain binary so that every check prints its verdict line. Exits nonzero if
//! any check fails.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use tsbridge::discrete_bridge::{solve_discrete_sinkhorn, DiscreteBridgeProblem};
use tsbridge::estimators::{dual_gradient, dual_objective, evaluate_eps, primal_value_from_duals};
use tsbridge::experiments::{
    export_partition, run_blowup_sweep, run_ga_convergence, run_sinkhorn_convergence,
    BlowupConfig, BlowupLeg, BlowupResult, ConvergenceStudy, DEFAULT_GRID_BOUNDS,
    DEFAULT_GRID_RESOLUTION,
};
use tsbridge::measures::{stream_rng, SampleBatch};
use tsbridge::potentials::{affine_scores, norm_linf_oplus};
use tsbridge::solvers::{
    contraction_probe, solve_gradient_ascent, solve_sinkhorn, GradientAscentConfig, SinkhornConfig,
};
use tsbridge::{DualPotentials, Problem, ProblemSeeds};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Fixtures {
    prob: Problem,
    batch: SampleBatch,
    sweep: BlowupResult,
    ga: ConvergenceStudy,
    sinkhorn: ConvergenceStudy,
}

impl Fixtures {
    fn build() -> Self {
        let prob = Problem::benchmark(ProblemSeeds::default());
        let seed = prob.seeds.batch;
        let ga_cfg = GradientAscentConfig {
            seed,
            ..Default::default()
        };
        let sk_cfg = SinkhornConfig {
            seed,
            ..Default::default()
        };
        let sweep_cfg = BlowupConfig {
            solver: GradientAscentConfig {
                seed,
                ..BlowupConfig::default().solver
            },
            ..Default::default()
        };
        Fixtures {
            batch: prob.reference.sample(ga_cfg.batch_size, seed),
            sweep: run_blowup_sweep(&prob, &sweep_cfg).expect("sweep runs"),
            ga: run_ga_convergence(&prob, &ga_cfg).expect("gradient ascent runs"),
            sinkhorn: run_sinkhorn_convergence(&prob, &sk_cfg).expect("sinkhorn runs"),
            prob,
        }
    }
}

fn certified_tail(sweep: &BlowupResult, k: usize) -> Vec<&BlowupLeg> {
    let legs: Vec<&BlowupLeg> = sweep.certified().collect();
    legs[legs.len().saturating_sub(k)..].to_vec()
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn blowup_slope(fx: &Fixtures) -> Verdict {
    let s = &fx.sweep;
    let pass = s.failure.is_none() && s.fit_points == 8 && (-2.3..=-1.7).contains(&s.slope);
    verdict(
        pass,
        format!(
            "slope {:.4} over {} certified legs, required in [-2.3, -1.7]",
            s.slope, s.fit_points
        ),
    )
}

fn blowup_intercept(fx: &Fixtures) -> Verdict {
    let tail = certified_tail(&fx.sweep, 3);
    let gaps: Vec<f64> = tail.iter().map(|l| l.intercept_gap.abs()).collect();
    let last = gaps.last().copied().unwrap_or(f64::INFINITY);
    let pass = tail.len() == 3 && last <= 0.5 && strictly_decreasing(&gaps);
    verdict(
        pass,
        format!(
            "|I + d ln eps - H| over last three eps {}, H = {:.4}",
            sci(&gaps), fx.sweep.reference_intercept
        ),
    )
}

fn toy_optimum() -> Verdict {
    let prob = Problem::single_atom(2);
    let batch_size = 100_000;
    let target = 2.0 * LN_2;
    let zero = DualPotentials::zeros(1, 1);
    let ga = GradientAscentConfig {
        batch_size,
        ..Default::default()
    };
    let sk = SinkhornConfig {
        batch_size,
        ..Default::default()
    };
    let (ga_pots, ga_trace) = solve_gradient_ascent(&prob, &zero, &ga).expect("toy ascent");
    let (sk_pots, sk_trace) = solve_sinkhorn(&prob, &zero, &sk).expect("toy sinkhorn");
    let mut pass = ga_trace.check().is_ok() && sk_trace.check().is_ok();
    let mut parts = Vec::new();
    for (name, pots, seed) in [("ascent", ga_pots, ga.seed), ("sinkhorn", sk_pots, sk.seed)] {
        let batch = prob.reference.sample(batch_size, seed);
        // the optimum is s = -ln E[exp(-½|X|² - ½|Y|²)]; its error is the relative error
        // of the batch mean, read off the total-mass estimate at the solution
        let mass = evaluate_eps(&prob, &pots, 1.0, &batch).total_mass;
        let se = mass.std_error / mass.value;
        let sum = pots.alpha[0] + pots.beta[0];
        let primal = primal_value_from_duals(&prob, &pots, 1.0);
        pass &= (sum - target).abs() <= 5.0 * se && (primal - target).abs() <= 5.0 * se;
        parts.push(format!("{name}: alpha+beta {sum:.5}, primal {primal:.5}, se {se:.1e}"));
    }
    verdict(pass, format!("{}; target {target:.5}", parts.join("; ")))
}

fn gradient_correctness(fx: &Fixtures) -> Verdict {
    let prob = &fx.prob;
    let batch = &fx.batch;
    let h = 1e-5;
    let mut rng = stream_rng(2024, 0);
    let (mut accepted, mut rejected) = (0, 0);
    let mut worst: f64 = 0.0;
    // a point is tie-free when no batch sample is within h of a cell boundary, so the
    // stencil never moves a sample to another cell
    let min_gap = |points: &[f64], shift: &[f64], draws: &[f64]| -> f64 {
        let mut scores = vec![0.0; shift.len()];
        draws
            .chunks(prob.dim())
            .map(|z| {
                affine_scores(z, points, shift, &mut scores);
                let mut sorted = scores.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                sorted[0] - sorted[1]
            })
            .fold(f64::INFINITY, f64::min)
    };
    while accepted < 20 {
        let pots = DualPotentials::new(
            prob.mu.half_sq_norms().iter().map(|c| -c + rng.random_range(-0.5..0.5)).collect(),
            prob.nu.half_sq_norms().iter().map(|c| -c + rng.random_range(-0.5..0.5)).collect(),
        );
        let gap_x = min_gap(prob.mu.flat_points(), &pots.alpha, batch.xs());
        let gap_y = min_gap(prob.nu.flat_points(), &pots.beta, batch.ys());
        if gap_x.min(gap_y) <= 2.0 * h {
            rejected += 1;
            continue;
        }
        accepted += 1;
        let grad = dual_gradient(prob, &pots, batch);
        let analytic: Vec<f64> = grad.alpha.iter().chain(&grad.beta).copied().collect();
        let mut diff = 0.0;
        for k in 0..analytic.len() {
            let bump = |sign: f64| {
                let mut p = pots.clone();
                if k < prob.n() {
                    p.alpha[k] += sign * h;
                } else {
                    p.beta[k - prob.n()] += sign * h;
                }
                dual_objective(prob, &p, batch).value
            };
            let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
            diff += (fd - analytic[k]).powi(2);
        }
        worst = worst.max(diff.sqrt() / grad.norm_l2());
    }
    verdict(
        worst <= 1e-4,
        format!("worst relative l2 error {worst:.2e} at 20 points ({rejected} near-tie draws skipped)"),
    )
}

fn rate_verdict(study: &ConvergenceStudy, norm: &str) -> (bool, String) {
    match study.fit {
        Some(f) => (
            f.slope < 0.0 && f.r_squared >= 0.95,
            format!(
                "{norm} residual slope {:.4e}, R^2 {:.4}, theta {:.4}, window {} iters above 10x floor {:.2e}",
                f.slope, f.r_squared, f.theta, f.window_end, f.noise_floor
            ),
        ),
        None => (false, format!("{norm} residual has no clean window")),
    }
}

fn ga_linear_convergence(fx: &Fixtures) -> Verdict {
    let (pass, detail) = rate_verdict(&fx.ga, "l2");
    let backtracks = fx.ga.trace.backtracks.len();
    verdict(pass, format!("{detail}, {backtracks} step halvings"))
}

fn sinkhorn_contraction(fx: &Fixtures) -> Verdict {
    let center = &fx.sinkhorn.trace.final_potentials;
    let ratios = contraction_probe(&fx.prob, center, 0.5, 50, 10.0, &fx.batch, 7);
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    let (rate_ok, detail) = rate_verdict(&fx.sinkhorn, "linf");
    verdict(
        worst < 1.0 && rate_ok,
        format!("max probe ratio {worst:.4} over 50 pairs; {detail}"),
    )
}

fn marginal_identities(fx: &Fixtures) -> Verdict {
    let prob = &fx.prob;
    let pots = &fx.ga.trace.final_potentials;
    let fit = evaluate_eps(prob, pots, 1.0, &fx.batch);
    let fresh = evaluate_eps(prob, pots, 1.0, &prob.reference.sample(200_000, 9001));
    let mut worst: f64 = 0.0;
    let sides = [
        (prob.mu.weights(), &fit.row_mass, &fresh.row_mass),
        (prob.nu.weights(), &fit.col_mass, &fresh.col_mass),
    ];
    for (w, a, b) in sides {
        for ((w, a), b) in w.iter().zip(a).zip(b) {
            worst = worst.max((b.value - w).abs() / a.combined_se(b));
        }
    }
    let total_z = (fresh.total_mass.value - 1.0).abs() / fit.total_mass.combined_se(&fresh.total_mass);
    verdict(
        worst <= 5.0 && total_z <= 5.0,
        format!(
            "worst marginal deviation {worst:.2} se, total mass {:.4} ({total_z:.2} se) on fresh draws",
            fresh.total_mass.value
        ),
    )
}

fn limit_coupling(fx: &Fixtures) -> Verdict {
    let tail = certified_tail(&fx.sweep, 2);
    let errs: Vec<f64> = tail.iter().map(|l| l.coupling_error).collect();
    let pass = tail.len() == 2 && errs.iter().all(|e| *e <= 0.05) && strictly_decreasing(&errs);
    verdict(pass, format!("max entrywise error at two smallest eps {}", sci(&errs)))
}

fn discrete_oracle() -> Verdict {
    let half = vec![0.5, 0.5];
    let cases = [
        (vec![vec![1.0, 1.0], vec![1.0, 1.0]], [[0.25, 0.25], [0.25, 0.25]]),
        (
            vec![vec![2.0, 1.0], vec![1.0, 2.0]],
            [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]],
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (sigma, want) in cases {
        let dbp = DiscreteBridgeProblem::new(sigma, half.clone(), half.clone()).expect("valid");
        let sol = solve_discrete_sinkhorn(&dbp, 1e-12, 100_000).expect("converges");
        let err = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| (sol.coupling[i][j] - want[i][j]).abs())
            .fold(0.0, f64::max);
        pass &= err <= 1e-10 && sol.marginal_violation < 1e-12;
        parts.push(format!("error {err:.1e}, violation {:.1e}", sol.marginal_violation));
    }
    verdict(pass, parts.join("; "))
}

fn hard_constraint_recovery(fx: &Fixtures) -> Verdict {
    let tail = certified_tail(&fx.sweep, 3);
    let cx: Vec<f64> = tail.iter().map(|l| l.transport.cost_x.value).collect();
    let cy: Vec<f64> = tail.iter().map(|l| l.transport.cost_y.value).collect();
    let small = |v: &[f64]| v.last().is_some_and(|c| *c < 0.02);
    let pass = tail.len() == 3 && strictly_decreasing(&cx) && strictly_decreasing(&cy) && small(&cx) && small(&cy);
    verdict(pass, format!("x costs {}, y costs {}", sci(&cx), sci(&cy)))
}

fn lambda_consistency(fx: &Fixtures) -> Verdict {
    let prob = &fx.prob;
    let zero = DualPotentials::zeros(prob.n(), prob.m());
    // fixed-step ascent circles the kinked maximizer of the frozen objective; the average
    // of its second half is the reference point
    let ga = GradientAscentConfig {
        step_size: 0.02,
        max_iters: 10_000,
        seed: prob.seeds.batch,
        backtrack: false,
        ..Default::default()
    };
    let (_, trace) = solve_gradient_ascent(prob, &zero, &ga).expect("reference ascent");
    let optimum = trace.tail_average(5_000);
    let mut init = zero;
    let mut dists = Vec::new();
    for lambda in [10.0, 100.0, 1000.0] {
        let cfg = SinkhornConfig {
            lambda,
            max_iters: 50 * lambda as usize,
            fixed_point_tol: 1e-12,
            seed: prob.seeds.batch,
            ..Default::default()
        };
        let (pots, _) = solve_sinkhorn(prob, &init, &cfg).expect("sinkhorn");
        dists.push(norm_linf_oplus(&pots, &optimum).expect("same shapes"));
        init = pots;
    }
    verdict(
        strictly_decreasing(&dists),
        format!("linf distance to the ascent optimizer for lambda 10, 100, 1000: {}", sci(&dists)),
    )
}

fn partition_agreement(fx: &Fixtures) -> Verdict {
    let grid = |pots: &DualPotentials| {
        export_partition(&fx.prob, pots, DEFAULT_GRID_BOUNDS, DEFAULT_GRID_RESOLUTION, 0, 0)
            .expect("2-d export")
    };
    let a = grid(&fx.ga.trace.final_potentials);
    let b = grid(&fx.sinkhorn.trace.final_potentials);
    let (dx, dy) = a.disagreement(&b).expect("same grid");
    verdict(
        dx < 0.05 && dy < 0.05,
        format!("disagreement x {:.2}%, y {:.2}%", 100.0 * dx, 100.0 * dy),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let fx = Fixtures::build();
    eprintln!("fixtures ready in {:.1?}", start.elapsed());
    let checks: [(&str, Box<dyn Fn() -> Verdict + '_>); 12] = [
        ("blow-up slope", Box::new(|| blowup_slope(&fx))),
        ("blow-up intercept", Box::new(|| blowup_intercept(&fx))),
        ("closed-form toy optimum", Box::new(toy_optimum)),
        ("gradient correctness", Box::new(|| gradient_correctness(&fx))),
        ("gradient ascent linear convergence", Box::new(|| ga_linear_convergence(&fx))),
        ("sinkhorn contraction", Box::new(|| sinkhorn_contraction(&fx))),
        ("marginal identities", Box::new(|| marginal_identities(&fx))),
        ("limit coupling", Box::new(|| limit_coupling(&fx))),
        ("discrete bridge exactness", Box::new(discrete_oracle)),
        ("hard-constraint recovery", Box::new(|| hard_constraint_recovery(&fx))),
        ("lambda consistency", Box::new(|| lambda_consistency(&fx))),
        ("partition agreement", Box::new(|| partition_agreement(&fx))),
    ];
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.1?}]",
            if v.pass { "PASS" } else { "FAIL" },
            k + 1,
            v.detail,
            t.elapsed()
        );
    }
    println!("acceptance: {} of 12 passed in {:.1?}", 12 - failed, start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
