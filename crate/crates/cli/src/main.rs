//! `tsbridge` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure while writing, 2 invalid input or configuration,
//! 3 numerical failure (any overflow flag counts under `--strict`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tsbridge::discrete_bridge::{
    build_limit_sigma, solve_discrete_sinkhorn, DiscreteBridgeProblem, DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
};
use tsbridge::experiments::{
    default_eps_values, export_partition, run_blowup_sweep, write_blowup_csv, write_trace_csv,
    BlowupConfig, DEFAULT_GRID_BOUNDS, DEFAULT_GRID_RESOLUTION,
};
use tsbridge::measures::GaussianReference;
use tsbridge::problem::{write_json, ProblemFile, BENCH_CORR, BENCH_MEAN_X, BENCH_MEAN_Y, BENCH_SIZE};
use tsbridge::solvers::{
    ascent_evaluation, gauge_fix, psi_map, solve_gradient_ascent, solve_sinkhorn,
    GradientAscentConfig, Sampler, SinkhornConfig, Termination,
};
use tsbridge::{DualPotentials, Error, Problem, ProblemSeeds};

#[derive(Parser)]
#[command(name = "tsbridge", version, about = "Semi-discrete transport-relaxed Schrödinger bridge solvers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed override. `generate`: support points. Other commands: Monte Carlo batch
    /// (defaults to the seed stored in the problem file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Monte Carlo batch size.
    #[arg(long, global = true, default_value_t = 8000)]
    batch_size: usize,
    /// Treat any overflow flag as a numerical failure.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random problem and write it as JSON.
    Generate(GenerateArgs),
    /// Solve the dual problem by gradient ascent or the Sinkhorn-type iteration.
    Solve(SolveArgs),
    /// Sweep ε, fit I^ε against ln ε and compare with the discrete-bridge limit.
    Blowup(BlowupArgs),
    /// Rasterize the Laguerre partitions of a 2-d solution.
    Partition(PartitionArgs),
    /// Solve the discrete bridge of the ε → 0 limit, or of an explicit σ matrix.
    Limit(LimitArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = BENCH_SIZE)]
    n: usize,
    #[arg(long, default_value_t = BENCH_SIZE)]
    m: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Correlation between matching coordinates of the reference.
    #[arg(long, default_value_t = BENCH_CORR, allow_hyphen_values = true)]
    corr: f64,
    /// Comma-separated reference mean of x (default: the benchmark mean in 2-d, else 0).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mean_x: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mean_y: Option<Vec<f64>>,
    /// File name inside the output directory.
    #[arg(long, default_value = "problem.json")]
    name: String,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MethodArg {
    Ga,
    Sinkhorn,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Reference,
    Localized,
}

impl From<SamplerArg> for Sampler {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Reference => Sampler::Reference,
            SamplerArg::Localized => Sampler::Localized,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    problem: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Ga)]
    method: MethodArg,
    /// Iterations (default 2000 for ga, 500 for sinkhorn).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    step_size: f64,
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    /// Stop early once the gradient norm (ga) or fixed-point step (sinkhorn) is this small.
    #[arg(long, default_value_t = 0.0)]
    tol: f64,
    /// Draw a fresh batch at every iteration.
    #[arg(long)]
    refresh_batch: bool,
    #[arg(long, value_enum, default_value_t = SamplerArg::Reference)]
    sampler: SamplerArg,
    /// Take every gradient step at full length.
    #[arg(long)]
    no_backtrack: bool,
}

#[derive(Args)]
struct BlowupArgs {
    problem: PathBuf,
    /// Comma-separated, strictly decreasing ε values (default 1, 1/4, ..., 4^-7).
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    /// Step in the rescaled coordinates; the step on (α, β) is this times ε².
    #[arg(long, default_value_t = 1.0)]
    step_size: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Largest accepted ε‖∇U^ε‖₂ for a leg to enter the fit.
    #[arg(long, default_value_t = 0.05)]
    certificate_tol: f64,
    #[arg(long, value_enum, default_value_t = SamplerArg::Localized)]
    sampler: SamplerArg,
    /// Fit only the k smallest certified ε.
    #[arg(long)]
    fit_smallest: Option<usize>,
    /// Seed of the independent batch for cell masses and transport costs.
    #[arg(long)]
    eval_seed: Option<u64>,
}

#[derive(Args)]
struct PartitionArgs {
    problem: PathBuf,
    /// Potentials JSON written by `solve`.
    potentials: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = DEFAULT_GRID_BOUNDS.0, allow_hyphen_values = true)]
    lower: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_BOUNDS.1, allow_hyphen_values = true)]
    upper: f64,
    /// Reference samples drawn over each panel.
    #[arg(long, default_value_t = 500)]
    samples: usize,
}

#[derive(Args)]
struct LimitArgs {
    /// Problem file, or a JSON object with fields `sigma`, `a`, `b`.
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
}

enum Failure {
    Core(Error),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                _ if e.is_validation() => 2,
                Error::Io { .. } => 1,
                _ => 3,
            })
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let g = &cli.global;
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(invalid("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| invalid(&e.to_string()))?;
    }
    if g.batch_size == 0 {
        return Err(invalid("--batch-size must be positive"));
    }
    fs::create_dir_all(&g.out).map_err(|source| Error::Io {
        path: g.out.clone(),
        source,
    })?;
    match &cli.command {
        Command::Generate(a) => generate(g, a),
        Command::Solve(a) => solve(g, a),
        Command::Blowup(a) => blowup(g, a),
        Command::Partition(a) => partition(g, a),
        Command::Limit(a) => limit(g, a),
    }
}

fn invalid(msg: &str) -> Failure {
    Failure::Core(Error::InvalidConfig(msg.to_owned()))
}

/// Reads an input file; a missing file is a caller mistake, not an I/O failure.
fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| invalid(&format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_input(path)?).map_err(|source| {
        Failure::Core(Error::Json {
            path: path.to_owned(),
            source,
        })
    })
}

fn load_problem(path: &Path) -> Result<Problem, Failure> {
    Ok(parse_json::<ProblemFile>(path)?.into_problem()?)
}

fn batch_seed(g: &Global, prob: &Problem) -> u64 {
    g.seed.unwrap_or(prob.seeds.batch)
}

fn progress(g: &Global, msg: impl FnOnce() -> String) {
    if g.verbose {
        eprintln!("{}", msg());
    }
}

/// Fails under `--strict` when `overflow` is set.
fn strict_check(g: &Global, overflow: bool, what: &str) -> Outcome {
    if g.strict && overflow {
        return Err(Failure::Numerical(format!("{what}: exponent overflow flagged")));
    }
    Ok(())
}

fn generate(g: &Global, a: &GenerateArgs) -> Outcome {
    let bench = |v: [f64; 2]| if a.dim == 2 { v.to_vec() } else { vec![0.0; a.dim] };
    let mean_x = a.mean_x.clone().unwrap_or_else(|| bench(BENCH_MEAN_X));
    let mean_y = a.mean_y.clone().unwrap_or_else(|| bench(BENCH_MEAN_Y));
    for (name, v) in [("--mean-x", &mean_x), ("--mean-y", &mean_y)] {
        if v.len() != a.dim {
            return Err(invalid(&format!("{name} has {} entries, --dim is {}", v.len(), a.dim)));
        }
    }
    let reference = GaussianReference::new(mean_x, mean_y, a.corr)?;
    let marginals = g.seed.unwrap_or(0);
    let seeds = ProblemSeeds {
        marginals,
        batch: marginals.wrapping_add(1),
    };
    let prob = Problem::generate(a.n, a.m, reference, seeds)?;
    let path = g.out.join(&a.name);
    prob.save(&path)?;
    println!("wrote {} (n={}, m={}, d={})", path.display(), a.n, a.m, a.dim);
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
enum SolverEcho {
    Ga(GradientAscentConfig),
    Sinkhorn(SinkhornConfig),
}

#[derive(Serialize)]
struct SolveEcho<'a> {
    problem: &'a Path,
    strict: bool,
    solver: SolverEcho,
}

/// Stationarity check of the final iterate on its own batch.
#[derive(Serialize)]
struct Certificate {
    /// `‖∇U^ε‖₂` (ga) or `‖Ψ(p) - p‖_{l∞⊕}` (sinkhorn).
    residual: f64,
    /// Monte Carlo standard error of the same quantity.
    noise_floor: f64,
    /// `residual <= 10 * noise_floor` with no overflow at the final iterate.
    passed: bool,
}

#[derive(Serialize)]
struct PotentialsReport<'a> {
    method: MethodArg,
    alpha: &'a [f64],
    beta: &'a [f64],
    certificate: Certificate,
    termination: Termination,
    iterations: usize,
    overflow_iters: Vec<usize>,
    config: SolveEcho<'a>,
}

#[derive(Deserialize)]
struct PotentialsFile {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn solve(g: &Global, a: &SolveArgs) -> Outcome {
    let prob = load_problem(&a.problem)?;
    let seed = batch_seed(g, &prob);
    let init = DualPotentials::zeros(prob.n(), prob.m());
    let (trace, certificate, echo, tag) = match a.method {
        MethodArg::Ga => {
            let cfg = GradientAscentConfig {
                step_size: a.step_size,
                max_iters: a.iters.unwrap_or(2000),
                grad_tol: a.tol,
                batch_size: g.batch_size,
                seed,
                eps: a.eps,
                refresh_batch: a.refresh_batch,
                backtrack: !a.no_backtrack,
                sampler: a.sampler.into(),
                ..Default::default()
            };
            let (_, trace) = solve_gradient_ascent(&prob, &init, &cfg)?;
            let last = trace.last();
            let eval = ascent_evaluation(&prob, &trace.final_potentials, &cfg, last.iter);
            let se: f64 = eval
                .row_mass
                .iter()
                .chain(&eval.col_mass)
                .map(|e| e.std_error * e.std_error)
                .sum::<f64>()
                .sqrt()
                / cfg.eps;
            let cert = Certificate {
                residual: last.grad_or_step_norm,
                noise_floor: se,
                passed: last.grad_or_step_norm <= 10.0 * se && !last.overflow,
            };
            (trace, cert, SolverEcho::Ga(cfg), "ga")
        }
        MethodArg::Sinkhorn => {
            let cfg = SinkhornConfig {
                lambda: a.lambda,
                max_iters: a.iters.unwrap_or(500),
                fixed_point_tol: a.tol,
                batch_size: g.batch_size,
                seed,
                refresh_batch: a.refresh_batch,
            };
            let (_, trace) = solve_sinkhorn(&prob, &init, &cfg)?;
            let last = trace.last();
            let stream = if cfg.refresh_batch { last.iter as u64 } else { 0 };
            let batch = prob.reference.sample_stream(cfg.batch_size, seed, stream);
            let (_, si) = psi_map(&prob, &trace.final_potentials, cfg.lambda, &batch);
            // Ψ moves each coordinate by (ln w - ln F)/λ; ln F has standard error se(F)/F
            let rel = |f: &[tsbridge::estimators::Estimate]| {
                f.iter().map(|e| e.std_error / e.value).fold(0.0, f64::max)
            };
            let se = (rel(&si.alpha) + rel(&si.beta)) / cfg.lambda;
            let cert = Certificate {
                residual: last.grad_or_step_norm,
                noise_floor: se,
                passed: last.grad_or_step_norm <= 10.0 * se && !last.overflow,
            };
            (trace, cert, SolverEcho::Sinkhorn(cfg), "sinkhorn")
        }
    };
    write_trace_csv(&g.out.join(format!("trace_{tag}.csv")), &trace)?;
    let pots = gauge_fix(&trace.final_potentials);
    let report = PotentialsReport {
        method: a.method,
        alpha: &pots.alpha,
        beta: &pots.beta,
        termination: trace.termination,
        iterations: trace.last().iter,
        overflow_iters: trace.overflow_iters(),
        config: SolveEcho {
            problem: &a.problem,
            strict: g.strict,
            solver: echo,
        },
        certificate,
    };
    let path = g.out.join(format!("potentials_{tag}.json"));
    write_json(&path, &report)?;
    println!(
        "{tag}: {} iterations, residual {:.3e} (noise floor {:.3e}, certificate {}), wrote {}",
        report.iterations,
        report.certificate.residual,
        report.certificate.noise_floor,
        if report.certificate.passed { "passed" } else { "not passed" },
        path.display()
    );
    trace.check()?;
    if !report.certificate.residual.is_finite() {
        return Err(Failure::Numerical("final residual is not finite".into()));
    }
    strict_check(g, trace.any_overflow(), "solver")
}

#[derive(Serialize)]
struct BlowupEcho<'a> {
    problem: &'a Path,
    strict: bool,
    sweep: &'a BlowupConfig,
}

#[derive(Serialize)]
struct LegSummary {
    eps: f64,
    primal_value: f64,
    grad_norm: f64,
    marginal_residual: f64,
    certified: bool,
    overflow: bool,
    intercept_gap: f64,
    coupling_error: f64,
    transport_cost_x: f64,
    transport_cost_y: f64,
    expansion_p: Vec<f64>,
    expansion_q: Vec<f64>,
}

#[derive(Serialize)]
struct BlowupSummary<'a> {
    dim: usize,
    slope: f64,
    intercept: f64,
    fit_points: usize,
    reference_slope: f64,
    /// `H(π⁰|σ)` of the limit coupling.
    reference_intercept: f64,
    failure: &'a Option<String>,
    legs: Vec<LegSummary>,
    config: BlowupEcho<'a>,
}

fn blowup(g: &Global, a: &BlowupArgs) -> Outcome {
    let prob = load_problem(&a.problem)?;
    let defaults = BlowupConfig::default();
    let cfg = BlowupConfig {
        eps_values: a.eps.clone().unwrap_or_else(default_eps_values),
        solver: GradientAscentConfig {
            step_size: a.step_size,
            max_iters: a.iters,
            batch_size: g.batch_size,
            seed: batch_seed(g, &prob),
            sampler: a.sampler.into(),
            ..defaults.solver
        },
        certificate_tol: a.certificate_tol,
        fit_smallest: a.fit_smallest,
        eval_seed: a.eval_seed.unwrap_or(defaults.eval_seed),
    };
    progress(g, || format!("sweeping {} values of eps", cfg.eps_values.len()));
    let result = run_blowup_sweep(&prob, &cfg)?;
    write_blowup_csv(&g.out.join("blowup.csv"), &result)?;
    let legs = result
        .legs
        .iter()
        .map(|l| LegSummary {
            eps: l.eps,
            primal_value: l.primal_value,
            grad_norm: l.grad_norm,
            marginal_residual: l.marginal_residual,
            certified: l.certified,
            overflow: l.overflow,
            intercept_gap: l.intercept_gap,
            coupling_error: l.coupling_error,
            transport_cost_x: l.transport.cost_x.value,
            transport_cost_y: l.transport.cost_y.value,
            expansion_p: l.expansion.alpha.clone(),
            expansion_q: l.expansion.beta.clone(),
        })
        .collect();
    let summary = BlowupSummary {
        dim: result.dim,
        slope: result.slope,
        intercept: result.intercept,
        fit_points: result.fit_points,
        reference_slope: result.reference_slope,
        reference_intercept: result.reference_intercept,
        failure: &result.failure,
        legs,
        config: BlowupEcho {
            problem: &a.problem,
            strict: g.strict,
            sweep: &cfg,
        },
    };
    write_json(&g.out.join("blowup_summary.json"), &summary)?;
    for l in &result.legs {
        progress(g, || {
            format!(
                "eps {:.4e}  I {:.5}  gap {:+.4e}  certified {}",
                l.eps, l.primal_value, l.intercept_gap, l.certified
            )
        });
    }
    println!(
        "slope {:.4} (reference {}), intercept {:.4}, H(limit) {:.4}, {} of {} legs fitted",
        result.slope,
        result.reference_slope,
        result.intercept,
        result.reference_intercept,
        result.fit_points,
        result.legs.len()
    );
    if let Some(msg) = &result.failure {
        return Err(Failure::Numerical(msg.clone()));
    }
    strict_check(g, result.legs.iter().any(|l| l.overflow), "blowup sweep")
}

#[derive(Serialize)]
struct PartitionReport<'a> {
    resolution: usize,
    bounds: (f64, f64),
    files: [&'static str; 3],
    config: PartitionEcho<'a>,
}

#[derive(Serialize)]
struct PartitionEcho<'a> {
    problem: &'a Path,
    potentials: &'a Path,
    seed: u64,
    samples: usize,
}

fn partition(g: &Global, a: &PartitionArgs) -> Outcome {
    let prob = load_problem(&a.problem)?;
    let file: PotentialsFile = parse_json(&a.potentials)?;
    let pots = DualPotentials::new(file.alpha, file.beta);
    pots.check_shape(prob.n(), prob.m())?;
    if !(a.lower < a.upper) {
        return Err(invalid("--lower must be below --upper"));
    }
    let seed = batch_seed(g, &prob);
    let grid = export_partition(&prob, &pots, (a.lower, a.upper), a.resolution, a.samples, seed)?;
    grid.write_csv(&g.out)?;
    grid.write_svg(&g.out.join("partition.svg"))?;
    let report = PartitionReport {
        resolution: a.resolution,
        bounds: (a.lower, a.upper),
        files: ["partition_x.csv", "partition_y.csv", "partition.svg"],
        config: PartitionEcho {
            problem: &a.problem,
            potentials: &a.potentials,
            seed,
            samples: a.samples,
        },
    };
    write_json(&g.out.join("partition.json"), &report)?;
    println!(
        "wrote {}x{} partitions to {}",
        a.resolution,
        a.resolution,
        g.out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LimitInput {
    Bridge {
        sigma: Vec<Vec<f64>>,
        a: Vec<f64>,
        b: Vec<f64>,
    },
    Problem(ProblemFile),
}

#[derive(Serialize)]
struct LimitReport<'a> {
    sigma: &'a [Vec<f64>],
    coupling: &'a [Vec<f64>],
    p: &'a [f64],
    q: &'a [f64],
    /// `H(π|σ)`.
    entropy: f64,
    iterations: usize,
    marginal_violation: f64,
    config: LimitEcho<'a>,
}

#[derive(Serialize)]
struct LimitEcho<'a> {
    input: &'a Path,
    tol: f64,
    max_iters: usize,
}

fn limit(g: &Global, a: &LimitArgs) -> Outcome {
    let dbp = match parse_json::<LimitInput>(&a.input)? {
        LimitInput::Bridge { sigma, a, b } => DiscreteBridgeProblem::new(sigma, a, b)?,
        LimitInput::Problem(file) => {
            let prob = file.into_problem()?;
            DiscreteBridgeProblem::new(
                build_limit_sigma(&prob),
                prob.mu.weights().to_vec(),
                prob.nu.weights().to_vec(),
            )?
        }
    };
    let sol = solve_discrete_sinkhorn(&dbp, a.tol, a.max_iters)?;
    let sigma = dbp.sigma_rows();
    let report = LimitReport {
        sigma: &sigma,
        coupling: &sol.coupling,
        p: &sol.potentials.alpha,
        q: &sol.potentials.beta,
        entropy: sol.entropy,
        iterations: sol.iterations,
        marginal_violation: sol.marginal_violation,
        config: LimitEcho {
            input: &a.input,
            tol: a.tol,
            max_iters: a.max_iters,
        },
    };
    let path = g.out.join("limit.json");
    write_json(&path, &report)?;
    println!(
        "H = {:.10} after {} iterations (violation {:.1e}), wrote {}",
        sol.entropy,
        sol.iterations,
        sol.marginal_violation,
        path.display()
    );
    Ok(())
}
