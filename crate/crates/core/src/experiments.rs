//! Scripted numerical studies: the small-ε sweep, convergence-rate fits and partition exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discrete_bridge::{
    blowup_reference_values, expansion_residuals, potentials_from_expansion, LimitReference,
};
use crate::error::{Error, Result};
use crate::estimators::{
    primal_value_from_duals, CellMassMatrix, LocalizedBatch, LocalizedKernel, TransportCosts,
};
use crate::potentials::{affine_scores, argmax, cell_index, norm_l2_oplus, norm_linf_oplus, DualPotentials};
use crate::problem::Problem;
use crate::solvers::{
    solve_gradient_ascent, solve_sinkhorn, GradientAscentConfig, Sampler, SinkhornConfig,
    SolveTrace, StepScaling,
};

/// `{1, 4⁻¹, …, 4⁻⁷}`.
pub fn default_eps_values() -> Vec<f64> {
    (0..8).map(|k| 4f64.powi(-k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupConfig {
    pub eps_values: Vec<f64>,
    /// Per-ε solver settings; `eps` is overwritten for each leg.
    pub solver: GradientAscentConfig,
    /// Largest accepted `‖(a - row mass, b - column mass)‖₂ = ε‖∇U^ε‖₂` at a leg's final iterate.
    pub certificate_tol: f64,
    /// Restrict the fit to the `k` smallest certified ε.
    pub fit_smallest: Option<usize>,
    /// Seed of the independent batch used for cell masses and transport costs.
    pub eval_seed: u64,
}

impl Default for BlowupConfig {
    fn default() -> Self {
        Self {
            eps_values: default_eps_values(),
            solver: GradientAscentConfig {
                step_size: 1.0,
                max_iters: 1000,
                sampler: Sampler::Localized,
                step_scaling: StepScaling::EpsSquared,
                ..GradientAscentConfig::default()
            },
            certificate_tol: 0.05,
            fit_smallest: None,
            eval_seed: 2,
        }
    }
}

impl BlowupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_values.is_empty() {
            return Err(Error::InvalidConfig("empty eps list".into()));
        }
        if self.eps_values.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::InvalidConfig("eps values must be positive".into()));
        }
        if self.eps_values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("eps values must be strictly decreasing".into()));
        }
        if !(self.certificate_tol > 0.0) {
            return Err(Error::InvalidConfig("certificate_tol must be positive".into()));
        }
        if self.fit_smallest.is_some_and(|k| k < 2) {
            return Err(Error::InvalidConfig("a fit needs at least two points".into()));
        }
        self.solver.validate()
    }
}

/// One ε of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupLeg {
    pub eps: f64,
    /// `I^ε` from the linear part of `U^ε` at the final iterate.
    pub primal_value: f64,
    /// `‖∇U^ε‖₂` on the solver's batch.
    pub grad_norm: f64,
    /// `ε‖∇U^ε‖₂`, the certified quantity.
    pub marginal_residual: f64,
    pub certified: bool,
    pub overflow: bool,
    /// Gauge-fixed solution.
    pub potentials: DualPotentials,
    /// `(α + ½‖x‖² + (d/2) ε ln ε)/ε`, gauge-fixed.
    pub expansion: DualPotentials,
    /// Cell masses on an independent batch.
    pub cell_masses: CellMassMatrix,
    pub transport: TransportCosts,
    /// `max |πᵢⱼ^ε - πᵢⱼ⁰|`.
    pub coupling_error: f64,
    /// `I^ε + d ln ε - H(π⁰|σ)`.
    pub intercept_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupResult {
    pub dim: usize,
    pub legs: Vec<BlowupLeg>,
    pub slope: f64,
    pub intercept: f64,
    /// Number of legs in the fit.
    pub fit_points: usize,
    pub reference_slope: f64,
    pub reference_intercept: f64,
    pub limit: LimitReference,
    /// Set when a leg failed; earlier legs are kept.
    pub failure: Option<String>,
}

impl BlowupResult {
    pub fn certified(&self) -> impl Iterator<Item = &BlowupLeg> {
        self.legs.iter().filter(|l| l.certified)
    }

    pub fn eps_values(&self) -> Vec<f64> {
        self.legs.iter().map(|l| l.eps).collect()
    }

    pub fn primal_values(&self) -> Vec<f64> {
        self.legs.iter().map(|l| l.primal_value).collect()
    }
}

/// Ordinary least squares `y ≈ slope·x + intercept` with its `R²`.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

/// Gradient ascent on `U^ε` for each ε, each leg warm-started at the previous leg's
/// expansion residuals `(p, q)`; the first leg starts at `p = q = 0`.
pub fn run_blowup_sweep(prob: &Problem, cfg: &BlowupConfig) -> Result<BlowupResult> {
    cfg.validate()?;
    let limit = blowup_reference_values(prob)?;
    let d = prob.dim() as f64;
    let h0 = limit.entropy();
    let mut pq = DualPotentials::zeros(prob.n(), prob.m());
    let mut legs = Vec::with_capacity(cfg.eps_values.len());
    let mut failure = None;
    for &eps in &cfg.eps_values {
        let solver = GradientAscentConfig {
            eps,
            ..cfg.solver.clone()
        };
        let init = potentials_from_expansion(prob, &pq, eps);
        let (pots, trace) = match solve_gradient_ascent(prob, &init, &solver) {
            Ok(out) => out,
            Err(e) => {
                failure = Some(format!("eps {eps}: {e}"));
                break;
            }
        };
        if let Err(e) = trace.check() {
            failure = Some(format!("eps {eps}: {e}"));
            break;
        }
        let grad_norm = trace.last().grad_or_step_norm;
        let marginal_residual = eps * grad_norm;
        let pots = pots.gauge_fixed();
        pq = expansion_residuals(prob, &pots, eps);
        let primal_value = primal_value_from_duals(prob, &pots, eps);
        let eval_batch = LocalizedBatch::new(prob.dim(), solver.batch_size, cfg.eval_seed);
        let kernel = LocalizedKernel::new(prob, eps, &eval_batch);
        let cell_masses = kernel.cell_mass_matrix(&pots);
        let transport = kernel.transport_costs(&pots);
        let coupling_error = (0..prob.n())
            .flat_map(|i| (0..prob.m()).map(move |j| (i, j)))
            .map(|(i, j)| (cell_masses.get(i, j) - limit.coupling()[i][j]).abs())
            .fold(0.0, f64::max);
        let overflow = trace.any_overflow() || cell_masses.flagged;
        legs.push(BlowupLeg {
            eps,
            primal_value,
            grad_norm,
            marginal_residual,
            certified: marginal_residual <= cfg.certificate_tol && !overflow,
            overflow,
            potentials: pots,
            expansion: pq.gauge_fixed(),
            cell_masses,
            transport,
            coupling_error,
            intercept_gap: primal_value + d * eps.ln() - h0,
        });
    }
    let mut fit: Vec<&BlowupLeg> = legs.iter().filter(|l| l.certified).collect();
    if let Some(k) = cfg.fit_smallest {
        let skip = fit.len().saturating_sub(k);
        fit.drain(..skip);
    }
    let (slope, intercept) = if fit.len() >= 2 {
        let xs: Vec<f64> = fit.iter().map(|l| l.eps.ln()).collect();
        let ys: Vec<f64> = fit.iter().map(|l| l.primal_value).collect();
        let (s, i, _) = ols(&xs, &ys);
        (s, i)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(BlowupResult {
        dim: prob.dim(),
        fit_points: fit.len(),
        legs,
        slope,
        intercept,
        reference_slope: -d,
        reference_intercept: h0,
        limit,
        failure,
    })
}

/// Log-linear fit of a residual sequence over its clean window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    /// Slope of `ln residual` against the iteration index.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Per-iteration contraction factor `exp(slope)`.
    pub theta: f64,
    /// Estimated distance of the final iterate from the limit of the iteration.
    pub noise_floor: f64,
    /// The window is the leading run of iterates `[0, window_end)` whose residual exceeds
    /// ten times the noise floor.
    pub window_end: usize,
}

/// Noise floor of a trajectory whose step lengths are `steps`.
///
/// If the steps still shrink geometrically over the last tenth, with ratio `θ`, the final
/// iterate is about `last step · θ/(1-θ)` from the limit. Otherwise the trajectory is
/// fluctuating and the floor is the largest residual over the last tenth.
pub fn noise_floor(steps: &[f64], residuals: &[f64]) -> f64 {
    let len = steps.len();
    let tail = (len / 10).max(2).min(len);
    let start = len - tail;
    let residual_scale = residuals.first().copied().unwrap_or(0.0);
    let rounding = 1e-14 * residual_scale.max(f64::MIN_POSITIVE);
    let fluctuation = || residuals[residuals.len().saturating_sub(tail + 1)..]
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let (s0, s1) = (steps[start], steps[len - 1]);
    let floor = if s0 > 0.0 && s1 > 0.0 && tail > 1 {
        let theta = (s1 / s0).powf(1.0 / (tail - 1) as f64);
        if theta < 1.0 {
            s1 * theta / (1.0 - theta)
        } else {
            fluctuation()
        }
    } else if s1 == 0.0 {
        0.0
    } else {
        fluctuation()
    };
    floor.max(rounding)
}

/// Fits `ln residual` over the clean window; `None` if the window has fewer than 3 points.
pub fn fit_rate(steps: &[f64], residuals: &[f64]) -> Option<RateFit> {
    let floor = noise_floor(steps, residuals);
    let window_end = residuals
        .iter()
        .position(|r| *r <= 10.0 * floor)
        .unwrap_or(residuals.len());
    if window_end < 3 {
        return None;
    }
    let xs: Vec<f64> = (0..window_end).map(|t| t as f64).collect();
    let ys: Vec<f64> = residuals[..window_end].iter().map(|r| r.ln()).collect();
    let (slope, intercept, r_squared) = ols(&xs, &ys);
    Some(RateFit {
        slope,
        intercept,
        r_squared,
        theta: slope.exp(),
        noise_floor: floor,
        window_end,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub trace: SolveTrace,
    pub fit: Option<RateFit>,
}

fn step_lengths(trace: &SolveTrace, norm: fn(&DualPotentials, &DualPotentials) -> Result<f64>) -> Vec<f64> {
    trace
        .iterates
        .windows(2)
        .map(|w| norm(&w[0], &w[1]).expect("shapes fixed by solver"))
        .collect()
}

/// Gradient ascent from `0` with the residual-to-final fit in `l²⊕`.
pub fn run_ga_convergence(prob: &Problem, cfg: &GradientAscentConfig) -> Result<ConvergenceStudy> {
    let (_, trace) = solve_gradient_ascent(prob, &DualPotentials::zeros(prob.n(), prob.m()), cfg)?;
    trace.check()?;
    let residuals: Vec<f64> = trace.records.iter().map(|r| r.residual_l2).collect();
    let fit = fit_rate(&step_lengths(&trace, norm_l2_oplus), &residuals);
    Ok(ConvergenceStudy { trace, fit })
}

/// Sinkhorn-type iteration from `0` with the residual-to-final fit in `l∞⊕`.
pub fn run_sinkhorn_convergence(prob: &Problem, cfg: &SinkhornConfig) -> Result<ConvergenceStudy> {
    let (_, trace) = solve_sinkhorn(prob, &DualPotentials::zeros(prob.n(), prob.m()), cfg)?;
    trace.check()?;
    let residuals: Vec<f64> = trace.records.iter().map(|r| r.residual_linf).collect();
    let fit = fit_rate(&step_lengths(&trace, norm_linf_oplus), &residuals);
    Ok(ConvergenceStudy { trace, fit })
}

// ---------------------------------------------------------------------------
// partitions

pub const DEFAULT_GRID_BOUNDS: (f64, f64) = (-3.0, 3.0);
pub const DEFAULT_GRID_RESOLUTION: usize = 300;

/// Active affine index of `f(·, α)` and `g(·, β)` on a square grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionGrid {
    pub lower: f64,
    pub upper: f64,
    pub resolution: usize,
    /// Row-major over `(gy, gx)`, 0-based.
    pub x_index: Vec<usize>,
    pub y_index: Vec<usize>,
    pub overlay_x: Vec<[f64; 2]>,
    pub overlay_y: Vec<[f64; 2]>,
    pub points_x: Vec<[f64; 2]>,
    pub points_y: Vec<[f64; 2]>,
}

impl PartitionGrid {
    pub fn coordinate(&self, k: usize) -> f64 {
        self.lower + (self.upper - self.lower) * k as f64 / (self.resolution - 1) as f64
    }

    /// Grid point of flat index `k`.
    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.coordinate(k % self.resolution), self.coordinate(k / self.resolution)]
    }

    /// Fractions of grid points where `self` and `other` pick different cells, `(x, y)`.
    pub fn disagreement(&self, other: &PartitionGrid) -> Result<(f64, f64)> {
        if self.resolution != other.resolution || self.lower != other.lower || self.upper != other.upper {
            return Err(Error::ShapeMismatch("partition grids differ".into()));
        }
        let frac = |a: &[usize], b: &[usize]| {
            a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
        };
        Ok((frac(&self.x_index, &other.x_index), frac(&self.y_index, &other.y_index)))
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        for (name, idx) in [("partition_x.csv", &self.x_index), ("partition_y.csv", &self.y_index)] {
            let path = dir.join(name);
            let io = |e: csv::Error| csv_error(&path, e);
            let mut w = csv::Writer::from_path(&path).map_err(io)?;
            w.write_record(["gx", "gy", "index"]).map_err(io)?;
            for (k, i) in idx.iter().enumerate() {
                let [gx, gy] = self.point(k);
                w.serialize((gx, gy, i + 1)).map_err(io)?;
            }
            w.flush().map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }

    /// Two panels, x-partition left and y-partition right, one rectangle per grid cell.
    pub fn to_svg(&self) -> String {
        let px = 600.0 / self.resolution as f64;
        let panel = 600.0;
        let gap = 40.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
            2.0 * panel + gap,
            panel,
            2.0 * panel + gap,
            panel
        );
        let to_px = |v: f64| (v - self.lower) / (self.upper - self.lower) * panel;
        let panels = [
            (0.0, &self.x_index, &self.overlay_x, &self.points_x),
            (panel + gap, &self.y_index, &self.overlay_y, &self.points_y),
        ];
        for (offset, idx, overlay, support) in panels {
            let _ = writeln!(s, r#"<g transform="translate({offset},0)">"#);
            for (k, i) in idx.iter().enumerate() {
                let (col, row) = (k % self.resolution, k / self.resolution);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                    col as f64 * px,
                    panel - (row + 1) as f64 * px,
                    px,
                    px,
                    palette(*i)
                );
            }
            for p in overlay.iter() {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{:.3}" cy="{:.3}" r="1.5" fill="#000" fill-opacity="0.4"/>"##,
                    to_px(p[0]),
                    panel - to_px(p[1])
                );
            }
            for p in support.iter() {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{:.3}" cy="{:.3}" r="4" fill="#fff" stroke="#000"/>"##,
                    to_px(p[0]),
                    panel - to_px(p[1])
                );
            }
            let _ = writeln!(s, "</g>");
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_svg()).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source: e.into(),
    }
}

fn palette(i: usize) -> String {
    // golden-angle hues stay distinguishable for any number of cells
    let hue = (i as f64 * 137.507_764) % 360.0;
    let (s, l) = (0.55, 0.72);
    let c = (1.0 - (2.0 * l - 1.0f64).abs()) * s;
    let h = hue / 60.0;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to = |v: f64| ((v + m) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", to(r), to(g), to(b))
}

/// Active indices of both potentials over `[lower, upper]²` plus overlay draws from `γ`.
pub fn export_partition(
    prob: &Problem,
    pots: &DualPotentials,
    bounds: (f64, f64),
    resolution: usize,
    n_overlay: usize,
    seed: u64,
) -> Result<PartitionGrid> {
    if prob.dim() != 2 {
        return Err(Error::UnsupportedDimension(prob.dim()));
    }
    if resolution < 2 {
        return Err(Error::InvalidConfig("resolution must be at least 2".into()));
    }
    if !(bounds.0 < bounds.1) || !bounds.0.is_finite() || !bounds.1.is_finite() {
        return Err(Error::InvalidConfig("grid bounds must satisfy lower < upper".into()));
    }
    pots.check_shape(prob.n(), prob.m())?;
    let mut grid = PartitionGrid {
        lower: bounds.0,
        upper: bounds.1,
        resolution,
        x_index: Vec::new(),
        y_index: Vec::new(),
        overlay_x: Vec::new(),
        overlay_y: Vec::new(),
        points_x: prob.mu.points().into_iter().map(|p| [p[0], p[1]]).collect(),
        points_y: prob.nu.points().into_iter().map(|p| [p[0], p[1]]).collect(),
    };
    let cells = resolution * resolution;
    let assign = |points: &[f64], shift: &[f64]| -> Result<Vec<usize>> {
        let mut scores = vec![0.0; shift.len()];
        (0..cells)
            .map(|k| {
                let z = grid.point(k);
                let i = cell_index(&z, points, shift);
                affine_scores(&z, points, shift, &mut scores);
                let (_, best) = argmax(&scores);
                if scores[i] != best {
                    return Err(Error::InvalidConfig(format!("grid point {k}: index {i} is not active")));
                }
                Ok(i)
            })
            .collect()
    };
    let x_index = assign(prob.mu.flat_points(), &pots.alpha)?;
    let y_index = assign(prob.nu.flat_points(), &pots.beta)?;
    grid.x_index = x_index;
    grid.y_index = y_index;
    if n_overlay > 0 {
        let batch = prob.reference.sample(n_overlay, seed);
        grid.overlay_x = (0..n_overlay).map(|k| [batch.x(k)[0], batch.x(k)[1]]).collect();
        grid.overlay_y = (0..n_overlay).map(|k| [batch.y(k)[0], batch.y(k)[1]]).collect();
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// CSV outputs

fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let io = |e: csv::Error| csv_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

/// `eps, ln_eps, I_eps, grad_norm, flag` where `flag` is empty for certified legs.
pub fn write_blowup_csv(path: &Path, result: &BlowupResult) -> Result<()> {
    let rows = result.legs.iter().map(|l| {
        let flag = if l.overflow {
            "overflow"
        } else if !l.certified {
            "uncertified"
        } else {
            ""
        };
        (l.eps, l.eps.ln(), l.primal_value, l.grad_norm, flag)
    });
    write_rows(path, &["eps", "ln_eps", "I_eps", "grad_norm", "flag"], rows)
}

/// `iter, objective, objective_se, grad_or_step_norm, residual_to_final`; the residual is
/// in `l²⊕` for gradient ascent and `l∞⊕` for Sinkhorn.
pub fn write_trace_csv(path: &Path, trace: &SolveTrace) -> Result<()> {
    let sinkhorn = trace.method == crate::solvers::Method::Sinkhorn;
    let rows = trace.records.iter().map(|r| {
        let residual = if sinkhorn { r.residual_linf } else { r.residual_l2 };
        (r.iter, r.objective.value, r.objective.std_error, r.grad_or_step_norm, residual)
    });
    write_rows(
        path,
        &["iter", "objective", "objective_se", "grad_or_step_norm", "residual_to_final"],
        rows,
    )
}
