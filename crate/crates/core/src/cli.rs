//! Batch front-end: `wittenlab <command> --config PATH --out DIR`.
//!
//! Every command writes `report.json`; `decay` and `taylor` also write a
//! CSV table. Exit codes: 0 success, 1 configuration or input error,
//! 2 solver non-convergence or numerical failure, 3 invariant failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{parse_config, DecayMethod, Experiment, PotentialSection};
use crate::correlation::{
    brascamp_lieb_check, covariance_hs, decay_fit, monotone_within_errors, threepoint_bound_check, threepoint_hs,
    truncated_correlation, weighted_derivative_report, DecayPoint, ThreePointSample, DEFAULT_BIAS_TOLERANCE,
    DEFAULT_NOISE_FLOOR,
};
use crate::error::{Error, Result};
use crate::grid::{write_csv, OneFormField, ScalarField};
use crate::oracle::{mcmc_run, McmcEstimate};
use crate::potential::{halton_samples, tilt_window, Observable};
use crate::pressure::{taylor_report, w_order_check, PerturbedSystem};
use crate::witten::{SolveReport, WittenOperator, DEFAULT_MARGIN_SAMPLES};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wittenlab", version, about = "Witten-Laplacian numerical lab for lattice spin systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the solver and sampler seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Lattice, potential, grid and convexity summary.
    Describe,
    /// Zero-form solve for `params.observable`.
    Solve,
    /// Covariances of observable pairs.
    Cov,
    /// Three-point truncated correlation of `params.triple`.
    Npoint,
    /// Covariance decay away from `params.fixed_site`.
    Decay,
    /// Weighted derivative report of the zero-form solution.
    Weighted,
    /// Pressure derivatives against finite differences.
    Taylor,
    /// Invariant suite; exits 3 on any failure.
    Check,
}

/// A number with the method that produced it and its error estimate.
#[derive(Debug, Clone, Serialize)]
struct Tagged {
    value: f64,
    method: &'static str,
    error_estimate: f64,
}

fn tag(value: f64, method: &'static str, error_estimate: f64) -> Tagged {
    Tagged {
        value,
        method,
        error_estimate,
    }
}

fn mcmc_tag(e: &McmcEstimate) -> Value {
    json!({
        "value": e.mean,
        "method": "mcmc",
        "error_estimate": e.standard_error,
        "acceptance_rate": e.acceptance_rate,
        "effective_sample_size": e.effective_sample_size,
        "proposal_std": e.proposal_std,
        "warnings": e.warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
struct CheckItem {
    name: String,
    value: f64,
    tolerance: f64,
    method: &'static str,
    passed: bool,
}

#[derive(Default)]
struct Outcome {
    result: Value,
    tables: Vec<(&'static str, String)>,
    solver_reports: Vec<SolveReport>,
    invariant_failed: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConvergence(_)
        | Error::Definiteness(_)
        | Error::ConvexityRisk(_)
        | Error::Evaluation(_)
        | Error::MaskEmpty(_)
        | Error::Measure(_)
        | Error::InsufficientData(_) => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("cli: --config PATH is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cli: cannot read {}: {e}", path.display())))?;
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.solver.seed = seed;
        if let Some(m) = cfg.oracle.mcmc.as_mut() {
            m.seed = seed;
        }
    }
    let exp = cfg.build()?;
    let outcome = match cli.command {
        Command::Describe => describe(&exp)?,
        Command::Solve => solve(&exp)?,
        Command::Cov => cov(&exp)?,
        Command::Npoint => npoint(&exp)?,
        Command::Decay => decay(&exp)?,
        Command::Weighted => weighted(&exp)?,
        Command::Taylor => taylor(&exp)?,
        Command::Check => check(&exp)?,
    };
    let report = json!({
        "software": {"name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION")},
        "command": cli.command,
        "config_hash": format!("sha256:{hash}"),
        "seeds": {
            "solver": exp.config.solver.seed,
            "mcmc": exp.config.oracle.mcmc.as_ref().map(|m| m.seed),
        },
        "timestamp": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        "solver_reports": outcome.solver_reports,
        "result": outcome.result,
    });
    write_outputs(&cli.out, &report, &outcome.tables)?;
    if outcome.invariant_failed {
        eprintln!("check: at least one invariant failed, see report.json");
        return Ok(EXIT_INVARIANT);
    }
    if outcome.solver_reports.iter().any(|r| !r.converged) {
        eprintln!("solver: at least one solve did not converge, see report.json");
        return Ok(EXIT_SOLVER);
    }
    Ok(0)
}

fn write_outputs(dir: &Path, report: &Value, tables: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join("report.json"), text)?;
    for (name, body) in tables {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn describe(exp: &Experiment) -> Result<Outcome> {
    let n = exp.lattice.len();
    let grid = exp.grid().ok();
    let samples = halton_samples(n, DEFAULT_MARGIN_SAMPLES, grid.as_ref().map_or(6.0, |g| g.half_width()));
    let margin = crate::potential::convexity_margin(
        &exp.model,
        &crate::lattice::WeightFunction::identity(&exp.lattice),
        &samples,
    )?;
    let mut windows = serde_json::Map::new();
    for name in &exp.order {
        let w = tilt_window(&exp.model, exp.observable(name)?, &samples)?;
        windows.insert(name.clone(), to_value(&w));
    }
    let grid_info = grid.as_ref().map(|g| {
        json!({
            "points_per_site": g.points_per_site(),
            "half_width": g.half_width(),
            "spacing": g.spacing(),
            "total_points": g.total_points(),
            "stencil_order": g.stencil_order(),
            "one_form_bytes": g.total_points() * n * 8,
        })
    });
    Ok(Outcome {
        result: json!({
            "sites": n,
            "bonds": exp.lattice.bonds(),
            "potential": to_value(&exp.config.potential),
            "convexity_margin": tag(margin, "sampled_hessian_eigenvalue", 0.0),
            "tilt_windows": windows,
            "grid": grid_info,
            "observables": exp.order,
        }),
        ..Default::default()
    })
}

fn solve(exp: &Experiment) -> Result<Outcome> {
    let grid = exp.grid()?;
    let op = WittenOperator::new(&exp.model, &grid)?;
    let (name, g) = exp.primary_observable()?;
    let sol = op.solve_zero_form(g, &exp.config.solver)?;
    let f = &sol.f;
    let sup = f
        .values
        .values()
        .iter()
        .zip(&f.mask)
        .filter(|(_, m)| **m)
        .fold(0.0f64, |a, (v, _)| a.max(v.abs()));
    let mut tables = vec![];
    if grid.n_sites() <= 2 {
        let mut buf = vec![];
        write_csv(&sol.u, &mut buf)?;
        tables.push(("solution_half_density.csv", String::from_utf8_lossy(&buf).into_owned()));
    }
    Ok(Outcome {
        result: json!({
            "observable": name,
            "gibbs_mean": tag(sol.mean_g, "quadrature", 0.0),
            "masked_nodes": f.count(),
            "sup_abs_f_on_mask": tag(sup, "zero_form_solve", sol.report.final_relative_residual),
        }),
        tables,
        solver_reports: vec![sol.report],
        ..Default::default()
    })
}

fn pairs(exp: &Experiment) -> Vec<(String, String)> {
    if !exp.config.params.pairs.is_empty() {
        return exp.config.params.pairs.clone();
    }
    let mut out = vec![];
    for (i, a) in exp.order.iter().enumerate() {
        for b in &exp.order[i..] {
            out.push((a.clone(), b.clone()));
        }
    }
    out
}

fn cov(exp: &Experiment) -> Result<Outcome> {
    let grid = exp.grid()?;
    let op = WittenOperator::new(&exp.model, &grid)?;
    let cfg = &exp.config.solver;
    let mut rows = vec![];
    let mut reports = vec![];
    for (a, b) in pairs(exp) {
        let (ga, gb) = (exp.observable(&a)?, exp.observable(&b)?);
        let hs = covariance_hs(&op, ga, gb, cfg)?;
        let q = truncated_correlation(&op, &[ga.clone(), gb.clone()])?;
        reports.extend(hs.solver_reports.iter().cloned());
        let mut row = json!({
            "pair": [a, b],
            "hs": tag(hs.value, "hs_formula", hs.error_estimate),
            "quadrature": tag(q.value, "quadrature", q.error_estimate),
            "warnings": hs.warnings,
        });
        if let Some(m) = &exp.config.oracle.mcmc {
            let (fa, fb) = (ga.clone(), gb.clone());
            let run = mcmc_run(&exp.model, &[&move |x: &[f64]| fa.value(x), &move |x: &[f64]| fb.value(x)], m)?;
            row["mcmc"] = mcmc_tag(&run.estimate(&[0, 1])?);
        }
        rows.push(row);
    }
    Ok(Outcome {
        result: json!({ "covariances": rows }),
        solver_reports: reports,
        ..Default::default()
    })
}

fn npoint(exp: &Experiment) -> Result<Outcome> {
    let t = &exp.config.params.triple;
    if t.len() != 3 {
        return Err(Error::Config("config::validate at `params.triple`: required by npoint".into()));
    }
    let grid = exp.grid()?;
    let op = WittenOperator::new(&exp.model, &grid)?;
    let gs: Vec<Observable> = t.iter().map(|n| exp.observable(n).cloned()).collect::<Result<_>>()?;
    let hs = threepoint_hs(&op, &gs[0], &gs[1], &gs[2], &exp.config.solver)?;
    let q = truncated_correlation(&op, &gs)?;
    let rel = (hs.value - q.value).abs() / q.value.abs().max(1e-300);
    Ok(Outcome {
        result: json!({
            "triple": t,
            "hs": tag(hs.value, "hs_formula", hs.error_estimate),
            "quadrature": tag(q.value, "quadrature", q.error_estimate),
            "relative_gap": rel,
            "warnings": hs.warnings,
        }),
        solver_reports: hs.solver_reports,
        ..Default::default()
    })
}

fn decay(exp: &Experiment) -> Result<Outcome> {
    let p = &exp.config.params;
    let n = exp.lattice.len();
    let i = p.fixed_site;
    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let mut points = vec![];
    let mut reports = vec![];
    let mut envelope = Value::Null;
    let mut estimates = vec![];
    match p.decay_method {
        DecayMethod::Hs => {
            let grid = exp.grid()?;
            let op = WittenOperator::new(&exp.model, &grid)?;
            let xi = Observable::coordinate(&exp.lattice, i)?;
            for &j in &others {
                let xj = Observable::coordinate(&exp.lattice, j)?;
                let c = covariance_hs(&op, &xi, &xj, &exp.config.solver)?;
                reports.extend(c.solver_reports.iter().cloned());
                estimates.push(json!({"j": j, "cov": tag(c.value, "hs_formula", c.error_estimate)}));
                points.push(DecayPoint {
                    distance: exp.lattice.graph_distance(i, j)?,
                    magnitude: c.value.abs(),
                    std_error: c.error_estimate,
                });
            }
        }
        DecayMethod::Mcmc => {
            let m = exp.mcmc()?;
            let coords: Vec<Box<dyn Fn(&[f64]) -> f64 + Sync>> =
                (0..n).map(|k| Box::new(move |x: &[f64]| x[k]) as Box<dyn Fn(&[f64]) -> f64 + Sync>).collect();
            let refs: Vec<&(dyn Fn(&[f64]) -> f64 + Sync)> = coords.iter().map(|b| b.as_ref()).collect();
            let run = mcmc_run(&exp.model, &refs, m)?;
            for &j in &others {
                let e = run.estimate(&[i, j])?;
                estimates.push(json!({"j": j, "cov": mcmc_tag(&e)}));
                points.push(DecayPoint {
                    distance: exp.lattice.graph_distance(i, j)?,
                    magnitude: e.mean.abs(),
                    std_error: e.standard_error,
                });
            }
            let mut samples = vec![];
            for (a, &j) in others.iter().enumerate() {
                for &k in &others[a + 1..] {
                    let e = run.estimate(&[i, j, k])?;
                    samples.push(ThreePointSample {
                        j,
                        k,
                        value: e.mean,
                        std_error: e.standard_error,
                    });
                }
            }
            if !samples.is_empty() {
                envelope = to_value(&threepoint_bound_check(&exp.lattice, i, &samples, &p.kappa1_grid)?);
            }
        }
    }
    points.sort_by_key(|q| q.distance);
    let fit = decay_fit(&points, DEFAULT_NOISE_FLOOR)?;
    let mut csv = String::from("distance,abs_cov,stderr\n");
    for q in &points {
        csv.push_str(&format!("{},{},{}\n", q.distance, q.magnitude, q.std_error));
    }
    Ok(Outcome {
        result: json!({
            "fixed_site": i,
            "method": p.decay_method,
            "covariances": estimates,
            "fit": to_value(&fit),
            "monotone_within_errors": monotone_within_errors(&points),
            "threepoint_envelope": envelope,
        }),
        tables: vec![("decay.csv", csv)],
        solver_reports: reports,
        ..Default::default()
    })
}

fn weighted(exp: &Experiment) -> Result<Outcome> {
    let grid = exp.grid()?;
    let op = WittenOperator::new(&exp.model, &grid)?;
    let (name, g) = exp.primary_observable()?;
    let p = &exp.config.params;
    let r = weighted_derivative_report(&op, g, p.order_k, p.kappa, &exp.config.solver, DEFAULT_BIAS_TOLERANCE)?;
    let res = r.solver_reports.iter().map(|s| s.final_relative_residual).fold(0.0, f64::max);
    Ok(Outcome {
        result: json!({
            "observable": name,
            "order_k": r.order_k,
            "kappa": r.kappa,
            "sup_value": tag(r.sup_value, "zero_form_twisted_derivatives", res),
            "argmax": r.argmax,
            "report_radius": r.report_radius,
            "nodes_reported": r.nodes_reported,
        }),
        solver_reports: r.solver_reports,
        ..Default::default()
    })
}

fn taylor(exp: &Experiment) -> Result<Outcome> {
    let grid = exp.grid()?;
    let (name, g) = exp.primary_observable()?;
    let p = &exp.config.params;
    let sys = PerturbedSystem::new(&exp.model, g, p.t, &grid)?;
    let cfg = &exp.config.solver;
    let rep = taylor_report(&sys, p.n_max, cfg, exp.config.oracle.fd_step)?;
    let mut csv = String::from("n,operator,fd,gap\n");
    for r in &rep.rows {
        csv.push_str(&format!("{},{},{},{}\n", r.n, r.operator, r.fd.value, r.relative_gap));
    }
    let w = w_order_check(&sys, p.w_epsilon, cfg)?;
    let mut reports = rep.per_step_solver_reports.clone();
    reports.extend(w.solver_reports.iter().cloned());
    Ok(Outcome {
        result: json!({
            "observable": name,
            "t": p.t,
            "window_bound": sys.window().bound,
            "rows": rep.rows.iter().map(|r| json!({
                "n": r.n,
                "operator": tag(r.operator, "operator_recursion", r.absolute_gap),
                "fd": tag(r.fd.value, "finite_difference", r.fd.error_estimate),
                "relative_gap": r.relative_gap,
                "coefficient_a_n": r.coefficient_a_n,
            })).collect::<Vec<_>>(),
            "root_sequence": rep.root_sequence,
            "w_equation": {
                "epsilon": w.epsilon,
                "error_ratio": w.ratio,
                "errors": [w.errors.0, w.errors.1],
                "error_plus": w.error_plus,
                "error_minus": w.error_minus,
                "matching_sign": w.matching_sign,
            },
        }),
        tables: vec![("taylor.csv", csv)],
        solver_reports: reports,
        ..Default::default()
    })
}

fn random_interior(op: &WittenOperator, comps: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = op.grid();
    let np = g.total_points();
    (0..comps * np)
        .map(|k| if g.is_interior(k % np) { rng.random::<f64>() - 0.5 } else { 0.0 })
        .collect()
}

fn symmetry_deviation<F>(apply: F, u: &[f64], v: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let au = apply(u)?;
    let av = apply(v)?;
    let a: f64 = av.iter().zip(u).map(|(x, y)| x * y).sum();
    let b: f64 = au.iter().zip(v).map(|(x, y)| x * y).sum();
    Ok((a - b).abs() / a.abs().max(b.abs()).max(1e-300))
}

fn check(exp: &Experiment) -> Result<Outcome> {
    let grid = exp.grid()?;
    let op = WittenOperator::new(&exp.model, &grid)?;
    let cfg = &exp.config.solver;
    let n = grid.n_sites();
    let mut items = vec![];
    let mut reports = vec![];
    let mut push = |name: String, value: f64, tolerance: f64, method: &'static str, passed: bool| {
        items.push(CheckItem {
            name,
            value,
            tolerance,
            method,
            passed,
        });
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (u0, v0) = (random_interior(&op, 1, &mut rng), random_interior(&op, 1, &mut rng));
    let s0 = symmetry_deviation(
        |x| Ok(op.apply_w0(&ScalarField::from_values(&grid, x.to_vec())?)?.into_values()),
        &u0,
        &v0,
    )?;
    push("w0_symmetry".into(), s0, 1e-10, "random_interior_fields", s0 <= 1e-10);
    let (u1, v1) = (random_interior(&op, n, &mut rng), random_interior(&op, n, &mut rng));
    let s1 = symmetry_deviation(
        |x| Ok(op.apply_w1(&OneFormField::from_flat(&grid, x.to_vec())?)?.into_flat()),
        &u1,
        &v1,
    )?;
    push("w1_symmetry".into(), s1, 1e-10, "random_interior_fields", s1 <= 1e-10);

    let margin = op.convexity_margin();
    let gap = op.spectral_gap_probe(3, 8, cfg)?;
    push("spectral_gap".into(), gap, margin - 0.02, "inverse_iteration", gap >= margin - 0.02);

    for name in &exp.order {
        let g = exp.observable(name)?;
        if g.support().is_empty() {
            continue;
        }
        let bl = brascamp_lieb_check(&op, g, cfg, 1e-3)?;
        push(format!("brascamp_lieb[{name}]"), bl.variance, bl.bound + 1e-3, "hs_formula", bl.holds);
    }

    for (a, b) in pairs(exp) {
        let (ga, gb) = (exp.observable(&a)?, exp.observable(&b)?);
        if ga.support().is_empty() || gb.support().is_empty() {
            continue;
        }
        let hs = covariance_hs(&op, ga, gb, cfg)?;
        reports.extend(hs.solver_reports.iter().cloned());
        let q = truncated_correlation(&op, &[ga.clone(), gb.clone()])?;
        let tol = 1e-3f64.max(1e-2 * q.value.abs());
        let gap = (hs.value - q.value).abs();
        push(format!("hs_vs_quadrature[{a},{b}]"), gap, tol, "hs_formula_vs_quadrature", gap <= tol);
        if a != b {
            let rev = covariance_hs(&op, gb, ga, cfg)?;
            reports.extend(rev.solver_reports.iter().cloned());
            let d = (rev.value - hs.value).abs();
            let tol = 1e-6f64.max(1e-6 * hs.value.abs());
            push(format!("cov_symmetry[{a},{b}]"), d, tol, "hs_formula", d <= tol);
        }
    }

    if matches!(exp.config.potential, PotentialSection::Gaussian) {
        for i in 0..n {
            let xi = Observable::coordinate(&exp.lattice, i)?;
            for j in i..n {
                let xj = Observable::coordinate(&exp.lattice, j)?;
                let c = covariance_hs(&op, &xi, &xj, cfg)?;
                reports.extend(c.solver_reports.iter().cloned());
                let (target, tol) = if i == j { (1.0, 1e-2) } else { (0.0, 1e-3) };
                let d = (c.value - target).abs();
                push(format!("gaussian_cov[{i},{j}]"), d, tol, "hs_formula", d <= tol);
            }
            let sol = op.solve_zero_form(&xi, cfg)?;
            reports.push(sol.report.clone());
            let err = sol.f.weighted_l2_error(op.ground(), |x| x[i]);
            push(format!("gaussian_zero_form[{i}]"), err, 1e-3, "weighted_l2_on_mask", err <= 1e-3);
        }
    }

    if let Some(name) = exp.config.params.observable.as_deref() {
        let g = exp.observable(name)?;
        if !g.support().is_empty() {
            let sys = PerturbedSystem::new(&exp.model, g, exp.config.params.t, &grid)?;
            let rep = taylor_report(&sys, exp.config.params.n_max, cfg, exp.config.oracle.fd_step)?;
            reports.extend(rep.per_step_solver_reports.iter().cloned());
            for r in rep.rows.iter().filter(|r| r.n >= 2) {
                let tol = 1e-3f64.max(1e-2 * r.fd.value.abs());
                push(
                    format!("theta_derivative[{name}, n={}]", r.n),
                    r.absolute_gap,
                    tol,
                    "operator_recursion_vs_finite_difference",
                    r.absolute_gap <= tol,
                );
            }
        }
    }

    let failed = items.iter().any(|c| !c.passed);
    Ok(Outcome {
        result: json!({
            "all_passed": !failed,
            "checks": items,
        }),
        solver_reports: reports,
        invariant_failed: failed,
        ..Default::default()
    })
}
