//! Gibbs means, covariances through the one-form problem, truncated
//! correlations by quadrature, the four-term three-point formula, weighted
//! decay reports for solutions and their derivatives, and decay-rate fits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_product, OneFormField, ScalarField};
use crate::kernels;
use crate::lattice::LatticeSpec;
use crate::potential::Observable;
use crate::witten::{SolveReport, SolverConfig, WittenOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    HsFormula,
    Quadrature,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub value: f64,
    pub method: Method,
    pub solver_reports: Vec<SolveReport>,
    /// Refinement delta (quadrature), residual bound (operator formulas) or
    /// standard error (sampling).
    pub error_estimate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CorrelationReport {
    fn quadrature(value: f64, delta: f64) -> Self {
        CorrelationReport {
            value,
            method: Method::Quadrature,
            solver_reports: vec![],
            error_estimate: delta,
            warnings: vec![],
        }
    }
}

/// Gibbs expectation of nodal values on the full grid and on the sub-grid
/// of every other node.
fn expectation_pair(op: &WittenOperator, values: &[f64]) -> Result<(f64, f64)> {
    let g = op.grid();
    let psi = op.ground().field.values();
    let rho: Vec<f64> = psi.par_iter().map(|p| p * p).collect();
    let fine = kernels::weighted_dot(values, &rho, |k| g.quadrature_weight(k))
        / kernels::weighted_dot(&rho, &vec![1.0; rho.len()], |k| g.quadrature_weight(k));
    let ones = vec![1.0; rho.len()];
    let cz = kernels::weighted_dot(&rho, &ones, |k| g.coarse_quadrature_weight(k));
    if !(cz > 0.0) {
        return Err(Error::Measure("correlation: degenerate normalization".into()));
    }
    let coarse = kernels::weighted_dot(values, &rho, |k| g.coarse_quadrature_weight(k)) / cz;
    Ok((fine, coarse))
}

/// `<g>` by quadrature against `e^{-Phi}`.
pub fn gibbs_mean(op: &WittenOperator, g: &Observable) -> Result<CorrelationReport> {
    if !(op.ground().norm_sq > 0.0) {
        return Err(Error::Measure("correlation::gibbs_mean: norm_sq <= 0".into()));
    }
    let gs = op.sample(g)?;
    let (fine, coarse) = expectation_pair(op, gs.values())?;
    Ok(CorrelationReport::quadrature(fine, (fine - coarse).abs()))
}

/// `cov(g, h) = <W1^{-1}(psi grad g), psi grad h> / |psi|^2`.
pub fn covariance_hs(
    op: &WittenOperator,
    g: &Observable,
    h: &Observable,
    cfg: &SolverConfig,
) -> Result<CorrelationReport> {
    let rhs = op.weighted_observable_gradient(g)?;
    let (v, report) = op.solve_w1(&rhs, cfg)?;
    let dh = op.weighted_observable_gradient(h)?;
    let z = op.ground().norm_sq;
    let value = inner_product(&v, &dh)? / z;
    let grid = op.grid();
    let cell = grid.spacing().powi(grid.n_sites() as i32);
    let gap = op.convexity_margin().max(1e-3);
    let error_estimate = report.final_relative_residual
        * kernels::norm(rhs.as_flat())
        * kernels::norm(dh.as_flat())
        * cell
        / (gap * z);
    let mut warnings = vec![];
    if !report.converged {
        warnings.push("one-form solve did not converge".to_string());
    }
    Ok(CorrelationReport {
        value,
        method: Method::HsFormula,
        solver_reports: vec![report],
        error_estimate,
        warnings,
    })
}

/// `<(g_1 - <g_1>) ... (g_k - <g_k>)>` by quadrature, `2 <= k <= 4`.
pub fn truncated_correlation(op: &WittenOperator, gs: &[Observable]) -> Result<CorrelationReport> {
    if gs.len() < 2 {
        return Err(Error::Arity(format!(
            "correlation::truncated_correlation: need at least 2 observables, got {}",
            gs.len()
        )));
    }
    if gs.len() > 4 {
        return Err(Error::Arity(format!(
            "correlation::truncated_correlation: quadrature path supports k <= 4, got {}",
            gs.len()
        )));
    }
    let np = op.grid().total_points();
    let mut fine_prod = vec![1.0; np];
    let mut coarse_prod = vec![1.0; np];
    for g in gs {
        let s = op.sample(g)?;
        let (fine, coarse) = expectation_pair(op, s.values())?;
        let constant = g.support().is_empty();
        fine_prod
            .par_iter_mut()
            .zip(coarse_prod.par_iter_mut().zip(s.values().par_iter()))
            .for_each(|(a, (b, v))| {
                if constant {
                    *a = 0.0;
                    *b = 0.0;
                } else {
                    *a *= v - fine;
                    *b *= v - coarse;
                }
            });
    }
    let (fine, _) = expectation_pair(op, &fine_prod)?;
    let (_, coarse) = expectation_pair(op, &coarse_prod)?;
    Ok(CorrelationReport::quadrature(fine, (fine - coarse).abs()))
}

/// `e^{-Phi/2}`-weighted Hessian of `f` from a one-form `V = psi grad f`,
/// symmetrized: entry `(j, k)` at `j * n + k`. Also returns the relative
/// asymmetry of the raw finite differences.
fn weighted_hessian(op: &WittenOperator, v: &OneFormField) -> Result<(Vec<ScalarField>, f64)> {
    let n = op.grid().n_sites();
    let mut raw: Vec<OneFormField> = Vec::with_capacity(n);
    for k in 0..n {
        raw.push(op.twisted_gradient(&v.component_field(k))?);
    }
    let mut out = Vec::with_capacity(n * n);
    let (mut asym, mut total) = (0.0f64, 0.0f64);
    for j in 0..n {
        for k in 0..n {
            let a = raw[k].component(j);
            let b = raw[j].component(k);
            let vals: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
            if j < k {
                asym += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                total += a.iter().zip(b).map(|(x, y)| (x + y) * (x + y) / 4.0).sum::<f64>();
            }
            out.push(ScalarField::from_values(op.grid(), vals)?);
        }
    }
    let rel = if total > 0.0 { (asym / total).sqrt() } else { 0.0 };
    Ok((out, rel))
}

/// `int a . M b / Z` with `M` given entrywise on the grid (`j * n + k`).
fn bilinear(op: &WittenOperator, a: &[Vec<f64>], m: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let grid = op.grid();
    let n = grid.n_sites();
    let np = grid.total_points();
    let mut pointwise = vec![0.0; np];
    for j in 0..n {
        for k in 0..n {
            let (aj, mjk, bk) = (&a[j], &m[j * n + k], &b[k]);
            pointwise
                .par_iter_mut()
                .enumerate()
                .for_each(|(x, p)| *p += aj[x] * mjk[x] * bk[x]);
        }
    }
    let ones = vec![1.0; np];
    kernels::weighted_dot(&pointwise, &ones, |k| grid.quadrature_weight(k)) / op.ground().norm_sq
}

fn components(v: &OneFormField) -> Vec<Vec<f64>> {
    (0..v.n_components()).map(|i| v.component(i).to_vec()).collect()
}

fn observable_gradient(op: &WittenOperator, g: &Observable) -> Result<Vec<Vec<f64>>> {
    let v = crate::grid::sample_one_form(op.grid(), |x, out| g.gradient_into(x, out))?;
    Ok(components(&v))
}

fn observable_hessian(op: &WittenOperator, g: &Observable) -> Result<Vec<Vec<f64>>> {
    let grid = op.grid();
    let n = grid.n_sites();
    let np = grid.total_points();
    let mut out = vec![vec![0.0; np]; n * n];
    if g.is_affine() {
        return Ok(out);
    }
    let mut x = vec![0.0; n];
    let mut h = vec![0.0; n * n];
    for idx in 0..np {
        grid.node_coords(idx, &mut x);
        g.hessian_into(&x, &mut h);
        for e in 0..n * n {
            out[e][idx] = h[e];
        }
    }
    Ok(out)
}

/// `<g1, g2, g3>` through the four-term decomposition
/// `<grad f3 . Hess f1 grad g2> + <grad f3 . Hess g2 grad f1>
///  + <grad f2 . Hess f1 grad g3> + <grad f2 . Hess g3 grad f1>`.
pub fn threepoint_hs(
    op: &WittenOperator,
    g1: &Observable,
    g2: &Observable,
    g3: &Observable,
    cfg: &SolverConfig,
) -> Result<CorrelationReport> {
    let mut reports = vec![];
    let mut solve = |g: &Observable| -> Result<OneFormField> {
        let (v, r) = op.solve_w1(&op.weighted_observable_gradient(g)?, cfg)?;
        reports.push(r);
        Ok(v)
    };
    let v1 = solve(g1)?;
    let v2 = solve(g2)?;
    let v3 = solve(g3)?;
    let (h1, asym) = weighted_hessian(op, &v1)?;
    let h1: Vec<Vec<f64>> = h1.into_iter().map(|f| f.into_values()).collect();
    let (c1, c2, c3) = (components(&v1), components(&v2), components(&v3));
    let (dg2, dg3) = (observable_gradient(op, g2)?, observable_gradient(op, g3)?);
    let (hg2, hg3) = (observable_hessian(op, g2)?, observable_hessian(op, g3)?);
    let terms = [
        bilinear(op, &c3, &h1, &dg2),
        bilinear(op, &c3, &hg2, &c1),
        bilinear(op, &c2, &h1, &dg3),
        bilinear(op, &c2, &hg3, &c1),
    ];
    let value: f64 = terms.iter().sum();
    let mut warnings = vec![];
    if asym > 1e-2 {
        warnings.push(format!(
            "finite-difference Hessian asymmetry {asym:.3e} exceeds 1e-2"
        ));
    }
    if reports.iter().any(|r| !r.converged) {
        warnings.push("one-form solve did not converge".to_string());
    }
    let res = reports.iter().map(|r| r.final_relative_residual).fold(0.0, f64::max);
    Ok(CorrelationReport {
        value,
        method: Method::HsFormula,
        error_estimate: res * terms.iter().map(|t| t.abs()).sum::<f64>() + asym * value.abs(),
        solver_reports: reports,
        warnings,
    })
}

/// `|<c (g - <g>)> - <grad f . grad c>|`, both sides by quadrature, `f` from
/// the zero-form problem.
pub fn intermediate_identity_check(
    op: &WittenOperator,
    c: &Observable,
    g: &Observable,
    cfg: &SolverConfig,
) -> Result<f64> {
    let lhs = truncated_correlation(op, &[c.clone(), g.clone()])?.value;
    let sol = op.solve_zero_form(g, cfg)?;
    let df = op.twisted_gradient(&sol.u)?;
    let dc = op.weighted_observable_gradient(c)?;
    let rhs = inner_product(&df, &dc)? / op.ground().norm_sq;
    Ok((lhs - rhs).abs())
}

/// `cov(g, g)` against `(1 / delta) <|grad g|^2>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrascampLiebReport {
    pub variance: f64,
    pub gradient_mean_sq: f64,
    pub margin: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn brascamp_lieb_check(
    op: &WittenOperator,
    g: &Observable,
    cfg: &SolverConfig,
    slack: f64,
) -> Result<BrascampLiebReport> {
    let variance = covariance_hs(op, g, g, cfg)?.value;
    let dg = op.weighted_observable_gradient(g)?;
    let gradient_mean_sq = inner_product(&dg, &dg)? / op.ground().norm_sq;
    let margin = op.convexity_margin();
    let bound = gradient_mean_sq / margin;
    Ok(BrascampLiebReport {
        variance,
        gradient_mean_sq,
        margin,
        bound,
        holds: variance <= bound + slack,
    })
}

/// Default tolerance on the Dirichlet bias inside the report region.
pub const DEFAULT_BIAS_TOLERANCE: f64 = 1e-3;

/// Half-width of the cube on which `e^{Phi/2}`-amplified quantities are
/// reported: `sqrt(L^2 - 2 ln(L / tol))`.
pub fn report_radius(half_width: f64, bias_tolerance: f64) -> Result<f64> {
    let r2 = half_width * half_width - 2.0 * (half_width / bias_tolerance).ln();
    if r2 <= 0.0 {
        return Err(Error::MaskEmpty(format!(
            "correlation: box half-width {half_width} leaves no report region at bias tolerance {bias_tolerance}"
        )));
    }
    Ok(r2.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDerivativeReport {
    pub order_k: usize,
    pub kappa: f64,
    pub sup_value: f64,
    /// Node where the supremum is attained.
    pub argmax: Vec<f64>,
    pub report_radius: f64,
    pub nodes_reported: usize,
    pub solver_reports: Vec<SolveReport>,
    #[serde(skip)]
    pub per_node_profile: Option<ScalarField>,
}

/// Nodes of the credible mask inside the report cube.
fn report_nodes(op: &WittenOperator, mask: &[bool], radius: f64) -> Vec<usize> {
    let grid = op.grid();
    let n = grid.n_sites();
    (0..grid.total_points())
        .into_par_iter()
        .filter_map(|idx| {
            if !mask[idx] {
                return None;
            }
            let mut x = vec![0.0; n];
            grid.node_coords(idx, &mut x);
            x.iter().all(|v| v.abs() <= radius + 1e-12).then_some(idx)
        })
        .collect()
}

/// Supremum over the report region of
/// `sum_{i_1..i_k} f_{x_i1..x_ik}^2 e^{2 kappa d({i_1..i_k}, S_g)}`.
pub fn weighted_derivative_report(
    op: &WittenOperator,
    g: &Observable,
    k: usize,
    kappa: f64,
    cfg: &SolverConfig,
    bias_tolerance: f64,
) -> Result<WeightedDerivativeReport> {
    if k == 0 || k > 3 {
        return Err(Error::UnsupportedOrder(format!(
            "correlation::weighted_derivative_report: order {k} not in 1..=3"
        )));
    }
    if !(kappa >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "correlation::weighted_derivative_report: kappa must be >= 0, got {kappa}"
        )));
    }
    let lattice = op.model().lattice();
    let support = g.support();
    if support.is_empty() || support.len() == lattice.len() {
        return Err(Error::Support(
            "correlation::weighted_derivative_report: S_g must be a nonempty proper subset of Lambda".into(),
        ));
    }
    let grid = op.grid();
    let n = grid.n_sites();
    let radius = report_radius(grid.half_width(), bias_tolerance)?;
    let sol = op.solve_zero_form(g, cfg)?;
    let nodes = report_nodes(op, &sol.f.mask, radius);
    if nodes.is_empty() {
        return Err(Error::MaskEmpty(
            "correlation::weighted_derivative_report: report region has no nodes".into(),
        ));
    }
    // derivative fields psi * d^k f, one per index tuple
    let mut level: Vec<(Vec<usize>, ScalarField)> = vec![(vec![], sol.u.clone())];
    for _ in 0..k {
        let mut next = Vec::with_capacity(level.len() * n);
        for (tuple, field) in &level {
            let d = op.twisted_gradient(field)?;
            for i in 0..n {
                let mut t = tuple.clone();
                t.push(i);
                next.push((t, d.component_field(i)));
            }
        }
        level = next;
    }
    let weights: Vec<f64> = level
        .iter()
        .map(|(t, _)| Ok((2.0 * kappa * lattice.multi_distance(t, support)? as f64).exp()))
        .collect::<Result<_>>()?;
    let psi = op.ground().field.values();
    let mut profile = vec![f64::NAN; grid.total_points()];
    let values: Vec<(usize, f64)> = nodes
        .par_iter()
        .map(|&idx| {
            let p2 = psi[idx] * psi[idx];
            let s: f64 = level
                .iter()
                .zip(&weights)
                .map(|((_, f), w)| f.values()[idx] * f.values()[idx] / p2 * w)
                .sum();
            (idx, s)
        })
        .collect();
    let (mut best_idx, mut sup) = (nodes[0], f64::NEG_INFINITY);
    for &(idx, s) in &values {
        profile[idx] = s;
        if s > sup {
            sup = s;
            best_idx = idx;
        }
    }
    Ok(WeightedDerivativeReport {
        order_k: k,
        kappa,
        sup_value: sup,
        argmax: grid.node(best_idx),
        report_radius: radius,
        nodes_reported: nodes.len(),
        solver_reports: vec![sol.report],
        per_node_profile: Some(ScalarField::from_values_unchecked(grid, profile)),
    })
}

/// First-derivative report: `sup sum_i f_{x_i}^2 e^{2 kappa d(i, S_g)}`.
pub fn weighted_gradient_report(
    op: &WittenOperator,
    g: &Observable,
    kappa: f64,
    cfg: &SolverConfig,
) -> Result<WeightedDerivativeReport> {
    weighted_derivative_report(op, g, 1, kappa, cfg, DEFAULT_BIAS_TOLERANCE)
}

/// Higher-derivative report for `k` in {2, 3}.
pub fn weighted_higher_report(
    op: &WittenOperator,
    g: &Observable,
    k: usize,
    kappa: f64,
    cfg: &SolverConfig,
) -> Result<WeightedDerivativeReport> {
    if !(2..=3).contains(&k) {
        return Err(Error::UnsupportedOrder(format!(
            "correlation::weighted_higher_report: order {k} not in 2..=3"
        )));
    }
    weighted_derivative_report(op, g, k, kappa, cfg, DEFAULT_BIAS_TOLERANCE)
}

/// One `(distance, |value|)` observation with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub distance: u64,
    pub magnitude: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFitReport {
    pub pairs: Vec<(u64, f64)>,
    pub kappa_est: f64,
    pub prefactor_c: f64,
    pub r_squared: f64,
    pub excluded: usize,
}

/// Default noise floor for log-linear fits.
pub const DEFAULT_NOISE_FLOOR: f64 = 1e-12;

/// Least squares of `ln |value|` on distance. Points below
/// `max(noise_floor, 2 std_error)` are excluded and counted.
pub fn decay_fit(points: &[DecayPoint], noise_floor: f64) -> Result<DecayFitReport> {
    let mut used = vec![];
    let mut excluded = 0;
    for p in points {
        let floor = noise_floor.max(2.0 * p.std_error);
        if p.magnitude.abs() > floor && p.magnitude.is_finite() {
            used.push((p.distance, p.magnitude.abs()));
        } else {
            excluded += 1;
        }
    }
    let mut distinct: Vec<u64> = used.iter().map(|p| p.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation::decay_fit: {} usable distances, need 2",
            distinct.len()
        )));
    }
    let k = used.len() as f64;
    let xs: Vec<f64> = used.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let xm = xs.iter().sum::<f64>() / k;
    let ym = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - ym).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-24 {
        1.0
    } else {
        0.0
    };
    Ok(DecayFitReport {
        pairs: used,
        kappa_est: -slope,
        prefactor_c: intercept.exp(),
        r_squared,
        excluded,
    })
}

/// True if `|c_{j+1}| <= |c_j| + 3 sqrt(s_j^2 + s_{j+1}^2)` along the list.
pub fn monotone_within_errors(points: &[DecayPoint]) -> bool {
    points.windows(2).all(|w| {
        let tol = 3.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        w[1].magnitude.abs() <= w[0].magnitude.abs() + tol
    })
}

/// A three-point value `<x_i, x_j, x_k>` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreePointSample {
    pub j: usize,
    pub k: usize,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFitReport {
    pub fixed_site: usize,
    pub prefactor_c: f64,
    pub kappa1: f64,
    pub chi_squared: f64,
    /// `(|v| - C E) / sigma` per sample.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    pub holds: bool,
}

/// Fits `|<x_i, x_j, x_k>| ~ C [e^{-kappa1 d(i,j)} + e^{-kappa1 d(i,k)}]`:
/// weighted least squares in `C >= 0` for each `kappa1` on the grid, keeping
/// the best. The envelope holds if no sample exceeds it by more than three
/// standard errors.
pub fn threepoint_bound_check(
    lattice: &LatticeSpec,
    fixed_site: usize,
    samples: &[ThreePointSample],
    kappa1_grid: &[f64],
) -> Result<EnvelopeFitReport> {
    if samples.is_empty() || kappa1_grid.is_empty() {
        return Err(Error::InsufficientData(
            "correlation::threepoint_bound_check: no samples or no kappa1 values".into(),
        ));
    }
    let mut dist = Vec::with_capacity(samples.len());
    for s in samples {
        if s.j == s.k || s.j == fixed_site || s.k == fixed_site {
            return Err(Error::InvalidInput(format!(
                "correlation::threepoint_bound_check: sites ({fixed_site}, {}, {}) are not distinct",
                s.j, s.k
            )));
        }
        dist.push((
            lattice.graph_distance(fixed_site, s.j)? as f64,
            lattice.graph_distance(fixed_site, s.k)? as f64,
        ));
    }
    let sigma: Vec<f64> = samples.iter().map(|s| s.std_error.max(1e-15)).collect();
    let mut best: Option<(f64, f64, f64)> = None;
    for &k1 in kappa1_grid {
        let e: Vec<f64> = dist.iter().map(|(a, b)| (-k1 * a).exp() + (-k1 * b).exp()).collect();
        let num: f64 = samples.iter().zip(&e).zip(&sigma).map(|((s, e), w)| s.value.abs() * e / (w * w)).sum();
        let den: f64 = e.iter().zip(&sigma).map(|(e, w)| e * e / (w * w)).sum();
        let c = (num / den).max(0.0);
        let chi: f64 = samples
            .iter()
            .zip(&e)
            .zip(&sigma)
            .map(|((s, e), w)| ((s.value.abs() - c * e) / w).powi(2))
            .sum();
        if best.is_none_or(|b| chi < b.2) {
            best = Some((k1, c, chi));
        }
    }
    let (kappa1, c, chi) = best.expect("nonempty grid");
    let residuals: Vec<f64> = samples
        .iter()
        .zip(&dist)
        .zip(&sigma)
        .map(|((s, (a, b)), w)| (s.value.abs() - c * ((-kappa1 * a).exp() + (-kappa1 * b).exp())) / w)
        .collect();
    let max_residual = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(EnvelopeFitReport {
        fixed_site,
        prefactor_c: c,
        kappa1,
        chi_squared: chi,
        holds: max_residual <= 3.0 && c.is_finite(),
        residuals,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::lattice::chain;
    use crate::potential::{gaussian_potential, kac_potential};

    fn gaussian_op(n: usize, m: usize) -> (LatticeSpec, WittenOperator) {
        let l = chain(n).unwrap();
        let g = build_grid(&l, 6.0, m).unwrap();
        let op = WittenOperator::new(&gaussian_potential(&l), &g).unwrap();
        (l, op)
    }

    #[test]
    fn gibbs_mean_cases() {
        let (l, op) = gaussian_op(2, 33);
        let x0 = Observable::coordinate(&l, 0).unwrap();
        assert!(gibbs_mean(&op, &x0).unwrap().value.abs() < 1e-12);
        let sq = Observable::coordinate_square(&l, 0).unwrap();
        assert!((gibbs_mean(&op, &sq).unwrap().value - 1.0).abs() < 1e-3);
        let g = build_grid(&l, 6.0, 33).unwrap();
        let kop = WittenOperator::new(&kac_potential(&l, 0.05).unwrap(), &g).unwrap();
        assert!(gibbs_mean(&kop, &x0).unwrap().value.abs() < 1e-10);
    }

    #[test]
    fn gaussian_covariances() {
        let (l, op) = gaussian_op(2, 33);
        let cfg = SolverConfig::default();
        let (x0, x1) = (Observable::coordinate(&l, 0).unwrap(), Observable::coordinate(&l, 1).unwrap());
        assert!((covariance_hs(&op, &x0, &x0, &cfg).unwrap().value - 1.0).abs() < 1e-3);
        assert!(covariance_hs(&op, &x0, &x1, &cfg).unwrap().value.abs() < 1e-3);
        let c = Observable::constant(&l, 3.0);
        assert!(covariance_hs(&op, &x0, &c, &cfg).unwrap().value.abs() < 1e-10);
        assert!(truncated_correlation(&op, &[x0.clone(), c]).unwrap().value.abs() < 1e-14);
        assert!(truncated_correlation(&op, &[x0.clone(), x1.clone(), x0.clone()]).unwrap().value.abs() < 1e-10);
        assert!(matches!(truncated_correlation(&op, &[x0]), Err(Error::Arity(_))));
    }

    #[test]
    fn kac_hs_matches_quadrature_and_is_symmetric() {
        let l = chain(2).unwrap();
        let g = build_grid(&l, 6.0, 33).unwrap();
        let op = WittenOperator::new(&kac_potential(&l, 0.05).unwrap(), &g).unwrap();
        let cfg = SolverConfig::with_tolerance(1e-11);
        let x0 = Observable::coordinate(&l, 0).unwrap();
        let b = Observable::bump(&l, &[0, 1], &[0.5, -0.3], 0.5).unwrap();
        let hs = covariance_hs(&op, &x0, &b, &cfg).unwrap().value;
        let hs_rev = covariance_hs(&op, &b, &x0, &cfg).unwrap().value;
        assert!((hs - hs_rev).abs() <= 1e-8 * hs.abs().max(1.0), "{hs} {hs_rev}");
        let q = truncated_correlation(&op, &[x0.clone(), b.clone()]).unwrap().value;
        assert!((hs - q).abs() <= 1e-3f64.max(0.01 * q.abs()), "{hs} vs {q}");
        let x1 = Observable::coordinate(&l, 1).unwrap();
        let c01 = covariance_hs(&op, &x0, &x1, &cfg).unwrap().value;
        assert!(c01 > 0.0);
        let shifted = covariance_hs(&op, &x0.clone().with_offset(5.0), &b.clone().with_offset(-2.0), &cfg).unwrap().value;
        assert!((shifted - hs).abs() <= 1e-8);
        let bl = brascamp_lieb_check(&op, &b, &cfg, 1e-3).unwrap();
        assert!(bl.holds && bl.variance >= -1e-8);
    }

    #[test]
    fn intermediate_identity() {
        let (l, op) = gaussian_op(2, 33);
        let cfg = SolverConfig::default();
        let x0 = Observable::coordinate(&l, 0).unwrap();
        assert!(intermediate_identity_check(&op, &x0, &x0, &cfg).unwrap() <= 1e-3);
        let c = Observable::constant(&l, 1.0);
        assert!(intermediate_identity_check(&op, &x0, &c, &cfg).unwrap() <= 1e-12);
        let g = build_grid(&l, 6.0, 33).unwrap();
        let kop = WittenOperator::new(&kac_potential(&l, 0.05).unwrap(), &g).unwrap();
        let x1 = Observable::coordinate(&l, 1).unwrap();
        let d = intermediate_identity_check(&kop, &x1, &x0, &cfg).unwrap();
        assert!(d <= 1e-3, "{d}");
    }

    #[test]
    fn threepoint_gaussian_vanishes() {
        let (l, op) = gaussian_op(2, 25);
        let cfg = SolverConfig::default();
        let x0 = Observable::coordinate(&l, 0).unwrap();
        let x1 = Observable::coordinate(&l, 1).unwrap();
        let v = threepoint_hs(&op, &x0, &x1, &x0, &cfg).unwrap();
        assert!(v.value.abs() < 1e-3);
        let c = Observable::constant(&l, 1.0);
        assert_eq!(threepoint_hs(&op, &x0, &c, &x1, &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn threepoint_bumps_match_quadrature_small() {
        let l = chain(2).unwrap();
        let g = build_grid(&l, 6.0, 41).unwrap();
        let op = WittenOperator::new(&kac_potential(&l, 0.1).unwrap(), &g).unwrap();
        let cfg = SolverConfig::with_tolerance(1e-10);
        let b0 = Observable::bump(&l, &[0], &[0.5], 0.5).unwrap();
        let b1 = Observable::bump(&l, &[1], &[0.5], 0.5).unwrap();
        let hs = threepoint_hs(&op, &b0, &b1, &b0, &cfg).unwrap();
        let q = truncated_correlation(&op, &[b0.clone(), b1.clone(), b0.clone()]).unwrap();
        assert!((hs.value - q.value).abs() <= 0.02 * q.value.abs(), "{} vs {}", hs.value, q.value);
    }

    #[test]
    fn weighted_gradient_gaussian() {
        let (l, op) = gaussian_op(2, 129);
        let cfg = SolverConfig::with_tolerance(1e-10);
        let x0 = Observable::coordinate(&l, 0).unwrap();
        let r = weighted_gradient_report(&op, &x0, 0.2, &cfg).unwrap();
        assert!((r.sup_value - 1.0).abs() < 1e-3, "{}", r.sup_value);
        let r0 = weighted_gradient_report(&op, &x0, 0.0, &cfg).unwrap();
        assert!(r0.sup_value.is_finite());
        let h = weighted_higher_report(&op, &x0, 2, 0.2, &cfg).unwrap();
        assert!(h.sup_value <= 1e-3, "{}", h.sup_value);
        assert!(matches!(weighted_higher_report(&op, &x0, 4, 0.2, &cfg), Err(Error::UnsupportedOrder(_))));
        let all = Observable::linear(&l, &[0, 1], &[1.0, 1.0]).unwrap();
        assert!(matches!(weighted_gradient_report(&op, &all, 0.2, &cfg), Err(Error::Support(_))));
    }

    #[test]
    fn decay_fit_exact_and_errors() {
        let pts: Vec<DecayPoint> = (1..=5)
            .map(|d| DecayPoint {
                distance: d,
                magnitude: 3.0 * (-0.7 * d as f64).exp(),
                std_error: 0.0,
            })
            .collect();
        let f = decay_fit(&pts, DEFAULT_NOISE_FLOOR).unwrap();
        assert!((f.kappa_est - 0.7).abs() < 1e-12);
        assert!((f.prefactor_c - 3.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(matches!(decay_fit(&pts[..1], DEFAULT_NOISE_FLOOR), Err(Error::InsufficientData(_))));
        let mut noisy = pts.clone();
        noisy[4].std_error = 1.0;
        let f2 = decay_fit(&noisy, DEFAULT_NOISE_FLOOR).unwrap();
        assert_eq!(f2.excluded, 1);
        assert!(monotone_within_errors(&pts));
        let mut bumped = pts.clone();
        bumped[3].magnitude = 1.0;
        assert!(!monotone_within_errors(&bumped));
    }

    #[test]
    fn envelope_fit() {
        let l = chain(6).unwrap();
        let zero: Vec<ThreePointSample> = [(1, 2), (2, 3), (1, 5)]
            .iter()
            .map(|&(j, k)| ThreePointSample { j, k, value: 0.0, std_error: 1e-3 })
            .collect();
        let r = threepoint_bound_check(&l, 0, &zero, &[0.1, 0.5, 1.0]).unwrap();
        assert_eq!(r.prefactor_c, 0.0);
        assert!(r.holds);
        let exact: Vec<ThreePointSample> = [(1, 2), (2, 3), (1, 5), (3, 4)]
            .iter()
            .map(|&(j, k)| ThreePointSample {
                j,
                k,
                value: 0.2 * ((-0.5 * j as f64).exp() + (-0.5 * k as f64).exp()),
                std_error: 1e-4,
            })
            .collect();
        let r = threepoint_bound_check(&l, 0, &exact, &[0.25, 0.5, 0.75]).unwrap();
        assert_eq!(r.kappa1, 0.5);
        assert!((r.prefactor_c - 0.2).abs() < 1e-12);
        let dup = [ThreePointSample { j: 1, k: 1, value: 0.0, std_error: 1.0 }];
        assert!(matches!(threepoint_bound_check(&l, 0, &dup, &[0.5]), Err(Error::InvalidInput(_))));
    }
}
