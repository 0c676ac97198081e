//! Matrix-free Witten Laplacians on zero- and one-forms in the half-density
//! picture, preconditioned conjugate gradients for both, and a probe of the
//! bottom of the one-form spectrum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    check_model, gradient_with, ground_density, inner_product, sample_one_form, twisted_with,
    GridSpec, GroundDensity, OneFormField, ScalarField, Stencils,
};
use crate::kernels;
use crate::lattice::WeightFunction;
use crate::potential::{convexity_margin, halton_samples, Observable, PotentialModel};

/// Gibbs weight below which `f = u e^{Phi/2}` is not reported.
pub const MASK_THRESHOLD: f64 = 1e-12;

/// Number of quasi-random points used for the convexity pre-check.
pub const DEFAULT_MARGIN_SAMPLES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    #[default]
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub rel_tolerance: f64,
    /// `None` means `10 sqrt(N)` for the system size `N`.
    pub max_iterations: Option<usize>,
    pub preconditioner: Preconditioner,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rel_tolerance: 1e-8,
            max_iterations: None,
            preconditioner: Preconditioner::Diagonal,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerance(tol: f64) -> Self {
        SolverConfig {
            rel_tolerance: tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "witten::SolverConfig: tolerance must lie in (0, 1), got {}",
                self.rel_tolerance
            )));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::InvalidParameter(
                "witten::SolverConfig: max_iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn iteration_cap(&self, n: usize) -> usize {
        self.max_iterations
            .unwrap_or_else(|| ((10.0 * (n as f64).sqrt()).ceil() as usize).max(50))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub converged: bool,
    pub rayleigh_quotient_min_observed: f64,
}

/// `f = u e^{Phi/2}` on the nodes where `e^{-Phi} >= MASK_THRESHOLD`;
/// `NaN` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedField {
    pub values: ScalarField,
    pub mask: Vec<bool>,
}

impl MaskedField {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `sqrt( sum (f - exact)^2 e^{-Phi} w / sum e^{-Phi} w )` over the mask.
    pub fn weighted_l2_error<F>(&self, ground: &GroundDensity, exact: F) -> f64
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let g = self.values.grid();
        let psi = ground.field.values();
        let f = self.values.values();
        let (num, den) = (0..g.total_points())
            .into_par_iter()
            .with_min_len(kernels::CHUNK)
            .map_init(
                || vec![0.0; g.n_sites()],
                |x, idx| {
                    if !self.mask[idx] {
                        return (0.0, 0.0);
                    }
                    g.node_coords(idx, x);
                    let w = g.quadrature_weight(idx) * psi[idx] * psi[idx];
                    let d = f[idx] - exact(x);
                    (d * d * w, w)
                },
            )
            .collect::<Vec<_>>()
            .into_iter()
            .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        (num / den).sqrt()
    }
}

/// Solution of the zero-form problem for one observable.
#[derive(Debug, Clone)]
pub struct ZeroFormSolution {
    /// Half-density solution `u = e^{-Phi/2} f`.
    pub u: ScalarField,
    pub f: MaskedField,
    pub mean_g: f64,
    pub report: SolveReport,
}

/// Precomputed nodal data for one model on one grid.
#[derive(Debug, Clone)]
pub struct WittenOperator {
    model: PotentialModel,
    grid: GridSpec,
    stencils: Stencils,
    ground: GroundDensity,
    half_grad: OneFormField,
    potential_term: Vec<f64>,
    pattern: Vec<(usize, usize)>,
    hessian: Vec<f64>,
    /// For each component `a`, the pattern entries `(p, b)` with `H_p = H_ab`.
    couplings: Vec<Vec<(usize, usize)>>,
    convexity_margin: f64,
}

impl WittenOperator {
    pub fn new(model: &PotentialModel, grid: &GridSpec) -> Result<Self> {
        check_model(grid, model, "witten::WittenOperator")?;
        let n = grid.n_sites();
        let np = grid.total_points();
        let ground = ground_density(grid, model)?;
        let half_grad = sample_one_form(grid, |x, out| {
            model.gradient_into(x, out);
            out.iter_mut().for_each(|v| *v *= 0.5);
        })?;
        let potential_term: Vec<f64> = (0..np)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n], vec![0.0; n]),
                |(x, gr), idx| {
                    grid.node_coords(idx, x);
                    model.gradient_into(x, gr);
                    0.25 * gr.iter().map(|v| v * v).sum::<f64>() - 0.5 * model.laplacian(x)
                },
            )
            .collect();
        if potential_term.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(
                "witten::WittenOperator: non-finite potential term".into(),
            ));
        }
        let pattern = model.hessian_pattern();
        let pl = pattern.len();
        let nodal: Vec<f64> = (0..np)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n], vec![0.0; n * n]),
                |(x, h), idx| {
                    grid.node_coords(idx, x);
                    model.hessian_into(x, h);
                    pattern.iter().map(|&(a, b)| h[a * n + b]).collect::<Vec<f64>>()
                },
            )
            .flatten_iter()
            .collect();
        let mut hessian = vec![0.0; pl * np];
        for idx in 0..np {
            for p in 0..pl {
                hessian[p * np + idx] = nodal[idx * pl + p];
            }
        }
        let mut couplings = vec![Vec::new(); n];
        for (p, &(a, b)) in pattern.iter().enumerate() {
            couplings[a].push((p, b));
            if a != b {
                couplings[b].push((p, a));
            }
        }
        let samples = halton_samples(n, DEFAULT_MARGIN_SAMPLES, grid.half_width());
        let margin = convexity_margin(model, &WeightFunction::identity(model.lattice()), &samples)?;
        Ok(WittenOperator {
            model: model.clone(),
            grid: grid.clone(),
            stencils: Stencils::new(grid),
            ground,
            half_grad,
            potential_term,
            pattern,
            hessian,
            couplings,
            convexity_margin: margin,
        })
    }

    pub fn model(&self) -> &PotentialModel {
        &self.model
    }
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn ground(&self) -> &GroundDensity {
        &self.ground
    }
    /// Sampled convexity margin of the model with `M = I`.
    pub fn convexity_margin(&self) -> f64 {
        self.convexity_margin
    }
    pub fn potential_term(&self) -> &[f64] {
        &self.potential_term
    }
    pub fn hessian_pattern(&self) -> &[(usize, usize)] {
        &self.pattern
    }
    /// Nodal values of `Hess Phi` on pattern entry `p`.
    pub fn hessian_entry(&self, p: usize) -> &[f64] {
        let np = self.grid.total_points();
        &self.hessian[p * np..(p + 1) * np]
    }

    fn check_grid(&self, g: &GridSpec, op: &str) -> Result<()> {
        if g != &self.grid {
            Err(Error::Shape(format!("witten::{op}: field grid differs from operator grid")))
        } else {
            Ok(())
        }
    }

    pub(crate) fn apply_w0_raw(&self, u: &[f64], out: &mut [f64]) {
        self.stencils.neg_laplacian(&self.grid, u, out, false);
        out.par_chunks_mut(kernels::CHUNK)
            .zip(u.par_chunks(kernels::CHUNK).zip(self.potential_term.par_chunks(kernels::CHUNK)))
            .for_each(|(o, (u, q))| {
                for ((o, u), q) in o.iter_mut().zip(u).zip(q) {
                    *o += q * u;
                }
            });
    }

    pub(crate) fn apply_w1_raw(&self, v: &[f64], out: &mut [f64]) {
        let np = self.grid.total_points();
        for a in 0..self.grid.n_sites() {
            let (va, oa) = (&v[a * np..(a + 1) * np], &mut out[a * np..(a + 1) * np]);
            self.apply_w0_raw(va, oa);
        }
        for a in 0..self.grid.n_sites() {
            let oa = &mut out[a * np..(a + 1) * np];
            for &(p, b) in &self.couplings[a] {
                let h = &self.hessian[p * np..(p + 1) * np];
                let vb = &v[b * np..(b + 1) * np];
                oa.par_chunks_mut(kernels::CHUNK)
                    .zip(h.par_chunks(kernels::CHUNK).zip(vb.par_chunks(kernels::CHUNK)))
                    .for_each(|(o, (h, x))| {
                        for ((o, h), x) in o.iter_mut().zip(h).zip(x) {
                            *o += h * x;
                        }
                    });
            }
        }
    }

    /// `(-Delta_h + |grad Phi|^2/4 - Delta Phi/2) u`
    pub fn apply_w0(&self, u: &ScalarField) -> Result<ScalarField> {
        self.check_grid(u.grid(), "apply_w0")?;
        let mut out = vec![0.0; u.values().len()];
        self.apply_w0_raw(u.values(), &mut out);
        ScalarField::from_values(&self.grid, out)
    }

    /// Componentwise `W0` plus `Hess Phi . V`.
    pub fn apply_w1(&self, v: &OneFormField) -> Result<OneFormField> {
        self.check_grid(v.grid(), "apply_w1")?;
        let mut out = vec![0.0; v.as_flat().len()];
        self.apply_w1_raw(v.as_flat(), &mut out);
        OneFormField::from_flat(&self.grid, out)
    }

    /// `D u = grad_h u + (grad Phi / 2) u`.
    pub fn twisted_gradient(&self, u: &ScalarField) -> Result<OneFormField> {
        self.check_grid(u.grid(), "twisted_gradient")?;
        Ok(twisted_with(&self.stencils, &self.half_grad, u))
    }

    /// Plain finite-difference gradient with this grid's stencils.
    pub fn gradient(&self, u: &ScalarField) -> Result<OneFormField> {
        self.check_grid(u.grid(), "gradient")?;
        Ok(gradient_with(&self.stencils, u))
    }

    fn w0_diagonal(&self) -> Vec<f64> {
        let lap = self.grid.neg_laplacian_diagonal();
        let floor = 1e-3 * lap;
        self.potential_term.iter().map(|q| (lap + q).max(floor)).collect()
    }

    fn w1_diagonal(&self) -> Vec<f64> {
        let np = self.grid.total_points();
        let lap = self.grid.neg_laplacian_diagonal();
        let floor = 1e-3 * lap;
        let mut d = Vec::with_capacity(np * self.grid.n_sites());
        for a in 0..self.grid.n_sites() {
            let p = self.pattern.iter().position(|&e| e == (a, a)).expect("diagonal in pattern");
            let h = &self.hessian[p * np..(p + 1) * np];
            d.extend(self.potential_term.iter().zip(h).map(|(q, h)| (lap + q + h).max(floor)));
        }
        d
    }

    /// Solves `W1 V = rhs`.
    pub fn solve_w1(&self, rhs: &OneFormField, cfg: &SolverConfig) -> Result<(OneFormField, SolveReport)> {
        self.solve_w1_from(rhs, None, cfg)
    }

    /// Solves `W1 V = rhs` starting from `initial` (zero if `None`).
    pub fn solve_w1_from(
        &self,
        rhs: &OneFormField,
        initial: Option<&OneFormField>,
        cfg: &SolverConfig,
    ) -> Result<(OneFormField, SolveReport)> {
        cfg.validate()?;
        self.check_grid(rhs.grid(), "solve_w1")?;
        if !(self.convexity_margin > 0.0) {
            return Err(Error::ConvexityRisk(format!(
                "witten::solve_w1: sampled convexity margin {} is not positive",
                self.convexity_margin
            )));
        }
        let diag = match cfg.preconditioner {
            Preconditioner::Diagonal => Some(self.w1_diagonal()),
            Preconditioner::None => None,
        };
        let x0 = initial.map(|v| v.as_flat().to_vec());
        let (x, report) = pcg(
            |v, out| self.apply_w1_raw(v, out),
            diag.as_deref(),
            None,
            rhs.as_flat(),
            x0,
            cfg,
            "witten::solve_w1",
        )?;
        Ok((OneFormField::from_flat(&self.grid, x)?, report))
    }

    /// Solves `W0 u = rhs` on the Euclidean complement of the ground density.
    pub fn solve_w0_projected(&self, rhs: &ScalarField, cfg: &SolverConfig) -> Result<(ScalarField, SolveReport)> {
        cfg.validate()?;
        self.check_grid(rhs.grid(), "solve_w0")?;
        let psi = self.ground.field.values();
        let nrm = kernels::norm(psi);
        let e: Vec<f64> = psi.iter().map(|v| v / nrm).collect();
        let diag = match cfg.preconditioner {
            Preconditioner::Diagonal => Some(self.w0_diagonal()),
            Preconditioner::None => None,
        };
        let (x, report) = pcg(
            |v, out| self.apply_w0_raw(v, out),
            diag.as_deref(),
            Some(&e),
            rhs.values(),
            None,
            cfg,
            "witten::solve_w0",
        )?;
        Ok((ScalarField::from_values(&self.grid, x)?, report))
    }

    /// Gibbs mean of nodal values `g`: `<g psi, psi> / |psi|^2`.
    pub fn gibbs_mean_values(&self, g: &ScalarField) -> Result<f64> {
        let gpsi = g.mul(&self.ground.field)?;
        Ok(inner_product(&gpsi, &self.ground.field)? / self.ground.norm_sq)
    }

    /// Samples an observable on the grid.
    pub fn sample(&self, g: &Observable) -> Result<ScalarField> {
        crate::grid::sample_scalar(&self.grid, |x| g.value(x))
    }

    /// `psi grad g`, the right-hand side of the one-form problem.
    pub fn weighted_observable_gradient(&self, g: &Observable) -> Result<OneFormField> {
        let psi = self.ground.field.values();
        let mut v = sample_one_form(&self.grid, |x, out| g.gradient_into(x, out))?;
        for a in 0..self.grid.n_sites() {
            v.component_mut(a).par_iter_mut().zip(psi.par_iter()).for_each(|(o, p)| *o *= p);
        }
        Ok(v)
    }

    /// `e^{Phi/2} u` on the credible region.
    pub fn unmask(&self, u: &ScalarField) -> Result<MaskedField> {
        self.check_grid(u.grid(), "unmask")?;
        let psi = self.ground.field.values();
        let mask: Vec<bool> = psi.iter().map(|p| p * p >= MASK_THRESHOLD).collect();
        if !mask.iter().any(|&m| m) {
            return Err(Error::MaskEmpty(
                "witten::solve_zero_form: no node has e^{-Phi} >= 1e-12".into(),
            ));
        }
        let values: Vec<f64> = u
            .values()
            .iter()
            .zip(psi)
            .zip(&mask)
            .map(|((u, p), &m)| if m { u / p } else { f64::NAN })
            .collect();
        Ok(MaskedField {
            values: ScalarField::from_values_unchecked(&self.grid, values),
            mask,
        })
    }

    /// Solves `(-Delta + grad Phi . grad) f = g - <g>` with `<f> = 0`.
    pub fn solve_zero_form(&self, g: &Observable, cfg: &SolverConfig) -> Result<ZeroFormSolution> {
        let gs = self.sample(g)?;
        let mean_g = self.gibbs_mean_values(&gs)?;
        let centered: Vec<f64> = if g.support().is_empty() {
            vec![0.0; gs.values().len()]
        } else {
            gs.values().iter().map(|v| v - mean_g).collect()
        };
        let rhs = ScalarField::from_values(&self.grid, centered)?.mul(&self.ground.field)?;
        let (u, report) = self.solve_w0_projected(&rhs, cfg)?;
        let f = self.unmask(&u)?;
        Ok(ZeroFormSolution { u, f, mean_g, report })
    }

    /// Smallest Rayleigh quotient of `W1` over random interior one-forms,
    /// each refined by inverse iteration.
    pub fn spectral_gap_probe(&self, trials: usize, refinements: usize, cfg: &SolverConfig) -> Result<f64> {
        if trials == 0 {
            return Err(Error::InvalidParameter(
                "witten::spectral_gap_probe: trials must be >= 1".into(),
            ));
        }
        let np = self.grid.total_points();
        let n = self.grid.n_sites();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let inner = SolverConfig {
            rel_tolerance: cfg.rel_tolerance.max(1e-10),
            ..cfg.clone()
        };
        let mut best = f64::INFINITY;
        let mut av = vec![0.0; n * np];
        for _ in 0..trials {
            let mut v: Vec<f64> = (0..n * np)
                .map(|k| if self.grid.is_interior(k % np) { rng.random_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let rq = |v: &[f64], av: &mut [f64]| {
                self.apply_w1_raw(v, av);
                kernels::dot(v, av) / kernels::dot(v, v)
            };
            best = best.min(rq(&v, &mut av));
            for _ in 0..refinements {
                let rhs = OneFormField::from_flat(&self.grid, v.clone())?;
                let (w, _) = self.solve_w1(&rhs, &inner)?;
                v = w.into_flat();
                let s = 1.0 / kernels::norm(&v);
                kernels::scale(s, &mut v);
                best = best.min(rq(&v, &mut av));
            }
        }
        Ok(best)
    }
}

/// Preconditioned conjugate gradients for a symmetric operator. With
/// `project = Some(e)` (unit vector) the iteration runs on the orthogonal
/// complement of `e`.
pub(crate) fn pcg<A>(
    apply: A,
    diag: Option<&[f64]>,
    project: Option<&[f64]>,
    b: &[f64],
    x0: Option<Vec<f64>>,
    cfg: &SolverConfig,
    op: &str,
) -> Result<(Vec<f64>, SolveReport)>
where
    A: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let proj = |v: &mut [f64]| {
        if let Some(e) = project {
            let c = kernels::dot(v, e);
            kernels::axpy(-c, e, v);
        }
    };
    let precond = |r: &[f64], z: &mut [f64]| {
        match diag {
            Some(d) => z
                .par_chunks_mut(kernels::CHUNK)
                .zip(r.par_chunks(kernels::CHUNK).zip(d.par_chunks(kernels::CHUNK)))
                .for_each(|(z, (r, d))| {
                    for ((z, r), d) in z.iter_mut().zip(r).zip(d) {
                        *z = r / d;
                    }
                }),
            None => z.copy_from_slice(r),
        }
        proj(z);
    };
    let mut pb = b.to_vec();
    proj(&mut pb);
    let bnorm = kernels::norm(&pb);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            SolveReport {
                iterations: 0,
                final_relative_residual: 0.0,
                converged: true,
                rayleigh_quotient_min_observed: f64::NAN,
            },
        ));
    }
    let tol = cfg.rel_tolerance;
    let cap = cfg.iteration_cap(n);
    let mut x = x0.unwrap_or_else(|| vec![0.0; n]);
    proj(&mut x);
    let mut ap = vec![0.0; n];
    let residual = |x: &[f64], ap: &mut [f64]| -> Vec<f64> {
        apply(x, ap);
        proj(ap);
        let mut r = pb.clone();
        kernels::axpy(-1.0, ap, &mut r);
        r
    };
    let mut r = residual(&x, &mut ap);
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = kernels::dot(&r, &z);
    let mut rq_min = f64::INFINITY;
    let mut rel = kernels::norm(&r) / bnorm;
    let mut it = 0;
    while rel > tol && it < cap {
        apply(&p, &mut ap);
        proj(&mut ap);
        let pap = kernels::dot(&p, &ap);
        let pp = kernels::dot(&p, &p);
        if !(pap > 0.0) {
            return Err(Error::Definiteness(format!(
                "{op}: non-positive curvature p.Ap = {pap:e} at iteration {it}"
            )));
        }
        rq_min = rq_min.min(pap / pp);
        let alpha = rz / pap;
        kernels::axpy(alpha, &p, &mut x);
        kernels::axpy(-alpha, &ap, &mut r);
        it += 1;
        rel = kernels::norm(&r) / bnorm;
        if rel <= tol {
            // confirm against the true residual; restart if it drifted
            r = residual(&x, &mut ap);
            rel = kernels::norm(&r) / bnorm;
            if rel <= tol {
                break;
            }
            precond(&r, &mut z);
            rz = kernels::dot(&r, &z);
            p.copy_from_slice(&z);
            continue;
        }
        precond(&r, &mut z);
        let rz_new = kernels::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        kernels::xpby(&z, beta, &mut p);
    }
    let r_true = residual(&x, &mut ap);
    let final_rel = kernels::norm(&r_true) / bnorm;
    let converged = final_rel <= tol;
    if !converged {
        log::warn!("{op}: no convergence after {it} iterations (relative residual {final_rel:e})");
    }
    Ok((
        x,
        SolveReport {
            iterations: it,
            final_relative_residual: final_rel,
            converged,
            rayleigh_quotient_min_observed: rq_min,
        },
    ))
}

/// `W0 u` for a model, building the operator on the field's grid.
pub fn apply_w0(model: &PotentialModel, u: &ScalarField) -> Result<ScalarField> {
    WittenOperator::new(model, u.grid())?.apply_w0(u)
}

/// `W1 V` for a model, building the operator on the field's grid.
pub fn apply_w1(model: &PotentialModel, v: &OneFormField) -> Result<OneFormField> {
    WittenOperator::new(model, v.grid())?.apply_w1(v)
}

pub fn solve_w1(
    model: &PotentialModel,
    rhs: &OneFormField,
    cfg: &SolverConfig,
) -> Result<(OneFormField, SolveReport)> {
    WittenOperator::new(model, rhs.grid())?.solve_w1(rhs, cfg)
}

pub fn solve_zero_form(
    model: &PotentialModel,
    grid: &GridSpec,
    g: &Observable,
    cfg: &SolverConfig,
) -> Result<ZeroFormSolution> {
    WittenOperator::new(model, grid)?.solve_zero_form(g, cfg)
}

/// Default: 8 inverse-iteration refinements per trial.
pub fn spectral_gap_probe(
    model: &PotentialModel,
    grid: &GridSpec,
    trials: usize,
    cfg: &SolverConfig,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidParameter(
            "witten::spectral_gap_probe: trials must be >= 1".into(),
        ));
    }
    WittenOperator::new(model, grid)?.spectral_gap_probe(trials, 8, cfg)
}
