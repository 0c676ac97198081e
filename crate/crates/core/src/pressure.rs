//! The tilted system `Phi - t g`: log-partition function, the operator
//! `A_g f = (A^(1))^{-1} grad f . grad g`, derivatives of the log-partition
//! function through its powers, pressure coefficients, the parameter
//! derivative of `v(t)` and the divergence identity at the origin.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_product, sample_one_form, sample_scalar, GridSpec, OneFormField, ScalarField};
use crate::kernels;
use crate::oracle::{fd_theta_derivative, FdEstimate};
use crate::potential::{halton_samples, tilt_potential, tilt_window, Observable, ObservableKind, PotentialModel, TiltWindow};
use crate::witten::{SolveReport, SolverConfig, WittenOperator, DEFAULT_MARGIN_SAMPLES};

/// Default cap on the derivative order.
pub const DEFAULT_MAX_ORDER: usize = 5;

/// A base model tilted by `-t g`, with its operators on one grid.
#[derive(Debug, Clone)]
pub struct PerturbedSystem {
    base: PotentialModel,
    g: Observable,
    t: f64,
    window: TiltWindow,
    tilted: PotentialModel,
    op: WittenOperator,
}

impl PerturbedSystem {
    /// Rejects `|t| >= T` for the sampled tilt bound `T`.
    pub fn new(base: &PotentialModel, g: &Observable, t: f64, grid: &GridSpec) -> Result<Self> {
        let samples = halton_samples(base.n_sites(), DEFAULT_MARGIN_SAMPLES, grid.half_width());
        let window = tilt_window(base, g, &samples)?;
        Self::with_window(base, g, t, grid, window)
    }

    pub fn with_window(base: &PotentialModel, g: &Observable, t: f64, grid: &GridSpec, window: TiltWindow) -> Result<Self> {
        let tilted = tilt_potential(base, g, t, &window, false)?;
        let op = WittenOperator::new(&tilted, grid)?;
        Ok(PerturbedSystem {
            base: base.clone(),
            g: g.clone(),
            t,
            window,
            tilted,
            op,
        })
    }

    /// The same base model and observable at another `t`.
    pub fn at(&self, t: f64) -> Result<Self> {
        Self::with_window(&self.base, &self.g, t, self.op.grid(), self.window)
    }

    pub fn base(&self) -> &PotentialModel {
        &self.base
    }
    pub fn observable(&self) -> &Observable {
        &self.g
    }
    pub fn t(&self) -> f64 {
        self.t
    }
    pub fn window(&self) -> &TiltWindow {
        &self.window
    }
    pub fn tilted(&self) -> &PotentialModel {
        &self.tilted
    }
    pub fn operator(&self) -> &WittenOperator {
        &self.op
    }
    pub fn grid(&self) -> &GridSpec {
        self.op.grid()
    }
}

/// `ln int e^{-Phi}` over the box by trapezoidal quadrature, shifted by the
/// largest exponent before summing.
pub fn log_partition_model(grid: &GridSpec, model: &PotentialModel) -> Result<f64> {
    let neg = sample_scalar(grid, |x| -model.value(x))?;
    let shift = neg.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = neg.values().par_iter().map(|v| (v - shift).exp()).collect();
    let ones = vec![1.0; e.len()];
    let s = kernels::weighted_dot(&e, &ones, |k| grid.quadrature_weight(k));
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Evaluation(format!(
            "pressure::log_partition: degenerate quadrature sum {s}"
        )));
    }
    Ok(s.ln() + shift)
}

pub fn log_partition(sys: &PerturbedSystem) -> Result<f64> {
    log_partition_model(sys.grid(), sys.tilted())
}

/// `e^{-Phi_t/2} A_g f` from `u = e^{-Phi_t/2} f`.
pub fn apply_a_g(sys: &PerturbedSystem, u: &ScalarField, cfg: &SolverConfig) -> Result<(ScalarField, SolveReport)> {
    let op = sys.operator();
    let grad = op.twisted_gradient(u)?;
    let (v, report) = op.solve_w1(&grad, cfg)?;
    let dg = sample_one_form(sys.grid(), |x, out| sys.g.gradient_into(x, out))?;
    Ok((v.pointwise_dot(&dg)?, report))
}

/// Powers `e^{-Phi_t/2} A_g^j g`, `j = 0..=count`.
fn a_g_powers(sys: &PerturbedSystem, count: usize, cfg: &SolverConfig) -> Result<(Vec<ScalarField>, Vec<SolveReport>)> {
    let op = sys.operator();
    let mut u = op.sample(&sys.g)?.mul(&op.ground().field)?;
    let mut out = vec![u.clone()];
    let mut reports = vec![];
    for _ in 0..count {
        let (next, rep) = apply_a_g(sys, &u, cfg)?;
        if !rep.converged {
            return Err(Error::NonConvergence(format!(
                "pressure::theta_derivative: one-form solve stopped at relative residual {:e}",
                rep.final_relative_residual
            )));
        }
        reports.push(rep);
        u = next;
        out.push(u.clone());
    }
    Ok((out, reports))
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaDerivative {
    pub n: usize,
    /// `(n-1)! <A_g^{n-1} g>_t`
    pub value: f64,
    /// `<A_g^{n-1} g>_t`
    pub moment: f64,
    pub step_reports: Vec<SolveReport>,
}

fn check_order(n: usize, max: usize) -> Result<()> {
    if n == 0 || n > max {
        Err(Error::InvalidParameter(format!(
            "pressure: derivative order {n} outside 1..={max}"
        )))
    } else {
        Ok(())
    }
}

/// All derivatives `1..=n_max` from one run of the recursion.
pub fn theta_derivatives(sys: &PerturbedSystem, n_max: usize, cfg: &SolverConfig) -> Result<Vec<ThetaDerivative>> {
    check_order(n_max, usize::MAX)?;
    let (powers, reports) = a_g_powers(sys, n_max - 1, cfg)?;
    let psi = &sys.operator().ground().field;
    let z = sys.operator().ground().norm_sq;
    powers
        .iter()
        .enumerate()
        .map(|(j, u)| {
            let moment = inner_product(u, psi)? / z;
            Ok(ThetaDerivative {
                n: j + 1,
                value: factorial(j) * moment,
                moment,
                step_reports: reports[..j].to_vec(),
            })
        })
        .collect()
}

/// `theta^(n)(t) = (n-1)! <A_g^{n-1} g>_t`, `1 <= n <= DEFAULT_MAX_ORDER`.
pub fn theta_derivative(sys: &PerturbedSystem, n: usize, cfg: &SolverConfig) -> Result<ThetaDerivative> {
    check_order(n, DEFAULT_MAX_ORDER)?;
    Ok(theta_derivatives(sys, n, cfg)?.pop().expect("n >= 1"))
}

/// `a_n = <A_g^{n-1} g> / (n |Lambda|)` at the system's `t`.
pub fn pressure_coefficient(sys: &PerturbedSystem, n: usize, cfg: &SolverConfig) -> Result<f64> {
    if n < 2 {
        return Err(Error::Arity(format!(
            "pressure::pressure_coefficient: n must be >= 2, got {n}"
        )));
    }
    check_order(n, DEFAULT_MAX_ORDER)?;
    let d = theta_derivative(sys, n, cfg)?;
    let size = sys.base.n_sites() as f64;
    let a = d.moment / (n as f64 * size);
    let back = factorial(n - 1) * n as f64 * size * a;
    debug_assert!((back - d.value).abs() <= 1e-12 * d.value.abs().max(1e-300));
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub n: usize,
    pub operator: f64,
    pub fd: FdEstimate,
    /// `|operator - fd| / max(|fd|, 1e-300)`
    pub relative_gap: f64,
    pub absolute_gap: f64,
    /// `a_n`, absent for `n = 1`.
    pub coefficient_a_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub n_max: usize,
    pub t: f64,
    pub rows: Vec<TaylorRow>,
    /// `|a_n|^{1/n}` for `n >= 2`.
    pub root_sequence: Vec<f64>,
    pub per_step_solver_reports: Vec<SolveReport>,
}

/// Operator derivatives against finite differences of the log-partition
/// function for `n = 1..=n_max` (`n_max <= 4` for the oracle).
pub fn taylor_report(sys: &PerturbedSystem, n_max: usize, cfg: &SolverConfig, fd_step: f64) -> Result<TaylorReport> {
    check_order(n_max, 4)?;
    let ders = theta_derivatives(sys, n_max, cfg)?;
    let size = sys.base.n_sites() as f64;
    let mut rows = vec![];
    let mut roots = vec![];
    for d in &ders {
        let fd = fd_theta_derivative(sys, d.n, fd_step)?;
        let a_n = (d.n >= 2).then(|| d.moment / (d.n as f64 * size));
        if let Some(a) = a_n {
            roots.push(a.abs().powf(1.0 / d.n as f64));
        }
        rows.push(TaylorRow {
            n: d.n,
            operator: d.value,
            absolute_gap: (d.value - fd.value).abs(),
            relative_gap: (d.value - fd.value).abs() / fd.value.abs().max(1e-300),
            fd,
            coefficient_a_n: a_n,
        });
    }
    Ok(TaylorReport {
        n_max,
        t: sys.t,
        rows,
        root_sequence: roots,
        per_step_solver_reports: ders.last().map(|d| d.step_reports.clone()).unwrap_or_default(),
    })
}

/// Sign in front of the transport terms of the `w` right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsSign {
    Plus,
    Minus,
}

/// `V(t) = W1^{-1}(psi_t grad g)`, the half-density form of `v(t)`.
pub fn solve_v(sys: &PerturbedSystem, cfg: &SolverConfig) -> Result<(OneFormField, SolveReport)> {
    let op = sys.operator();
    op.solve_w1(&op.weighted_observable_gradient(&sys.g)?, cfg)
}

/// Solves for `psi_t w(t)` where
/// `A^(1) w = Hess g v +- (grad g . grad) v`. The transport term is taken in
/// the half-density picture as `(grad g . grad) V + (grad g . grad Phi_t / 2) V`
/// with the directional derivative in the commutator form
/// `(1/2) [g W1 V - W1(g V) - (Delta g) V]`.
pub fn param_derivative_w(
    sys: &PerturbedSystem,
    v: &OneFormField,
    sign: RhsSign,
    cfg: &SolverConfig,
) -> Result<(OneFormField, SolveReport)> {
    let op = sys.operator();
    let grid = sys.grid();
    let n = grid.n_sites();
    let np = grid.total_points();
    let g = &sys.g;
    let gs = op.sample(g)?;
    let lap_g = sample_scalar(grid, |x| g.laplacian(x))?;
    let dg = sample_one_form(grid, |x, out| g.gradient_into(x, out))?;
    // grad g . grad Phi_t / 2
    let dg_dphi = dg.pointwise_dot(&sample_one_form(grid, |x, out| {
        sys.tilted.gradient_into(x, out);
        out.iter_mut().for_each(|v| *v *= 0.5);
    })?)?;
    let w1v = op.apply_w1(v)?;
    let gv = v.mul_scalar_field(&gs)?;
    let w1gv = op.apply_w1(&gv)?;
    let mut transport = vec![0.0; n * np];
    for a in 0..n {
        let (vc, w1vc, w1gvc) = (v.component(a), w1v.component(a), w1gv.component(a));
        let out = &mut transport[a * np..(a + 1) * np];
        out.par_iter_mut().enumerate().for_each(|(x, o)| {
            let directional = 0.5 * (gs.values()[x] * w1vc[x] - w1gvc[x] - lap_g.values()[x] * vc[x]);
            *o = directional + dg_dphi.values()[x] * vc[x];
        });
    }
    let s = match sign {
        RhsSign::Plus => 1.0,
        RhsSign::Minus => -1.0,
    };
    let mut rhs = vec![0.0; n * np];
    if !g.is_affine() {
        let mut x = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        for idx in 0..np {
            grid.node_coords(idx, &mut x);
            g.hessian_into(&x, &mut h);
            for a in 0..n {
                rhs[a * np + idx] = (0..n).map(|b| h[a * n + b] * v.component(b)[idx]).sum::<f64>();
            }
        }
    }
    kernels::axpy(s, &transport, &mut rhs);
    op.solve_w1(&OneFormField::from_flat(grid, rhs)?, cfg)
}

/// Which sign of the `w` equation reproduces the finite-difference quotient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WOrderCheck {
    pub epsilon: f64,
    /// `|fd(eps) - w|` and `|fd(eps/2) - w|` (Euclidean norms, PLUS sign).
    pub errors: (f64, f64),
    pub ratio: f64,
    /// `|fd(eps/2) - w|` for each sign.
    pub error_plus: f64,
    pub error_minus: f64,
    pub matching_sign: RhsSign,
    pub solver_reports: Vec<SolveReport>,
}

/// Order-of-convergence check of the finite-difference quotient of `V`
/// against the solved derivative, for both signs.
pub fn w_order_check(sys: &PerturbedSystem, epsilon: f64, cfg: &SolverConfig) -> Result<WOrderCheck> {
    let (v, r0) = solve_v(sys, cfg)?;
    let (w_plus, r1) = param_derivative_w(sys, &v, RhsSign::Plus, cfg)?;
    let (w_minus, r2) = param_derivative_w(sys, &v, RhsSign::Minus, cfg)?;
    let fd1 = crate::oracle::fd_v_derivative(sys, epsilon, cfg)?;
    let fd2 = crate::oracle::fd_v_derivative(sys, epsilon / 2.0, cfg)?;
    let dist = |a: &OneFormField, b: &OneFormField| -> Result<f64> {
        Ok(kernels::norm(a.add_scaled(-1.0, b)?.as_flat()))
    };
    let e1 = dist(&fd1, &w_plus)?;
    let e2 = dist(&fd2, &w_plus)?;
    let em = dist(&fd2, &w_minus)?;
    Ok(WOrderCheck {
        epsilon,
        errors: (e1, e2),
        ratio: e1 / e2,
        error_plus: e2,
        error_minus: em,
        matching_sign: if e2 <= em { RhsSign::Plus } else { RhsSign::Minus },
        solver_reports: vec![r0, r1, r2],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCheck {
    pub n: usize,
    pub theta: f64,
    /// `(n-1)! (h(0) + div v_n(0))`
    pub divergence_side: f64,
    pub h_at_origin: f64,
    pub divergence_at_origin: f64,
    pub residual: f64,
}

/// Compares `theta^(n)(t)` with `(n-1)! (h(0) + div v_n(0))`, where
/// `h = A_g^{n-1} g` and `v_n = (A^(1))^{-1} grad h`. Requires
/// `grad g(0) = 0` and `grad Phi_t(0) = 0`.
pub fn divergence_identity_check(sys: &PerturbedSystem, n: usize, cfg: &SolverConfig) -> Result<DivergenceCheck> {
    check_order(n, DEFAULT_MAX_ORDER)?;
    let g = &sys.g;
    if !matches!(g.kind(), ObservableKind::Bump { .. }) {
        return Err(Error::AssumptionNotMet(
            "pressure::divergence_identity_check: g must be a bump observable".into(),
        ));
    }
    let dim = sys.base.n_sites();
    let origin = vec![0.0; dim];
    let gnorm = g.gradient(&origin).iter().map(|v| v.abs()).fold(0.0, f64::max);
    let pnorm = sys.tilted.gradient(&origin).iter().map(|v| v.abs()).fold(0.0, f64::max);
    if gnorm > 1e-8 || pnorm > 1e-8 {
        return Err(Error::AssumptionNotMet(format!(
            "pressure::divergence_identity_check: |grad g(0)| = {gnorm:e}, |grad Phi_t(0)| = {pnorm:e}, both must vanish"
        )));
    }
    let op = sys.operator();
    let (powers, _) = a_g_powers(sys, n - 1, cfg)?;
    let h = powers.last().expect("nonempty");
    let psi = &op.ground().field;
    let z = op.ground().norm_sq;
    let theta = factorial(n - 1) * inner_product(h, psi)? / z;
    let (vn, rep) = op.solve_w1(&op.twisted_gradient(h)?, cfg)?;
    if !rep.converged {
        return Err(Error::NonConvergence(
            "pressure::divergence_identity_check: one-form solve did not converge".into(),
        ));
    }
    let o = sys.grid().origin_index();
    let p0 = psi.values()[o];
    let mut div = 0.0;
    for i in 0..dim {
        let d = op.twisted_gradient(&vn.component_field(i))?;
        div += d.component(i)[o];
    }
    div /= p0;
    let h0 = h.values()[o] / p0;
    let side = factorial(n - 1) * (h0 + div);
    Ok(DivergenceCheck {
        n,
        theta,
        divergence_side: side,
        h_at_origin: h0,
        divergence_at_origin: div,
        residual: (side - theta).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::lattice::chain;
    use crate::potential::{gaussian_potential, kac_potential};

    #[test]
    fn log_partition_gaussian() {
        let l = chain(1).unwrap();
        let grid = build_grid(&l, 6.0, 65).unwrap();
        let base = gaussian_potential(&l);
        let g = Observable::coordinate(&l, 0).unwrap();
        let s0 = PerturbedSystem::new(&base, &g, 0.0, &grid).unwrap();
        let th0 = log_partition(&s0).unwrap();
        assert!((th0 - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-4);
        let s = s0.at(0.4).unwrap();
        assert!((log_partition(&s).unwrap() - th0 - 0.08).abs() < 1e-4);
        assert!(s0.at(1.5).is_err());
    }

    #[test]
    fn gaussian_recursion() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 65).unwrap();
        let base = gaussian_potential(&l);
        let g = Observable::coordinate(&l, 0).unwrap();
        let sys = PerturbedSystem::new(&base, &g, 0.0, &grid).unwrap();
        let cfg = SolverConfig::with_tolerance(1e-10);
        let d = theta_derivatives(&sys, 4, &cfg).unwrap();
        assert!(d[0].value.abs() < 1e-12);
        assert!((d[1].value - 1.0).abs() < 1e-3);
        assert!(d[2].value.abs() < 1e-3);
        assert!(d[3].value.abs() < 1e-3);
        assert!((pressure_coefficient(&sys, 2, &cfg).unwrap() - 0.25).abs() < 1e-3);
        assert!(pressure_coefficient(&sys, 3, &cfg).unwrap().abs() < 1e-3);
        assert!(matches!(pressure_coefficient(&sys, 1, &cfg), Err(Error::Arity(_))));
        let psi = sys.operator().ground().field.clone();
        let (c, _) = apply_a_g(&sys, &psi.scaled(3.0), &cfg).unwrap();
        assert!(c.values().iter().all(|v| v.abs() < 1e-3));
        let u = sys.operator().sample(&g).unwrap().mul(&psi).unwrap();
        let (ag, _) = apply_a_g(&sys, &u, &cfg).unwrap();
        let diff = ag.add_scaled(-1.0, &psi).unwrap();
        assert!(diff.values().iter().all(|v| v.abs() < 2e-3));
    }

    #[test]
    fn w_vanishes_for_gaussian_coordinate() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 25).unwrap();
        let g = Observable::coordinate(&l, 0).unwrap();
        let sys = PerturbedSystem::new(&gaussian_potential(&l), &g, 0.0, &grid).unwrap();
        let cfg = SolverConfig::with_tolerance(1e-10);
        let (v, _) = solve_v(&sys, &cfg).unwrap();
        let (w, _) = param_derivative_w(&sys, &v, RhsSign::Plus, &cfg).unwrap();
        assert!(kernels::norm(w.as_flat()) < 1e-3 * kernels::norm(v.as_flat()));
        let c = Observable::constant(&l, 1.0);
        let sc = PerturbedSystem::new(&gaussian_potential(&l), &c, 0.0, &grid).unwrap();
        let (vc, _) = solve_v(&sc, &cfg).unwrap();
        let (wc, _) = param_derivative_w(&sc, &vc, RhsSign::Plus, &cfg).unwrap();
        assert!(wc.as_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kac_w_plus_sign_is_first_order() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 25).unwrap();
        let g = Observable::coordinate(&l, 0).unwrap();
        let sys = PerturbedSystem::new(&kac_potential(&l, 0.05).unwrap(), &g, 0.0, &grid).unwrap();
        let cfg = SolverConfig::with_tolerance(1e-12);
        let chk = w_order_check(&sys, 1e-2, &cfg).unwrap();
        assert!((1.6..=2.4).contains(&chk.ratio), "{chk:?}");
        assert_eq!(chk.matching_sign, RhsSign::Plus);
    }

    #[test]
    fn divergence_identity() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 65).unwrap();
        let base = gaussian_potential(&l);
        let cfg = SolverConfig::with_tolerance(1e-10);
        let x0 = Observable::coordinate(&l, 0).unwrap();
        let s = PerturbedSystem::new(&base, &x0, 0.0, &grid).unwrap();
        assert!(matches!(divergence_identity_check(&s, 1, &cfg), Err(Error::AssumptionNotMet(_))));
        let b = Observable::bump(&l, &[0, 1], &[0.0, 0.0], 0.5).unwrap();
        let sb = PerturbedSystem::new(&base, &b, 0.0, &grid).unwrap();
        let r1 = divergence_identity_check(&sb, 1, &cfg).unwrap();
        assert!(r1.residual <= 1e-3, "{r1:?}");
        let r2 = divergence_identity_check(&sb, 2, &cfg).unwrap();
        assert!(r2.residual <= 1e-2, "{r2:?}");
    }
}
