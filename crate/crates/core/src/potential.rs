//! Hamiltonians `Phi(x) = x^2/2 + Psi(x)` with closed-form derivatives, the
//! observables `g` they are paired with, and sampled checks of the convexity
//! and growth hypotheses.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, SiteSubset, WeightFunction};

/// Highest partial-derivative order available in closed form.
pub const MAX_DERIVATIVE_ORDER: usize = 4;

/// What an observable computes. The support sites live on [`Observable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableKind {
    /// `x_i` for the single support site.
    Coordinate,
    /// `sum_k h_k x_{s_k}` over the support sites.
    Linear { coefficients: Vec<f64> },
    /// `exp(-a |x_S - c|^2)` over the support sites.
    Bump { center: Vec<f64>, a: f64 },
    /// `x_i^2` for the single support site. Unbounded gradient; used for
    /// second-moment checks only.
    CoordinateSquare,
}

/// A smooth function of the spins of its lattice support, plus a constant
/// offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    n_sites: usize,
    support: SiteSubset,
    kind: ObservableKind,
    offset: f64,
}

impl Observable {
    fn build(lattice: &LatticeSpec, sites: &[usize], kind: ObservableKind) -> Result<Self> {
        let support = SiteSubset::new(lattice, sites)?;
        if support.len() != sites.len() {
            return Err(Error::InvalidInput(
                "potential::Observable: duplicate support sites".into(),
            ));
        }
        Ok(Observable {
            n_sites: lattice.len(),
            support,
            kind,
            offset: 0.0,
        })
    }

    pub fn coordinate(lattice: &LatticeSpec, site: usize) -> Result<Self> {
        Self::build(lattice, &[site], ObservableKind::Coordinate)
    }

    pub fn coordinate_square(lattice: &LatticeSpec, site: usize) -> Result<Self> {
        Self::build(lattice, &[site], ObservableKind::CoordinateSquare)
    }

    /// `sum_k coefficients[k] * x_{sites[k]}`. Sites are reordered internally.
    pub fn linear(lattice: &LatticeSpec, sites: &[usize], coefficients: &[f64]) -> Result<Self> {
        if sites.len() != coefficients.len() || sites.is_empty() {
            return Err(Error::InvalidInput(
                "potential::Observable::linear: need one coefficient per site".into(),
            ));
        }
        let mut pairs: Vec<(usize, f64)> = sites.iter().copied().zip(coefficients.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        let sorted_sites: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let coefs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Self::build(lattice, &sorted_sites, ObservableKind::Linear { coefficients: coefs })
    }

    /// Gaussian bump `exp(-a |x_S - c|^2)`; `center` is per support site.
    pub fn bump(lattice: &LatticeSpec, sites: &[usize], center: &[f64], a: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "potential::Observable::bump: a must be positive, got {a}"
            )));
        }
        if sites.len() != center.len() || sites.is_empty() {
            return Err(Error::InvalidInput(
                "potential::Observable::bump: need one center coordinate per site".into(),
            ));
        }
        let mut pairs: Vec<(usize, f64)> = sites.iter().copied().zip(center.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        let sorted_sites: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let c: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Self::build(lattice, &sorted_sites, ObservableKind::Bump { center: c, a })
    }

    /// The constant function `c` (empty support).
    pub fn constant(lattice: &LatticeSpec, c: f64) -> Self {
        Observable {
            n_sites: lattice.len(),
            support: SiteSubset::new(lattice, &[]).expect("empty subset"),
            kind: ObservableKind::Linear { coefficients: vec![] },
            offset: c,
        }
    }

    /// The same observable shifted by a constant.
    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset += offset;
        self
    }

    pub fn support(&self) -> &SiteSubset {
        &self.support
    }

    pub fn kind(&self) -> &ObservableKind {
        &self.kind
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// True when the Hessian of `g` vanishes identically.
    pub fn is_affine(&self) -> bool {
        matches!(self.kind, ObservableKind::Coordinate | ObservableKind::Linear { .. })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let s = self.support.members();
        self.offset
            + match &self.kind {
                ObservableKind::Coordinate => x[s[0]],
                ObservableKind::CoordinateSquare => x[s[0]] * x[s[0]],
                ObservableKind::Linear { coefficients } => {
                    s.iter().zip(coefficients).map(|(&i, h)| h * x[i]).sum()
                }
                ObservableKind::Bump { center, a } => {
                    let r2: f64 = s.iter().zip(center).map(|(&i, c)| (x[i] - c).powi(2)).sum();
                    (-a * r2).exp()
                }
            }
    }

    /// Writes the full gradient (length |Lambda|) into `out`.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let s = self.support.members();
        match &self.kind {
            ObservableKind::Coordinate => out[s[0]] = 1.0,
            ObservableKind::CoordinateSquare => out[s[0]] = 2.0 * x[s[0]],
            ObservableKind::Linear { coefficients } => {
                for (&i, h) in s.iter().zip(coefficients) {
                    out[i] = *h;
                }
            }
            ObservableKind::Bump { center, a } => {
                let r2: f64 = s.iter().zip(center).map(|(&i, c)| (x[i] - c).powi(2)).sum();
                let e = (-a * r2).exp();
                for (&i, c) in s.iter().zip(center) {
                    out[i] = -2.0 * a * (x[i] - c) * e;
                }
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_sites];
        self.gradient_into(x, &mut g);
        g
    }

    /// Writes the dense row-major Hessian into `out` (length n*n).
    pub fn hessian_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_sites;
        out.iter_mut().for_each(|v| *v = 0.0);
        let s = self.support.members();
        match &self.kind {
            ObservableKind::Coordinate | ObservableKind::Linear { .. } => {}
            ObservableKind::CoordinateSquare => out[s[0] * n + s[0]] = 2.0,
            ObservableKind::Bump { center, a } => {
                let r2: f64 = s.iter().zip(center).map(|(&i, c)| (x[i] - c).powi(2)).sum();
                let e = (-a * r2).exp();
                for (p, &i) in s.iter().enumerate() {
                    let yi = x[i] - center[p];
                    for (q, &j) in s.iter().enumerate() {
                        let yj = x[j] - center[q];
                        let mut v = 4.0 * a * a * yi * yj;
                        if i == j {
                            v -= 2.0 * a;
                        }
                        out[i * n + j] = v * e;
                    }
                }
            }
        }
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n_sites;
        let mut buf = vec![0.0; n * n];
        self.hessian_into(x, &mut buf);
        DMatrix::from_row_slice(n, n, &buf)
    }

    /// Trace of the Hessian.
    pub fn laplacian(&self, x: &[f64]) -> f64 {
        let s = self.support.members();
        match &self.kind {
            ObservableKind::Coordinate | ObservableKind::Linear { .. } => 0.0,
            ObservableKind::CoordinateSquare => 2.0,
            ObservableKind::Bump { center, a } => {
                let r2: f64 = s.iter().zip(center).map(|(&i, c)| (x[i] - c).powi(2)).sum();
                (4.0 * a * a * r2 - 2.0 * a * s.len() as f64) * (-a * r2).exp()
            }
        }
    }

    /// Mixed partial derivative along the index tuple `idx` (order 1..=4).
    pub fn partial(&self, x: &[f64], idx: &[usize]) -> Result<f64> {
        check_order(idx.len())?;
        if idx.iter().any(|i| !self.support.contains(*i)) {
            return Ok(0.0);
        }
        let s = self.support.members();
        let k = idx.len();
        Ok(match &self.kind {
            ObservableKind::Coordinate => {
                if k == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            ObservableKind::Linear { coefficients } => {
                if k == 1 {
                    let p = s.binary_search(&idx[0]).expect("support member");
                    coefficients[p]
                } else {
                    0.0
                }
            }
            ObservableKind::CoordinateSquare => match k {
                1 => 2.0 * x[s[0]],
                2 => 2.0,
                _ => 0.0,
            },
            ObservableKind::Bump { center, a } => {
                let mut prod = 1.0;
                for (p, &i) in s.iter().enumerate() {
                    let mult = idx.iter().filter(|&&j| j == i).count();
                    prod *= gaussian_derivative_1d(x[i] - center[p], *a, mult);
                }
                prod
            }
        })
    }
}

/// `d^k/dy^k exp(-a y^2)` for k <= 4.
fn gaussian_derivative_1d(y: f64, a: f64, k: usize) -> f64 {
    let e = (-a * y * y).exp();
    let poly = match k {
        0 => 1.0,
        1 => -2.0 * a * y,
        2 => 4.0 * a * a * y * y - 2.0 * a,
        3 => -8.0 * a.powi(3) * y.powi(3) + 12.0 * a * a * y,
        4 => 16.0 * a.powi(4) * y.powi(4) - 48.0 * a.powi(3) * y * y + 12.0 * a * a,
        _ => unreachable!("order checked by caller"),
    };
    poly * e
}

fn check_order(k: usize) -> Result<()> {
    if k == 0 || k > MAX_DERIVATIVE_ORDER {
        Err(Error::UnsupportedOrder(format!(
            "partial derivatives of order {k} are not implemented (1..={MAX_DERIVATIVE_ORDER})"
        )))
    } else {
        Ok(())
    }
}

/// Which Hamiltonian a [`PotentialModel`] evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialKind {
    /// `Psi = 0`.
    Gaussian,
    /// `Psi(x) = -2 sum_{i~j} ln cosh(sqrt(nu/2) (x_i + x_j))`.
    Kac { nu: f64 },
    /// `Phi_base - t g`.
    Tilt {
        base: Box<PotentialModel>,
        g: Observable,
        t: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialModel {
    lattice: LatticeSpec,
    kind: PotentialKind,
}

pub fn gaussian_potential(lattice: &LatticeSpec) -> PotentialModel {
    PotentialModel {
        lattice: lattice.clone(),
        kind: PotentialKind::Gaussian,
    }
}

/// The nearest-neighbour Kac model. Logs a warning when `nu >= 1/(4d)`,
/// where the uniform convexity margin may vanish.
pub fn kac_potential(lattice: &LatticeSpec, nu: f64) -> Result<PotentialModel> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "potential::kac_potential: nu must be positive, got {nu}"
        )));
    }
    if nu >= 1.0 / (4.0 * lattice.dimension() as f64) {
        log::warn!(
            "potential::kac_potential: nu = {nu} >= 1/(4d); convexity margin may vanish"
        );
    }
    Ok(PotentialModel {
        lattice: lattice.clone(),
        kind: PotentialKind::Kac { nu },
    })
}

/// Numerically stable `ln cosh(s)`.
fn ln_cosh(s: f64) -> f64 {
    let a = s.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn sech2(s: f64) -> f64 {
    let c = 1.0 / s.cosh();
    if c.is_finite() {
        c * c
    } else {
        0.0
    }
}

impl PotentialModel {
    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn n_sites(&self) -> usize {
        self.lattice.len()
    }

    /// `Phi - t g`, without any convexity check. See [`tilt_potential`].
    pub fn tilted(&self, g: &Observable, t: f64) -> PotentialModel {
        PotentialModel {
            lattice: self.lattice.clone(),
            kind: PotentialKind::Tilt {
                base: Box::new(self.clone()),
                g: g.clone(),
                t,
            },
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            PotentialKind::Gaussian => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            PotentialKind::Kac { nu } => {
                let c = (nu / 2.0).sqrt();
                let quad = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
                let bonds: f64 = self
                    .lattice
                    .bonds()
                    .iter()
                    .map(|&(a, b)| ln_cosh(c * (x[a] + x[b])))
                    .sum();
                quad - 2.0 * bonds
            }
            PotentialKind::Tilt { base, g, t } => base.value(x) - t * g.value(x),
        }
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            PotentialKind::Gaussian => out.copy_from_slice(x),
            PotentialKind::Kac { nu } => {
                out.copy_from_slice(x);
                let c = (nu / 2.0).sqrt();
                let amp = (2.0 * nu).sqrt();
                for &(a, b) in self.lattice.bonds() {
                    let d = amp * (c * (x[a] + x[b])).tanh();
                    out[a] -= d;
                    out[b] -= d;
                }
            }
            PotentialKind::Tilt { base, g, t } => {
                base.gradient_into(x, out);
                let gg = g.gradient(x);
                for (o, v) in out.iter_mut().zip(gg) {
                    *o -= t * v;
                }
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.gradient_into(x, &mut out);
        out
    }

    /// Dense row-major Hessian into `out` (length n*n).
    pub fn hessian_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_sites();
        match &self.kind {
            PotentialKind::Gaussian => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    out[i * n + i] = 1.0;
                }
            }
            PotentialKind::Kac { nu } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    out[i * n + i] = 1.0;
                }
                let c = (nu / 2.0).sqrt();
                for &(a, b) in self.lattice.bonds() {
                    let v = nu * sech2(c * (x[a] + x[b]));
                    out[a * n + a] -= v;
                    out[b * n + b] -= v;
                    out[a * n + b] -= v;
                    out[b * n + a] -= v;
                }
            }
            PotentialKind::Tilt { base, g, t } => {
                base.hessian_into(x, out);
                if !g.is_affine() {
                    let mut hg = vec![0.0; n * n];
                    g.hessian_into(x, &mut hg);
                    for (o, v) in out.iter_mut().zip(hg) {
                        *o -= t * v;
                    }
                }
            }
        }
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n_sites();
        let mut buf = vec![0.0; n * n];
        self.hessian_into(x, &mut buf);
        DMatrix::from_row_slice(n, n, &buf)
    }

    /// Trace of the Hessian.
    pub fn laplacian(&self, x: &[f64]) -> f64 {
        match &self.kind {
            PotentialKind::Gaussian => self.n_sites() as f64,
            PotentialKind::Kac { nu } => {
                let c = (nu / 2.0).sqrt();
                self.n_sites() as f64
                    - 2.0
                        * nu
                        * self
                            .lattice
                            .bonds()
                            .iter()
                            .map(|&(a, b)| sech2(c * (x[a] + x[b])))
                            .sum::<f64>()
            }
            PotentialKind::Tilt { base, g, t } => {
                let mut lap = base.laplacian(x);
                if !g.is_affine() {
                    let n = self.n_sites();
                    let mut hg = vec![0.0; n * n];
                    g.hessian_into(x, &mut hg);
                    lap -= t * (0..n).map(|i| hg[i * n + i]).sum::<f64>();
                }
                lap
            }
        }
    }

    /// Upper-triangular index pairs `(i, j)`, `i <= j`, where the Hessian can
    /// be nonzero.
    pub fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        self.collect_pattern(&mut set);
        set.into_iter().collect()
    }

    fn collect_pattern(&self, set: &mut BTreeSet<(usize, usize)>) {
        for i in 0..self.n_sites() {
            set.insert((i, i));
        }
        match &self.kind {
            PotentialKind::Gaussian => {}
            PotentialKind::Kac { .. } => {
                set.extend(self.lattice.bonds().iter().copied());
            }
            PotentialKind::Tilt { base, g, .. } => {
                base.collect_pattern(set);
                if !g.is_affine() {
                    let s = g.support().members();
                    for (p, &i) in s.iter().enumerate() {
                        for &j in &s[p..] {
                            set.insert((i, j));
                        }
                    }
                }
            }
        }
    }

    /// Index sets within which mixed partials of order >= 2 can be nonzero.
    pub fn interaction_blocks(&self) -> Vec<Vec<usize>> {
        match &self.kind {
            PotentialKind::Gaussian => (0..self.n_sites()).map(|i| vec![i]).collect(),
            PotentialKind::Kac { .. } => {
                let mut blocks: Vec<Vec<usize>> = (0..self.n_sites()).map(|i| vec![i]).collect();
                blocks.extend(self.lattice.bonds().iter().map(|&(a, b)| vec![a, b]));
                blocks
            }
            PotentialKind::Tilt { base, g, .. } => {
                let mut blocks = base.interaction_blocks();
                if !g.support().is_empty() {
                    blocks.push(g.support().members().to_vec());
                }
                blocks
            }
        }
    }

    /// Mixed partial derivative along `idx` (order 1..=4).
    pub fn partial(&self, x: &[f64], idx: &[usize]) -> Result<f64> {
        check_order(idx.len())?;
        let k = idx.len();
        match &self.kind {
            PotentialKind::Gaussian => Ok(quadratic_partial(x, idx)),
            PotentialKind::Kac { nu } => {
                let c = (nu / 2.0).sqrt();
                let mut total = quadratic_partial(x, idx);
                for &(a, b) in self.lattice.bonds() {
                    if idx.iter().all(|&i| i == a || i == b) {
                        let s = c * (x[a] + x[b]);
                        let th = s.tanh();
                        let se = sech2(s);
                        // derivatives of -2 ln cosh(c (x_a + x_b))
                        total += match k {
                            1 => -2.0 * c * th,
                            2 => -2.0 * c * c * se,
                            3 => 4.0 * c.powi(3) * se * th,
                            _ => 4.0 * c.powi(4) * (se * se - 2.0 * se * th * th),
                        };
                    }
                }
                Ok(total)
            }
            PotentialKind::Tilt { base, g, t } => Ok(base.partial(x, idx)? - t * g.partial(x, idx)?),
        }
    }
}

fn quadratic_partial(x: &[f64], idx: &[usize]) -> f64 {
    match idx.len() {
        1 => x[idx[0]],
        2 => {
            if idx[0] == idx[1] {
                1.0
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

/// Constructive bound on `|t|` under which the tilted model keeps a positive
/// convexity margin on the sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltWindow {
    /// Sampled convexity margin of the base model (M = I).
    pub base_margin: f64,
    /// Sampled supremum of the spectral norm of `Hess g`.
    pub hess_g_sup: f64,
    /// `base_margin / (1 + hess_g_sup)`.
    pub bound: f64,
}

pub fn tilt_window(base: &PotentialModel, g: &Observable, samples: &[Vec<f64>]) -> Result<TiltWindow> {
    let base_margin = convexity_margin(base, &WeightFunction::identity(base.lattice()), samples)?;
    let mut hess_g_sup = 0.0f64;
    if !g.is_affine() {
        for x in samples {
            let h = g.hessian(x);
            let eig = SymmetricEigen::new(h);
            let norm = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            hess_g_sup = hess_g_sup.max(norm);
        }
    }
    Ok(TiltWindow {
        base_margin,
        hess_g_sup,
        bound: base_margin / (1.0 + hess_g_sup),
    })
}

/// `Phi - t g`, rejecting `|t| >= T` unless `allow_outside` is set.
pub fn tilt_potential(
    base: &PotentialModel,
    g: &Observable,
    t: f64,
    window: &TiltWindow,
    allow_outside: bool,
) -> Result<PotentialModel> {
    if t.abs() >= window.bound && !allow_outside {
        return Err(Error::ConvexityRisk(format!(
            "potential::tilt_potential: |t| = {} >= T = {}",
            t.abs(),
            window.bound
        )));
    }
    Ok(base.tilted(g, t))
}

/// Minimum over `samples` of the smallest eigenvalue of the symmetric part of
/// `M^-1 Hess Phi(x) M`, `M = diag(rho)`.
pub fn convexity_margin(
    model: &PotentialModel,
    weight: &WeightFunction,
    samples: &[Vec<f64>],
) -> Result<f64> {
    let n = model.n_sites();
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "potential::convexity_margin: sample set is empty".into(),
        ));
    }
    if weight.values.len() != n {
        return Err(Error::Shape(
            "potential::convexity_margin: weight length differs from |Lambda|".into(),
        ));
    }
    let mut buf = vec![0.0; n * n];
    let mut best = f64::INFINITY;
    for x in samples {
        model.hessian_into(x, &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "potential::convexity_margin: non-finite Hessian at {x:?}"
            )));
        }
        let m = DMatrix::from_fn(n, n, |i, j| {
            let b_ij = buf[i * n + j] * weight.values[j] / weight.values[i];
            let b_ji = buf[j * n + i] * weight.values[i] / weight.values[j];
            0.5 * (b_ij + b_ji)
        });
        let eig = SymmetricEigen::new(m);
        let lo = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        best = best.min(lo);
    }
    Ok(best)
}

/// Largest sampled value of
/// `sum_{j, i_1..i_k} Phi_{x_j x_i1 .. x_ik}^2 exp(2 kappa d({i_1..i_k}, S))`.
pub fn growth_condition_report(
    model: &PotentialModel,
    k: usize,
    kappa: f64,
    support: &SiteSubset,
    samples: &[Vec<f64>],
) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "potential::growth_condition_report: k must be >= 2, got {k}"
        )));
    }
    if k + 1 > MAX_DERIVATIVE_ORDER {
        return Err(Error::UnsupportedOrder(format!(
            "potential::growth_condition_report: order k+1 = {} exceeds {}",
            k + 1,
            MAX_DERIVATIVE_ORDER
        )));
    }
    if support.is_empty() {
        return Err(Error::EmptySupport(
            "potential::growth_condition_report".into(),
        ));
    }
    let lattice = model.lattice();
    // every (k+1)-tuple drawn from a single interaction block
    let mut tuples: BTreeSet<Vec<usize>> = BTreeSet::new();
    for block in model.interaction_blocks() {
        let b = block.len();
        let count = b.pow((k + 1) as u32);
        for mut code in 0..count {
            let mut t = Vec::with_capacity(k + 1);
            for _ in 0..=k {
                t.push(block[code % b]);
                code /= b;
            }
            tuples.insert(t);
        }
    }
    let weighted: Vec<(Vec<usize>, f64)> = tuples
        .into_iter()
        .map(|t| {
            let d = lattice.multi_distance(&t[1..], support)?;
            Ok((t, (2.0 * kappa * d as f64).exp()))
        })
        .collect::<Result<_>>()?;
    let mut best = 0.0f64;
    for x in samples {
        let mut sum = 0.0;
        for (t, w) in &weighted {
            let p = model.partial(x, t)?;
            sum += p * p * w;
        }
        best = best.max(sum);
    }
    Ok(best)
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// The origin followed by `count` Halton points scaled to `[-half_width, half_width]^dim`.
pub fn halton_samples(dim: usize, count: usize, half_width: f64) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "halton_samples supports up to {} dimensions", PRIMES.len());
    let mut out = Vec::with_capacity(count + 1);
    out.push(vec![0.0; dim]);
    for idx in 1..=count as u64 {
        let p: Vec<f64> = PRIMES[..dim]
            .iter()
            .map(|&base| {
                let (mut f, mut r, mut i) = (1.0, 0.0, idx);
                while i > 0 {
                    f /= base as f64;
                    r += f * (i % base) as f64;
                    i /= base;
                }
                half_width * (2.0 * r - 1.0)
            })
            .collect();
        out.push(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{chain, exponential_weight};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models() -> Vec<(PotentialModel, Observable)> {
        let l3 = chain(3).unwrap();
        let kac = kac_potential(&l3, 0.08).unwrap();
        let bump = Observable::bump(&l3, &[1, 2], &[0.3, -0.2], 0.7).unwrap();
        vec![
            (gaussian_potential(&l3), Observable::coordinate(&l3, 0).unwrap()),
            (kac.clone(), bump.clone()),
            (kac.tilted(&bump, 0.2), Observable::linear(&l3, &[0, 2], &[1.0, -0.5]).unwrap()),
        ]
    }

    #[test]
    fn gaussian_closed_forms() {
        let l = chain(3).unwrap();
        let m = gaussian_potential(&l);
        assert_eq!(m.value(&[0.0; 3]), 0.0);
        let h = m.hessian(&[0.3, -1.0, 2.0]);
        assert_eq!(h, DMatrix::identity(3, 3));
        assert_eq!(m.partial(&[0.3, -1.0, 2.0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(m.partial(&[0.3, -1.0, 2.0], &[1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn kac_at_origin() {
        let l = chain(2).unwrap();
        let m = kac_potential(&l, 0.05).unwrap();
        assert_eq!(m.value(&[0.0, 0.0]), 0.0);
        assert_eq!(m.gradient(&[0.0, 0.0]), vec![0.0, 0.0]);
        let h = m.hessian(&[0.0, 0.0]);
        let expected = DMatrix::from_row_slice(2, 2, &[0.95, -0.05, -0.05, 0.95]);
        assert!((h - expected).abs().max() < 1e-15);
        assert!(matches!(kac_potential(&l, 0.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn ln_cosh_is_stable() {
        assert!((ln_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((ln_cosh(0.5) - 0.5f64.cosh().ln()).abs() < 1e-15);
    }

    #[test]
    fn tilt_linearity() {
        let l = chain(2).unwrap();
        let base = gaussian_potential(&l);
        let g = Observable::coordinate(&l, 0).unwrap();
        let x = [0.7, -0.4];
        let t0 = base.tilted(&g, 0.0);
        assert_eq!(t0.value(&x), base.value(&x));
        let t = base.tilted(&g, 0.3);
        let grad = t.gradient(&x);
        assert!((grad[0] - (0.7 - 0.3)).abs() < 1e-15 && (grad[1] + 0.4).abs() < 1e-15);
        let kac = kac_potential(&l, 0.05).unwrap();
        let bump = Observable::bump(&l, &[0, 1], &[0.0, 0.0], 1.0).unwrap();
        let tk = kac.tilted(&bump, 0.25);
        let diff = tk.hessian(&x) - (kac.hessian(&x) - bump.hessian(&x) * 0.25);
        assert!(diff.abs().max() < 1e-15);
    }

    #[test]
    fn tilt_round_trip() {
        let l = chain(3).unwrap();
        let kac = kac_potential(&l, 0.05).unwrap();
        let g = Observable::bump(&l, &[1], &[0.5], 0.5).unwrap();
        let back = kac.tilted(&g, 0.37).tilted(&g, -0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            assert!((back.value(&x) - kac.value(&x)).abs() <= 1e-14 * (1.0 + kac.value(&x).abs()));
            let (a, b) = (back.gradient(&x), kac.gradient(&x));
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn tilt_window_rejects_large_t() {
        let l = chain(2).unwrap();
        let kac = kac_potential(&l, 0.05).unwrap();
        let g = Observable::coordinate(&l, 0).unwrap();
        let samples = halton_samples(2, 64, 6.0);
        let w = tilt_window(&kac, &g, &samples).unwrap();
        assert!((w.bound - 0.9).abs() < 1e-12, "bound {}", w.bound);
        assert!(tilt_potential(&kac, &g, 0.95, &w, false).is_err());
        assert!(tilt_potential(&kac, &g, 0.95, &w, true).is_ok());
        assert!(tilt_potential(&kac, &g, 0.3, &w, false).is_ok());
    }

    /// Analytic derivatives of orders 1..3 against central differences of the
    /// order below, step 1e-4, relative tolerance 1e-6.
    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (model, obs) in models() {
            let n = model.n_sites();
            for _ in 0..20 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let shifted = |j: usize, d: f64| {
                    let mut y = x.clone();
                    y[j] += d;
                    y
                };
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0);
                for j in 0..n {
                    let fd = (model.value(&shifted(j, h)) - model.value(&shifted(j, -h))) / (2.0 * h);
                    assert!(close(model.gradient(&x)[j], fd));
                    assert!(close(model.partial(&x, &[j]).unwrap(), fd));
                    let fdg = (obs.value(&shifted(j, h)) - obs.value(&shifted(j, -h))) / (2.0 * h);
                    assert!(close(obs.gradient(&x)[j], fdg));
                    for i in 0..n {
                        let fd2 = (model.gradient(&shifted(j, h))[i] - model.gradient(&shifted(j, -h))[i]) / (2.0 * h);
                        assert!(close(model.hessian(&x)[(i, j)], fd2));
                        assert!(close(model.partial(&x, &[i, j]).unwrap(), fd2));
                        let fdg2 = (obs.gradient(&shifted(j, h))[i] - obs.gradient(&shifted(j, -h))[i]) / (2.0 * h);
                        assert!(close(obs.hessian(&x)[(i, j)], fdg2));
                        assert!((obs.laplacian(&x) - obs.hessian(&x).trace()).abs() < 1e-13);
                        for k in 0..n {
                            let fd3 = (model.partial(&shifted(k, h), &[i, j]).unwrap()
                                - model.partial(&shifted(k, -h), &[i, j]).unwrap())
                                / (2.0 * h);
                            assert!(close(model.partial(&x, &[i, j, k]).unwrap(), fd3));
                            let fd4 = (model.partial(&shifted(k, h), &[i, j, k]).unwrap()
                                - model.partial(&shifted(k, -h), &[i, j, k]).unwrap())
                                / (2.0 * h);
                            assert!(close(model.partial(&x, &[i, j, k, k]).unwrap(), fd4));
                        }
                    }
                }
                assert!((model.laplacian(&x) - model.hessian(&x).trace()).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn hessian_symmetric_and_bond_local() {
        let l = chain(4).unwrap();
        let kac = kac_potential(&l, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let h = kac.hessian(&x);
            assert_eq!(h.clone(), h.transpose());
            for i in 0..4 {
                for j in 0..4 {
                    let off = h[(i, j)] - if i == j { 1.0 } else { 0.0 };
                    if i != j && !l.are_adjacent(i, j) {
                        assert_eq!(off, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn observable_gradient_support() {
        let l = chain(4).unwrap();
        let g = Observable::bump(&l, &[1, 2], &[0.0, 1.0], 0.5).unwrap();
        let grad = g.gradient(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[3], 0.0);
        assert!(g.partial(&[0.0; 4], &[0, 1]).unwrap() == 0.0);
    }

    #[test]
    fn convexity_margin_cases() {
        let l = chain(2).unwrap();
        let samples = halton_samples(2, 32, 6.0);
        let w = WeightFunction {
            values: vec![1.0, 3.0],
            lipschitz_lambda: 3f64.ln(),
        };
        let g = convexity_margin(&gaussian_potential(&l), &w, &samples).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
        let kac = kac_potential(&l, 0.05).unwrap();
        let k = convexity_margin(&kac, &WeightFunction::identity(&l), &samples).unwrap();
        assert!((k - 0.9).abs() < 1e-12);
        assert!(convexity_margin(&kac, &w, &[]).is_err());
    }

    #[test]
    fn convexity_margin_chain4_in_unit_interval() {
        let l = chain(4).unwrap();
        let kac = kac_potential(&l, 0.05).unwrap();
        let samples = halton_samples(4, 1000, 6.0);
        let s = SiteSubset::new(&l, &[0]).unwrap();
        let w = exponential_weight(&l, 0.2, &s).unwrap();
        let d = convexity_margin(&kac, &w, &samples).unwrap();
        assert!(d > 0.0 && d < 1.0, "margin {d}");
        // the origin is the least convex point for M = I
        let d_id = convexity_margin(&kac, &WeightFunction::identity(&l), &samples).unwrap();
        let lo = 1.0 - 0.05 * (2.0 + 2.0 * (std::f64::consts::PI / 4.0).cos());
        assert!((d_id - lo).abs() < 1e-12, "{d_id} vs {lo}");
    }

    #[test]
    fn growth_condition_cases() {
        let l = chain(2).unwrap();
        let s = SiteSubset::new(&l, &[0]).unwrap();
        let gauss = gaussian_potential(&l);
        let samples = halton_samples(2, 50, 6.0);
        assert_eq!(growth_condition_report(&gauss, 2, 0.3, &s, &samples).unwrap(), 0.0);
        let kac = kac_potential(&l, 0.05).unwrap();
        assert_eq!(growth_condition_report(&kac, 2, 0.3, &s, &[vec![0.0, 0.0]]).unwrap(), 0.0);
        let v = growth_condition_report(&kac, 2, 0.3, &s, &samples).unwrap();
        assert!(v > 0.0);
        // brute force: every index triple over both sites
        let mut brute = 0.0f64;
        for x in &samples {
            let mut sum = 0.0;
            for j in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        let p = kac.partial(x, &[j, a, b]).unwrap();
                        let d = l.multi_distance(&[a, b], &s).unwrap() as f64;
                        sum += p * p * (0.6 * d).exp();
                    }
                }
            }
            brute = brute.max(sum);
        }
        assert!((v - brute).abs() <= 1e-14 * brute);
        assert!(matches!(
            growth_condition_report(&kac, 4, 0.3, &s, &samples),
            Err(Error::UnsupportedOrder(_))
        ));
    }

    #[test]
    fn halton_is_deterministic_and_in_box() {
        let a = halton_samples(3, 100, 2.0);
        assert_eq!(a, halton_samples(3, 100, 2.0));
        assert_eq!(a[0], vec![0.0; 3]);
        assert!(a.iter().flatten().all(|v| v.abs() <= 2.0));
    }
}
