//! Independent reference computations: dense direct solves on small grids,
//! random-walk Metropolis expectations with batch-means error bars, and
//! finite differences of the log-partition function and of `v(t)`.
//!
//! Nothing here reuses the matrix-free stencils of the solver; the dense
//! matrices are assembled from their own coefficient tables.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, OneFormField, ScalarField};
use crate::potential::PotentialModel;
use crate::pressure::{log_partition_model, solve_v, PerturbedSystem};
use crate::witten::SolverConfig;

/// Largest `N |Lambda|` accepted by the dense solvers.
pub const DENSE_SIZE_LIMIT: usize = 4096;

/// Number of batches for batch-means standard errors.
pub const MCMC_BATCHES: usize = 32;

/// Default finite-difference step for `fd_theta_derivative`.
pub const DEFAULT_FD_STEP: f64 = 1e-2;

fn second_difference_weights(order: usize) -> &'static [f64] {
    // c_0, c_1, c_2, c_3 of the symmetric second-difference stencil
    match order {
        2 => &[-2.0, 1.0],
        4 => &[-5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0],
        _ => &[-49.0 / 18.0, 3.0 / 2.0, -3.0 / 20.0, 1.0 / 90.0],
    }
}

fn check_dense_size(grid: &GridSpec, components: usize, op: &str) -> Result<usize> {
    let size = grid.total_points() * components;
    if size > DENSE_SIZE_LIMIT {
        return Err(Error::Resource(format!(
            "oracle::{op}: dense system of size {size} exceeds {DENSE_SIZE_LIMIT}"
        )));
    }
    Ok(size)
}

fn check_model_grid(model: &PotentialModel, grid: &GridSpec, op: &str) -> Result<()> {
    if model.lattice() != grid.lattice() {
        return Err(Error::Shape(format!("oracle::{op}: model and grid lattices differ")));
    }
    Ok(())
}

/// `-Delta_h` with zero Dirichlet ghosts plus `|grad Phi|^2/4 - Delta Phi/2`
/// on the diagonal, as a dense matrix over grid nodes.
fn dense_w0_matrix(model: &PotentialModel, grid: &GridSpec) -> DMatrix<f64> {
    let np = grid.total_points();
    let n = grid.n_sites();
    let m = grid.points_per_site() as isize;
    let h2 = grid.spacing() * grid.spacing();
    let c = second_difference_weights(grid.stencil_order());
    let mut a = DMatrix::<f64>::zeros(np, np);
    let mut ii = vec![0usize; n];
    for row in 0..np {
        grid.multi_index(row, &mut ii);
        let x = grid.node(row);
        let grad = model.gradient(&x);
        let q = 0.25 * grad.iter().map(|g| g * g).sum::<f64>() - 0.5 * model.laplacian(&x);
        a[(row, row)] += q - n as f64 * c[0] / h2;
        for k in 0..n {
            let s = grid.stride(k) as isize;
            for (off, ck) in c.iter().enumerate().skip(1) {
                for dir in [-1isize, 1] {
                    let j = ii[k] as isize + dir * off as isize;
                    if j >= 0 && j < m {
                        let col = (row as isize + dir * off as isize * s) as usize;
                        a[(row, col)] -= ck / h2;
                    }
                }
            }
        }
    }
    a
}

fn dense_w1_matrix(model: &PotentialModel, grid: &GridSpec) -> DMatrix<f64> {
    let np = grid.total_points();
    let n = grid.n_sites();
    let w0 = dense_w0_matrix(model, grid);
    let mut a = DMatrix::<f64>::zeros(np * n, np * n);
    for comp in 0..n {
        a.view_mut((comp * np, comp * np), (np, np)).copy_from(&w0);
    }
    for node in 0..np {
        let hess = model.hessian(&grid.node(node));
        for i in 0..n {
            for j in 0..n {
                a[(i * np + node, j * np + node)] += hess[(i, j)];
            }
        }
    }
    a
}

/// Solves `W1 V = rhs` by dense LU factorization.
pub fn dense_solve_w1(model: &PotentialModel, rhs: &OneFormField) -> Result<OneFormField> {
    let grid = rhs.grid();
    check_model_grid(model, grid, "dense_solve_w1")?;
    check_dense_size(grid, grid.n_sites(), "dense_solve_w1")?;
    let a = dense_w1_matrix(model, grid);
    let b = DVector::from_column_slice(rhs.as_flat());
    let x = a.lu().solve(&b).ok_or_else(|| {
        Error::Definiteness("oracle::dense_solve_w1: matrix is singular".into())
    })?;
    OneFormField::from_flat(grid, x.as_slice().to_vec())
}

/// Solves `W0 u = rhs` subject to `u . psi = 0` (Euclidean nodal product)
/// through the bordered system with one Lagrange multiplier.
pub fn dense_solve_w0(model: &PotentialModel, rhs: &ScalarField) -> Result<ScalarField> {
    let grid = rhs.grid();
    check_model_grid(model, grid, "dense_solve_w0")?;
    let np = check_dense_size(grid, 1, "dense_solve_w0")?;
    let psi: Vec<f64> = (0..np).map(|i| (-0.5 * model.value(&grid.node(i))).exp()).collect();
    let nrm = psi.iter().map(|p| p * p).sum::<f64>().sqrt();
    let w0 = dense_w0_matrix(model, grid);
    let mut a = DMatrix::<f64>::zeros(np + 1, np + 1);
    a.view_mut((0, 0), (np, np)).copy_from(&w0);
    let mut b = DVector::<f64>::zeros(np + 1);
    let dot = rhs.values().iter().zip(&psi).map(|(r, p)| r * p).sum::<f64>() / (nrm * nrm);
    for i in 0..np {
        a[(i, np)] = psi[i] / nrm;
        a[(np, i)] = psi[i] / nrm;
        // project the right-hand side onto the constraint complement
        b[i] = rhs.values()[i] - dot * psi[i];
    }
    let x = a.lu().solve(&b).ok_or_else(|| {
        Error::Definiteness("oracle::dense_solve_w0: bordered matrix is singular".into())
    })?;
    ScalarField::from_values(grid, x.as_slice()[..np].to_vec())
}

/// Smallest eigenvalue of the dense one-form matrix.
pub fn dense_min_eigenvalue(model: &PotentialModel, grid: &GridSpec) -> Result<f64> {
    check_model_grid(model, grid, "dense_min_eigenvalue")?;
    check_dense_size(grid, grid.n_sites(), "dense_min_eigenvalue")?;
    let eig = SymmetricEigen::new(dense_w1_matrix(model, grid));
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    /// Total sweeps including burn-in.
    pub chain_length: usize,
    pub burn_in: usize,
    /// Initial proposal width; retuned by a pre-run when `tune` is set.
    pub proposal_std: f64,
    pub seed: u64,
    /// Keep every `thinning`-th sweep.
    pub thinning: usize,
    pub tune: bool,
    /// Independent chains with seeds `seed, seed + 1, ...`.
    pub chains: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chain_length: 200_000,
            burn_in: 2_000,
            proposal_std: 1.0,
            seed: 1,
            thinning: 1,
            tune: true,
            chains: 1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.chain_length {
            return Err(Error::InvalidParameter(format!(
                "oracle::McmcConfig: burn_in {} must be below chain_length {}",
                self.burn_in, self.chain_length
            )));
        }
        if !(self.proposal_std > 0.0 && self.proposal_std.is_finite()) {
            return Err(Error::InvalidParameter(
                "oracle::McmcConfig: proposal_std must be positive".into(),
            ));
        }
        if self.thinning == 0 || self.chains == 0 {
            return Err(Error::InvalidParameter(
                "oracle::McmcConfig: thinning and chains must be >= 1".into(),
            ));
        }
        let kept = (self.chain_length - self.burn_in) / self.thinning;
        if kept < MCMC_BATCHES {
            return Err(Error::InvalidParameter(format!(
                "oracle::McmcConfig: only {kept} kept samples, need at least {MCMC_BATCHES}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub acceptance_rate: f64,
    pub effective_sample_size: f64,
    pub proposal_std: f64,
    pub samples: usize,
    pub warnings: Vec<String>,
}

/// Batch sums of every product of up to three observables (indices taken
/// as sorted multisets), accumulated along one or more chains.
#[derive(Debug, Clone)]
pub struct McmcRun {
    n_obs: usize,
    monomials: Vec<Vec<usize>>,
    /// `sums[batch][monomial]` and the matching sums of squares; batches of
    /// all chains are concatenated.
    sums: Vec<Vec<f64>>,
    squares: Vec<Vec<f64>>,
    batch_size: usize,
    acceptance_rate: f64,
    proposal_std: f64,
    warnings: Vec<String>,
}

/// Highest product degree recorded by the sampler.
pub const MCMC_MAX_DEGREE: usize = 3;

fn monomials(n: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut last = out.clone();
    for _ in 1..MCMC_MAX_DEGREE {
        let mut next = vec![];
        for m in &last {
            for i in *m.last().expect("nonempty")..n {
                let mut e = m.clone();
                e.push(i);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        last = next;
    }
    out
}

type ObsFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

fn sweep(model: &PotentialModel, x: &mut [f64], energy: &mut f64, std: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut accepted = 0;
    for i in 0..x.len() {
        let old = x[i];
        let z: f64 = StandardNormal.sample(rng);
        x[i] = old + std * z;
        let e = model.value(x);
        let u: f64 = rng.random();
        if e.is_finite() && u < (*energy - e).exp() {
            *energy = e;
            accepted += 1;
        } else {
            x[i] = old;
        }
    }
    accepted
}

/// Short pre-runs scaling the proposal width towards acceptance 0.4.
fn tune_proposal(model: &PotentialModel, x: &mut [f64], energy: &mut f64, mut std: f64, rng: &mut ChaCha8Rng) -> f64 {
    let n = x.len();
    for _ in 0..20 {
        let sweeps = 200;
        let acc: usize = (0..sweeps).map(|_| sweep(model, x, energy, std, rng)).sum();
        let rate = acc as f64 / (sweeps * n) as f64;
        if (rate - 0.4).abs() < 0.05 {
            break;
        }
        std *= ((rate + 0.01) / 0.41).clamp(0.3, 3.0);
    }
    std
}

struct ChainStats {
    sums: Vec<Vec<f64>>,
    squares: Vec<Vec<f64>>,
    rate: f64,
    std: f64,
}

fn run_chain(model: &PotentialModel, fs: &[ObsFn], monos: &[Vec<usize>], cfg: &McmcConfig, seed: u64) -> ChainStats {
    let n = model.n_sites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; n];
    let mut energy = model.value(&x);
    let std = if cfg.tune {
        tune_proposal(model, &mut x, &mut energy, cfg.proposal_std, &mut rng)
    } else {
        cfg.proposal_std
    };
    let kept = (cfg.chain_length - cfg.burn_in) / cfg.thinning;
    let bs = kept / MCMC_BATCHES;
    let mut sums = vec![vec![0.0; monos.len()]; MCMC_BATCHES];
    let mut squares = vec![vec![0.0; monos.len()]; MCMC_BATCHES];
    let mut vals = vec![0.0; fs.len()];
    let mut accepted = 0usize;
    let mut recorded = 0usize;
    for s in 0..cfg.chain_length {
        let a = sweep(model, &mut x, &mut energy, std, &mut rng);
        if s < cfg.burn_in {
            continue;
        }
        accepted += a;
        if (s - cfg.burn_in) % cfg.thinning != 0 || recorded >= bs * MCMC_BATCHES {
            continue;
        }
        for (v, f) in vals.iter_mut().zip(fs) {
            *v = f(&x);
        }
        let b = recorded / bs;
        for (k, m) in monos.iter().enumerate() {
            let p: f64 = m.iter().map(|&i| vals[i]).product();
            sums[b][k] += p;
            squares[b][k] += p * p;
        }
        recorded += 1;
    }
    ChainStats {
        sums,
        squares,
        rate: accepted as f64 / ((cfg.chain_length - cfg.burn_in) * n) as f64,
        std,
    }
}

/// Runs the sampler and records batch sums of all products of up to three
/// of the given observables.
pub fn mcmc_run(model: &PotentialModel, fs: &[ObsFn], cfg: &McmcConfig) -> Result<McmcRun> {
    cfg.validate()?;
    if fs.is_empty() {
        return Err(Error::InvalidParameter("oracle::mcmc_run: no observables".into()));
    }
    let monos = monomials(fs.len());
    let results: Vec<ChainStats> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(model, fs, &monos, cfg, cfg.seed.wrapping_add(c as u64)))
        .collect();
    let rate = results.iter().map(|r| r.rate).sum::<f64>() / results.len() as f64;
    let std = results[0].std;
    let mut warnings = vec![];
    if !(0.05..=0.95).contains(&rate) {
        let msg = format!("oracle::mcmc: acceptance rate {rate:.3} outside [0.05, 0.95]");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let kept = (cfg.chain_length - cfg.burn_in) / cfg.thinning;
    let mut sums = vec![];
    let mut squares = vec![];
    for r in results {
        sums.extend(r.sums);
        squares.extend(r.squares);
    }
    Ok(McmcRun {
        n_obs: fs.len(),
        monomials: monos,
        sums,
        squares,
        batch_size: kept / MCMC_BATCHES,
        acceptance_rate: rate,
        proposal_std: std,
        warnings,
    })
}

/// Joint cumulant of the variables in `idx` from a raw-moment lookup.
fn cumulant(idx: &[usize], moment: &dyn Fn(&[usize]) -> f64) -> f64 {
    match idx {
        [a] => moment(&[*a]),
        [a, b] => moment(&[*a, *b]) - moment(&[*a]) * moment(&[*b]),
        [a, b, c] => {
            let (ma, mb, mc) = (moment(&[*a]), moment(&[*b]), moment(&[*c]));
            moment(&[*a, *b, *c]) - moment(&[*a, *b]) * mc - moment(&[*a, *c]) * mb - moment(&[*b, *c]) * ma
                + 2.0 * ma * mb * mc
        }
        _ => unreachable!("degree checked by caller"),
    }
}

impl McmcRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance_rate
    }

    fn slot(&self, idx: &[usize]) -> usize {
        let mut key = idx.to_vec();
        key.sort_unstable();
        self.monomials.iter().position(|m| *m == key).expect("recorded monomial")
    }

    /// Batch-means estimate of the joint cumulant of the observables in
    /// `which`: the mean for one index, the covariance for two and the
    /// truncated three-point function for three. Indices may repeat.
    pub fn estimate(&self, which: &[usize]) -> Result<McmcEstimate> {
        if which.is_empty() || which.len() > MCMC_MAX_DEGREE || which.iter().any(|&k| k >= self.n_obs) {
            return Err(Error::InvalidParameter(format!(
                "oracle::McmcRun::estimate: need 1..={MCMC_MAX_DEGREE} indices below {}",
                self.n_obs
            )));
        }
        let bs = self.batch_size as f64;
        let nb = self.sums.len();
        let batch: Vec<f64> = (0..nb)
            .map(|b| cumulant(which, &|m: &[usize]| self.sums[b][self.slot(m)] / bs))
            .collect();
        let total = |m: &[usize]| self.sums.iter().map(|s| s[self.slot(m)]).sum::<f64>() / (bs * nb as f64);
        let mean = cumulant(which, &total);
        let bmean = batch.iter().sum::<f64>() / nb as f64;
        let bvar = batch.iter().map(|v| (v - bmean).powi(2)).sum::<f64>() / (nb as f64 - 1.0);
        let se = (bvar / nb as f64).sqrt();
        // variance of the raw product as the per-sample spread
        let k = self.slot(which);
        let n = bs * nb as f64;
        let m1 = self.sums.iter().map(|s| s[k]).sum::<f64>() / n;
        let m2 = self.squares.iter().map(|s| s[k]).sum::<f64>() / n;
        let var = (m2 - m1 * m1).max(0.0);
        let ess = if se > 0.0 { (var / (se * se)).min(n) } else { n };
        Ok(McmcEstimate {
            mean,
            standard_error: se,
            acceptance_rate: self.acceptance_rate,
            effective_sample_size: ess,
            proposal_std: self.proposal_std,
            samples: n as usize,
            warnings: self.warnings.clone(),
        })
    }
}

/// `E[f]` under `e^{-Phi} dx` on all of `R^Lambda`.
pub fn mcmc_expectation<F>(model: &PotentialModel, f: F, cfg: &McmcConfig) -> Result<McmcEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    mcmc_run(model, &[&f], cfg)?.estimate(&[0])
}

/// Truncated correlation (joint cumulant) of two or three observables.
pub fn mcmc_truncated(model: &PotentialModel, fs: &[ObsFn], cfg: &McmcConfig) -> Result<McmcEstimate> {
    if !(2..=3).contains(&fs.len()) {
        return Err(Error::Arity(format!(
            "oracle::mcmc_truncated: expects 2 or 3 observables, got {}",
            fs.len()
        )));
    }
    let idx: Vec<usize> = (0..fs.len()).collect();
    mcmc_run(model, fs, cfg)?.estimate(&idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdEstimate {
    pub value: f64,
    /// `|D_richardson - D(h/2)|`
    pub error_estimate: f64,
    pub step: f64,
}

/// `(offset in steps, coefficient)` of the central difference of order `n`.
fn fd_stencil(n: usize) -> &'static [(i32, f64)] {
    match n {
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        _ => &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
    }
}

/// Central finite difference of order `n` (1..=4) of `t -> ln Z_t` with one
/// Richardson step `(4 D(h/2) - D(h)) / 3`.
pub fn fd_theta_derivative(sys: &PerturbedSystem, n: usize, step: f64) -> Result<FdEstimate> {
    if !(1..=4).contains(&n) {
        return Err(Error::UnsupportedOrder(format!(
            "oracle::fd_theta_derivative: order {n} outside 1..=4"
        )));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "oracle::fd_theta_derivative: step must be positive, got {step}"
        )));
    }
    let stencil = fd_stencil(n);
    let reach = stencil.iter().map(|s| s.0.abs()).max().unwrap_or(0) as f64 * step;
    let t = sys.t();
    let bound = sys.window().bound;
    if (t - reach).abs() >= bound || (t + reach).abs() >= bound {
        return Err(Error::Window(format!(
            "oracle::fd_theta_derivative: stencil [{}, {}] leaves |t| < {bound}",
            t - reach,
            t + reach
        )));
    }
    let theta = |s: f64| log_partition_model(sys.grid(), &sys.base().tilted(sys.observable(), s));
    let diff = |h: f64| -> Result<f64> {
        let mut acc = 0.0;
        for &(k, c) in stencil {
            acc += c * theta(t + k as f64 * h)?;
        }
        Ok(acc / h.powi(n as i32))
    };
    let d1 = diff(step)?;
    let d2 = diff(step / 2.0)?;
    let rich = (4.0 * d2 - d1) / 3.0;
    Ok(FdEstimate {
        value: rich,
        error_estimate: (rich - d2).abs(),
        step,
    })
}

/// `(e^{-eps g/2} V(t+eps) - V(t)) / eps` with `V = psi_t v` in the
/// half-density picture of `t`.
pub fn fd_v_derivative(sys: &PerturbedSystem, epsilon: f64, cfg: &SolverConfig) -> Result<OneFormField> {
    if epsilon == 0.0 || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "oracle::fd_v_derivative: epsilon must be finite and nonzero, got {epsilon}"
        )));
    }
    let t1 = sys.t() + epsilon;
    if t1.abs() >= sys.window().bound {
        return Err(Error::Window(format!(
            "oracle::fd_v_derivative: t + eps = {t1} leaves |t| < {}",
            sys.window().bound
        )));
    }
    let (v0, r0) = solve_v(sys, cfg)?;
    let shifted = sys.at(t1)?;
    let (v1, r1) = solve_v(&shifted, cfg)?;
    if !(r0.converged && r1.converged) {
        return Err(Error::NonConvergence(
            "oracle::fd_v_derivative: one-form solve did not converge".into(),
        ));
    }
    let grid = sys.grid();
    let g = sys.observable();
    let np = grid.total_points();
    let factor: Vec<f64> = (0..np).map(|i| (-0.5 * epsilon * g.value(&grid.node(i))).exp()).collect();
    let mut out = v1.into_flat();
    let base = v0.as_flat();
    for (k, o) in out.iter_mut().enumerate() {
        *o = (factor[k % np] * *o - base[k]) / epsilon;
    }
    OneFormField::from_flat(grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, sample_one_form};
    use crate::lattice::chain;
    use crate::potential::{gaussian_potential, kac_potential, Observable};
    use crate::witten::WittenOperator;

    #[test]
    fn dense_w1_matches_matrix_free() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 17).unwrap();
        let model = kac_potential(&l, 0.05).unwrap();
        let op = WittenOperator::new(&model, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..2 * grid.total_points()).map(|_| rng.random::<f64>() - 0.5).collect();
        let v = OneFormField::from_flat(&grid, v).unwrap();
        let a = dense_w1_matrix(&model, &grid);
        let dense = &a * DVector::from_column_slice(v.as_flat());
        let free = op.apply_w1(&v).unwrap();
        let err = dense.iter().zip(free.as_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10 * dense.amax(), "{err}");
        let cfg = SolverConfig::with_tolerance(1e-10);
        let (it, _) = op.solve_w1(&v, &cfg).unwrap();
        let d = dense_solve_w1(&model, &v).unwrap();
        let diff = d.add_scaled(-1.0, &it).unwrap();
        let rel = crate::kernels::norm(diff.as_flat()) / crate::kernels::norm(d.as_flat());
        assert!(rel <= 10.0 * 1e-10, "{rel}");
    }

    #[test]
    fn dense_gaussian_eigenvector_and_limits() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 17).unwrap();
        let model = gaussian_potential(&l);
        let rhs = sample_one_form(&grid, |x, out| {
            out[0] = (-0.25 * (x[0] * x[0] + x[1] * x[1])).exp();
            out[1] = 0.0;
        })
        .unwrap();
        let d = dense_solve_w1(&model, &rhs).unwrap();
        let op = WittenOperator::new(&model, &grid).unwrap();
        let (it, _) = op.solve_w1(&rhs, &SolverConfig::with_tolerance(1e-13)).unwrap();
        let diff = d.add_scaled(-1.0, &it).unwrap();
        assert!(crate::kernels::norm(diff.as_flat()) < 1e-10 * crate::kernels::norm(d.as_flat()));
        let big = build_grid(&l, 6.0, 65).unwrap();
        let r = OneFormField::zeros(&big);
        assert!(matches!(dense_solve_w1(&model, &r), Err(Error::Resource(_))));
        let lam = dense_min_eigenvalue(&model, &grid).unwrap();
        assert!((lam - 1.0).abs() < 0.05, "{lam}");
    }

    #[test]
    fn dense_w0_matches_projected_cg() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 17).unwrap();
        let model = kac_potential(&l, 0.05).unwrap();
        let op = WittenOperator::new(&model, &grid).unwrap();
        let g = Observable::coordinate(&l, 0).unwrap();
        let sol = op.solve_zero_form(&g, &SolverConfig::with_tolerance(1e-12)).unwrap();
        let rhs = op.sample(&g).unwrap().mul(&op.ground().field).unwrap();
        let d = dense_solve_w0(&model, &rhs).unwrap();
        let err = d.values().iter().zip(sol.u.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn mcmc_gaussian_moments_and_determinism() {
        let l = chain(2).unwrap();
        let model = gaussian_potential(&l);
        let cfg = McmcConfig {
            chain_length: 60_000,
            ..Default::default()
        };
        let m1 = mcmc_expectation(&model, |x| x[0], &cfg).unwrap();
        assert!(m1.mean.abs() <= 3.0 * m1.standard_error, "{m1:?}");
        assert!((0.3..0.5).contains(&m1.acceptance_rate));
        let m2 = mcmc_expectation(&model, |x| x[1] * x[1], &cfg).unwrap();
        assert!((m2.mean - 1.0).abs() <= 3.0 * m2.standard_error, "{m2:?}");
        let again = mcmc_expectation(&model, |x| x[1] * x[1], &cfg).unwrap();
        assert_eq!(m2, again);
        let run = mcmc_run(&model, &[&|x: &[f64]| x[0], &|x: &[f64]| x[1]], &cfg).unwrap();
        let var = run.estimate(&[0, 0]).unwrap();
        assert!((var.mean - 1.0).abs() <= 3.0 * var.standard_error, "{var:?}");
        let k3 = run.estimate(&[0, 0, 1]).unwrap();
        assert!(k3.mean.abs() <= 3.0 * k3.standard_error, "{k3:?}");
        assert!(run.estimate(&[0, 0, 1, 1]).is_err());
        let bad = McmcConfig {
            burn_in: cfg.chain_length,
            ..cfg.clone()
        };
        assert!(mcmc_expectation(&model, |x| x[0], &bad).is_err());
    }

    #[test]
    fn mcmc_covariance_matches_quadrature() {
        let l = chain(2).unwrap();
        let model = kac_potential(&l, 0.05).unwrap();
        let grid = build_grid(&l, 6.0, 65).unwrap();
        let op = WittenOperator::new(&model, &grid).unwrap();
        let g0 = Observable::coordinate(&l, 0).unwrap();
        let g1 = Observable::coordinate(&l, 1).unwrap();
        let q = crate::correlation::truncated_correlation(&op, &[g0, g1]).unwrap();
        let cfg = McmcConfig {
            chain_length: 200_000,
            ..Default::default()
        };
        let e = mcmc_truncated(&model, &[&|x: &[f64]| x[0], &|x: &[f64]| x[1]], &cfg).unwrap();
        assert!((e.mean - q.value).abs() <= 3.0 * e.standard_error, "{e:?} vs {}", q.value);
    }

    #[test]
    fn fd_theta_gaussian() {
        let l = chain(1).unwrap();
        let grid = build_grid(&l, 6.0, 129).unwrap();
        let g = Observable::coordinate(&l, 0).unwrap();
        let sys = PerturbedSystem::new(&gaussian_potential(&l), &g, 0.0, &grid).unwrap();
        let d2 = fd_theta_derivative(&sys, 2, DEFAULT_FD_STEP).unwrap();
        assert!((d2.value - 1.0).abs() < 1e-6, "{d2:?}");
        let d3 = fd_theta_derivative(&sys, 3, DEFAULT_FD_STEP).unwrap();
        assert!(d3.value.abs() < 1e-6, "{d3:?}");
        let d1 = fd_theta_derivative(&sys, 1, DEFAULT_FD_STEP).unwrap();
        assert!(d1.value.abs() < 1e-8);
        let sq = Observable::coordinate_square(&l, 0).unwrap();
        let sys_sq = PerturbedSystem::new(&gaussian_potential(&l), &sq, 0.0, &grid).unwrap();
        assert!(fd_theta_derivative(&sys_sq, 2, 0.1).is_ok());
        assert!(matches!(fd_theta_derivative(&sys_sq, 4, 0.3), Err(Error::Window(_))));
        assert!(fd_theta_derivative(&sys, 5, 1e-2).is_err());
    }

    #[test]
    fn fd_step_halving_consistent() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 65).unwrap();
        let g = Observable::linear(&l, &[0, 1], &[1.0, 1.0]).unwrap();
        let sys = PerturbedSystem::new(&kac_potential(&l, 0.05).unwrap(), &g, 0.0, &grid).unwrap();
        let a = fd_theta_derivative(&sys, 2, 2e-2).unwrap();
        let b = fd_theta_derivative(&sys, 2, 1e-2).unwrap();
        assert!((a.value - b.value).abs() <= 4.0 * a.error_estimate.max(1e-9), "{a:?} {b:?}");
    }

    #[test]
    fn fd_v_gaussian_and_errors() {
        let l = chain(2).unwrap();
        let grid = build_grid(&l, 6.0, 25).unwrap();
        let g = Observable::coordinate(&l, 0).unwrap();
        let sys = PerturbedSystem::new(&gaussian_potential(&l), &g, 0.0, &grid).unwrap();
        let cfg = SolverConfig::with_tolerance(1e-12);
        // v is constant in t; what remains is the O(h^4) discretization drift
        let w = fd_v_derivative(&sys, 1e-2, &cfg).unwrap();
        assert!(w.as_flat().iter().all(|v| v.abs() < 1e-3));
        assert!(matches!(fd_v_derivative(&sys, 0.0, &cfg), Err(Error::InvalidParameter(_))));
    }
}
