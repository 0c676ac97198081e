//! Tensor-product grids on the box `[-L, L]^Lambda`, scalar and one-form
//! fields, finite-difference operators and trapezoidal quadrature.
//!
//! Nodes are flattened row-major with site 0 varying slowest. Every operator
//! is matrix-free and applied line by line along one axis at a time.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::lattice::LatticeSpec;
use crate::potential::PotentialModel;

/// Default memory budget for `m^n (n + 2)` doubles.
pub const DEFAULT_MEMORY_BUDGET: u64 = 1536 * 1024 * 1024;

/// Default accuracy order of the finite-difference stencils.
pub const DEFAULT_STENCIL_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    lattice: LatticeSpec,
    half_width: f64,
    points_per_site: usize,
    spacing: f64,
    total_points: usize,
    stencil_order: usize,
}

/// Builds a grid with the default stencil order and memory budget.
pub fn build_grid(lattice: &LatticeSpec, half_width: f64, points_per_site: usize) -> Result<GridSpec> {
    GridSpec::new(
        lattice,
        half_width,
        points_per_site,
        DEFAULT_STENCIL_ORDER,
        DEFAULT_MEMORY_BUDGET,
    )
}

impl GridSpec {
    pub fn new(
        lattice: &LatticeSpec,
        half_width: f64,
        points_per_site: usize,
        stencil_order: usize,
        memory_budget: u64,
    ) -> Result<GridSpec> {
        let m = points_per_site;
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "grid::build_grid: half-width must be positive, got {half_width}"
            )));
        }
        if m < 5 || m % 2 == 0 {
            return Err(Error::InvalidGrid(format!(
                "grid::build_grid: points per site must be odd and >= 5, got {m}"
            )));
        }
        if ![2, 4, 6].contains(&stencil_order) {
            return Err(Error::InvalidGrid(format!(
                "grid::build_grid: stencil order must be 2, 4 or 6, got {stencil_order}"
            )));
        }
        let n = lattice.len() as u32;
        let total = (m as u64).checked_pow(n);
        let bytes = total.and_then(|t| t.checked_mul(8 * (n as u64 + 2)));
        match bytes {
            Some(b) if b <= memory_budget => {}
            _ => {
                return Err(Error::Resource(format!(
                    "grid::build_grid: {m}^{n} nodes x {} fields exceeds the memory budget of {memory_budget} bytes",
                    n + 2
                )))
            }
        }
        Ok(GridSpec {
            lattice: lattice.clone(),
            half_width,
            points_per_site: m,
            spacing: 2.0 * half_width / (m - 1) as f64,
            total_points: total.unwrap() as usize,
            stencil_order,
        })
    }

    /// The same grid with a different stencil order.
    pub fn with_stencil_order(&self, order: usize) -> Result<GridSpec> {
        GridSpec::new(&self.lattice, self.half_width, self.points_per_site, order, u64::MAX)
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }
    pub fn n_sites(&self) -> usize {
        self.lattice.len()
    }
    pub fn half_width(&self) -> f64 {
        self.half_width
    }
    pub fn points_per_site(&self) -> usize {
        self.points_per_site
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn total_points(&self) -> usize {
        self.total_points
    }
    pub fn stencil_order(&self) -> usize {
        self.stencil_order
    }

    /// Index stride of axis `k`.
    pub fn stride(&self, k: usize) -> usize {
        self.points_per_site.pow((self.n_sites() - 1 - k) as u32)
    }

    /// Coordinate of node `i` along one axis. Exactly antisymmetric about the
    /// centre node, which sits at 0.
    #[inline]
    pub fn coordinate(&self, i: usize) -> f64 {
        let mm1 = (self.points_per_site - 1) as f64;
        self.half_width * (2.0 * i as f64 - mm1) / mm1
    }

    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        let m = self.points_per_site;
        for k in (0..self.n_sites()).rev() {
            out[k] = idx % m;
            idx /= m;
        }
    }

    pub fn node_coords(&self, mut idx: usize, out: &mut [f64]) {
        let m = self.points_per_site;
        for k in (0..self.n_sites()).rev() {
            out[k] = self.coordinate(idx % m);
            idx /= m;
        }
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.n_sites()];
        self.node_coords(idx, &mut x);
        x
    }

    /// Flat index of the node with per-axis indices `ii`.
    pub fn flat_index(&self, ii: &[usize]) -> usize {
        ii.iter().fold(0, |acc, &i| acc * self.points_per_site + i)
    }

    /// The node at the origin.
    pub fn origin_index(&self) -> usize {
        let c = (self.points_per_site - 1) / 2;
        self.flat_index(&vec![c; self.n_sites()])
    }

    /// Trapezoid weight of node `idx`.
    pub fn quadrature_weight(&self, mut idx: usize) -> f64 {
        let m = self.points_per_site;
        let mut w = self.spacing.powi(self.n_sites() as i32);
        for _ in 0..self.n_sites() {
            let i = idx % m;
            if i == 0 || i == m - 1 {
                w *= 0.5;
            }
            idx /= m;
        }
        w
    }

    /// Trapezoid weight of node `idx` on the sub-grid of every other node
    /// (step `2h`); zero for nodes not on that sub-grid.
    pub fn coarse_quadrature_weight(&self, mut idx: usize) -> f64 {
        let m = self.points_per_site;
        let mut w = (2.0 * self.spacing).powi(self.n_sites() as i32);
        for _ in 0..self.n_sites() {
            let i = idx % m;
            if i % 2 == 1 {
                return 0.0;
            }
            if i == 0 || i == m - 1 {
                w *= 0.5;
            }
            idx /= m;
        }
        w
    }

    /// True if node `idx` has no coordinate on a box face.
    pub fn is_interior(&self, mut idx: usize) -> bool {
        let m = self.points_per_site;
        for _ in 0..self.n_sites() {
            let i = idx % m;
            if i == 0 || i == m - 1 {
                return false;
            }
            idx /= m;
        }
        true
    }

    fn check_same(&self, other: &GridSpec, op: &str) -> Result<()> {
        if self != other {
            Err(Error::Shape(format!("grid::{op}: fields live on different grids")))
        } else {
            Ok(())
        }
    }

    /// Row stencils of the first-derivative operator along one axis.
    fn gradient_rows(&self) -> LineOperator {
        let m = self.points_per_site;
        let inv = 1.0 / self.spacing;
        let central: &[f64] = match self.stencil_order {
            2 => &[-0.5, 0.0, 0.5],
            4 => &[1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0],
            _ => &[-1.0 / 60.0, 3.0 / 20.0, -0.75, 0.0, 0.75, -3.0 / 20.0, 1.0 / 60.0],
        };
        let r = central.len() / 2;
        let rows = (0..m)
            .map(|i| {
                if i >= r && i + r < m {
                    central
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| **c != 0.0)
                        .map(|(k, c)| (i + k - r, c * inv))
                        .collect()
                } else if i >= 1 && i + 1 < m {
                    vec![(i - 1, -0.5 * inv), (i + 1, 0.5 * inv)]
                } else if i == 0 {
                    vec![(0, -1.5 * inv), (1, 2.0 * inv), (2, -0.5 * inv)]
                } else {
                    vec![(m - 3, 0.5 * inv), (m - 2, -2.0 * inv), (m - 1, 1.5 * inv)]
                }
            })
            .collect();
        LineOperator { rows }
    }

    /// Row stencils of the second-derivative operator with zero ghost values
    /// outside the box.
    fn second_derivative_rows(&self) -> LineOperator {
        let m = self.points_per_site;
        let inv = 1.0 / (self.spacing * self.spacing);
        let central: &[f64] = match self.stencil_order {
            2 => &[1.0, -2.0, 1.0],
            4 => &[-1.0 / 12.0, 4.0 / 3.0, -2.5, 4.0 / 3.0, -1.0 / 12.0],
            _ => &[
                1.0 / 90.0,
                -3.0 / 20.0,
                1.5,
                -49.0 / 18.0,
                1.5,
                -3.0 / 20.0,
                1.0 / 90.0,
            ],
        };
        let r = central.len() as isize / 2;
        let rows = (0..m as isize)
            .map(|i| {
                central
                    .iter()
                    .enumerate()
                    .filter_map(|(k, c)| {
                        let j = i + k as isize - r;
                        (j >= 0 && j < m as isize).then(|| (j as usize, c * inv))
                    })
                    .collect()
            })
            .collect();
        LineOperator { rows }
    }

    /// Diagonal entry of `-Delta_h` (the same at every node).
    pub fn neg_laplacian_diagonal(&self) -> f64 {
        let c0 = match self.stencil_order {
            2 => -2.0,
            4 => -2.5,
            _ => -49.0 / 18.0,
        };
        -c0 * self.n_sites() as f64 / (self.spacing * self.spacing)
    }
}

/// A linear operator acting identically on every grid line of one axis:
/// output row `i` is `sum (j, c) in rows[i]` of `c * input row j`.
#[derive(Debug, Clone)]
pub(crate) struct LineOperator {
    rows: Vec<Vec<(usize, f64)>>,
}

impl LineOperator {
    pub(crate) fn transpose(&self) -> LineOperator {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.rows.len()];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, c) in row {
                rows[j].push((i, c));
            }
        }
        LineOperator { rows }
    }

    /// Applies the operator along `axis`, overwriting or accumulating into `out`.
    pub(crate) fn apply(&self, grid: &GridSpec, axis: usize, input: &[f64], out: &mut [f64], accumulate: bool) {
        let m = grid.points_per_site;
        let s = grid.stride(axis);
        let block = m * s;
        let rows_per_task = (kernels::CHUNK / s).max(1);
        out.par_chunks_mut(s * rows_per_task)
            .enumerate()
            .for_each(|(t, chunk)| {
                for (rl, orow) in chunk.chunks_mut(s).enumerate() {
                    let r = t * rows_per_task + rl;
                    let i = r % m;
                    let base = (r / m) * block;
                    if !accumulate {
                        orow.iter_mut().for_each(|v| *v = 0.0);
                    }
                    for &(j, c) in &self.rows[i] {
                        let irow = &input[base + j * s..base + j * s + s];
                        for (o, v) in orow.iter_mut().zip(irow) {
                            *o += c * v;
                        }
                    }
                }
            });
    }
}

/// Precomputed line operators for one grid.
#[derive(Debug, Clone)]
pub(crate) struct Stencils {
    pub(crate) gradient: LineOperator,
    pub(crate) gradient_t: LineOperator,
    pub(crate) second: LineOperator,
}

impl Stencils {
    pub(crate) fn new(grid: &GridSpec) -> Self {
        let gradient = grid.gradient_rows();
        Stencils {
            gradient_t: gradient.transpose(),
            gradient,
            second: grid.second_derivative_rows(),
        }
    }

    /// `out = -Delta_h u` (or `out += -Delta_h u`).
    pub(crate) fn neg_laplacian(&self, grid: &GridSpec, u: &[f64], out: &mut [f64], accumulate: bool) {
        let mut tmp = vec![0.0; u.len()];
        for k in 0..grid.n_sites() {
            self.second.apply(grid, k, u, &mut tmp, k > 0);
        }
        if accumulate {
            kernels::axpy(-1.0, &tmp, out);
        } else {
            out.par_iter_mut().zip(tmp.par_iter()).for_each(|(o, t)| *o = -t);
        }
    }
}

/// Grid samples of a scalar function.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        ScalarField {
            grid: grid.clone(),
            values: vec![0.0; grid.total_points],
        }
    }

    pub fn from_values(grid: &GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.total_points {
            return Err(Error::Shape(format!(
                "grid::ScalarField: {} values for {} nodes",
                values.len(),
                grid.total_points
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "grid::ScalarField: non-finite value at node {:?}",
                grid.node(i)
            )));
        }
        Ok(ScalarField {
            grid: grid.clone(),
            values,
        })
    }

    pub(crate) fn from_values_unchecked(grid: &GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.total_points);
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Nodewise product.
    pub fn mul(&self, other: &ScalarField) -> Result<ScalarField> {
        self.grid.check_same(&other.grid, "ScalarField::mul")?;
        let mut out = vec![0.0; self.values.len()];
        kernels::hadamard(&self.values, &other.values, &mut out);
        Ok(ScalarField::from_values_unchecked(&self.grid, out))
    }

    pub fn scaled(&self, alpha: f64) -> ScalarField {
        let mut out = self.clone();
        kernels::scale(alpha, &mut out.values);
        out
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &ScalarField) -> Result<ScalarField> {
        self.grid.check_same(&other.grid, "ScalarField::add_scaled")?;
        let mut out = self.clone();
        kernels::axpy(alpha, &other.values, &mut out.values);
        Ok(out)
    }

    pub fn value_at(&self, ii: &[usize]) -> f64 {
        self.values[self.grid.flat_index(ii)]
    }
}

/// Grid samples of a vector field with one component per lattice site,
/// stored component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OneFormField {
    grid: GridSpec,
    data: Vec<f64>,
}

impl OneFormField {
    pub fn zeros(grid: &GridSpec) -> Self {
        OneFormField {
            grid: grid.clone(),
            data: vec![0.0; grid.total_points * grid.n_sites()],
        }
    }

    pub fn from_components(components: Vec<ScalarField>) -> Result<Self> {
        let grid = components
            .first()
            .ok_or_else(|| Error::Shape("grid::OneFormField: no components".into()))?
            .grid
            .clone();
        if components.len() != grid.n_sites() {
            return Err(Error::Shape(format!(
                "grid::OneFormField: {} components for {} sites",
                components.len(),
                grid.n_sites()
            )));
        }
        let mut data = Vec::with_capacity(grid.total_points * grid.n_sites());
        for c in components {
            grid.check_same(&c.grid, "OneFormField::from_components")?;
            data.extend_from_slice(&c.values);
        }
        Ok(OneFormField { grid, data })
    }

    pub fn from_flat(grid: &GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.total_points * grid.n_sites() {
            return Err(Error::Shape(format!(
                "grid::OneFormField: {} values for {} x {} entries",
                data.len(),
                grid.n_sites(),
                grid.total_points
            )));
        }
        Ok(OneFormField {
            grid: grid.clone(),
            data,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn n_components(&self) -> usize {
        self.grid.n_sites()
    }
    pub fn component(&self, i: usize) -> &[f64] {
        let n = self.grid.total_points;
        &self.data[i * n..(i + 1) * n]
    }
    pub fn component_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.grid.total_points;
        &mut self.data[i * n..(i + 1) * n]
    }
    pub fn component_field(&self, i: usize) -> ScalarField {
        ScalarField::from_values_unchecked(&self.grid, self.component(i).to_vec())
    }
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn scaled(&self, alpha: f64) -> OneFormField {
        let mut out = self.clone();
        kernels::scale(alpha, &mut out.data);
        out
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &OneFormField) -> Result<OneFormField> {
        self.grid.check_same(&other.grid, "OneFormField::add_scaled")?;
        let mut out = self.clone();
        kernels::axpy(alpha, &other.data, &mut out.data);
        Ok(out)
    }

    /// Pointwise `sum_i self_i * other_i`.
    pub fn pointwise_dot(&self, other: &OneFormField) -> Result<ScalarField> {
        self.grid.check_same(&other.grid, "OneFormField::pointwise_dot")?;
        let n = self.grid.total_points;
        let mut out = vec![0.0; n];
        for i in 0..self.n_components() {
            let (a, b) = (self.component(i), other.component(i));
            out.par_chunks_mut(kernels::CHUNK)
                .zip(a.par_chunks(kernels::CHUNK).zip(b.par_chunks(kernels::CHUNK)))
                .for_each(|(o, (x, y))| {
                    for ((o, x), y) in o.iter_mut().zip(x).zip(y) {
                        *o += x * y;
                    }
                });
        }
        Ok(ScalarField::from_values_unchecked(&self.grid, out))
    }

    /// Multiplies every component by the scalar field `s`.
    pub fn mul_scalar_field(&self, s: &ScalarField) -> Result<OneFormField> {
        self.grid.check_same(&s.grid, "OneFormField::mul_scalar_field")?;
        let mut out = self.clone();
        for i in 0..self.n_components() {
            let c = out.component_mut(i);
            c.par_iter_mut().zip(s.values.par_iter()).for_each(|(v, w)| *v *= w);
        }
        Ok(out)
    }
}

/// Something quadrature can integrate against a field of the same kind.
pub trait GridFunction {
    fn grid_spec(&self) -> &GridSpec;
    fn flat(&self) -> &[f64];
}

impl GridFunction for ScalarField {
    fn grid_spec(&self) -> &GridSpec {
        &self.grid
    }
    fn flat(&self) -> &[f64] {
        &self.values
    }
}

impl GridFunction for OneFormField {
    fn grid_spec(&self) -> &GridSpec {
        &self.grid
    }
    fn flat(&self) -> &[f64] {
        &self.data
    }
}

/// Trapezoidal quadrature of the pointwise product, summed over components.
pub fn inner_product<F: GridFunction>(a: &F, b: &F) -> Result<f64> {
    let g = a.grid_spec();
    g.check_same(b.grid_spec(), "inner_product")?;
    let n = g.total_points;
    Ok(kernels::weighted_dot(a.flat(), b.flat(), |k| g.quadrature_weight(k % n)))
}

/// Trapezoidal quadrature of a scalar field.
pub fn integrate(a: &ScalarField) -> f64 {
    let g = &a.grid;
    let partial: Vec<f64> = a
        .values
        .par_chunks(kernels::CHUNK)
        .enumerate()
        .map(|(c, x)| {
            let base = c * kernels::CHUNK;
            x.iter()
                .enumerate()
                .map(|(k, v)| v * g.quadrature_weight(base + k))
                .sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

/// Samples `f` at every node.
pub fn sample_scalar<F>(grid: &GridSpec, f: F) -> Result<ScalarField>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = grid.n_sites();
    let values: Vec<f64> = (0..grid.total_points)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |x, idx| {
                grid.node_coords(idx, x);
                f(x)
            },
        )
        .collect();
    ScalarField::from_values(grid, values)
}

/// Samples a vector-valued `f(x, out)` at every node.
pub fn sample_one_form<F>(grid: &GridSpec, f: F) -> Result<OneFormField>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = grid.n_sites();
    let np = grid.total_points;
    let pointwise: Vec<f64> = (0..np)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n]),
            |(x, v), idx| {
                grid.node_coords(idx, x);
                f(x, v);
                v.clone()
            },
        )
        .flatten_iter()
        .collect();
    let mut data = vec![0.0; n * np];
    for idx in 0..np {
        for i in 0..n {
            let v = pointwise[idx * n + i];
            if !v.is_finite() {
                return Err(Error::Evaluation(format!(
                    "grid::sample_one_form: non-finite component {i} at node {:?}",
                    grid.node(idx)
                )));
            }
            data[i * np + idx] = v;
        }
    }
    OneFormField::from_flat(grid, data)
}

/// The half-density `e^{-Phi/2}` and its squared norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundDensity {
    pub field: ScalarField,
    pub norm_sq: f64,
}

pub fn ground_density(grid: &GridSpec, model: &PotentialModel) -> Result<GroundDensity> {
    check_model(grid, model, "ground_density")?;
    let field = sample_scalar(grid, |x| (-0.5 * model.value(x)).exp()).map_err(|e| match e {
        Error::Evaluation(msg) => Error::Evaluation(format!("grid::ground_density: e^(-Phi/2) overflow ({msg})")),
        other => other,
    })?;
    let norm_sq = inner_product(&field, &field)?;
    if !(norm_sq > 0.0) || !norm_sq.is_finite() {
        return Err(Error::Measure(format!(
            "grid::ground_density: degenerate normalization {norm_sq}"
        )));
    }
    Ok(GroundDensity { field, norm_sq })
}

pub(crate) fn check_model(grid: &GridSpec, model: &PotentialModel, op: &str) -> Result<()> {
    if grid.lattice() != model.lattice() {
        Err(Error::Shape(format!(
            "{op}: grid and model are built on different lattices"
        )))
    } else {
        Ok(())
    }
}

/// Central differences (order from the grid), falling back to second order
/// near faces and one-sided second order on them.
pub fn fd_gradient(field: &ScalarField) -> OneFormField {
    let grid = &field.grid;
    let st = Stencils::new(grid);
    gradient_with(&st, field)
}

pub(crate) fn gradient_with(st: &Stencils, field: &ScalarField) -> OneFormField {
    let grid = &field.grid;
    let mut out = OneFormField::zeros(grid);
    for k in 0..grid.n_sites() {
        st.gradient.apply(grid, k, &field.values, out.component_mut(k), false);
    }
    out
}

/// Negative adjoint of [`fd_gradient`] in the uniform-weight pairing.
pub fn fd_divergence(v: &OneFormField) -> ScalarField {
    let grid = &v.grid;
    let st = Stencils::new(grid);
    let mut out = vec![0.0; grid.total_points];
    for k in 0..grid.n_sites() {
        st.gradient_t.apply(grid, k, v.component(k), &mut out, true);
    }
    kernels::scale(-1.0, &mut out);
    ScalarField::from_values_unchecked(grid, out)
}

/// Central-difference Laplacian with zero ghost values outside the box.
pub fn fd_laplacian(field: &ScalarField) -> ScalarField {
    let grid = &field.grid;
    let st = Stencils::new(grid);
    let mut out = vec![0.0; grid.total_points];
    st.neg_laplacian(grid, &field.values, &mut out, false);
    kernels::scale(-1.0, &mut out);
    ScalarField::from_values_unchecked(grid, out)
}

/// `D u = grad u + (grad Phi / 2) u`, the gradient in the half-density picture.
pub fn twisted_gradient(field: &ScalarField, model: &PotentialModel) -> Result<OneFormField> {
    let grid = &field.grid;
    check_model(grid, model, "grid::twisted_gradient")?;
    let half_grad = sample_one_form(grid, |x, out| {
        model.gradient_into(x, out);
        out.iter_mut().for_each(|v| *v *= 0.5);
    })?;
    Ok(twisted_with(&Stencils::new(grid), &half_grad, field))
}

pub(crate) fn twisted_with(st: &Stencils, half_grad: &OneFormField, field: &ScalarField) -> OneFormField {
    let mut out = gradient_with(st, field);
    for k in 0..field.grid.n_sites() {
        let h = half_grad.component(k);
        out.component_mut(k)
            .par_iter_mut()
            .zip(h.par_iter().zip(field.values.par_iter()))
            .for_each(|(o, (a, u))| *o += a * u);
    }
    out
}

const MAGIC: &[u8; 8] = b"WLGRID01";

/// Writes a field in the flat binary format: magic, `|Lambda|`, `m`, `L`,
/// component count, then little-endian doubles in row-major node order,
/// component-major for one-forms.
pub fn write_binary<F: GridFunction, W: Write>(field: &F, mut w: W) -> Result<()> {
    let g = field.grid_spec();
    let comps = field.flat().len() / g.total_points;
    w.write_all(MAGIC)?;
    w.write_all(&(g.n_sites() as u64).to_le_bytes())?;
    w.write_all(&(g.points_per_site as u64).to_le_bytes())?;
    w.write_all(&g.half_width.to_le_bytes())?;
    w.write_all(&(comps as u64).to_le_bytes())?;
    for v in field.flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads the header and values written by [`write_binary`]:
/// `(n_sites, m, L, components, values)`.
pub fn read_binary<R: Read>(mut r: R) -> Result<(usize, usize, f64, usize, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput("grid::read_binary: bad magic".into()));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    let m = u64::from_le_bytes(next(&mut r)?) as usize;
    let l = f64::from_le_bytes(next(&mut r)?);
    let comps = u64::from_le_bytes(next(&mut r)?) as usize;
    let count = comps * m.pow(n as u32);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(next(&mut r)?));
    }
    Ok((n, m, l, comps, values))
}

/// CSV export (one column per coordinate, then one per component); only for
/// `|Lambda| <= 2`.
pub fn write_csv<F: GridFunction, W: Write>(field: &F, mut w: W) -> Result<()> {
    let g = field.grid_spec();
    let n = g.n_sites();
    if n > 2 {
        return Err(Error::InvalidInput(format!(
            "grid::write_csv: CSV export needs |Lambda| <= 2, got {n}"
        )));
    }
    let np = g.total_points;
    let comps = field.flat().len() / np;
    let mut header: Vec<String> = (0..n).map(|k| format!("x{k}")).collect();
    header.extend((0..comps).map(|c| format!("v{c}")));
    writeln!(w, "{}", header.join(","))?;
    let mut x = vec![0.0; n];
    for idx in 0..np {
        g.node_coords(idx, &mut x);
        let mut cols: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
        cols.extend((0..comps).map(|c| format!("{}", field.flat()[c * np + idx])));
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}
