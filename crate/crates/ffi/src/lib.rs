//! C ABI over the wittenlab core.
//!
//! Systems are opaque handles created by `wl_system_new_*` and released
//! with `wl_system_free`. Every fallible call returns a `WlStatus`; on
//! failure `wl_last_error_message` describes the error for the calling
//! thread. Results are written through caller-provided out pointers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wittenlab::correlation::{covariance_hs, gibbs_mean};
use wittenlab::grid::build_grid;
use wittenlab::lattice::chain;
use wittenlab::potential::{gaussian_potential, kac_potential, Observable, PotentialModel};
use wittenlab::pressure::{log_partition_model, theta_derivative, PerturbedSystem};
use wittenlab::witten::{SolverConfig, WittenOperator};
use wittenlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Solver = 3,
    Definiteness = 4,
    Resource = 5,
    Internal = 6,
}

/// A model on a grid with its precomputed operators.
pub struct WlSystem {
    model: PotentialModel,
    op: WittenOperator,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> WlStatus {
    match e {
        Error::NonConvergence(_) | Error::ConvexityRisk(_) | Error::Evaluation(_) | Error::Measure(_) => WlStatus::Solver,
        Error::Definiteness(_) => WlStatus::Definiteness,
        Error::Resource(_) => WlStatus::Resource,
        _ => WlStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard<F>(f: F) -> WlStatus
where
    F: FnOnce() -> Result<(), (WlStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            WlStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            WlStatus::Internal
        }
    }
}

fn lift<T>(r: wittenlab::Result<T>) -> Result<T, (WlStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (WlStatus, String) {
    (WlStatus::NullPointer, format!("{what} is null"))
}

fn solver_config(tol: f64) -> Result<SolverConfig, (WlStatus, String)> {
    let cfg = SolverConfig::with_tolerance(tol);
    lift(cfg.validate())?;
    Ok(cfg)
}

unsafe fn system<'a>(sys: *const WlSystem) -> Result<&'a WlSystem, (WlStatus, String)> {
    sys.as_ref().ok_or_else(|| null("system"))
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), (WlStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

fn new_system(model: wittenlab::Result<PotentialModel>, half_width: f64, points_per_site: usize) -> wittenlab::Result<WlSystem> {
    let model = model?;
    let grid = build_grid(model.lattice(), half_width, points_per_site)?;
    let op = WittenOperator::new(&model, &grid)?;
    Ok(WlSystem { model, op })
}

unsafe fn create(
    model: impl FnOnce() -> wittenlab::Result<PotentialModel>,
    half_width: f64,
    points_per_site: usize,
    out: *mut *mut WlSystem,
) -> WlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(ptr::null_mut());
        let sys = lift(new_system(model(), half_width, points_per_site))?;
        out.write(Box::into_raw(Box::new(sys)));
        Ok(())
    })
}

/// Independent standard Gaussian spins on a chain of `n_sites`, on a grid
/// with `points_per_site` nodes per axis over `[-half_width, half_width]`.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn wl_system_new_gaussian(
    n_sites: usize,
    half_width: f64,
    points_per_site: usize,
    out: *mut *mut WlSystem,
) -> WlStatus {
    create(|| Ok(gaussian_potential(&chain(n_sites)?)), half_width, points_per_site, out)
}

/// Kac chain of `n_sites` with coupling `nu`.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn wl_system_new_kac_chain(
    n_sites: usize,
    nu: f64,
    half_width: f64,
    points_per_site: usize,
    out: *mut *mut WlSystem,
) -> WlStatus {
    create(|| kac_potential(&chain(n_sites)?, nu), half_width, points_per_site, out)
}

/// # Safety
/// `sys` must be null or a handle from `wl_system_new_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wl_system_free(sys: *mut WlSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// # Safety
/// `sys` must be a live handle and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wl_system_num_sites(sys: *const WlSystem, out: *mut usize) -> WlStatus {
    guard(|| write(out, system(sys)?.model.n_sites()))
}

/// `cov(x_i, x_j)` through the one-form solve at relative tolerance `tol`.
/// `out_error` may be null.
///
/// # Safety
/// `sys` must be a live handle; `out_value` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wl_covariance_coordinates(
    sys: *const WlSystem,
    i: usize,
    j: usize,
    tol: f64,
    out_value: *mut f64,
    out_error: *mut f64,
) -> WlStatus {
    guard(|| {
        let s = system(sys)?;
        let cfg = solver_config(tol)?;
        let lat = s.model.lattice();
        let (gi, gj) = (lift(Observable::coordinate(lat, i))?, lift(Observable::coordinate(lat, j))?);
        let r = lift(covariance_hs(&s.op, &gi, &gj, &cfg))?;
        if r.solver_reports.iter().any(|rep| !rep.converged) {
            return Err((WlStatus::Solver, "one-form solve did not converge".into()));
        }
        write(out_value, r.value)?;
        if !out_error.is_null() {
            out_error.write(r.error_estimate);
        }
        Ok(())
    })
}

/// `<x_i>` by quadrature.
///
/// # Safety
/// `sys` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wl_gibbs_mean_coordinate(sys: *const WlSystem, i: usize, out: *mut f64) -> WlStatus {
    guard(|| {
        let s = system(sys)?;
        let g = lift(Observable::coordinate(s.model.lattice(), i))?;
        write(out, lift(gibbs_mean(&s.op, &g))?.value)
    })
}

/// `ln` of the box-truncated partition function.
///
/// # Safety
/// `sys` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wl_log_partition(sys: *const WlSystem, out: *mut f64) -> WlStatus {
    guard(|| {
        let s = system(sys)?;
        write(out, lift(log_partition_model(s.op.grid(), &s.model))?)
    })
}

/// `n`-th derivative in `t` of the log-partition function of `Phi - t g`
/// with `g = sum_k coefficients[k] x_k` over all `len = n_sites` sites.
///
/// # Safety
/// `sys` must be a live handle, `coefficients` readable for `len` values
/// and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn wl_theta_derivative_linear(
    sys: *const WlSystem,
    coefficients: *const f64,
    len: usize,
    n: usize,
    t: f64,
    tol: f64,
    out: *mut f64,
) -> WlStatus {
    guard(|| {
        let s = system(sys)?;
        if coefficients.is_null() {
            return Err(null("coefficients"));
        }
        let lat = s.model.lattice();
        if len != lat.len() {
            return Err((
                WlStatus::InvalidArgument,
                format!("expected {} coefficients, got {len}", lat.len()),
            ));
        }
        let c = std::slice::from_raw_parts(coefficients, len);
        let sites: Vec<usize> = (0..len).collect();
        let g = lift(Observable::linear(lat, &sites, c))?;
        let cfg = solver_config(tol)?;
        let p = lift(PerturbedSystem::new(&s.model, &g, t, s.op.grid()))?;
        write(out, lift(theta_derivative(&p, n, &cfg))?.value)
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn wl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn wl_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}
