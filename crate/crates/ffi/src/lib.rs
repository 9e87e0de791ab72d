//! C ABI for `projbal`.
//!
//! Every fallible call returns a [`ProjbalStatus`]. On failure the message is
//! kept per thread and can be read with [`projbal_last_error_message`].
//! Complex matrices cross the boundary as row-major arrays of interleaved
//! `(re, im)` doubles, so an `n x n` matrix takes `2 n n` doubles.
//! Handles are opaque and owned by the caller; release them with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use projbal::balance::{balance_iterate, BalanceOptions, BalanceOutcome};
use projbal::error::Error;
use projbal::fiber::{
    c_closed_form, certified_c, fs_quadrature, fs_quadrature_monte_carlo, QuadratureRule,
};
use projbal::herm::{metric_distance, sym_power_metric, HermMetric};
use projbal::linalg::{c, CMat};
use projbal::model::{generate, ModelSpec};
use projbal::ruled::pipeline_mesh_size;

/// Result codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjbalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotHermitian = 3,
    NotPositiveDefinite = 4,
    DimensionMismatch = 5,
    DegreeOutOfRange = 6,
    QuadratureUnderResolved = 7,
    NotConverged = 8,
    Numerical = 9,
    Panic = 10,
}

impl From<&Error> for ProjbalStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::NotHermitian { .. } => Self::NotHermitian,
            Error::NotPositiveDefinite { .. } => Self::NotPositiveDefinite,
            Error::DimensionMismatch { .. } | Error::BasisMismatch { .. } => {
                Self::DimensionMismatch
            }
            Error::DegreeOutOfRange(_) => Self::DegreeOutOfRange,
            Error::QuadratureUnderResolved { .. } => Self::QuadratureUnderResolved,
            Error::NotConverged { .. } => Self::NotConverged,
            Error::InvalidArgument(_)
            | Error::MeshTooSmall { .. }
            | Error::SizeCap { .. }
            | Error::Parse(_) => Self::InvalidArgument,
            _ => Self::Numerical,
        }
    }
}

/// Hermitian positive definite matrix.
pub struct ProjbalMetric(HermMetric);

/// Quadrature rule on the Fubini-Study projective space.
pub struct ProjbalQuadrature(QuadratureRule);

/// Result of a balancing run.
pub struct ProjbalBalance(BalanceOutcome);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(ProjbalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ProjbalStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ProjbalStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ProjbalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ProjbalStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            ProjbalStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn read_matrix(data: *const f64, dim: usize) -> Result<CMat, Fail> {
    if data.is_null() {
        return Err(null("data"));
    }
    if dim == 0 {
        return Err(invalid("dim must be positive"));
    }
    let v = std::slice::from_raw_parts(data, 2 * dim * dim);
    Ok(CMat::from_fn(dim, dim, |i, j| {
        let at = 2 * (i * dim + j);
        c(v[at], v[at + 1])
    }))
}

unsafe fn write_matrix(m: &CMat, out: *mut f64, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let need = 2 * m.nrows() * m.ncols();
    if len < need {
        return Err(invalid(format!("buffer holds {len} doubles, need {need}")));
    }
    let v = std::slice::from_raw_parts_mut(out, need);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let at = 2 * (i * m.ncols() + j);
            v[at] = m[(i, j)].re;
            v[at + 1] = m[(i, j)].im;
        }
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn projbal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into the library on the same
/// thread.
#[no_mangle]
pub extern "C" fn projbal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a metric from `2 dim dim` interleaved doubles.
///
/// # Safety
/// `data` must point to `2 * dim * dim` readable doubles and `out` to a
/// writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn projbal_metric_new(
    data: *const f64,
    dim: usize,
    out: *mut *mut ProjbalMetric,
) -> ProjbalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let h = HermMetric::new(read_matrix(data, dim)?, "ffi")?;
        store(out, ProjbalMetric(h));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn projbal_metric_free(m: *mut ProjbalMetric) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Dimension of the metric, 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn projbal_metric_dim(m: *const ProjbalMetric) -> usize {
    m.as_ref().map_or(0, |m| m.0.dim())
}

/// Copies the matrix out as interleaved doubles.
///
/// # Safety
/// `m` must be a live handle and `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn projbal_metric_copy(
    m: *const ProjbalMetric,
    out: *mut f64,
    len: usize,
) -> ProjbalStatus {
    guard(|| write_matrix(deref(m, "metric")?.0.matrix(), out, len))
}

/// Induced metric on the `d`-th symmetric power, in the monomial basis.
///
/// # Safety
/// `h` must be a live handle and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn projbal_sym_power_metric(
    h: *const ProjbalMetric,
    d: usize,
    out: *mut *mut ProjbalMetric,
) -> ProjbalStatus {
    guard(|| {
        let h = deref(h, "h")?;
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, ProjbalMetric(sym_power_metric(&h.0, d)?));
        Ok(())
    })
}

/// Distance between two metrics of equal dimension.
///
/// # Safety
/// `h` and `h0` must be live handles and `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn projbal_metric_distance(
    h: *const ProjbalMetric,
    h0: *const ProjbalMetric,
    out: *mut f64,
) -> ProjbalStatus {
    guard(|| {
        let (h, h0) = (deref(h, "h")?, deref(h0, "h0")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metric_distance(&h.0, &h0.0)?;
        Ok(())
    })
}

/// Deterministic product rule on P^{r-1} at the given level.
///
/// # Safety
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn projbal_fs_quadrature_new(
    r: usize,
    level: usize,
    out: *mut *mut ProjbalQuadrature,
) -> ProjbalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, ProjbalQuadrature(fs_quadrature(r, level)?));
        Ok(())
    })
}

/// Seeded Monte Carlo rule on P^{r-1}.
///
/// # Safety
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn projbal_fs_quadrature_monte_carlo_new(
    r: usize,
    samples: usize,
    seed: u64,
    out: *mut *mut ProjbalQuadrature,
) -> ProjbalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        store(
            out,
            ProjbalQuadrature(fs_quadrature_monte_carlo(r, samples, seed)?),
        );
        Ok(())
    })
}

/// # Safety
/// `q` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn projbal_fs_quadrature_free(q: *mut ProjbalQuadrature) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// Number of nodes, 0 for a null handle.
///
/// # Safety
/// `q` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn projbal_fs_quadrature_len(q: *const ProjbalQuadrature) -> usize {
    q.as_ref().map_or(0, |q| q.0.len())
}

/// Closed form of the fiber constant `C_{r,d}`; NaN when `r` or `d` is 0.
#[no_mangle]
pub extern "C" fn projbal_c_closed_form(r: usize, d: usize) -> f64 {
    if r == 0 || d == 0 {
        return f64::NAN;
    }
    c_closed_form(r, d)
}

/// Fiber constant computed with `rule`, rejected when the rule is
/// under-resolved for degree `d`.
///
/// # Safety
/// `rule` must be a live handle and `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn projbal_c_constant(
    r: usize,
    d: usize,
    rule: *const ProjbalQuadrature,
    out: *mut f64,
) -> ProjbalStatus {
    guard(|| {
        let rule = deref(rule, "rule")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = certified_c(r, d, &rule.0)?;
        Ok(())
    })
}

/// Balances the split bundle `O(a_1) + ... + O(a_rank)` over P^1 at tensor
/// power `k`, with symmetric power `d` of the fiber.
///
/// Returns `NOT_CONVERGED` when the iteration budget runs out; the handle is
/// still written so the report can be inspected, and must be freed.
///
/// # Safety
/// `degrees` must point to `rank` readable integers and `out` to a writable
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn projbal_balance_p1(
    degrees: *const i64,
    rank: usize,
    k: usize,
    d: usize,
    tol: f64,
    max_iter: usize,
    out: *mut *mut ProjbalBalance,
) -> ProjbalStatus {
    guard(|| {
        if degrees.is_null() {
            return Err(null("degrees"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if !(tol > 0.0) || max_iter == 0 {
            return Err(invalid("tol and max_iter must be positive"));
        }
        let a = std::slice::from_raw_parts(degrees, rank).to_vec();
        let spec = ModelSpec::p1(a, k, d, 1);
        spec.validate()?;
        let spec = ModelSpec {
            mesh_size: pipeline_mesh_size(&spec)?,
            ..spec
        };
        let gen = generate(&spec)?;
        let opts = BalanceOptions {
            tol,
            max_iter,
            ..BalanceOptions::default()
        };
        let outcome = balance_iterate(&gen.sample, &gen.mesh, &opts)?;
        let report = (
            outcome.report.iterations,
            outcome.report.final_residual,
            outcome.report.converged,
        );
        store(out, ProjbalBalance(outcome));
        if !report.2 {
            return Err(Error::NotConverged {
                iterations: report.0,
                residual: report.1,
            }
            .into());
        }
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn projbal_balance_free(b: *mut ProjbalBalance) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Number of sections, i.e. the Gram dimension. 0 for a null handle.
///
/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn projbal_balance_dim(b: *const ProjbalBalance) -> usize {
    b.as_ref().map_or(0, |b| b.0.gram.nrows())
}

/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn projbal_balance_converged(b: *const ProjbalBalance) -> bool {
    b.as_ref().is_some_and(|b| b.0.report.converged)
}

/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn projbal_balance_iterations(b: *const ProjbalBalance) -> usize {
    b.as_ref().map_or(0, |b| b.0.report.iterations)
}

/// Final residual, NaN for a null handle.
///
/// # Safety
/// `b` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn projbal_balance_residual(b: *const ProjbalBalance) -> f64 {
    b.as_ref().map_or(f64::NAN, |b| b.0.report.final_residual)
}

/// Copies the balanced Gram matrix out as interleaved doubles.
///
/// # Safety
/// `b` must be a live handle and `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn projbal_balance_copy_gram(
    b: *const ProjbalBalance,
    out: *mut f64,
    len: usize,
) -> ProjbalStatus {
    guard(|| write_matrix(&deref(b, "balance")?.0.gram, out, len))
}
