//! C ABI for the `sgns` solver.
//!
//! Handles are opaque pointers created by `sgns_problem_from_json` and `sgns_solve`
//! and released by the matching `*_free`. Every fallible function returns an
//! [`SgnsStatus`]; on failure [`sgns_last_error`] describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sgns::config::{ExperimentConfig, Setup};
use sgns::galerkin::StochasticSolution;
use sgns::gpc::{MultiIndexSet, TripleProducts};
use sgns::nonlinear::{hybrid_solve, SolverReport};
use sgns::postproc::{moments, Probe, ProbeField};
use sgns::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgnsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Solver = 4,
    Io = 5,
    Panic = 6,
}

/// Field selector for probes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgnsField {
    Ux = 0,
    Uy = 1,
    P = 2,
}

/// A configured stochastic problem.
pub struct SgnsProblem {
    config: ExperimentConfig,
    setup: Setup,
}

/// A computed gPC solution and its solver report.
pub struct SgnsSolution {
    solution: StochasticSolution,
    report: SolverReport,
    basis: MultiIndexSet,
    mesh: std::sync::Arc<sgns::mesh::Mesh>,
}

/// Sizes of a discrete problem.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SgnsSizes {
    pub velocity_dofs: usize,
    pub pressure_dofs: usize,
    pub modes: usize,
    pub coefficient_terms: usize,
    pub global_dofs: usize,
}

/// Convergence summary of a solve.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SgnsSolveInfo {
    pub converged: bool,
    pub picard_steps: usize,
    pub newton_steps: usize,
    pub relative_residual: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SgnsStatus {
    match e {
        Error::Config(_) | Error::Geometry(_) => SgnsStatus::Config,
        Error::InvalidInput(_) | Error::OutsideDomain { .. } | Error::Dimension { .. } => SgnsStatus::InvalidArgument,
        Error::Io(_) | Error::Json(_) => SgnsStatus::Io,
        Error::Singular(_) | Error::Solver(_) | Error::StaleState { .. } => SgnsStatus::Solver,
    }
}

fn guard<F: FnOnce() -> Result<(), SgnsStatus>>(f: F) -> SgnsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SgnsStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            SgnsStatus::Panic
        }
    }
}

fn fail(e: Error) -> SgnsStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn null(what: &str) -> SgnsStatus {
    set_error(&format!("{what} is null"));
    SgnsStatus::NullPointer
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sgns_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sgns_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses an experiment configuration (JSON) and builds the problem.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sgns_problem_from_json(json: *const c_char, out: *mut *mut SgnsProblem) -> SgnsStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: non-null and NUL-terminated by the caller's contract.
        let text = unsafe { CStr::from_ptr(json) }
            .to_str()
            .map_err(|_| fail(Error::InvalidInput("configuration is not UTF-8".into())))?;
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| fail(Error::Config(format!("cannot parse configuration: {e}"))))?;
        config.validate().map_err(fail)?;
        let setup = config.setup().map_err(fail)?;
        // SAFETY: `out` is non-null and writable by contract.
        unsafe { *out = Box::into_raw(Box::new(SgnsProblem { config, setup })) };
        Ok(())
    })
}

/// Releases a problem; null is ignored.
///
/// # Safety
/// `p` must be null or a pointer from [`sgns_problem_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sgns_problem_free(p: *mut SgnsProblem) {
    if !p.is_null() {
        // SAFETY: allocated by `Box::into_raw` in this crate.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// # Safety
/// `p` must be a live problem handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sgns_problem_sizes(p: *const SgnsProblem, out: *mut SgnsSizes) -> SgnsStatus {
    guard(|| {
        // SAFETY: checked for null; validity is the caller's contract.
        let (Some(p), false) = (unsafe { p.as_ref() }, out.is_null()) else {
            return Err(null("problem or out"));
        };
        let l = p.setup.problem.layout();
        let sizes = SgnsSizes {
            velocity_dofs: l.nu,
            pressure_dofs: l.np,
            modes: l.m,
            coefficient_terms: p.setup.problem.coupling().m_nu(),
            global_dofs: l.ngdof(),
        };
        // SAFETY: non-null.
        unsafe { *out = sizes };
        Ok(())
    })
}

/// Runs the hybrid Picard/Newton stochastic Galerkin solve. A solution
/// handle is produced even when the iteration did not converge; check
/// [`sgns_solution_info`].
///
/// # Safety
/// `p` must be a live problem handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sgns_solve(p: *const SgnsProblem, out: *mut *mut SgnsSolution) -> SgnsStatus {
    guard(|| {
        // SAFETY: checked for null; validity is the caller's contract.
        let (Some(p), false) = (unsafe { p.as_ref() }, out.is_null()) else {
            return Err(null("problem or out"));
        };
        let nl = p.config.nonlinear_config().map_err(fail)?;
        let (solution, report) = hybrid_solve(&p.setup.problem, &nl).map_err(fail)?;
        let basis = MultiIndexSet::total_degree(p.config.dim, p.config.degree).map_err(fail)?;
        let s = SgnsSolution {
            solution,
            report,
            basis,
            mesh: p.setup.mesh.clone(),
        };
        // SAFETY: non-null.
        unsafe { *out = Box::into_raw(Box::new(s)) };
        Ok(())
    })
}

/// Releases a solution; null is ignored.
///
/// # Safety
/// `s` must be null or a pointer from [`sgns_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sgns_solution_free(s: *mut SgnsSolution) {
    if !s.is_null() {
        // SAFETY: allocated by `Box::into_raw` in this crate.
        drop(unsafe { Box::from_raw(s) });
    }
}

/// # Safety
/// `s` must be a live solution handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sgns_solution_info(s: *const SgnsSolution, out: *mut SgnsSolveInfo) -> SgnsStatus {
    guard(|| {
        // SAFETY: checked for null; validity is the caller's contract.
        let (Some(s), false) = (unsafe { s.as_ref() }, out.is_null()) else {
            return Err(null("solution or out"));
        };
        use sgns::nonlinear::StepKind;
        let r = &s.report;
        let info = SgnsSolveInfo {
            converged: r.converged(),
            picard_steps: r.count(StepKind::Picard) + r.count(StepKind::InexactPicard),
            newton_steps: r.count(StepKind::Newton),
            relative_residual: r.final_residual,
        };
        // SAFETY: non-null.
        unsafe { *out = info };
        Ok(())
    })
}

/// Copies the `[u, p]` block of mode `k` into `buf` of length `len`, which
/// must equal velocity plus pressure dofs.
///
/// # Safety
/// `s` must be a live solution handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sgns_solution_mode(s: *const SgnsSolution, k: usize, buf: *mut f64, len: usize) -> SgnsStatus {
    guard(|| {
        // SAFETY: checked for null; validity is the caller's contract.
        let (Some(s), false) = (unsafe { s.as_ref() }, buf.is_null()) else {
            return Err(null("solution or buf"));
        };
        let l = s.solution.layout();
        if k >= l.m || len != l.block() {
            return Err(fail(Error::InvalidInput(format!(
                "mode {k} of {} with buffer length {len} (expected {})",
                l.m,
                l.block()
            ))));
        }
        // SAFETY: `buf` holds `len` elements by contract.
        let dst = unsafe { std::slice::from_raw_parts_mut(buf, len) };
        dst.copy_from_slice(&s.solution.as_slice()[l.mode_range(k)]);
        Ok(())
    })
}

/// Copies the pointwise velocity variance (length = velocity dofs).
///
/// # Safety
/// `s` must be a live solution handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sgns_solution_velocity_variance(s: *const SgnsSolution, buf: *mut f64, len: usize) -> SgnsStatus {
    guard(|| {
        // SAFETY: checked for null; validity is the caller's contract.
        let (Some(s), false) = (unsafe { s.as_ref() }, buf.is_null()) else {
            return Err(null("solution or buf"));
        };
        let m = moments(&s.solution);
        if len != m.var_u.len() {
            return Err(fail(Error::InvalidInput(format!(
                "buffer length {len}, expected {}",
                m.var_u.len()
            ))));
        }
        // SAFETY: `buf` holds `len` elements by contract.
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(&m.var_u);
        Ok(())
    })
}

/// Mean and standard deviation of a field at a point.
///
/// # Safety
/// `s` must be a live solution handle; `mean` and `std` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sgns_solution_probe(
    s: *const SgnsSolution,
    x: f64,
    y: f64,
    field: SgnsField,
    mean: *mut f64,
    std: *mut f64,
) -> SgnsStatus {
    guard(|| {
        // SAFETY: checked for null; validity is the caller's contract.
        let (Some(s), false, false) = (unsafe { s.as_ref() }, mean.is_null(), std.is_null()) else {
            return Err(null("solution, mean or std"));
        };
        let f = match field {
            SgnsField::Ux => ProbeField::Ux,
            SgnsField::Uy => ProbeField::Uy,
            SgnsField::P => ProbeField::P,
        };
        let c = Probe::new(x, y, f).stencil(&s.mesh).map_err(fail)?.coefficients(&s.solution);
        debug_assert_eq!(c.len(), s.basis.len());
        // SAFETY: non-null.
        unsafe {
            *mean = c[0];
            *std = c[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        Ok(())
    })
}

/// Accumulated block-lower nonzeros of the first `m_t` coupling matrices and
/// the total nonzeros, for dimension `dim` and solution degree `degree`
/// (coefficient degree `2 degree`).
///
/// # Safety
/// `lower` and `total` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sgns_coupling_nnz(
    dim: usize,
    degree: usize,
    m_t: usize,
    lower: *mut usize,
    total: *mut usize,
) -> SgnsStatus {
    guard(|| {
        if lower.is_null() || total.is_null() {
            return Err(null("lower or total"));
        }
        let h = TripleProducts::new(dim, degree, 2 * degree).map_err(fail)?;
        if m_t > h.m_nu() {
            return Err(fail(Error::InvalidInput(format!(
                "m_t = {m_t} exceeds the {} coupling matrices",
                h.m_nu()
            ))));
        }
        // SAFETY: non-null.
        unsafe {
            *lower = h.accumulated_lower_nnz(m_t);
            *total = h.total_nnz();
        }
        Ok(())
    })
}
