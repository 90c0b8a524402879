//! C interface to `clusterhom`.
//!
//! Objects are opaque handles created by `ch_*` constructors and released by
//! the matching `*_free`. Every fallible call returns a [`ChStatus`]; on
//! failure the message is available from [`ch_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use clusterhom::closedform::{elastic_cm, electric_cm_slope, ElasticPhases, ElectricPhases};
use clusterhom::cluster::{delta_k, ConfigurationSolver, Formula, Setup};
use clusterhom::experiment::{self, ExperimentConfig};
use clusterhom::geometry::{BoxSpec, Point};
use clusterhom::media::{GridSpec, Phases};
use clusterhom::process::{
    attach_marks, sample_hardcore_poisson, sample_poisson, sample_random_parking,
    InclusionConfiguration, PointSample,
};
use clusterhom::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NonConvergence = 3,
    CheckFailed = 4,
    Io = 5,
    Panic = 6,
}

/// Point sample on a periodic box.
pub struct ChSample(PointSample);

/// Point sample with radius and Bernoulli marks.
pub struct ChConfiguration(InclusionConfiguration);

/// Grid, phases, mass parameter, direction and tolerance.
pub struct ChSetup(Setup);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ChStatus {
    match e.exit_code() {
        1 => ChStatus::Io,
        3 => ChStatus::NonConvergence,
        4 => ChStatus::CheckFailed,
        _ => ChStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), ChStatus>) -> ChStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ChStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside clusterhom".into());
            ChStatus::Panic
        }
    }
}

fn check<T>(r: clusterhom::Result<T>) -> Result<T, ChStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

unsafe fn borrow<'a, T>(p: *const T) -> Result<&'a T, ChStatus> {
    if p.is_null() {
        set_error("null pointer argument".into());
        return Err(ChStatus::NullPointer);
    }
    Ok(&*p)
}

fn out_ptr<T>(p: *mut T) -> Result<(), ChStatus> {
    if p.is_null() {
        set_error("null output pointer".into());
        return Err(ChStatus::NullPointer);
    }
    Ok(())
}

unsafe fn give<T>(out: *mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ch_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ch_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn make_box(dim: usize, side: f64) -> Result<BoxSpec, ChStatus> {
    check(BoxSpec::new(dim, side))
}

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ch_sample_poisson(
    intensity: f64,
    dim: usize,
    side: f64,
    seed: u64,
    out: *mut *mut ChSample,
) -> ChStatus {
    guard(|| {
        out_ptr(out)?;
        let s = check(sample_poisson(intensity, make_box(dim, side)?, seed))?;
        give(out, ChSample(s));
        Ok(())
    })
}

/// Matérn type-I hardcore thinning of a Poisson process.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ch_sample_hardcore_poisson(
    intensity: f64,
    min_dist: f64,
    dim: usize,
    side: f64,
    seed: u64,
    out: *mut *mut ChSample,
) -> ChStatus {
    guard(|| {
        out_ptr(out)?;
        let s = check(sample_hardcore_poisson(
            intensity,
            min_dist,
            make_box(dim, side)?,
            seed,
        ))?;
        give(out, ChSample(s));
        Ok(())
    })
}

/// Saturated random sequential adsorption of balls of `radius`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ch_sample_random_parking(
    radius: f64,
    dim: usize,
    side: f64,
    seed: u64,
    out: *mut *mut ChSample,
) -> ChStatus {
    guard(|| {
        out_ptr(out)?;
        let s = check(sample_random_parking(radius, make_box(dim, side)?, seed))?;
        give(out, ChSample(s));
        Ok(())
    })
}

/// Sample from `n` points given as `n * dim` consecutive coordinates.
///
/// # Safety
/// `coords` must point to `n * dim` readable doubles; `out` as above.
#[no_mangle]
pub unsafe extern "C" fn ch_sample_from_points(
    dim: usize,
    side: f64,
    coords: *const f64,
    n: usize,
    out: *mut *mut ChSample,
) -> ChStatus {
    guard(|| {
        out_ptr(out)?;
        let bx = make_box(dim, side)?;
        if n > 0 && coords.is_null() {
            set_error("null coordinate array".into());
            return Err(ChStatus::NullPointer);
        }
        let flat = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(coords, n * dim)
        };
        let pts: Vec<Point> = flat
            .chunks(dim)
            .map(|c| {
                let mut p = [0.0; 3];
                p[..dim].copy_from_slice(c);
                p
            })
            .collect();
        give(out, ChSample(PointSample::explicit(bx, pts)));
        Ok(())
    })
}

/// Number of points, 0 for NULL.
///
/// # Safety
/// `sample` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ch_sample_len(sample: *const ChSample) -> usize {
    sample.as_ref().map_or(0, |s| s.0.len())
}

/// Copies the points as `len * 3` doubles (unused coordinates are zero).
///
/// # Safety
/// `out` must have room for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn ch_sample_points(
    sample: *const ChSample,
    out: *mut f64,
    capacity: usize,
) -> ChStatus {
    guard(|| {
        let s = borrow(sample)?;
        out_ptr(out)?;
        if capacity < 3 * s.0.len() {
            set_error(format!("need room for {} doubles", 3 * s.0.len()));
            return Err(ChStatus::InvalidArgument);
        }
        for (i, p) in s.0.points.iter().enumerate() {
            ptr::copy_nonoverlapping(p.as_ptr(), out.add(3 * i), 3);
        }
        Ok(())
    })
}

/// # Safety
/// `sample` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ch_sample_free(sample: *mut ChSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Attaches radius-`radius` balls and uniforms drawn from `seed`; marks are
/// set at `p0`.
///
/// # Safety
/// `sample` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_attach_marks(
    sample: *const ChSample,
    radius: f64,
    p0: f64,
    seed: u64,
    out: *mut *mut ChConfiguration,
) -> ChStatus {
    guard(|| {
        let s = borrow(sample)?;
        out_ptr(out)?;
        let c = check(attach_marks(s.0.clone(), radius, p0, seed))?;
        give(out, ChConfiguration(c));
        Ok(())
    })
}

/// Number of inclusions, 0 for NULL.
///
/// # Safety
/// `config` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ch_configuration_len(config: *const ChConfiguration) -> usize {
    config.as_ref().map_or(0, |c| c.0.len())
}

/// Writes 1 for every inclusion marked at level `p`, else 0.
///
/// # Safety
/// `flags` must have room for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn ch_configuration_marked(
    config: *const ChConfiguration,
    p: f64,
    flags: *mut u8,
    capacity: usize,
) -> ChStatus {
    guard(|| {
        let c = borrow(config)?;
        out_ptr(flags)?;
        if capacity < c.0.len() {
            set_error(format!("need room for {} flags", c.0.len()));
            return Err(ChStatus::InvalidArgument);
        }
        let marked = c.0.marked_at(p);
        for n in 0..c.0.len() {
            *flags.add(n) = marked.contains(n) as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ch_configuration_free(config: *mut ChConfiguration) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Numerical setup on a `cells^dim` grid of the box `[0, side)^dim`. `xi`
/// holds `dim` components and is normalized.
///
/// # Safety
/// `xi` must point to `dim` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_setup_new(
    dim: usize,
    side: f64,
    cells: usize,
    alpha: f64,
    beta: f64,
    t: f64,
    xi: *const f64,
    tol: f64,
    out: *mut *mut ChSetup,
) -> ChStatus {
    guard(|| {
        out_ptr(out)?;
        let bx = make_box(dim, side)?;
        let xi = borrow(xi)?;
        let xs = std::slice::from_raw_parts(xi, dim);
        let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            set_error("xi must be a nonzero finite vector".into());
            return Err(ChStatus::InvalidArgument);
        }
        let mut v = [0.0; 3];
        for (o, x) in v.iter_mut().zip(xs) {
            *o = x / n;
        }
        let grid = check(GridSpec::new(bx, cells))?;
        let phases = check(Phases::new(alpha, beta))?;
        if t.is_nan() || t <= 0.0 || !(1e-300..=1e-4).contains(&tol) {
            set_error("need t > 0 and tol in (0, 1e-4]".into());
            return Err(ChStatus::InvalidArgument);
        }
        give(out, ChSetup(Setup::new(grid, phases, t, v, tol)));
        Ok(())
    })
}

/// # Safety
/// `setup` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ch_setup_free(setup: *mut ChSetup) {
    if !setup.is_null() {
        drop(Box::from_raw(setup));
    }
}

/// `ξ·A_T ξ` of the medium with the inclusions marked at level `p`.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_homogenized_entry(
    config: *const ChConfiguration,
    setup: *const ChSetup,
    p: f64,
    out: *mut f64,
) -> ChStatus {
    guard(|| {
        let c = borrow(config)?;
        let s = borrow(setup)?;
        out_ptr(out)?;
        let solver = check(ConfigurationSolver::new(c.0.clone(), &s.0))?;
        *out = check(solver.entry(&c.0.marked_at(p)))?;
        Ok(())
    })
}

/// `k`-th cluster coefficient at marks frozen at `p0`, by `formula` 0, 1 or 2.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_delta_k(
    config: *const ChConfiguration,
    setup: *const ChSetup,
    k: usize,
    formula: c_int,
    p0: f64,
    r_cut: f64,
    out: *mut f64,
) -> ChStatus {
    guard(|| {
        let c = borrow(config)?;
        let s = borrow(setup)?;
        out_ptr(out)?;
        let f = check(Formula::from_index(formula.max(-1) as usize))?;
        *out = check(delta_k(&c.0, k, f, p0, &s.0, r_cut))?;
        Ok(())
    })
}

/// Clausius-Mossotti slope `αd(β − α)/(β + α(d − 1))`.
///
/// # Safety
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_electric_cm_slope(
    alpha: f64,
    beta: f64,
    dim: usize,
    out: *mut f64,
) -> ChStatus {
    guard(|| {
        out_ptr(out)?;
        *out = electric_cm_slope(&check(ElectricPhases::new(alpha, beta, dim))?);
        Ok(())
    })
}

/// Elastic constants `α`, `β` of the first-order formula.
///
/// # Safety
/// `alpha` and `beta` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_elastic_cm(
    bulk: f64,
    bulk_prime: f64,
    shear: f64,
    shear_prime: f64,
    dim: usize,
    alpha: *mut f64,
    beta: *mut f64,
) -> ChStatus {
    guard(|| {
        out_ptr(alpha)?;
        out_ptr(beta)?;
        let cm = elastic_cm(&check(ElasticPhases::new(
            bulk,
            bulk_prime,
            shear,
            shear_prime,
            dim,
        ))?);
        *alpha = cm.alpha;
        *beta = cm.beta;
        Ok(())
    })
}

/// Runs an experiment from its JSON config without writing files. The report
/// is returned in `*report` (free with [`ch_string_free`]) whenever the run
/// completes, including when a band fails (`ChStatus::CheckFailed`).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `report` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_run_experiment_json(
    config_json: *const c_char,
    report: *mut *mut c_char,
) -> ChStatus {
    guard(|| {
        let text = borrow(config_json)?;
        out_ptr(report)?;
        *report = ptr::null_mut();
        let text = CStr::from_ptr(text).to_str().map_err(|_| {
            set_error("config is not valid UTF-8".into());
            ChStatus::InvalidArgument
        })?;
        let config = check(ExperimentConfig::from_json(text))?;
        let rep = check(experiment::execute(&config))?;
        let json = check(serde_json::to_string(&rep).map_err(Error::from))?;
        *report = CString::new(json).map_err(|_| ChStatus::Panic)?.into_raw();
        if rep.passed {
            Ok(())
        } else {
            set_error("an asserted band failed".into());
            Err(ChStatus::CheckFailed)
        }
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ch_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
