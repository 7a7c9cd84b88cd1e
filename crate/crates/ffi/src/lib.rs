//! C ABI over the benchmark models and filters.
//!
//! Handles are opaque pointers created by `mek_*_new*` and released with the
//! matching `mek_*_free`. Every fallible call returns a [`MekStatus`]; on
//! failure the message is available through [`mek_last_error`].

use mixenkf::cli::{run_filter_step, AnyScheme, FilterState};
use mixenkf::models::{build_benchmark, simulate_truth, StateSpaceModel};
use nalgebra::DVector;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MekStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    FilterFailed = 4,
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: MekStatus, msg: impl Into<String>) -> MekStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard<F: FnOnce() -> MekStatus>(f: F) -> MekStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MekStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MekStatus> {
    if p.is_null() {
        return Err(fail(MekStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MekStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Opaque model handle.
pub struct MekModel {
    model: StateSpaceModel,
}

/// Opaque filter handle; owns a copy of its model.
pub struct MekFilter {
    model: StateSpaceModel,
    state: FilterState,
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mek_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a benchmark (`lotka_volterra`, `lorenz63`, `lorenz96`) with
/// `linear` or `arctan` observations.
///
/// # Safety
/// `name` and `obs` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mek_model_new_benchmark(
    name: *const c_char,
    obs: *const c_char,
    out: *mut *mut MekModel,
) -> MekStatus {
    guard(|| {
        if out.is_null() {
            return fail(MekStatus::NullPointer, "out is null");
        }
        let (name, obs) = match (str_arg(name, "name"), str_arg(obs, "obs")) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let bench = match name.parse() {
            Ok(b) => b,
            Err(e) => return fail(MekStatus::InvalidArgument, format!("{e}")),
        };
        let kind = match obs.parse() {
            Ok(k) => k,
            Err(e) => return fail(MekStatus::InvalidArgument, format!("{e}")),
        };
        *out = Box::into_raw(Box::new(MekModel { model: build_benchmark(bench, kind) }));
        MekStatus::Ok
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from [`mek_model_new_benchmark`].
#[no_mangle]
pub unsafe extern "C" fn mek_model_free(model: *mut MekModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State and observation dimensions.
///
/// # Safety
/// `model` must be a live handle; `d` and `m` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mek_model_dims(model: *const MekModel, d: *mut usize, m: *mut usize) -> MekStatus {
    if model.is_null() || d.is_null() || m.is_null() {
        return fail(MekStatus::NullPointer, "null argument");
    }
    *d = (*model).model.d();
    *m = (*model).model.m();
    MekStatus::Ok
}

/// Simulates `horizon` steps. `states` receives `(horizon + 1)·d` values
/// and `observations` `horizon·m` values, row-major by time.
///
/// # Safety
/// `model` must be a live handle; the buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mek_model_simulate(
    model: *const MekModel,
    horizon: usize,
    seed: u64,
    states: *mut f64,
    states_len: usize,
    observations: *mut f64,
    observations_len: usize,
) -> MekStatus {
    guard(|| {
        if model.is_null() || states.is_null() || observations.is_null() {
            return fail(MekStatus::NullPointer, "null argument");
        }
        let model = &(*model).model;
        let (d, m) = (model.d(), model.m());
        if states_len < (horizon + 1) * d || observations_len < horizon * m {
            return fail(MekStatus::BufferTooSmall, format!("need {} states and {} observations", (horizon + 1) * d, horizon * m));
        }
        let mut rng = mixenkf::rng_from_seed(seed);
        let traj = simulate_truth(model, horizon, &mut rng);
        let s = std::slice::from_raw_parts_mut(states, states_len);
        for (k, x) in traj.states.iter().enumerate() {
            s[k * d..(k + 1) * d].copy_from_slice(x.as_slice());
        }
        let o = std::slice::from_raw_parts_mut(observations, observations_len);
        for (k, y) in traj.observations.iter().enumerate() {
            o[k * m..(k + 1) * m].copy_from_slice(y.as_slice());
        }
        MekStatus::Ok
    })
}

/// Creates a filter of `n` particles running `scheme` (for example `EnKF`,
/// `MMstr_c`, `QMC-MM_c`) on a copy of `model`.
///
/// # Safety
/// `model` must be a live handle, `scheme` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mek_filter_new(
    model: *const MekModel,
    scheme: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut MekFilter,
) -> MekStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(MekStatus::NullPointer, "null argument");
        }
        let scheme = match str_arg(scheme, "scheme") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let model = (*model).model.clone();
        let parsed = match AnyScheme::parse(scheme).and_then(|s| s.validate(&model).map(|_| s)) {
            Ok(s) => s,
            Err(e) => return fail(MekStatus::InvalidArgument, e.to_string()),
        };
        match FilterState::new(parsed, &model, n, seed) {
            Ok(state) => {
                *out = Box::into_raw(Box::new(MekFilter { model, state }));
                MekStatus::Ok
            }
            Err(e) => fail(MekStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a filter. Null is ignored.
///
/// # Safety
/// `filter` must be null or a live handle from [`mek_filter_new`].
#[no_mangle]
pub unsafe extern "C" fn mek_filter_free(filter: *mut MekFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

/// Particle count and state dimension.
///
/// # Safety
/// `filter` must be a live handle; `n` and `d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mek_filter_size(filter: *const MekFilter, n: *mut usize, d: *mut usize) -> MekStatus {
    if filter.is_null() || n.is_null() || d.is_null() {
        return fail(MekStatus::NullPointer, "null argument");
    }
    let e = (*filter).state.current();
    *n = e.len();
    *d = e.dim();
    MekStatus::Ok
}

/// Assimilates one observation of length `m`.
///
/// # Safety
/// `filter` must be a live handle and `y` must point to `y_len` values.
#[no_mangle]
pub unsafe extern "C" fn mek_filter_step(filter: *mut MekFilter, y: *const f64, y_len: usize) -> MekStatus {
    guard(|| {
        if filter.is_null() || y.is_null() {
            return fail(MekStatus::NullPointer, "null argument");
        }
        let f = &mut *filter;
        if y_len != f.model.m() {
            return fail(MekStatus::InvalidArgument, format!("observation has length {y_len}, model expects {}", f.model.m()));
        }
        let y = DVector::from_column_slice(std::slice::from_raw_parts(y, y_len));
        match run_filter_step(&mut f.state, &f.model, &y) {
            Ok(_) => MekStatus::Ok,
            Err(e) => fail(MekStatus::FilterFailed, e),
        }
    })
}

/// Copies the current weighted ensemble, `n·d` values row-major by particle.
///
/// # Safety
/// `filter` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn mek_filter_particles(filter: *const MekFilter, out: *mut f64, len: usize) -> MekStatus {
    if filter.is_null() || out.is_null() {
        return fail(MekStatus::NullPointer, "null argument");
    }
    let e = (*filter).state.current();
    let d = e.dim();
    if len < e.len() * d {
        return fail(MekStatus::BufferTooSmall, format!("need {} values", e.len() * d));
    }
    let s = std::slice::from_raw_parts_mut(out, len);
    for (i, x) in e.particles().iter().enumerate() {
        s[i * d..(i + 1) * d].copy_from_slice(x.as_slice());
    }
    MekStatus::Ok
}

/// Copies the normalized weights of the current ensemble.
///
/// # Safety
/// `filter` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn mek_filter_weights(filter: *const MekFilter, out: *mut f64, len: usize) -> MekStatus {
    if filter.is_null() || out.is_null() {
        return fail(MekStatus::NullPointer, "null argument");
    }
    let e = (*filter).state.current();
    if len < e.len() {
        return fail(MekStatus::BufferTooSmall, format!("need {} values", e.len()));
    }
    std::slice::from_raw_parts_mut(out, len)[..e.len()].copy_from_slice(&e.weights());
    MekStatus::Ok
}
