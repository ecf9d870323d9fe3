//! C ABI for the rocoma engine.
//!
//! Conventions, mirrored in `include/rocoma.h`:
//! - Every function returns a `rocoma_status` code; `ROCOMA_OK` is 0.
//! - Objects cross the boundary as opaque handles created by `_new`-style
//!   constructors and destroyed by their `_free` function. `_free` accepts
//!   null. Handles are not thread-safe; share them only with external
//!   synchronization.
//! - On failure a thread-local message is set; read it with
//!   `rocoma_last_error`.
//! - Actions use a padded layout: per region, `2 * ROCOMA_NUM_SLOTS` doubles
//!   (vacant simplex then low-battery simplex), slots ordered stay, north,
//!   south, west, east. Slots that point off the grid must be zero. Each
//!   in-grid group must sum to 1.
//! - Observations use `ROCOMA_REGION_FIELDS` doubles per region: vacant,
//!   low_battery, demand, empty_chargers, chargers.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand_chacha::ChaCha8Rng;
use rocoma::baselines::{BaselinePolicy, BaselineKind};
use rocoma::mdp::{CostWeights, Policy, RebalanceAction, NUM_SLOTS, SLOT_OFFSETS};
use rocoma::nn::checkpoint::Checkpoint;
use rocoma::nn::policy::DirichletPolicy;
use rocoma::seed::{stream, stream_rng};
use rocoma::sim::{PerturbConfig, Sim, SimConfig};
use rocoma::trainer::load_policy;

/// Status codes returned by every entry point.
pub const ROCOMA_OK: i32 = 0;
pub const ROCOMA_ERR_NULL_ARGUMENT: i32 = 1;
pub const ROCOMA_ERR_INVALID_ARGUMENT: i32 = 2;
pub const ROCOMA_ERR_CONFIG: i32 = 3;
pub const ROCOMA_ERR_IO: i32 = 4;
pub const ROCOMA_ERR_BUFFER_TOO_SMALL: i32 = 5;
pub const ROCOMA_ERR_PANIC: i32 = 6;

/// Slots per region in the padded action layout.
pub const ROCOMA_NUM_SLOTS: usize = NUM_SLOTS;
/// Doubles per region in the observation layout.
pub const ROCOMA_REGION_FIELDS: usize = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(code: i32, msg: &str) -> i32 {
    set_error(msg);
    code
}

/// Wraps an entry point body: catches panics and clears the error slot on
/// success.
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => {
            if code == ROCOMA_OK {
                set_error("");
            }
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".into());
            fail(ROCOMA_ERR_PANIC, &format!("internal panic: {msg}"))
        }
    }
}

fn code_for(err: &rocoma::Error) -> i32 {
    match err {
        rocoma::Error::Io(_) => ROCOMA_ERR_IO,
        _ => ROCOMA_ERR_CONFIG,
    }
}

/// Opaque simulator handle: environment plus its private RNG stream.
pub struct RocomaSim {
    sim: Sim,
    rng: ChaCha8Rng,
}

enum PolicyImpl {
    Baseline(BaselinePolicy),
    Trained(DirichletPolicy),
}

/// Opaque policy handle with its private action-sampling RNG stream.
pub struct RocomaPolicy {
    policy: PolicyImpl,
    rng: ChaCha8Rng,
}

/// Copy the last error message into `buf` (always NUL-terminated, truncated
/// to fit). Returns the full message length in bytes, excluding the NUL.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (then only the
/// length is returned).
#[no_mangle]
pub unsafe extern "C" fn rocoma_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rocoma_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, (i32, String)> {
    if ptr.is_null() {
        return Err((ROCOMA_ERR_NULL_ARGUMENT, format!("{name} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| (ROCOMA_ERR_INVALID_ARGUMENT, format!("{name} is not valid UTF-8")))
}

fn build_sim(cfg: SimConfig, seed: u64, out: *mut *mut RocomaSim) -> i32 {
    match Sim::new(cfg, PerturbConfig::default(), CostWeights::default(), seed) {
        Ok(sim) => {
            let handle = Box::new(RocomaSim {
                sim,
                rng: stream_rng(seed, stream::SIM_STEP, 0),
            });
            unsafe { *out = Box::into_raw(handle) };
            ROCOMA_OK
        }
        Err(e) => fail(code_for(&e), &format!("simulator construction failed: {e}")),
    }
}

/// Create a simulator with the default city configuration.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn rocoma_sim_new_default(seed: u64, out: *mut *mut RocomaSim) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "out is null");
        }
        build_sim(SimConfig::default(), seed, out)
    })
}

/// Create a simulator from TOML text holding a `[sim]` table (the same
/// schema the CLI's run configuration uses).
///
/// # Safety
/// `toml_text` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rocoma_sim_new_from_toml(
    toml_text: *const c_char,
    seed: u64,
    out: *mut *mut RocomaSim,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "out is null");
        }
        let text = match unsafe { cstr_arg(toml_text, "toml_text") } {
            Ok(t) => t,
            Err((code, msg)) => return fail(code, &msg),
        };
        #[derive(serde::Deserialize)]
        struct Wrapper {
            sim: SimConfig,
        }
        let cfg = match toml::from_str::<Wrapper>(text) {
            Ok(w) => w.sim,
            Err(e) => return fail(ROCOMA_ERR_CONFIG, &format!("TOML parse failed: {e}")),
        };
        build_sim(cfg, seed, out)
    })
}

/// Destroy a simulator handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn rocoma_sim_free(sim: *mut RocomaSim) {
    if !sim.is_null() {
        drop(unsafe { Box::from_raw(sim) });
    }
}

/// Redraw the initial state (fleet placement, batteries, time of day).
///
/// # Safety
/// `sim` must be a live handle from a `rocoma_sim_new_*` call.
#[no_mangle]
pub unsafe extern "C" fn rocoma_sim_reset(sim: *mut RocomaSim) -> i32 {
    guarded(|| {
        let Some(handle) = (unsafe { sim.as_mut() }) else {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "sim is null");
        };
        let mut rng = handle.rng.clone();
        handle.sim.reset(&mut rng);
        handle.rng = rng;
        ROCOMA_OK
    })
}

/// Number of grid regions.
///
/// # Safety
/// `sim` must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rocoma_sim_num_regions(sim: *const RocomaSim, out: *mut usize) -> i32 {
    guarded(|| {
        let Some(handle) = (unsafe { sim.as_ref() }) else {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "sim is null");
        };
        if out.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "out is null");
        }
        unsafe { *out = handle.sim.grid().len() };
        ROCOMA_OK
    })
}

/// Grid dimensions.
///
/// # Safety
/// `sim` must be live; `rows` and `cols` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rocoma_sim_grid_size(
    sim: *const RocomaSim,
    rows: *mut u32,
    cols: *mut u32,
) -> i32 {
    guarded(|| {
        let Some(handle) = (unsafe { sim.as_ref() }) else {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "sim is null");
        };
        if rows.is_null() || cols.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "rows/cols is null");
        }
        unsafe {
            *rows = handle.sim.grid().rows() as u32;
            *cols = handle.sim.grid().cols() as u32;
        }
        ROCOMA_OK
    })
}

/// Copy the current observation into `buf`: `ROCOMA_REGION_FIELDS` doubles
/// per region (vacant, low_battery, demand, empty_chargers, chargers),
/// regions in row-major order. `buf_len` is in doubles.
///
/// # Safety
/// `sim` must be live; `buf` must point to `buf_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rocoma_sim_observe(
    sim: *const RocomaSim,
    buf: *mut c_double,
    buf_len: usize,
) -> i32 {
    guarded(|| {
        let Some(handle) = (unsafe { sim.as_ref() }) else {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "sim is null");
        };
        if buf.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "buf is null");
        }
        let state = handle.sim.observe();
        let needed = state.regions.len() * ROCOMA_REGION_FIELDS;
        if buf_len < needed {
            return fail(
                ROCOMA_ERR_BUFFER_TOO_SMALL,
                &format!("observation needs {needed} doubles, buffer has {buf_len}"),
            );
        }
        let out = unsafe { std::slice::from_raw_parts_mut(buf, needed) };
        for (i, r) in state.regions.iter().enumerate() {
            let base = i * ROCOMA_REGION_FIELDS;
            out[base] = r.vacant as f64;
            out[base + 1] = r.low_battery as f64;
            out[base + 2] = r.demand as f64;
            out[base + 3] = r.empty_chargers as f64;
            out[base + 4] = r.chargers as f64;
        }
        ROCOMA_OK
    })
}

/// Step counter and time-of-day fraction of the current state.
///
/// # Safety
/// `sim` must be live; `step` and `time_of_day` may each be null to skip.
#[no_mangle]
pub unsafe extern "C" fn rocoma_sim_time(
    sim: *const RocomaSim,
    step: *mut u64,
    time_of_day: *mut c_double,
) -> i32 {
    guarded(|| {
        let Some(handle) = (unsafe { sim.as_ref() }) else {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "sim is null");
        };
        let state = handle.sim.observe();
        if !step.is_null() {
            unsafe { *step = state.t };
        }
        if !time_of_day.is_null() {
            unsafe { *time_of_day = state.time_of_day };
        }
        ROCOMA_OK
    })
}

/// Convert a padded action buffer (2·NUM_SLOTS doubles per region) to the
/// neighborhood-aligned representation, validating off-grid slots are zero.
fn padded_to_action(
    sim: &Sim,
    buf: &[c_double],
) -> Result<RebalanceAction, (i32, String)> {
    let grid = sim.grid();
    let n = grid.len();
    let needed = n * 2 * NUM_SLOTS;
    if buf.len() < needed {
        return Err((
            ROCOMA_ERR_BUFFER_TOO_SMALL,
            format!("action needs {needed} doubles, buffer has {}", buf.len()),
        ));
    }
    let mut vacant = Vec::with_capacity(n);
    let mut low = Vec::with_capacity(n);
    for i in 0..n {
        let (r, c) = (i / grid.cols(), i % grid.cols());
        for (group, dst) in [(0usize, &mut vacant), (1usize, &mut low)] {
            let base = i * 2 * NUM_SLOTS + group * NUM_SLOTS;
            let mut weights = Vec::with_capacity(NUM_SLOTS);
            for (k, (dr, dc)) in SLOT_OFFSETS.iter().enumerate() {
                let x = buf[base + k];
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                let in_grid =
                    rr >= 0 && cc >= 0 && (rr as usize) < grid.rows() && (cc as usize) < grid.cols();
                if in_grid {
                    weights.push(x);
                } else if x.abs() > 1e-9 {
                    return Err((
                        ROCOMA_ERR_INVALID_ARGUMENT,
                        format!("region {i} slot {k} points off the grid but has weight {x}"),
                    ));
                }
            }
            dst.push(weights);
        }
    }
    Ok(RebalanceAction { vacant, low_battery: low })
}

fn action_to_padded(sim: &Sim, action: &RebalanceAction, buf: &mut [c_double]) {
    let grid = sim.grid();
    let n = grid.len();
    for x in buf.iter_mut() {
        *x = 0.0;
    }
    for i in 0..n {
        let (r, c) = (i / grid.cols(), i % grid.cols());
        for (group, src) in [(0usize, &action.vacant[i]), (1, &action.low_battery[i])] {
            let base = i * 2 * NUM_SLOTS + group * NUM_SLOTS;
            let mut next = 0usize;
            for (k, (dr, dc)) in SLOT_OFFSETS.iter().enumerate() {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                let in_grid =
                    rr >= 0 && cc >= 0 && (rr as usize) < grid.rows() && (cc as usize) < grid.cols();
                if in_grid {
                    buf[base + k] = src[next];
                    next += 1;
                }
            }
        }
    }
}

/// Apply one action and advance the simulator one step. `action` uses the
/// padded layout; `reward` and `cost` may each be null to skip.
///
/// # Safety
/// `sim` must be live; `action` must point to `action_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rocoma_sim_step(
    sim: *mut RocomaSim,
    action: *const c_double,
    action_len: usize,
    reward: *mut c_double,
    cost: *mut c_double,
) -> i32 {
    guarded(|| {
        let Some(handle) = (unsafe { sim.as_mut() }) else {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "sim is null");
        };
        if action.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "action is null");
        }
        let buf = unsafe { std::slice::from_raw_parts(action, action_len) };
        let act = match padded_to_action(&handle.sim, buf) {
            Ok(a) => a,
            Err((code, msg)) => return fail(code, &msg),
        };
        let mut rng = handle.rng.clone();
        match handle.sim.step(&act, &mut rng) {
            Ok(out) => {
                handle.rng = rng;
                if !reward.is_null() {
                    unsafe { *reward = out.reward };
                }
                if !cost.is_null() {
                    unsafe { *cost = out.cost };
                }
                ROCOMA_OK
            }
            Err(e) => fail(ROCOMA_ERR_INVALID_ARGUMENT, &format!("step rejected: {e}")),
        }
    })
}

/// Create a baseline policy. `name` is one of "no", "edp", "rdp", "cop".
///
/// # Safety
/// `name` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rocoma_policy_baseline(
    name: *const c_char,
    seed: u64,
    out: *mut *mut RocomaPolicy,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "out is null");
        }
        let name = match unsafe { cstr_arg(name, "name") } {
            Ok(n) => n,
            Err((code, msg)) => return fail(code, &msg),
        };
        let kind: BaselineKind = match name.parse() {
            Ok(k) => k,
            Err(e) => return fail(ROCOMA_ERR_INVALID_ARGUMENT, &format!("{e}")),
        };
        let handle = Box::new(RocomaPolicy {
            policy: PolicyImpl::Baseline(BaselinePolicy::new(kind, CostWeights::default())),
            rng: stream_rng(seed, stream::POLICY, 0),
        });
        unsafe { *out = Box::into_raw(handle) };
        ROCOMA_OK
    })
}

/// Load a trained policy from a checkpoint file produced by `rocoma train`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rocoma_policy_load(
    path: *const c_char,
    seed: u64,
    out: *mut *mut RocomaPolicy,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "out is null");
        }
        let path = match unsafe { cstr_arg(path, "path") } {
            Ok(p) => p,
            Err((code, msg)) => return fail(code, &msg),
        };
        let ck = match Checkpoint::load(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(code_for(&e), &format!("checkpoint load failed: {e}")),
        };
        let policy = match load_policy(&ck) {
            Ok(p) => p,
            Err(e) => return fail(ROCOMA_ERR_CONFIG, &format!("checkpoint rejected: {e}")),
        };
        let handle = Box::new(RocomaPolicy {
            policy: PolicyImpl::Trained(policy),
            rng: stream_rng(seed, stream::POLICY, 0),
        });
        unsafe { *out = Box::into_raw(handle) };
        ROCOMA_OK
    })
}

/// Destroy a policy handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn rocoma_policy_free(policy: *mut RocomaPolicy) {
    if !policy.is_null() {
        drop(unsafe { Box::from_raw(policy) });
    }
}

/// Sample an action for the simulator's current state into `action_out`
/// (padded layout, `2 * ROCOMA_NUM_SLOTS` doubles per region). Advances the
/// policy's private RNG.
///
/// # Safety
/// Both handles must be live; `action_out` must point to `action_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rocoma_policy_act(
    policy: *mut RocomaPolicy,
    sim: *const RocomaSim,
    action_out: *mut c_double,
    action_len: usize,
) -> i32 {
    guarded(|| {
        let Some(pol) = (unsafe { policy.as_mut() }) else {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "policy is null");
        };
        let Some(handle) = (unsafe { sim.as_ref() }) else {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "sim is null");
        };
        if action_out.is_null() {
            return fail(ROCOMA_ERR_NULL_ARGUMENT, "action_out is null");
        }
        let grid = handle.sim.grid();
        let needed = grid.len() * 2 * NUM_SLOTS;
        if action_len < needed {
            return fail(
                ROCOMA_ERR_BUFFER_TOO_SMALL,
                &format!("action needs {needed} doubles, buffer has {action_len}"),
            );
        }
        let state = handle.sim.observe();
        let mut rng = pol.rng.clone();
        let action = match &pol.policy {
            PolicyImpl::Baseline(b) => b.act(&state, grid, &mut rng),
            PolicyImpl::Trained(p) => p.act(&state, grid, &mut rng),
        };
        pol.rng = rng;
        let out = unsafe { std::slice::from_raw_parts_mut(action_out, needed) };
        action_to_padded(&handle.sim, &action, out);
        ROCOMA_OK
    })
}
