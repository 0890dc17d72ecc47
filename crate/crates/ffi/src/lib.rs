//! C ABI for the differentiable top-k selection library.
//!
//! Conventions:
//! - Every fallible function returns a [`ShivaStatus`]; outputs go through
//!   caller-allocated buffers or out-pointers.
//! - Matrices are row-major `double` arrays with explicit dimensions.
//! - `ShivaRouter` and `ShivaPolicy` are opaque handles created by the
//!   `*_new` constructors and released with the matching `*_free`. Handles
//!   are not thread-safe for concurrent mutation; concurrent reads are
//!   fine.
//!
//! The header `include/shiva.h` is generated by cbindgen at build time.

use shiva_core::policy::{RatioPolicyConfig, RatioPolicyParams};
use shiva_core::router::{router_forward, RouterConfig, RouterParams};
use shiva_core::selection::hard_topk;
use shiva_core::softrank::{inclusion_prob, soft_rank};
use shiva_core::{Matrix, Rng, ShivaError};
use std::ffi::{c_char, CStr};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShivaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    IoError = 4,
    Utf8Error = 5,
    InternalError = 6,
}

fn status_of(err: &ShivaError) -> ShivaStatus {
    match err {
        ShivaError::InvalidArgument(_) => ShivaStatus::InvalidArgument,
        ShivaError::DimensionMismatch(_) => ShivaStatus::DimensionMismatch,
        ShivaError::Contract(_) => ShivaStatus::InvalidArgument,
        ShivaError::Config(_) => ShivaStatus::InvalidArgument,
        ShivaError::Io(_) => ShivaStatus::IoError,
        ShivaError::Serialization(_) => ShivaStatus::InvalidArgument,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn shiva_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn slice_out<'a>(ptr: *mut f64, len: usize) -> Option<&'a mut [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(ptr, len))
    }
}

/// Descending soft ranks of `scores` (length `n`) at temperature
/// `tau_rank`, written to `ranks_out` (length `n`).
///
/// # Safety
/// `scores` and `ranks_out` must point to `n` readable/writable doubles.
#[no_mangle]
pub unsafe extern "C" fn shiva_soft_rank(
    scores: *const f64,
    n: usize,
    tau_rank: f64,
    ranks_out: *mut f64,
) -> ShivaStatus {
    let (Some(scores), Some(out)) = (slice_arg(scores, n), slice_out(ranks_out, n)) else {
        return ShivaStatus::NullPointer;
    };
    match soft_rank(scores, tau_rank) {
        Ok(state) => {
            out.copy_from_slice(&state.ranks);
            ShivaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Inclusion probabilities for `scores` at continuous budget `k`:
/// sigmoid((k - rank_i) / tau_eff), tau_eff = tau_sel * n when
/// `normalized` is nonzero.
///
/// # Safety
/// `scores` and `probs_out` must point to `n` readable/writable doubles.
#[no_mangle]
pub unsafe extern "C" fn shiva_inclusion_probs(
    scores: *const f64,
    n: usize,
    tau_rank: f64,
    k: f64,
    tau_sel: f64,
    normalized: bool,
    probs_out: *mut f64,
) -> ShivaStatus {
    let (Some(scores), Some(out)) = (slice_arg(scores, n), slice_out(probs_out, n)) else {
        return ShivaStatus::NullPointer;
    };
    let state = match soft_rank(scores, tau_rank) {
        Ok(s) => s,
        Err(e) => return status_of(&e),
    };
    match inclusion_prob(&state, k, tau_sel, normalized) {
        Ok(probs) => {
            out.copy_from_slice(&probs.probs);
            ShivaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Deterministic top-k partition of `n` scores. Writes the selected
/// indices (ascending, exactly `k`) to `selected_out` and, when
/// `rejected_out` is non-null, the complement (exactly `n - k`).
///
/// # Safety
/// `scores` must point to `n` doubles; `selected_out` to `k` and
/// `rejected_out` (if non-null) to `n - k` writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn shiva_hard_topk(
    scores: *const f64,
    n: usize,
    k: usize,
    selected_out: *mut usize,
    rejected_out: *mut usize,
) -> ShivaStatus {
    let Some(scores) = slice_arg(scores, n) else {
        return ShivaStatus::NullPointer;
    };
    if selected_out.is_null() {
        return ShivaStatus::NullPointer;
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return ShivaStatus::InvalidArgument;
    }
    let x = Matrix::zeros(n, 1);
    match hard_topk(scores, k, &x) {
        Ok(outcome) => {
            std::slice::from_raw_parts_mut(selected_out, k)
                .copy_from_slice(&outcome.indices_sel);
            if !rejected_out.is_null() {
                std::slice::from_raw_parts_mut(rejected_out, n - k)
                    .copy_from_slice(&outcome.indices_rej);
            }
            ShivaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Opaque token-importance router handle.
pub struct ShivaRouter {
    params: RouterParams,
}

/// Creates a router scoring `dim_in`-dimensional tokens with optional
/// time/semantic context inputs (`dim_t` / `dim_c`; 0 disables) and the
/// given bottleneck width. Parameters are seeded deterministically.
///
/// # Safety
/// `out` must be a valid pointer to a `ShivaRouter*` slot.
#[no_mangle]
pub unsafe extern "C" fn shiva_router_new(
    dim_in: usize,
    dim_t: usize,
    dim_c: usize,
    bottleneck: usize,
    seed: u64,
    out: *mut *mut ShivaRouter,
) -> ShivaStatus {
    if out.is_null() {
        return ShivaStatus::NullPointer;
    }
    if dim_in == 0 || bottleneck < 2 {
        return ShivaStatus::InvalidArgument;
    }
    let mut rng = Rng::new(seed);
    let params = RouterParams::init(
        RouterConfig {
            dim_in,
            dim_t,
            dim_c,
            bottleneck,
        },
        &mut rng,
    );
    *out = Box::into_raw(Box::new(ShivaRouter { params }));
    ShivaStatus::Ok
}

/// # Safety
/// `router` must be a handle from `shiva_router_new`/`shiva_router_load_json`
/// that has not been freed; passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn shiva_router_free(router: *mut ShivaRouter) {
    if !router.is_null() {
        drop(Box::from_raw(router));
    }
}

/// Total learnable parameter count of the router.
///
/// # Safety
/// `router` must be a live handle; `count_out` a valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn shiva_router_param_count(
    router: *const ShivaRouter,
    count_out: *mut usize,
) -> ShivaStatus {
    if router.is_null() || count_out.is_null() {
        return ShivaStatus::NullPointer;
    }
    *count_out = (*router).params.param_count();
    ShivaStatus::Ok
}

/// Scores `n` tokens (row-major `n x dim_in`). Context pointers may be
/// null when the router was built without them (or to contribute zero);
/// `l_emb`, when non-null, must have bottleneck width. Scores are written
/// to `scores_out` (length `n`).
///
/// # Safety
/// All non-null pointers must reference buffers of the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn shiva_router_score(
    router: *const ShivaRouter,
    tokens: *const f64,
    n: usize,
    t_emb: *const f64,
    c_emb: *const f64,
    l_emb: *const f64,
    scores_out: *mut f64,
) -> ShivaStatus {
    if router.is_null() {
        return ShivaStatus::NullPointer;
    }
    let params = &(*router).params;
    let dim = params.config.dim_in;
    let (Some(tokens), Some(out)) = (slice_arg(tokens, n * dim), slice_out(scores_out, n))
    else {
        return ShivaStatus::NullPointer;
    };
    let x = match Matrix::from_vec(n, dim, tokens.to_vec()) {
        Ok(x) => x,
        Err(e) => return status_of(&e),
    };
    let t = slice_arg(t_emb, params.config.dim_t);
    let c = slice_arg(c_emb, params.config.dim_c);
    let l = slice_arg(l_emb, params.config.bottleneck);
    match router_forward(params, &x, t, c, l) {
        Ok((scores, _)) => {
            out.copy_from_slice(&scores);
            ShivaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Saves the router parameters as versioned JSON at `path`.
///
/// # Safety
/// `router` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn shiva_router_save_json(
    router: *const ShivaRouter,
    path: *const c_char,
) -> ShivaStatus {
    if router.is_null() || path.is_null() {
        return ShivaStatus::NullPointer;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return ShivaStatus::Utf8Error;
    };
    let json = match (*router).params.save_json() {
        Ok(j) => j,
        Err(e) => return status_of(&e),
    };
    match std::fs::write(path, json) {
        Ok(()) => ShivaStatus::Ok,
        Err(_) => ShivaStatus::IoError,
    }
}

/// Loads router parameters saved by `shiva_router_save_json`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` a valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn shiva_router_load_json(
    path: *const c_char,
    out: *mut *mut ShivaRouter,
) -> ShivaStatus {
    if path.is_null() || out.is_null() {
        return ShivaStatus::NullPointer;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return ShivaStatus::Utf8Error;
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(_) => return ShivaStatus::IoError,
    };
    match RouterParams::load_json(&text) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(ShivaRouter { params }));
            ShivaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Opaque retention-ratio policy handle.
pub struct ShivaPolicy {
    params: RatioPolicyParams,
}

/// Creates a fresh policy over `n_layers` layers anchored at `r_target`;
/// a fresh policy emits exactly `r_target` everywhere.
///
/// # Safety
/// `out` must be a valid pointer to a `ShivaPolicy*` slot.
#[no_mangle]
pub unsafe extern "C" fn shiva_policy_new(
    n_layers: usize,
    r_target: f64,
    seed: u64,
    out: *mut *mut ShivaPolicy,
) -> ShivaStatus {
    if out.is_null() {
        return ShivaStatus::NullPointer;
    }
    if n_layers == 0 {
        return ShivaStatus::InvalidArgument;
    }
    let mut rng = Rng::new(seed);
    match RatioPolicyParams::init(RatioPolicyConfig::new(n_layers, r_target), &mut rng) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(ShivaPolicy { params }));
            ShivaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// # Safety
/// `policy` must be a handle from `shiva_policy_new` that has not been
/// freed; passing null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn shiva_policy_free(policy: *mut ShivaPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Deterministic (noise-free) retention ratio at (t, layer).
///
/// # Safety
/// `policy` must be a live handle; `r_out` a valid out-pointer.
#[no_mangle]
pub unsafe extern "C" fn shiva_policy_ratio(
    policy: *const ShivaPolicy,
    t: f64,
    layer: usize,
    r_out: *mut f64,
) -> ShivaStatus {
    if policy.is_null() || r_out.is_null() {
        return ShivaStatus::NullPointer;
    }
    match (*policy).params.forward(t, layer, 0.0, None) {
        Ok((_, r, _)) => {
            *r_out = r;
            ShivaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Compiles the policy lookup table over `n_steps` timesteps into
/// `grid_out` (row-major `n_steps x n_layers`). Entries equal direct
/// policy evaluation bit-exactly.
///
/// # Safety
/// `t_steps` must point to `n_steps` doubles and `grid_out` to
/// `n_steps * n_layers` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn shiva_policy_compile_lut(
    policy: *const ShivaPolicy,
    t_steps: *const f64,
    n_steps: usize,
    grid_out: *mut f64,
) -> ShivaStatus {
    if policy.is_null() {
        return ShivaStatus::NullPointer;
    }
    let n_layers = (*policy).params.config.n_layers;
    let (Some(steps), Some(out)) = (
        slice_arg(t_steps, n_steps),
        slice_out(grid_out, n_steps * n_layers),
    ) else {
        return ShivaStatus::NullPointer;
    };
    match (*policy).params.compile_lut(steps) {
        Ok(lut) => {
            out.copy_from_slice(lut.grid.data());
            ShivaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Compiles the lookup table and writes it as CSV (rows = timesteps,
/// columns = layers) to `path`.
///
/// # Safety
/// `t_steps` must point to `n_steps` doubles; `path` must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn shiva_policy_lut_to_csv(
    policy: *const ShivaPolicy,
    t_steps: *const f64,
    n_steps: usize,
    path: *const c_char,
) -> ShivaStatus {
    if policy.is_null() || path.is_null() {
        return ShivaStatus::NullPointer;
    }
    let Some(steps) = slice_arg(t_steps, n_steps) else {
        return ShivaStatus::NullPointer;
    };
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return ShivaStatus::Utf8Error;
    };
    match (*policy).params.compile_lut(steps) {
        Ok(lut) => match std::fs::write(path, lut.to_csv()) {
            Ok(()) => ShivaStatus::Ok,
            Err(_) => ShivaStatus::IoError,
        },
        Err(e) => status_of(&e),
    }
}
