//! C ABI over the privacy accountant and the sampling-probability
//! estimator, so other languages can bind the numeric core.
//!
//! Conventions: handles are opaque pointers created and freed here;
//! results come back through out-pointers; every function returns an
//! [`rpdp_status`] code. The matching declarations live in
//! `include/rpdp.h`, which is maintained by hand alongside this file.

#![allow(non_camel_case_types, clippy::not_unsafe_ptr_arg_deref)]

use std::ptr;

use rpdp::accountant::{
    alpha_grid_to, fl_epsilon, gaussian_rdp, subsampled_gaussian_rdp, MechanismParams, Threat,
};
use rpdp::scf::{fit_exponential, q_grid, simulate_observations, ExpFit};
use rpdp::Error;

/// Status codes returned by every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(non_camel_case_types)]
pub enum rpdp_status {
    RPDP_OK = 0,
    RPDP_ERR_DOMAIN = 1,
    RPDP_ERR_FIT = 2,
    RPDP_ERR_NO_CONVERGENCE = 3,
    RPDP_ERR_NULL_POINTER = 4,
    RPDP_ERR_INTERNAL = 5,
}

use rpdp_status::*;

fn status_of(err: &Error) -> rpdp_status {
    match err {
        Error::Domain(_) | Error::Config(_) | Error::Data(_) => RPDP_ERR_DOMAIN,
        Error::Fit(_) => RPDP_ERR_FIT,
        Error::NoConvergence(_) => RPDP_ERR_NO_CONVERGENCE,
        Error::Invariant(_) | Error::Io(_) => RPDP_ERR_INTERNAL,
    }
}

/// Opaque mechanism-parameter handle.
pub struct rpdp_params(MechanismParams);

/// Opaque fitted-estimator handle.
pub struct rpdp_fit(ExpFit);

/// Create a mechanism-parameter handle. `threat_client` selects the
/// client/third-party adversary when nonzero, the honest-but-curious
/// server otherwise. Returns null on invalid arguments.
#[no_mangle]
pub extern "C" fn rpdp_params_new(
    sigma: f64,
    clip: f64,
    delta: f64,
    local_steps: u32,
    rounds: u32,
    client_prob: f64,
    threat_client: i32,
    max_alpha: u32,
) -> *mut rpdp_params {
    let params = MechanismParams {
        sigma,
        clip,
        delta,
        local_steps,
        rounds,
        client_prob,
        alpha_grid: alpha_grid_to(max_alpha.max(2)),
        threat: if threat_client != 0 {
            Threat::ClientOrThirdParty
        } else {
            Threat::Server
        },
    };
    match params.validate() {
        Ok(()) => Box::into_raw(Box::new(rpdp_params(params))),
        Err(_) => ptr::null_mut(),
    }
}

#[no_mangle]
pub extern "C" fn rpdp_params_free(params: *mut rpdp_params) {
    if !params.is_null() {
        drop(unsafe { Box::from_raw(params) });
    }
}

/// RDP of the plain Gaussian mechanism: α·L²/(2σ²).
#[no_mangle]
pub extern "C" fn rpdp_gaussian_rdp(alpha: u32, sigma: f64, clip: f64, out: *mut f64) -> rpdp_status {
    if out.is_null() {
        return RPDP_ERR_NULL_POINTER;
    }
    match gaussian_rdp(alpha, sigma, clip) {
        Ok(v) => {
            unsafe { *out = v };
            RPDP_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Per-step RDP bound of the Poisson-subsampled Gaussian mechanism at
/// unit sensitivity.
#[no_mangle]
pub extern "C" fn rpdp_subsampled_gaussian_rdp(
    alpha: u32,
    q: f64,
    sigma: f64,
    out: *mut f64,
) -> rpdp_status {
    if out.is_null() {
        return RPDP_ERR_NULL_POINTER;
    }
    match subsampled_gaussian_rdp(alpha, q, sigma) {
        Ok(v) => {
            unsafe { *out = v };
            RPDP_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Optimal full-run DP budget ε*(q) and the order achieving it.
/// `out_alpha` may be null if the order is not needed.
#[no_mangle]
pub extern "C" fn rpdp_fl_epsilon(
    params: *const rpdp_params,
    q: f64,
    out_eps: *mut f64,
    out_alpha: *mut u32,
) -> rpdp_status {
    if params.is_null() || out_eps.is_null() {
        return RPDP_ERR_NULL_POINTER;
    }
    let params = unsafe { &*params };
    match fl_epsilon(q, &params.0) {
        Ok(point) => {
            unsafe {
                *out_eps = point.epsilon;
                if !out_alpha.is_null() {
                    *out_alpha = point.alpha_star;
                }
            }
            RPDP_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Simulate the ε*(q) grid (`q_floor`, 50 geometric + 50 linear points)
/// and fit the exponential estimator. The handle must be released with
/// `rpdp_fit_free`.
#[no_mangle]
pub extern "C" fn rpdp_fit_new(
    params: *const rpdp_params,
    q_floor: f64,
    out: *mut *mut rpdp_fit,
) -> rpdp_status {
    if params.is_null() || out.is_null() {
        return RPDP_ERR_NULL_POINTER;
    }
    let params = unsafe { &*params };
    let result = q_grid(q_floor, 50, 50)
        .and_then(|grid| simulate_observations(&params.0, &grid))
        .and_then(|obs| fit_exponential(&obs));
    match result {
        Ok(fit) => {
            unsafe { *out = Box::into_raw(Box::new(rpdp_fit(fit))) };
            RPDP_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Rebuild an estimator handle from previously exported coefficients.
#[no_mangle]
pub extern "C" fn rpdp_fit_load(
    a: f64,
    b: f64,
    c: f64,
    r_squared: f64,
    eps_full: f64,
    q_floor: f64,
    out: *mut *mut rpdp_fit,
) -> rpdp_status {
    if out.is_null() {
        return RPDP_ERR_NULL_POINTER;
    }
    if !a.is_finite() || a <= 0.0 || !eps_full.is_finite() || eps_full <= 0.0 {
        return RPDP_ERR_DOMAIN;
    }
    if !(q_floor > 0.0 && q_floor < 1.0) {
        return RPDP_ERR_DOMAIN;
    }
    let fit = ExpFit {
        a,
        b,
        c,
        r_squared,
        eps_full,
        q_floor,
    };
    unsafe { *out = Box::into_raw(Box::new(rpdp_fit(fit))) };
    RPDP_OK
}

/// Map a personalized budget ε to a sampling probability. Budgets below
/// the achievable range yield q = 0 with `out_never_sampled` set to 1.
#[no_mangle]
pub extern "C" fn rpdp_fit_estimate_q(
    fit: *const rpdp_fit,
    eps: f64,
    out_q: *mut f64,
    out_never_sampled: *mut i32,
) -> rpdp_status {
    if fit.is_null() || out_q.is_null() {
        return RPDP_ERR_NULL_POINTER;
    }
    let fit = unsafe { &*fit };
    match fit.0.estimate_q(eps) {
        Ok(estimate) => {
            unsafe {
                *out_q = estimate.q;
                if !out_never_sampled.is_null() {
                    *out_never_sampled = i32::from(estimate.never_sampled);
                }
            }
            RPDP_OK
        }
        Err(e) => status_of(&e),
    }
}

/// Export the fitted coefficients. Null out-pointers are skipped.
#[no_mangle]
pub extern "C" fn rpdp_fit_coefficients(
    fit: *const rpdp_fit,
    a: *mut f64,
    b: *mut f64,
    c: *mut f64,
    r_squared: *mut f64,
    eps_full: *mut f64,
    q_floor: *mut f64,
) -> rpdp_status {
    if fit.is_null() {
        return RPDP_ERR_NULL_POINTER;
    }
    let fit = unsafe { &*fit };
    unsafe {
        if !a.is_null() {
            *a = fit.0.a;
        }
        if !b.is_null() {
            *b = fit.0.b;
        }
        if !c.is_null() {
            *c = fit.0.c;
        }
        if !r_squared.is_null() {
            *r_squared = fit.0.r_squared;
        }
        if !eps_full.is_null() {
            *eps_full = fit.0.eps_full;
        }
        if !q_floor.is_null() {
            *q_floor = fit.0.q_floor;
        }
    }
    RPDP_OK
}

#[no_mangle]
pub extern "C" fn rpdp_fit_free(fit: *mut rpdp_fit) {
    if !fit.is_null() {
        drop(unsafe { Box::from_raw(fit) });
    }
}
