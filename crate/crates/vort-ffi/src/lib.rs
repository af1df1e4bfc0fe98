//! C ABI over the vort kernels: GL weights, certified SOE construction, bank
//! states and keyed retrieval accumulators.
//!
//! Every fallible call returns a [`VortStatus`]. Objects are opaque handles
//! created by `*_new`/`*_build` and released with the matching `*_free`.
//! The message of the most recent failure on the calling thread is available
//! from [`vort_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::ptr;
use std::slice;

use vort::banks::{bank_fractional_state, bank_step, build_bank_kernels, BankState, RoutingConfig};
use vort::gl_kernel::gl_weights;
use vort::retrieval::{accum_step, retrieve, FeatureMap, RetrievalAccumulators};
use vort::soe::{build_soe, SoeApprox, TailPolicy};
use vort::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VortStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Dimension = 3,
    OutOfRange = 4,
    Certification = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Certified sum-of-exponentials approximation.
pub struct VortSoe(SoeApprox);

/// K fixed-order banks of SOE accumulators over d_v-vectors.
pub struct VortBankState(BankState);

/// Keyed retrieval accumulators with their feature map.
pub struct VortAccumulators {
    acc: RetrievalAccumulators,
    fm: FeatureMap,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: Error) -> VortStatus {
    set_error(&e.to_string());
    match e {
        Error::Domain(_) | Error::NonFinite(_) => VortStatus::Domain,
        Error::Dimension { .. } => VortStatus::Dimension,
        Error::OutOfRange { .. } => VortStatus::OutOfRange,
        Error::Certification { .. } => VortStatus::Certification,
        _ => VortStatus::Internal,
    }
}

fn null(what: &str) -> VortStatus {
    set_error(&format!("null pointer: {what}"));
    VortStatus::NullPointer
}

fn copy_out(src: &[f64], out: *mut f64, out_len: usize) -> VortStatus {
    if out.is_null() {
        return null("out");
    }
    if out_len < src.len() {
        set_error(&format!("output buffer holds {out_len} values, need {}", src.len()));
        return VortStatus::BufferTooSmall;
    }
    // SAFETY: caller guarantees `out` points to `out_len` writable doubles.
    unsafe { slice::from_raw_parts_mut(out, src.len()) }.copy_from_slice(src);
    VortStatus::Ok
}

/// # Safety
/// `p` must be null or point to `len` readable doubles.
unsafe fn input<'a>(p: *const f64, len: usize) -> Option<&'a [f64]> {
    if p.is_null() {
        None
    } else {
        Some(slice::from_raw_parts(p, len))
    }
}

/// Pointer to a NUL-terminated message for the last failure on this thread.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vort_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Writes w_0..w_{j_max} into `out` (length ≥ j_max + 1).
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vort_gl_weights(alpha: f64, j_max: usize, out: *mut f64, out_len: usize) -> VortStatus {
    match gl_weights(alpha, j_max) {
        Ok(w) => copy_out(&w.values, out, out_len),
        Err(e) => fail(e),
    }
}

/// Smallest-S SOE with max_{j≤T}|ŵ_j − w_j| ≤ eps.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn vort_soe_build(alpha: f64, horizon: usize, eps: f64, out: *mut *mut VortSoe) -> VortStatus {
    if out.is_null() {
        return null("out");
    }
    *out = ptr::null_mut();
    match build_soe(alpha, horizon, eps) {
        Ok(a) => {
            *out = Box::into_raw(Box::new(VortSoe(a)));
            VortStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Number of terms S, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vort_soe_terms(h: *const VortSoe) -> usize {
    h.as_ref().map_or(0, |s| s.0.terms())
}

/// Certified max error over j ≤ T.
///
/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vort_soe_certified_error(h: *const VortSoe, out: *mut f64) -> VortStatus {
    let Some(s) = h.as_ref() else { return null("handle") };
    if out.is_null() {
        return null("out");
    }
    *out = s.0.certified_error.unwrap_or(f64::NAN);
    VortStatus::Ok
}

/// Coefficients c_s and rates λ_s = e^{−ξ_s}, each of length S.
///
/// # Safety
/// `coeffs` and `rates` must each hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vort_soe_terms_data(h: *const VortSoe, coeffs: *mut f64, rates: *mut f64, len: usize) -> VortStatus {
    let Some(s) = h.as_ref() else { return null("handle") };
    match copy_out(&s.0.coeffs, coeffs, len) {
        VortStatus::Ok => copy_out(&s.0.rates, rates, len),
        st => st,
    }
}

/// ŵ_0..ŵ_{j_max}.
///
/// # Safety
/// `out` must hold `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vort_soe_weights(h: *const VortSoe, j_max: usize, out: *mut f64, out_len: usize) -> VortStatus {
    let Some(s) = h.as_ref() else { return null("handle") };
    copy_out(&s.0.weights(j_max), out, out_len)
}

/// # Safety
/// `h` must be null or a handle from [`vort_soe_build`], freed once.
#[no_mangle]
pub unsafe extern "C" fn vort_soe_free(h: *mut VortSoe) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// K banks at orders δ + (1−δ)k/K (the last at 1), each an S-term SOE on
/// the horizon-derived interval.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn vort_bank_state_new(
    delta: f64,
    banks: usize,
    horizon: usize,
    eps: f64,
    terms: usize,
    d_v: usize,
    out: *mut *mut VortBankState,
) -> VortStatus {
    if out.is_null() {
        return null("out");
    }
    *out = ptr::null_mut();
    if d_v == 0 {
        return fail(Error::Domain("d_v must be >= 1".into()));
    }
    let built = RoutingConfig::new(delta, banks, 1)
        .and_then(|cfg| build_bank_kernels(&cfg, horizon, eps, terms, TailPolicy::Horizon));
    match built {
        Ok(k) => {
            *out = Box::into_raw(Box::new(VortBankState(BankState::new(k, d_v))));
            VortStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// One token: every bank decays, bank `bank` (1-based) adds v.
///
/// # Safety
/// `h` must be a live handle and `v` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vort_bank_step(h: *mut VortBankState, v: *const f64, len: usize, bank: usize) -> VortStatus {
    let Some(s) = h.as_mut() else { return null("handle") };
    let Some(v) = input(v, len) else { return null("v") };
    bank_step(&mut s.0, v, bank).map_or_else(fail, |_| VortStatus::Ok)
}

/// M^{(k)}_t for bank `bank` (1-based).
///
/// # Safety
/// `h` must be a live handle and `out` hold `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vort_bank_state_read(h: *const VortBankState, bank: usize, out: *mut f64, out_len: usize) -> VortStatus {
    let Some(s) = h.as_ref() else { return null("handle") };
    match bank_fractional_state(&s.0, bank) {
        Ok(m) => copy_out(&m, out, out_len),
        Err(e) => fail(e),
    }
}

/// # Safety
/// `h` must be null or a handle from [`vort_bank_state_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn vort_bank_state_free(h: *mut VortBankState) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Retrieval accumulators over K banks with a seeded positive random
/// feature map R^{d_k} → R^{d_φ}.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn vort_accumulators_new(
    delta: f64,
    banks: usize,
    horizon: usize,
    eps: f64,
    terms: usize,
    d_k: usize,
    d_phi: usize,
    d_v: usize,
    seed: u64,
    out: *mut *mut VortAccumulators,
) -> VortStatus {
    if out.is_null() {
        return null("out");
    }
    *out = ptr::null_mut();
    if d_k == 0 || d_phi == 0 || d_v == 0 {
        return fail(Error::Domain("dimensions must be >= 1".into()));
    }
    let built = RoutingConfig::new(delta, banks, 1)
        .and_then(|cfg| build_bank_kernels(&cfg, horizon, eps, terms, TailPolicy::Horizon));
    match built {
        Ok(k) => {
            let acc = RetrievalAccumulators::new(k, d_phi, d_v);
            *out = Box::into_raw(Box::new(VortAccumulators { acc, fm: FeatureMap::new(d_k, d_phi, seed) }));
            VortStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Decay every bank, then add (φ(key), value) to bank `bank` (1-based).
///
/// # Safety
/// `h` must be a live handle; `key` holds `key_len` and `value` `value_len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn vort_accumulators_step(
    h: *mut VortAccumulators,
    key: *const f64,
    key_len: usize,
    value: *const f64,
    value_len: usize,
    bank: usize,
) -> VortStatus {
    let Some(s) = h.as_mut() else { return null("handle") };
    let Some(k) = input(key, key_len) else { return null("key") };
    let Some(v) = input(value, value_len) else { return null("value") };
    accum_step(&mut s.acc, &s.fm, k, v, bank).map_or_else(fail, |_| VortStatus::Ok)
}

/// Normalised readout for `query` into `out` (length d_v).
///
/// # Safety
/// `h` must be a live handle; `query` holds `query_len` doubles and `out`
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vort_accumulators_retrieve(
    h: *mut VortAccumulators,
    query: *const f64,
    query_len: usize,
    out: *mut f64,
    out_len: usize,
) -> VortStatus {
    let Some(s) = h.as_mut() else { return null("handle") };
    let Some(q) = input(query, query_len) else { return null("query") };
    match retrieve(&mut s.acc, q, &s.fm) {
        Ok(o) => copy_out(&o, out, out_len),
        Err(e) => fail(e),
    }
}

/// # Safety
/// `h` must be null or a handle from [`vort_accumulators_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn vort_accumulators_free(h: *mut VortAccumulators) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
