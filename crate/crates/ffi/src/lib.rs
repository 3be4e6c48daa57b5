//! C ABI over the `latt` kernels.
//!
//! Tensors cross the boundary as opaque [`LattTensor`] handles holding f64
//! data in row-major order. Every fallible call returns a [`LattStatus`];
//! the message of the last failure on the calling thread is available from
//! [`latt_last_error`]. Handles are freed with their `_free` function;
//! passing null to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use latt::elsa::{elsa_forward, hadamard_attention, ElsaConfig, ElsaParams, Variant};
use latt::model::{count_params_flops, Architecture};
use latt::paradigm::{unified_forward, Preset, RelPosTables};
use latt::rng::SeedSplitter;
use latt::{Error, Tensor};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LattStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Unknown = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Hadamard attention variants.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LattVariant {
    StrictUnfold = 0,
    ShiftConv = 1,
    MergedConv = 2,
    Production = 3,
}

/// Variants arrive as plain integers so out-of-range values are rejected
/// rather than undefined.
fn parse_variant(code: u32) -> Result<Variant, (LattStatus, String)> {
    Ok(match code {
        c if c == LattVariant::StrictUnfold as u32 => Variant::StrictUnfold,
        c if c == LattVariant::ShiftConv as u32 => Variant::ShiftConv,
        c if c == LattVariant::MergedConv as u32 => Variant::MergedConv,
        c if c == LattVariant::Production as u32 => Variant::Production,
        c => return Err((LattStatus::InvalidArgument, format!("variant code {c}"))),
    })
}

/// Opaque f64 tensor.
pub struct LattTensor {
    inner: Tensor<f64>,
}

/// Opaque ELSA parameter set.
pub struct LattElsa {
    inner: ElsaParams<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> LattStatus {
    match err {
        Error::Shape(_) | Error::IndivisibleWindow { .. } | Error::HeadsChannels { .. } => LattStatus::ShapeMismatch,
        Error::NaN(_) | Error::Diverged { .. } => LattStatus::NonFinite,
        Error::Unknown { .. } => LattStatus::Unknown,
        Error::EvenKernel(_) | Error::DegenerateFilterAxis | Error::Config(_) | Error::Parse { .. } => {
            LattStatus::InvalidArgument
        }
        _ => LattStatus::Internal,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (LattStatus, String)>) -> LattStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LattStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LattStatus::Internal
        }
    }
}

fn lift(err: Error) -> (LattStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (LattStatus, String) {
    (LattStatus::NullPointer, format!("null pointer: {what}"))
}

unsafe fn tensor_ref<'a>(t: *const LattTensor, what: &str) -> Result<&'a Tensor<f64>, (LattStatus, String)> {
    t.as_ref().map(|t| &t.inner).ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (LattStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, (LattStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (LattStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn latt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static description of a [`LattStatus`] code.
#[no_mangle]
pub extern "C" fn latt_status_str(status: u32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null pointer",
        2 => c"invalid argument",
        3 => c"shape mismatch",
        4 => c"non-finite value",
        5 => c"unknown name",
        6 => c"buffer too small",
        7 => c"internal error",
        _ => c"unrecognized status",
    };
    s.as_ptr()
}

/// Copy `data` (product of `dims` elements) into a new tensor.
///
/// # Safety
/// `dims` must point to `ndim` values and `data` to their product.
#[no_mangle]
pub unsafe extern "C" fn latt_tensor_new(
    dims: *const usize,
    ndim: usize,
    data: *const f64,
    out: *mut *mut LattTensor,
) -> LattStatus {
    guard(|| {
        if dims.is_null() && ndim > 0 {
            return Err(null("dims"));
        }
        let dims = if ndim == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(dims, ndim)
        };
        let len: usize = dims.iter().product();
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let values = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        let inner = Tensor::new(dims, values).map_err(lift)?;
        put(out, LattTensor { inner })
    })
}

/// # Safety
/// `t` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn latt_tensor_free(t: *mut LattTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of dimensions; 0 for null.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latt_tensor_ndim(t: *const LattTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.ndim())
}

/// Number of elements; 0 for null.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn latt_tensor_len(t: *const LattTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.len())
}

/// Copy the extents into `dims` (capacity `cap`).
///
/// # Safety
/// `t` must be a live handle and `dims` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn latt_tensor_dims(t: *const LattTensor, dims: *mut usize, cap: usize) -> LattStatus {
    guard(|| {
        let t = tensor_ref(t, "tensor")?;
        copy_out(t.dims(), dims, cap)
    })
}

/// Copy the elements into `data` (capacity `cap`).
///
/// # Safety
/// `t` must be a live handle and `data` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn latt_tensor_data(t: *const LattTensor, data: *mut f64, cap: usize) -> LattStatus {
    guard(|| {
        let t = tensor_ref(t, "tensor")?;
        copy_out(t.data(), data, cap)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize) -> Result<(), (LattStatus, String)> {
    if cap < src.len() {
        return Err((
            LattStatus::BufferTooSmall,
            format!("need {} elements, buffer holds {cap}", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if dst.is_null() {
        return Err(null("buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Randomly initialized ELSA parameters (ghost head on, lambda = gamma = 1,
/// projection biases, full relative tables).
///
/// # Safety
/// `out` must be valid for writing a handle.
#[no_mangle]
pub unsafe extern "C" fn latt_elsa_new(
    channels: usize,
    heads: usize,
    kernel: usize,
    seed: u64,
    out: *mut *mut LattElsa,
) -> LattStatus {
    guard(|| {
        let cfg = ElsaConfig::new(channels, heads, kernel);
        let mut rng = SeedSplitter::new(seed).stream("ffi/elsa");
        let inner = ElsaParams::init(cfg, &mut rng).map_err(lift)?;
        put(out, LattElsa { inner })
    })
}

/// # Safety
/// `e` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn latt_elsa_free(e: *mut LattElsa) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Full ELSA block on `x: (B, C, H, W)`; `variant` is a [`LattVariant`].
///
/// # Safety
/// Handles must be live; `out` must be valid for writing a handle.
#[no_mangle]
pub unsafe extern "C" fn latt_elsa_forward(
    e: *const LattElsa,
    x: *const LattTensor,
    variant: u32,
    out: *mut *mut LattTensor,
) -> LattStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(|| null("elsa"))?;
        let x = tensor_ref(x, "x")?;
        let y = elsa_forward(x, &e.inner, parse_variant(variant)?).map_err(lift)?;
        put(out, LattTensor { inner: y })
    })
}

/// Normalized Hadamard attention `(B, G, K*K, H, W)` for queries and keys;
/// `variant` is a [`LattVariant`].
///
/// # Safety
/// Handles must be live; `out` must be valid for writing a handle.
#[no_mangle]
pub unsafe extern "C" fn latt_hadamard_attention(
    e: *const LattElsa,
    q: *const LattTensor,
    k: *const LattTensor,
    variant: u32,
    out: *mut *mut LattTensor,
) -> LattStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(|| null("elsa"))?;
        let (q, k) = (tensor_ref(q, "q")?, tensor_ref(k, "k")?);
        let h = hadamard_attention(q, k, &e.inner, parse_variant(variant)?).map_err(lift)?;
        put(out, LattTensor { inner: h.values })
    })
}

/// Unified local operation under a named preset with relative tables drawn
/// from `seed`. `size` is the window or kernel size.
///
/// # Safety
/// Handles must be live, `preset` a NUL-terminated string and `out` valid
/// for writing a handle.
#[no_mangle]
pub unsafe extern "C" fn latt_unified_forward(
    q: *const LattTensor,
    k: *const LattTensor,
    v: *const LattTensor,
    preset: *const c_char,
    heads: usize,
    size: usize,
    seed: u64,
    out: *mut *mut LattTensor,
) -> LattStatus {
    guard(|| {
        let (q, k, v) = (tensor_ref(q, "q")?, tensor_ref(k, "k")?, tensor_ref(v, "v")?);
        let preset: Preset = c_str(preset, "preset")?.parse().map_err(lift)?;
        let [_, c, _, _] = q.dims4().map_err(lift)?;
        let cfg = preset.config(c, heads, size).map_err(lift)?;
        let tables = RelPosTables::init(&cfg, &mut SeedSplitter::new(seed).stream("ffi/tables"));
        let y = unified_forward(q, k, v, &tables, &cfg).map_err(lift)?;
        put(out, LattTensor { inner: y })
    })
}

/// Parameter and multiply-accumulate counts of a named architecture.
///
/// # Safety
/// `arch` must be a NUL-terminated string; `params` and `flops` valid for
/// writing.
#[no_mangle]
pub unsafe extern "C" fn latt_count_params_flops(
    arch: *const c_char,
    resolution: usize,
    params: *mut u64,
    flops: *mut u64,
) -> LattStatus {
    guard(|| {
        let arch: Architecture = c_str(arch, "arch")?.parse().map_err(lift)?;
        if params.is_null() || flops.is_null() {
            return Err(null("params/flops"));
        }
        let c = count_params_flops(&arch.config(), resolution).map_err(lift)?;
        *params = c.params;
        *flops = c.flops;
        Ok(())
    })
}
