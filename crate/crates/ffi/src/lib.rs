//! C interface. Every function returns a [`VcStatus`]; on failure the message
//! is kept per thread and read with [`vc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use viscode::importance::predict_importance;
use viscode::models::{ModelError, ModelSet};
use viscode::pipeline::{decode_blocks, encode_with_map, PayloadEnvelope, PayloadKind, PipelineError};
use viscode::planner::{max_chars, PlanOptions};
use viscode::raster::ChartImage;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    ModelMissing = 3,
    BadImage = 4,
    CapacityExceeded = 5,
    DecodeFailed = 6,
    Internal = 99,
}

/// Payload kinds as stored in the envelope header.
pub const VC_KIND_METADATA: u8 = 0;
pub const VC_KIND_SOURCE: u8 = 1;
pub const VC_KIND_SPEC: u8 = 2;

/// Loaded importance and stego checkpoints.
pub struct VcModels {
    set: ModelSet,
}

/// Owned byte buffer handed to the caller.
pub struct VcBuffer {
    bytes: Vec<u8>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: VcStatus, msg: impl Into<String>) -> VcStatus {
    set_error(msg);
    status
}

fn pipeline_status(e: &PipelineError) -> VcStatus {
    match e {
        PipelineError::CapacityExceeded { .. } => VcStatus::CapacityExceeded,
        PipelineError::NoPositionCode | PipelineError::BlockDecodeFailed { .. } | PipelineError::ChecksumMismatch { .. } => {
            VcStatus::DecodeFailed
        }
        PipelineError::Importance(_) | PipelineError::Raster(_) => VcStatus::BadImage,
        _ => VcStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> VcStatus) -> VcStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(VcStatus::Internal, "panic inside viscode"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable bytes.
unsafe fn slice<'a>(ptr: *const u8, len: usize) -> Option<&'a [u8]> {
    if ptr.is_null() {
        return if len == 0 { Some(&[]) } else { None };
    }
    Some(std::slice::from_raw_parts(ptr, len))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn vc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Load `importance.bin` and `stego.bin` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vc_models_load(dir: *const c_char, out: *mut *mut VcModels) -> VcStatus {
    guard(|| {
        if dir.is_null() || out.is_null() {
            return fail(VcStatus::NullArgument, "dir and out must not be null");
        }
        let Ok(dir) = CStr::from_ptr(dir).to_str() else {
            return fail(VcStatus::InvalidArgument, "dir is not UTF-8");
        };
        match ModelSet::load(Path::new(dir)) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(VcModels { set }));
                VcStatus::Ok
            }
            Err(e @ ModelError::Missing(_)) => fail(VcStatus::ModelMissing, e.to_string()),
            Err(e) => fail(VcStatus::Internal, e.to_string()),
        }
    })
}

/// # Safety
/// `models` must come from [`vc_models_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vc_models_free(models: *mut VcModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Largest payload (envelope bytes) a `width` x `height` image holds.
#[no_mangle]
pub extern "C" fn vc_capacity(width: usize, height: usize, eta: usize) -> usize {
    if eta == 0 {
        return 0;
    }
    max_chars((width, height), eta)
}

/// Embed `payload` into an encoded image (PNG or JPEG bytes) and return the
/// coded image as PNG.
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_encode(
    models: *const VcModels,
    image: *const u8,
    image_len: usize,
    kind: u8,
    payload: *const u8,
    payload_len: usize,
    eta: usize,
    out: *mut *mut VcBuffer,
) -> VcStatus {
    guard(|| {
        let (Some(m), Some(img), Some(body)) = (models.as_ref(), slice(image, image_len), slice(payload, payload_len)) else {
            return fail(VcStatus::NullArgument, "null argument");
        };
        if out.is_null() {
            return fail(VcStatus::NullArgument, "out must not be null");
        }
        let Some(kind) = PayloadKind::from_code(kind) else {
            return fail(VcStatus::InvalidArgument, format!("unknown payload kind {kind}"));
        };
        if eta == 0 {
            return fail(VcStatus::InvalidArgument, "eta must be positive");
        }
        let image = match ChartImage::decode(img) {
            Ok(i) => i.quantize(),
            Err(e) => return fail(VcStatus::BadImage, e.to_string()),
        };
        let env = PayloadEnvelope::new(kind, body.to_vec());
        let result = predict_importance(&image, &m.set.importance)
            .map_err(PipelineError::from)
            .and_then(|v| encode_with_map(&image, &env, &v, &m.set.stego, eta, &PlanOptions::default()))
            .and_then(|c| Ok(c.image.encode_png()?));
        match result {
            Ok(bytes) => {
                *out = Box::into_raw(Box::new(VcBuffer { bytes }));
                VcStatus::Ok
            }
            Err(e) => fail(pipeline_status(&e), e.to_string()),
        }
    })
}

/// Recover the payload of a coded image. `kind` receives the envelope kind.
///
/// # Safety
/// Pointers must be valid for the given lengths; `kind` and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vc_decode(
    models: *const VcModels,
    image: *const u8,
    image_len: usize,
    kind: *mut u8,
    out: *mut *mut VcBuffer,
) -> VcStatus {
    guard(|| {
        let (Some(m), Some(img)) = (models.as_ref(), slice(image, image_len)) else {
            return fail(VcStatus::NullArgument, "null argument");
        };
        if kind.is_null() || out.is_null() {
            return fail(VcStatus::NullArgument, "kind and out must not be null");
        }
        let image = match ChartImage::decode(img) {
            Ok(i) => i,
            Err(e) => return fail(VcStatus::BadImage, e.to_string()),
        };
        match decode_blocks(&image, &m.set.stego).and_then(|r| r.envelope()) {
            Ok(env) => {
                *kind = env.kind.code();
                *out = Box::into_raw(Box::new(VcBuffer { bytes: env.body }));
                VcStatus::Ok
            }
            Err(e) => fail(pipeline_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `buf` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn vc_buffer_data(buf: *const VcBuffer) -> *const u8 {
    buf.as_ref().map_or(ptr::null(), |b| b.bytes.as_ptr())
}

/// # Safety
/// `buf` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn vc_buffer_len(buf: *const VcBuffer) -> usize {
    buf.as_ref().map_or(0, |b| b.bytes.len())
}

/// # Safety
/// `buf` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vc_buffer_free(buf: *mut VcBuffer) {
    if !buf.is_null() {
        drop(Box::from_raw(buf));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_rejected() {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { vc_models_load(ptr::null(), &mut out) }, VcStatus::NullArgument);
        assert!(!vc_last_error().is_null());
        let mut buf = ptr::null_mut();
        let s = unsafe { vc_encode(ptr::null(), ptr::null(), 0, 0, ptr::null(), 0, 800, &mut buf) };
        assert_eq!(s, VcStatus::NullArgument);
    }

    #[test]
    fn kind_constants_match_the_envelope() {
        assert_eq!(PayloadKind::from_code(VC_KIND_METADATA), Some(PayloadKind::Metadata));
        assert_eq!(PayloadKind::from_code(VC_KIND_SOURCE), Some(PayloadKind::Source));
        assert_eq!(PayloadKind::from_code(VC_KIND_SPEC), Some(PayloadKind::Spec));
    }

    #[test]
    fn capacity_is_zero_for_tiny_images() {
        assert_eq!(vc_capacity(50, 50, 800), 0);
        assert_eq!(vc_capacity(800, 800, 0), 0);
        assert!(vc_capacity(800, 800, 800) > 0);
    }
}
