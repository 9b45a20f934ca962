//! C ABI for the u2former restoration model.
//!
//! Images cross the boundary as planar `float` buffers of `3 * height *
//! width` values in `[0, 1]`, channel-major. Every function returns a
//! [`U2fStatus`]; on failure [`u2f_last_error`] describes what went wrong on
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use u2former::backbone::U2FormerConfig;
use u2former::cli::{load_model, Checkpoint};
use u2former::costmodel::block_flops;
use u2former::datasynth::{generate, DegradationSpec, Kind};
use u2former::losses::{psnr, ssim};
use u2former::numerics::{InitMode, ParamStore, Tensor};
use u2former::training::{restore, Network, TrainConfig};
use u2former::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum U2fStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    CorruptCheckpoint = 5,
    ConfigMismatch = 6,
    NonFinite = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum U2fKind {
    Rain = 0,
    Haze = 1,
    Reflection = 2,
}

/// Multiply-accumulate counts of one transformer block.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct U2fFlops {
    pub qkv_proj: u64,
    pub attn_matrix: u64,
    pub attn_apply: u64,
    pub out_proj: u64,
    pub ffn: u64,
    pub filter_overhead: u64,
    pub total: u64,
}

/// Opaque model handle.
pub struct U2fModel {
    cfg: TrainConfig,
    net: Network,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> U2fStatus {
    match e {
        Error::ShapeMismatch(_) | Error::NonDivisibleSpatialDims { .. } | Error::SpatialTooSmall { .. } | Error::ImageTooSmall { .. } => U2fStatus::ShapeMismatch,
        Error::Io(_) | Error::Image { .. } => U2fStatus::Io,
        Error::CorruptCheckpoint(_) => U2fStatus::CorruptCheckpoint,
        Error::ConfigMismatch(_) => U2fStatus::ConfigMismatch,
        Error::NonFinite(_) | Error::NonFiniteLoss(_) => U2fStatus::NonFinite,
        _ => U2fStatus::InvalidArgument,
    }
}

struct Fail(U2fStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> U2fStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => U2fStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            U2fStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(U2fStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(U2fStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn image_arg(data: *const f32, height: usize, width: usize, what: &str) -> Result<Tensor<f32>, Fail> {
    if data.is_null() {
        return Err(null(what));
    }
    if height == 0 || width == 0 {
        return Err(Fail(U2fStatus::InvalidArgument, format!("{what} has zero size")));
    }
    let n = 3 * height * width;
    let slice = std::slice::from_raw_parts(data, n);
    Ok(Tensor::new(&[3, height, width], slice.to_vec())?)
}

unsafe fn write_out(dst: *mut f32, t: &Tensor<f32>) {
    ptr::copy_nonoverlapping(t.data().as_ptr(), dst, t.numel());
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn u2f_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn u2f_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Freshly initialized model with the default desk architecture
/// (`base_channels` overrides C when non-zero).
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn u2f_model_new(base_channels: usize, seed: u64, out: *mut *mut U2fModel) -> U2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = TrainConfig::desk();
        cfg.seed = seed;
        if base_channels != 0 {
            cfg.model = U2FormerConfig {
                base_channels,
                ..cfg.model
            };
        }
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = Network::build(&cfg, &mut store, InitMode::Standard)?;
        *out = Box::into_raw(Box::new(U2fModel { cfg, net, store }));
        Ok(())
    })
}

/// Load a checkpoint written by `u2f_model_save` or the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn u2f_model_load(path: *const c_char, out: *mut *mut U2fModel) -> U2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (cfg, net, store) = load_model(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(U2fModel { cfg, net, store }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a valid handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn u2f_model_save(model: *const U2fModel, path: *const c_char) -> U2fStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        Checkpoint::from_store(&m.store, &m.cfg).save(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn u2f_model_free(model: *mut U2fModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable scalars of the restoration network (projection head
/// excluded), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn u2f_model_num_params(model: *const U2fModel) -> usize {
    model.as_ref().map_or(0, |m| m.store.iter().filter(|p| !p.name.starts_with("head.")).map(|p| p.tensor.numel()).sum())
}

/// Background and noise estimates of one image. All three buffers hold
/// `3 * height * width` floats.
///
/// # Safety
/// `model` must be a valid handle and the buffers must be that large.
#[no_mangle]
pub unsafe extern "C" fn u2f_model_restore(
    model: *const U2fModel,
    input: *const f32,
    height: usize,
    width: usize,
    out_background: *mut f32,
    out_noise: *mut f32,
) -> U2fStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_background.is_null() || out_noise.is_null() {
            return Err(null("output buffer"));
        }
        let image = image_arg(input, height, width, "input")?;
        let (b, r) = restore(&m.net.model, &m.store, &image)?;
        write_out(out_background, &b);
        write_out(out_noise, &r);
        Ok(())
    })
}

/// One synthetic `(input, background, noise)` triple of side `size`.
///
/// # Safety
/// Each buffer must hold `3 * size * size` floats.
#[no_mangle]
pub unsafe extern "C" fn u2f_synth_sample(kind: U2fKind, size: usize, seed: u64, input: *mut f32, background: *mut f32, noise: *mut f32) -> U2fStatus {
    guard(|| {
        if input.is_null() || background.is_null() || noise.is_null() {
            return Err(null("output buffer"));
        }
        let kind = match kind {
            U2fKind::Rain => Kind::Rain,
            U2fKind::Haze => Kind::Haze,
            U2fKind::Reflection => Kind::Reflection,
        };
        let s = generate(&DegradationSpec::new(kind, size, seed), seed)?;
        write_out(input, &s.input.cast());
        write_out(background, &s.background.cast());
        write_out(noise, &s.noise.cast());
        Ok(())
    })
}

/// # Safety
/// `a` and `b` must hold `3 * height * width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn u2f_psnr(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> U2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = psnr(&image_arg(a, height, width, "a")?, &image_arg(b, height, width, "b")?)?;
        Ok(())
    })
}

/// # Safety
/// `a` and `b` must hold `3 * height * width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn u2f_ssim(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> U2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ssim(&image_arg(a, height, width, "a")?, &image_arg(b, height, width, "b")?)?;
        Ok(())
    })
}

/// Analytic MACs of one top-k filtered block on a `channels x height x
/// width` input.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn u2f_block_flops(channels: usize, height: usize, width: usize, window: usize, heads: usize, keep_ratio: f64, out: *mut U2fFlops) -> U2fStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let f = block_flops(channels, height, width, window, heads, keep_ratio)?;
        *out = U2fFlops {
            qkv_proj: f.qkv_proj,
            attn_matrix: f.attn_matrix,
            attn_apply: f.attn_apply,
            out_proj: f.out_proj,
            ffn: f.ffn,
            filter_overhead: f.filter_overhead,
            total: f.total,
        };
        Ok(())
    })
}
