//! C ABI over the `sblwta` core: load checkpoints, run inference, prune and quantize.
//!
//! Every function returns an [`SblwtaStatus`]. On failure the message is kept per
//! thread and can be read with [`sblwta_last_error`]. Models are opaque handles that
//! must be released with [`sblwta_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sblwta::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sblwta::compress::{infer_bits, prune, quantize};
use sblwta::model::{Architecture, Model};
use sblwta::stochastic::IbpPrior;
use sblwta::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SblwtaStatus {
    Ok = 0,
    NullArgument = 1,
    Io = 2,
    Format = 3,
    Dimension = 4,
    Config = 5,
    Numeric = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct SblwtaModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior nul removed"));
}

fn status_of(err: &Error) -> SblwtaStatus {
    match err {
        Error::Io { .. } => SblwtaStatus::Io,
        Error::Format { .. } | Error::Truncated { .. } => SblwtaStatus::Format,
        Error::Dimension { .. } => SblwtaStatus::Dimension,
        Error::Config(_) => SblwtaStatus::Config,
        Error::Diverged { .. } => SblwtaStatus::Numeric,
        Error::Contract(_) => SblwtaStatus::InvalidArgument,
    }
}

struct Fail(SblwtaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SblwtaStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SblwtaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SblwtaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SblwtaStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SblwtaStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const SblwtaModel) -> Result<&'a SblwtaModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn model_mut<'a>(m: *mut SblwtaModel) -> Result<&'a mut SblwtaModel, Fail> {
    m.as_mut().ok_or_else(|| null("model"))
}

unsafe fn put_handle(out: *mut *mut SblwtaModel, ckpt: Checkpoint) -> Result<(), Fail> {
    *out = Box::into_raw(Box::new(SblwtaModel { ckpt }));
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. Valid until the next failure.
#[no_mangle]
pub extern "C" fn sblwta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_load(path: *const c_char, out: *mut *mut SblwtaModel) -> SblwtaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ckpt = load_checkpoint(&path_arg(path)?)?;
        put_handle(out, ckpt)
    })
}

/// Creates a freshly initialized model from a named preset.
///
/// # Safety
/// `preset` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_from_preset(preset: *const c_char, seed: u64, out: *mut *mut SblwtaModel) -> SblwtaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if preset.is_null() {
            return Err(null("preset"));
        }
        let name = CStr::from_ptr(preset).to_string_lossy();
        let arch = Architecture::preset(&name)?;
        let model = Model::new(arch, IbpPrior::default(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        put_handle(out, Checkpoint::new(model, seed))
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_free(model: *mut SblwtaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_save(model: *const SblwtaModel, path: *const c_char) -> SblwtaStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(&m.ckpt, &path_arg(path)?)?;
        Ok(())
    })
}

/// Number of layers, pooling layers included; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_num_layers(model: *const SblwtaModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.model.layers.len())
}

/// Number of output classes; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_num_classes(model: *const SblwtaModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.model.classes())
}

/// Writes the per-example input shape `[H, W, C]` to `shape[0..3]`.
///
/// # Safety
/// `shape` must point to three writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_input_shape(model: *const SblwtaModel, shape: *mut usize) -> SblwtaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        let s = m.ckpt.model.arch.input;
        ptr::copy_nonoverlapping(s.as_ptr(), shape, 3);
        Ok(())
    })
}

unsafe fn batch(m: &SblwtaModel, images: *const f64, count: usize) -> Result<Tensor, Fail> {
    if images.is_null() {
        return Err(null("images"));
    }
    let [h, w, c] = m.ckpt.model.arch.input;
    let len = count * h * w * c;
    let data = std::slice::from_raw_parts(images, len).to_vec();
    Ok(Tensor::new(&[count, h, w, c], data)?)
}

/// Evaluation-mode logits for `count` images laid out as `[count, H, W, C]`.
///
/// `logits` receives `count × classes` values; `logits_len` is its capacity.
///
/// # Safety
/// `images` must hold `count·H·W·C` values and `logits` `logits_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_logits(
    model: *const SblwtaModel,
    images: *const f64,
    count: usize,
    logits: *mut f64,
    logits_len: usize,
) -> SblwtaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let need = count * m.ckpt.model.classes();
        if logits_len < need {
            return Err(Fail(
                SblwtaStatus::Dimension,
                format!("logits buffer holds {logits_len} values, {need} needed"),
            ));
        }
        let out = m.ckpt.model.predict_logits(&batch(m, images, count)?)?;
        ptr::copy_nonoverlapping(out.data().as_ptr(), logits, need);
        Ok(())
    })
}

/// Predicted class of each of `count` images.
///
/// # Safety
/// `images` must hold `count·H·W·C` values and `labels` `count` writable values.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_predict(
    model: *const SblwtaModel,
    images: *const f64,
    count: usize,
    labels: *mut u32,
) -> SblwtaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let pred = m.ckpt.model.predict(&batch(m, images, count)?)?;
        for (i, p) in pred.into_iter().enumerate() {
            *labels.add(i) = p as u32;
        }
        Ok(())
    })
}

/// Prunes components with utility probability below `tau`, in place.
///
/// `kept` and `total`, if non-null, receive the summed retained and original counts.
///
/// # Safety
/// `model` must be a live handle; `kept`/`total` null or writable.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_prune(model: *mut SblwtaModel, tau: f64, kept: *mut usize, total: *mut usize) -> SblwtaStatus {
    guard(|| {
        let m = model_mut(model)?;
        if tau.is_nan() || tau < 0.0 {
            return Err(Fail(SblwtaStatus::InvalidArgument, format!("tau must be non-negative, got {tau}")));
        }
        let (pruned, counts) = prune(&m.ckpt.model, tau);
        m.ckpt.model = pruned;
        if !kept.is_null() {
            *kept = counts.iter().map(|c| c.kept).sum();
        }
        if !total.is_null() {
            *total = counts.iter().map(|c| c.total).sum();
        }
        Ok(())
    })
}

/// Inferred mantissa bits of `layer`; `-1` is written for layers without weights.
///
/// # Safety
/// `model` must be a live handle and `bits` writable.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_layer_bits(model: *const SblwtaModel, layer: usize, bits: *mut i32) -> SblwtaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if bits.is_null() {
            return Err(null("bits"));
        }
        let l = m.ckpt.model.layers.get(layer).ok_or_else(|| {
            Fail(SblwtaStatus::InvalidArgument, format!("layer {layer} out of range"))
        })?;
        *bits = infer_bits(l).map_or(-1, |b| b as i32);
        Ok(())
    })
}

/// Quantizes every layer's weight means to its inferred bit precision, in place.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sblwta_model_quantize(model: *mut SblwtaModel) -> SblwtaStatus {
    guard(|| {
        let m = model_mut(model)?;
        let bits: Vec<Option<u32>> = m.ckpt.model.layers.iter().map(infer_bits).collect();
        m.ckpt.model = quantize(&m.ckpt.model, &bits)?;
        Ok(())
    })
}
