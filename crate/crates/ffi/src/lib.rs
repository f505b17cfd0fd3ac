//! C interface to the segmentation model.
//!
//! Every function returns a [`CgrStatus`]. On failure the message is kept per
//! thread and read with [`cgr_last_error`]. Models are opaque and must be
//! released with [`cgr_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cgrseg::analysis::count_flops;
use cgrseg::io::{load_weights, save_weights, ConfigFile};
use cgrseg::model::{export_attention, predict, ModelParams};
use cgrseg::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Numerical = 5,
    Io = 6,
    Format = 7,
    WeightMismatch = 8,
    UnknownStage = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct CgrModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CgrStatus {
    match e {
        Error::Shape { .. } => CgrStatus::Shape,
        Error::NonFinite { .. } | Error::Diverged { .. } => CgrStatus::Numerical,
        Error::InvalidArgument(_) | Error::Backward(_) => CgrStatus::InvalidArgument,
        Error::Config(_) => CgrStatus::Config,
        Error::UnknownStage(_) => CgrStatus::UnknownStage,
        Error::Format { .. } => CgrStatus::Format,
        Error::WeightMismatch(_) => CgrStatus::WeightMismatch,
        Error::Io { .. } => CgrStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (CgrStatus, String)>) -> CgrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CgrStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CgrStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (CgrStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CgrStatus, String) {
    (CgrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CgrStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CgrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const CgrModel) -> Result<&'a CgrModel, (CgrStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Planar `(channels, height, width)` doubles as a `(1, C, H, W)` tensor.
unsafe fn image_arg(model: &CgrModel, image: *const f64, height: usize, width: usize) -> Result<Tensor, (CgrStatus, String)> {
    if image.is_null() {
        return Err(null("image"));
    }
    let c = model.params.config.in_channels;
    let len = c * height * width;
    if len == 0 {
        return Err((CgrStatus::InvalidArgument, format!("empty image {height}x{width}")));
    }
    let data = std::slice::from_raw_parts(image, len).to_vec();
    Tensor::from_vec([1, c, height, width], data).map_err(lib_err)
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cgr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a model from TOML config text (null for defaults) with
/// initialization seed `seed`.
///
/// # Safety
/// `config_toml` is null or a valid C string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cgr_model_new(config_toml: *const c_char, seed: u64, out: *mut *mut CgrModel) -> CgrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let cfg = if config_toml.is_null() {
            ConfigFile::default()
        } else {
            ConfigFile::parse(str_arg(config_toml, "config")?).map_err(lib_err)?
        };
        let params = ModelParams::init(&cfg.model, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CgrModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from [`cgr_model_new`] and was not freed before.
#[no_mangle]
pub unsafe extern "C" fn cgr_model_free(model: *mut CgrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a `CGRW` weight file; every tensor must match the model's shapes.
///
/// # Safety
/// `model` is a live handle; `path` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn cgr_model_load_weights(model: *mut CgrModel, path: *const c_char) -> CgrStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let p = PathBuf::from(str_arg(path, "path")?);
        load_weights(&p, &mut m.params.store).map_err(lib_err)
    })
}

/// # Safety
/// `model` is a live handle; `path` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn cgr_model_save_weights(model: *const CgrModel, path: *const c_char) -> CgrStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = PathBuf::from(str_arg(path, "path")?);
        save_weights(&p, &m.params.store).map_err(lib_err)
    })
}

/// Writes the number of input channels and classes.
///
/// # Safety
/// All pointers are valid.
#[no_mangle]
pub unsafe extern "C" fn cgr_model_shape(model: *const CgrModel, in_channels: *mut usize, num_classes: *mut usize) -> CgrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if in_channels.is_null() || num_classes.is_null() {
            return Err(null("output"));
        }
        *in_channels = m.params.config.in_channels;
        *num_classes = m.params.config.num_classes;
        Ok(())
    })
}

/// Segments one planar image of `in_channels × height × width` doubles in
/// `[0, 1]`, writing `height × width` class ids to `labels`.
///
/// # Safety
/// `image` holds `in_channels·height·width` doubles; `labels` holds
/// `height·width` bytes.
#[no_mangle]
pub unsafe extern "C" fn cgr_model_infer(
    model: *const CgrModel,
    image: *const f64,
    height: usize,
    width: usize,
    labels: *mut u8,
) -> CgrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let x = image_arg(m, image, height, width)?;
        let pred = predict(&m.params, &x).map_err(lib_err)?;
        let out = std::slice::from_raw_parts_mut(labels, height * width);
        for (o, p) in out.iter_mut().zip(pred) {
            *o = p as u8;
        }
        Ok(())
    })
}

/// Min-max normalized attention heatmap of `stage` at image resolution.
///
/// # Safety
/// As [`cgr_model_infer`]; `stage` is a valid C string and `heatmap` holds
/// `height·width` doubles.
#[no_mangle]
pub unsafe extern "C" fn cgr_model_attention(
    model: *const CgrModel,
    image: *const f64,
    height: usize,
    width: usize,
    stage: *const c_char,
    heatmap: *mut f64,
) -> CgrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if heatmap.is_null() {
            return Err(null("heatmap"));
        }
        let stage = str_arg(stage, "stage")?;
        let x = image_arg(m, image, height, width)?;
        let map = export_attention(&m.params, &x, stage).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(heatmap, height * width).copy_from_slice(map.data());
        Ok(())
    })
}

/// Total multiply-accumulates and learnable parameters at `height × width`.
///
/// # Safety
/// All pointers are valid.
#[no_mangle]
pub unsafe extern "C" fn cgr_model_flops(
    model: *const CgrModel,
    height: usize,
    width: usize,
    macs: *mut u64,
    params: *mut u64,
) -> CgrStatus {
    guard(|| {
        let m = model_ref(model)?;
        if macs.is_null() || params.is_null() {
            return Err(null("output"));
        }
        let r = count_flops(&m.params.config, height, width).map_err(lib_err)?;
        *macs = r.total_macs();
        *params = r.total_params();
        Ok(())
    })
}
