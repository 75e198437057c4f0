//! C ABI for loading checkpoints, running predictions, computing metrics and
//! exporting routing explanations.
//!
//! Every fallible function returns a [`PwrfStatus`]; on failure the message
//! is available from [`pwrf_last_error`] on the same thread. Panics are
//! caught at the boundary and reported as [`PwrfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use pwrf_core::harness::{checkpoint, explain, Model};
use pwrf_core::metrics::{miou, EvalPair, SaliencyReport};
use pwrf_core::tensor::{ParamStore, Tape, Tensor};
use pwrf_core::{Error, PipelineConfig, Task};

/// Result codes shared by every function of the C ABI.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PwrfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 10,
    Contract = 11,
    NonFinite = 12,
    Config = 13,
    Divergence = 14,
    Format = 15,
    Io = 16,
    Json = 17,
    Panic = 99,
}

impl From<&Error> for PwrfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => PwrfStatus::Dimension,
            Error::Contract(_) => PwrfStatus::Contract,
            Error::NonFinite(_) => PwrfStatus::NonFinite,
            Error::Config(_) => PwrfStatus::Config,
            Error::Divergence(_) => PwrfStatus::Divergence,
            Error::Format(_) => PwrfStatus::Format,
            Error::Io(_) => PwrfStatus::Io,
            Error::Json(_) => PwrfStatus::Json,
        }
    }
}

/// Task identifiers reported by [`pwrf_model_info`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PwrfTask {
    Segmentation = 0,
    Saliency = 1,
}

/// Shape information of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PwrfModelInfo {
    pub task: u32,
    /// Side of the square input images.
    pub size: usize,
    /// Number of input images expected by [`pwrf_model_predict`].
    pub modalities: usize,
    /// Image channels per input pixel.
    pub input_channels: usize,
    /// Values per output pixel: class logits or one saliency value.
    pub output_channels: usize,
}

/// Saliency metrics of one prediction.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PwrfSaliencyMetrics {
    pub mae: f64,
    pub f_adaptive: f64,
    pub f_mean: f64,
    pub e_adaptive: f64,
    pub e_mean: f64,
    pub s_measure: f64,
    /// Non-zero when the ground truth has no foreground pixel.
    pub empty_gt: i32,
}

/// Opaque model handle.
pub struct PwrfModel {
    cfg: PipelineConfig,
    model: Model,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), (PwrfStatus, String)>) -> PwrfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PwrfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            PwrfStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (PwrfStatus, String) {
    (PwrfStatus::from(&e), format!("{} {}", e.code(), e))
}

fn null(what: &str) -> (PwrfStatus, String) {
    (PwrfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PwrfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (PwrfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (PwrfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn pwrf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pwrf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory into a new handle stored in `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pwrf_model_load(dir: *const c_char, out: *mut *mut PwrfModel) -> PwrfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = c_str(dir, "dir")?;
        let (cfg, model, store) = checkpoint::load(dir).map_err(core_err)?;
        *out = Box::into_raw(Box::new(PwrfModel { cfg, model, store }));
        Ok(())
    })
}

/// Builds a freshly initialised model from a JSON configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pwrf_model_from_config(config_json: *const c_char, out: *mut *mut PwrfModel) -> PwrfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = PipelineConfig::from_json(c_str(config_json, "config_json")?).map_err(core_err)?;
        let (model, store) = Model::build(&cfg).map_err(core_err)?;
        *out = Box::into_raw(Box::new(PwrfModel { cfg, model, store }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pwrf_model_free(model: *mut PwrfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pwrf_model_info(model: *const PwrfModel, out: *mut PwrfModelInfo) -> PwrfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = PwrfModelInfo {
            task: match m.cfg.task {
                Task::Smm => PwrfTask::Segmentation as u32,
                Task::Vdt => PwrfTask::Saliency as u32,
            },
            size: m.model.size(),
            modalities: m.model.modalities(),
            input_channels: pwrf_core::config::INPUT_CHANNELS,
            output_channels: m.model.output_channels(),
        };
        Ok(())
    })
}

unsafe fn input_tensors(m: &PwrfModel, images: *const f64, len: usize) -> Result<Vec<Tensor>, (PwrfStatus, String)> {
    let s = m.model.size();
    let c = pwrf_core::config::INPUT_CHANNELS;
    let per = s * s * c;
    let expected = per * m.model.modalities();
    if len != expected {
        return Err((PwrfStatus::Dimension, format!("expected {expected} input values, got {len}")));
    }
    let data = slice(images, len, "images")?;
    data.chunks(per).map(|d| Tensor::new(vec![s, s, c], d.to_vec()).map_err(core_err)).collect()
}

/// Runs a forward pass.
///
/// `images` holds the modality images back to back, each `size*size*input_channels`
/// values in row-major `[row][col][channel]` order. `out` receives
/// `size*size*output_channels` values.
///
/// # Safety
/// `images` must point to `images_len` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pwrf_model_predict(
    model: *const PwrfModel,
    images: *const f64,
    images_len: usize,
    out: *mut f64,
    out_len: usize,
) -> PwrfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let inputs = input_tensors(m, images, images_len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut tape = Tape::new();
        let o = m.model.forward(&mut tape, &m.store, &inputs).map_err(core_err)?;
        let values = tape.value(o.prediction).data();
        if out_len != values.len() {
            return Err((PwrfStatus::Dimension, format!("output buffer needs {} values, got {out_len}", values.len())));
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(values);
        Ok(())
    })
}

/// Routing explanation of pixel `(row, col)` at backbone `stage` as a JSON
/// string, to be released with [`pwrf_string_free`].
///
/// # Safety
/// Same buffer rules as [`pwrf_model_predict`]; `json_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pwrf_model_explain(
    model: *const PwrfModel,
    images: *const f64,
    images_len: usize,
    stage: usize,
    row: usize,
    col: usize,
    json_out: *mut *mut c_char,
) -> PwrfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        let inputs = input_tensors(m, images, images_len)?;
        let e = explain(&m.model, &m.store, &m.cfg, &inputs, None, stage, row, col).map_err(core_err)?;
        let text = serde_json::to_string(&e).map_err(|e| core_err(Error::Json(e)))?;
        *json_out = CString::new(text).map_err(|_| (PwrfStatus::Format, "explanation contains NUL".into()))?.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pwrf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Saliency metrics of an `height*width` prediction in `[0,1]` against a binary ground truth.
///
/// # Safety
/// `pred` and `gt` must point to `height*width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pwrf_saliency_metrics(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    beta2: f64,
    alpha: f64,
    out: *mut PwrfSaliencyMetrics,
) -> PwrfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let n = height.checked_mul(width).ok_or((PwrfStatus::Dimension, "image too large".to_string()))?;
        let pred = slice(pred, n, "pred")?;
        let gt = slice(gt, n, "gt")?;
        let pair = EvalPair::new(height, width, pred.to_vec(), gt).map_err(core_err)?;
        let r = SaliencyReport::evaluate(&pair, beta2, alpha).map_err(core_err)?;
        *out = PwrfSaliencyMetrics {
            mae: r.mae,
            f_adaptive: r.f_adaptive,
            f_mean: r.f_mean,
            e_adaptive: r.e_adaptive,
            e_mean: r.e_mean,
            s_measure: r.s_measure,
            empty_gt: r.empty_gt as i32,
        };
        Ok(())
    })
}

/// Mean intersection-over-union of two class maps of `len` pixels.
///
/// # Safety
/// `pred` and `gt` must point to `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pwrf_miou(
    pred: *const u32,
    gt: *const u32,
    len: usize,
    classes: usize,
    out: *mut f64,
) -> PwrfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p: Vec<usize> = slice(pred, len, "pred")?.iter().map(|&v| v as usize).collect();
        let g: Vec<usize> = slice(gt, len, "gt")?.iter().map(|&v| v as usize).collect();
        *out = miou(&p, &g, classes).map_err(core_err)?.mean;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn status_codes_follow_cli_exit_statuses() {
        let errors = [
            Error::Dimension(String::new()),
            Error::Contract(String::new()),
            Error::NonFinite(String::new()),
            Error::Config(String::new()),
            Error::Divergence(String::new()),
            Error::Format(String::new()),
        ];
        for e in errors {
            assert_eq!(PwrfStatus::from(&e) as i32, e.exit_status());
        }
    }

    #[test]
    fn null_arguments_are_reported() {
        let status = unsafe { pwrf_model_load(ptr::null(), ptr::null_mut()) };
        assert_eq!(status, PwrfStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(pwrf_last_error()) }.to_str().unwrap();
        assert!(msg.contains("null"));
    }
}
