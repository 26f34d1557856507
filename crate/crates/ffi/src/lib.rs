//! C interface to the `stasr` recognizer.
//!
//! Every fallible function returns a [`StasrStatus`]; on failure a
//! description is available from [`stasr_last_error`] on the same thread.
//! Models are opaque handles released with [`stasr_model_free`]; strings
//! returned by the library are released with [`stasr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stasr::data::Vocab;
use stasr::decode::{decode_features, DecodeOptions};
use stasr::eval::score_utterance;
use stasr::model::{load_checkpoint, TransformerModel};
use stasr::tensor::Tensor;
use stasr::training::noam_lr;
use stasr::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StasrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Dimension = 6,
    Data = 7,
    NonFinite = 8,
    Usage = 9,
    Panic = 10,
}

/// A loaded checkpoint: model weights and vocabulary.
pub struct StasrModel {
    model: TransformerModel,
    vocab: Vocab,
    step: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StasrStatus {
    match e {
        Error::Dimension { .. } => StasrStatus::Dimension,
        Error::Config(_) => StasrStatus::Config,
        Error::Usage(_) => StasrStatus::Usage,
        Error::Data { .. } => StasrStatus::Data,
        Error::NonFinite(_) => StasrStatus::NonFinite,
        Error::Format { .. } => StasrStatus::Format,
        Error::Io { .. } => StasrStatus::Io,
    }
}

struct Failure(StasrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> StasrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            StasrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            StasrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(StasrStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(StasrStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior NULs removed").into_raw()
}

/// Message for the last failed call on this thread, or NULL after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn stasr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stasr_model_load(path: *const c_char, out: *mut *mut StasrModel) -> StasrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let ck = load_checkpoint(Path::new(path))?;
        let handle = Box::new(StasrModel {
            model: ck.model,
            vocab: ck.vocab,
            step: ck.step,
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`stasr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stasr_model_free(model: *mut StasrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Exact number of scalar parameters.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stasr_model_num_parameters(model: *const StasrModel, out: *mut u64) -> StasrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.num_parameters() as u64;
        Ok(())
    })
}

/// Number of filter-bank channels per input frame.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stasr_model_mel_bins(model: *const StasrModel, out: *mut usize) -> StasrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.config().mel_bins;
        Ok(())
    })
}

/// Number of optimizer updates the checkpoint had received.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stasr_model_updates(model: *const StasrModel, out: *mut u64) -> StasrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.step;
        Ok(())
    })
}

/// Transcribes one utterance of `frames × bins` row-major features, already
/// normalized the way the training data was. `beam <= 1` selects greedy
/// search. The transcript is returned in `out_text`; free it with
/// [`stasr_string_free`]. The model may be shared across threads.
///
/// # Safety
/// `features` must point to `frames * bins` doubles; `model` and
/// `out_text` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stasr_model_decode(
    model: *const StasrModel,
    features: *const f64,
    frames: usize,
    bins: usize,
    beam: usize,
    alpha: f64,
    max_len: usize,
    out_text: *mut *mut c_char,
) -> StasrStatus {
    guard(|| {
        if out_text.is_null() {
            return Err(null("out_text"));
        }
        *out_text = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        let n = frames
            .checked_mul(bins)
            .ok_or_else(|| Failure(StasrStatus::InvalidArgument, "feature size overflows".into()))?;
        let data = std::slice::from_raw_parts(features, n).to_vec();
        let t = Tensor::new(vec![frames, bins], data)?;
        let opts = DecodeOptions {
            beam: beam.max(1),
            alpha,
            max_len,
        };
        let hyp = decode_features(&m.model, &t, &opts)?;
        *out_text = to_c_string(hyp.text(&m.vocab));
        Ok(())
    })
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stasr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Standardizes each filter-bank channel of `frames × bins` features in
/// place to zero mean and unit variance, treating the utterance as its own
/// recording.
///
/// # Safety
/// `features` must point to `frames * bins` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn stasr_normalize_features(features: *mut f64, frames: usize, bins: usize) -> StasrStatus {
    guard(|| {
        if features.is_null() {
            return Err(null("features"));
        }
        if frames == 0 || bins == 0 {
            return Err(Failure(StasrStatus::InvalidArgument, "empty feature matrix".into()));
        }
        let data = std::slice::from_raw_parts_mut(features, frames * bins);
        let utt = stasr::data::Utterance {
            id: "ffi".into(),
            recording_id: "ffi".into(),
            features: Tensor::new(vec![frames, bins], data.to_vec())?,
            transcript: String::new(),
        };
        let normalized = stasr::data::normalize_per_recording(vec![utt]);
        data.copy_from_slice(normalized[0].features.data());
        Ok(())
    })
}

/// Learning rate of the warm-up schedule at `step` (1-based).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stasr_noam_lr(step: u64, init_lr: f64, d_model: usize, warmup: u64, out: *mut f64) -> StasrStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = noam_lr(step, init_lr, d_model, warmup)?;
        Ok(())
    })
}

/// Word error rate of one hypothesis against one reference.
///
/// # Safety
/// `reference` and `hypothesis` must be NUL-terminated strings and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stasr_wer(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> StasrStatus {
    guard(|| {
        let r = c_str(reference, "reference")?;
        let h = c_str(hypothesis, "hypothesis")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = score_utterance("", r, h);
        if s.ref_words == 0 {
            return Err(Failure(StasrStatus::InvalidArgument, "reference has no words".into()));
        }
        *out = s.words.errors() as f64 / s.ref_words as f64;
        Ok(())
    })
}
