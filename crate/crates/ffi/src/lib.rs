//! C interface. Every function returns an `HgsegStatus`; on failure the
//! message is available from `hgseg_last_error` on the same thread. Strings
//! returned through out-pointers are owned by the caller and released with
//! `hgseg_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hgseg::checkpoint::Checkpoint;
use hgseg::corpus::{normalize, Corpus, Lexicon, Split};
use hgseg::eval::score_corpora;
use hgseg::model::Model;
use hgseg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgsegStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    InvalidInput = 5,
    Config = 6,
    Shape = 7,
    Checkpoint = 8,
    NonFinite = 9,
    Panic = 10,
}

/// Opaque trained model.
pub struct HgsegModel {
    model: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HgsegMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oov_recall: f64,
    /// Non-zero when the gold text has no OOV words.
    pub oov_degenerate: i32,
    pub gold_words: u64,
    pub predicted_words: u64,
    pub correct_words: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HgsegStatus {
    match e {
        Error::Io { .. } => HgsegStatus::Io,
        Error::Encoding { .. } => HgsegStatus::InvalidUtf8,
        Error::Format { .. } => HgsegStatus::Format,
        Error::InvalidInput(_) => HgsegStatus::InvalidInput,
        Error::Config(_) => HgsegStatus::Config,
        Error::Shape(_) => HgsegStatus::Shape,
        Error::Checkpoint(_) => HgsegStatus::Checkpoint,
        Error::NonFinite(_) => HgsegStatus::NonFinite,
    }
}

struct Fail(HgsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HgsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HgsegStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            HgsegStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(HgsegStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(HgsegStatus::InvalidUtf8, format!("{name}: invalid utf-8 at byte {}", e.valid_up_to())))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(HgsegStatus::InvalidInput, "output contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn check_out<T>(out: *mut T) -> Result<(), Fail> {
    if out.is_null() {
        Err(Fail(HgsegStatus::NullArgument, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

/// Loads a checkpoint. On success `*out` holds a model to release with
/// `hgseg_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hgseg_model_load(path: *const c_char, out: *mut *mut HgsegModel) -> HgsegStatus {
    guard(|| {
        check_out(out)?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let model = Checkpoint::load(Path::new(path))?.model;
        *out = Box::into_raw(Box::new(HgsegModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `hgseg_model_load` and not be freed twice. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn hgseg_model_free(model: *mut HgsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments UTF-8 text line by line. Words in the output are separated by
/// single spaces; line breaks are kept.
///
/// # Safety
/// `model` must be a live model, `text` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hgseg_segment(model: *const HgsegModel, text: *const c_char, out: *mut *mut c_char) -> HgsegStatus {
    guard(|| {
        check_out(out)?;
        *out = ptr::null_mut();
        let m = model
            .as_ref()
            .ok_or_else(|| Fail(HgsegStatus::NullArgument, "model is null".into()))?;
        let text = str_arg(text, "text")?;
        let mut lines = Vec::new();
        for line in text.split('\n') {
            lines.push(m.model.segment_line(line.trim_end_matches('\r'), None, None)?);
        }
        put_string(out, lines.join("\n"))
    })
}

/// Applies the character normalization used by the models.
///
/// # Safety
/// `text` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hgseg_normalize(text: *const c_char, out: *mut *mut c_char) -> HgsegStatus {
    guard(|| {
        check_out(out)?;
        *out = ptr::null_mut();
        put_string(out, normalize(str_arg(text, "text")?))
    })
}

/// Scores space-segmented `pred` against `gold`, one sentence per line. OOV
/// recall uses the lexicon of `model` when it is not null and treats every
/// gold word as OOV otherwise.
///
/// # Safety
/// `gold` and `pred` must be NUL-terminated, `model` null or live, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hgseg_score(
    gold: *const c_char,
    pred: *const c_char,
    model: *const HgsegModel,
    out: *mut HgsegMetrics,
) -> HgsegStatus {
    guard(|| {
        check_out(out)?;
        let g = Corpus::from_lines(str_arg(gold, "gold")?.lines(), Split::Test, "gold")?;
        let p = Corpus::from_lines(str_arg(pred, "pred")?.lines(), Split::Test, "pred")?;
        let empty = Lexicon::new();
        let lexicon = model.as_ref().map_or(&empty, |m| &m.model.lexicon);
        let m = score_corpora(&g, &p, lexicon)?;
        *out = HgsegMetrics {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            oov_recall: m.oov_recall,
            oov_degenerate: m.oov_degenerate as i32,
            gold_words: m.counts.gold as u64,
            predicted_words: m.counts.predicted as u64,
            correct_words: m.counts.correct as u64,
        };
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hgseg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn hgseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}
