//! C ABI over the dillema evaluation, conditioning and parsing primitives.
//!
//! Every fallible function returns a [`DillemaStatus`]; on failure the
//! message is available from [`dillema_last_error_message`] on the same
//! thread. Handles are opaque and must be released with their `_free`
//! function. Strings and byte buffers handed out by this library are freed
//! with [`dillema_string_free`] and [`dillema_bytes_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dillema::conditioning::{canny_bytes, CannyParams, EdgeMap};
use dillema::consensus::{consensus, Answer, Verdict};
use dillema::evaluation::{compare_rates, ConfusionMatrix};
use dillema::model::{assert_metamorphic, MetamorphicRecord, MetamorphicVerdict};
use dillema::pipeline::read_ledger;
use dillema::prompt::{parse_stage_response_bytes, PromptStage};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DillemaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseFailed = 4,
    Io = 5,
    Evaluation = 6,
    OutOfRange = 7,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DillemaStage {
    Keywords = 0,
    Alternatives = 1,
    Counterfactual = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DillemaVerdict {
    Valid = 0,
    Invalid = 1,
    Discarded = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DillemaMetamorphic {
    Pass = 0,
    Fail = 1,
    NoAugmentations = 2,
}

/// Binary edge map.
pub struct DillemaEdgeMap(EdgeMap);

/// Class-by-class count matrix; rows are ground truth.
pub struct DillemaConfusion(ConfusionMatrix);

/// Records read from a ledger file.
pub struct DillemaLedger(Vec<MetamorphicRecord>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(message).ok());
}

fn fail(status: DillemaStatus, message: impl Into<String>) -> DillemaStatus {
    set_error(message);
    status
}

/// Runs `f`, turning panics into [`DillemaStatus::Panic`].
fn guard(f: impl FnOnce() -> DillemaStatus) -> DillemaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(DillemaStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, DillemaStatus> {
    if p.is_null() {
        return Err(fail(DillemaStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(DillemaStatus::InvalidUtf8, "argument is not UTF-8"))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> DillemaStatus {
    if out.is_null() {
        return fail(DillemaStatus::NullArgument, "null output pointer");
    }
    out.write(value);
    DillemaStatus::Ok
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dillema_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Free with [`dillema_string_free`].
#[no_mangle]
pub extern "C" fn dillema_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |m| m.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn dillema_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `data`/`len` must be null or a buffer returned by this library.
#[no_mangle]
pub unsafe extern "C" fn dillema_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Vec::from_raw_parts(data, len, len));
    }
}

/// Parses one LLM reply for `stage`; on success `*out_json` holds the payload as JSON.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_parse_stage_response(
    stage: DillemaStage,
    text: *const c_char,
    out_json: *mut *mut c_char,
) -> DillemaStatus {
    guard(|| {
        if text.is_null() {
            return fail(DillemaStatus::NullArgument, "null text");
        }
        let stage = match stage {
            DillemaStage::Keywords => PromptStage::Keywords,
            DillemaStage::Alternatives => PromptStage::Alternatives,
            DillemaStage::Counterfactual => PromptStage::Counterfactual,
        };
        match parse_stage_response_bytes(stage, CStr::from_ptr(text).to_bytes()) {
            Ok(parsed) => {
                let json = serde_json::to_string(&parsed).expect("payloads serialize");
                write_out(out_json, c_string(json))
            }
            Err(e) => fail(DillemaStatus::ParseFailed, e.to_string()),
        }
    })
}

/// Runs edge detection on an encoded image.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_canny_png(
    data: *const u8,
    len: usize,
    low_threshold: f64,
    high_threshold: f64,
    blur_sigma: f64,
    out: *mut *mut DillemaEdgeMap,
) -> DillemaStatus {
    guard(|| {
        if data.is_null() {
            return fail(DillemaStatus::NullArgument, "null image data");
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let params = CannyParams { low_threshold, high_threshold, blur_sigma };
        match canny_bytes(bytes, &params) {
            Ok(map) => write_out(out, Box::into_raw(Box::new(DillemaEdgeMap(map)))),
            Err(e) => fail(DillemaStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `map` must be a live handle from [`dillema_canny_png`].
#[no_mangle]
pub unsafe extern "C" fn dillema_edge_map_width(map: *const DillemaEdgeMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.width())
}

/// # Safety
/// `map` must be a live handle from [`dillema_canny_png`].
#[no_mangle]
pub unsafe extern "C" fn dillema_edge_map_height(map: *const DillemaEdgeMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.height())
}

/// # Safety
/// `map` must be a live handle from [`dillema_canny_png`].
#[no_mangle]
pub unsafe extern "C" fn dillema_edge_map_count(map: *const DillemaEdgeMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.edge_count())
}

/// Encodes the map as a 1-bit PNG. Free the buffer with [`dillema_bytes_free`].
///
/// # Safety
/// `map` must be a live handle; `out_data` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_edge_map_to_png(
    map: *const DillemaEdgeMap,
    out_data: *mut *mut u8,
    out_len: *mut usize,
) -> DillemaStatus {
    guard(|| {
        let Some(map) = map.as_ref() else {
            return fail(DillemaStatus::NullArgument, "null edge map");
        };
        if out_data.is_null() || out_len.is_null() {
            return fail(DillemaStatus::NullArgument, "null output pointer");
        }
        match map.0.to_png() {
            Ok(bytes) => {
                let mut bytes = bytes.into_boxed_slice();
                out_len.write(bytes.len());
                out_data.write(bytes.as_mut_ptr());
                std::mem::forget(bytes);
                DillemaStatus::Ok
            }
            Err(e) => fail(DillemaStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dillema_edge_map_free(map: *mut DillemaEdgeMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Empty `class_count`-square matrix with classes named by id.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_confusion_new(class_count: u32, out: *mut *mut DillemaConfusion) -> DillemaStatus {
    guard(|| {
        if class_count == 0 {
            return fail(DillemaStatus::InvalidArgument, "class_count must be positive");
        }
        let names = (0..class_count).map(|c| c.to_string()).collect();
        let matrix = ConfusionMatrix::new(class_count as usize, names);
        write_out(out, Box::into_raw(Box::new(DillemaConfusion(matrix))))
    })
}

/// Adds `count` units with ground truth `truth` predicted as `predicted`.
///
/// # Safety
/// `matrix` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dillema_confusion_add(
    matrix: *mut DillemaConfusion,
    truth: u32,
    predicted: u32,
    count: u64,
) -> DillemaStatus {
    guard(|| {
        let Some(m) = matrix.as_mut() else {
            return fail(DillemaStatus::NullArgument, "null matrix");
        };
        match m.0.add(truth, predicted, count) {
            Ok(()) => DillemaStatus::Ok,
            Err(e) => fail(DillemaStatus::OutOfRange, e.to_string()),
        }
    })
}

/// # Safety
/// `matrix` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_confusion_accuracy(matrix: *const DillemaConfusion, out: *mut f64) -> DillemaStatus {
    guard(|| {
        let Some(m) = matrix.as_ref() else {
            return fail(DillemaStatus::NullArgument, "null matrix");
        };
        match m.0.accuracy_exact() {
            Some(a) => write_out(out, dillema::evaluation::to_f64(&a)),
            None => fail(DillemaStatus::Evaluation, "matrix is empty"),
        }
    })
}

/// Mean IoU over classes present in ground truth or prediction.
///
/// # Safety
/// `matrix` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_confusion_mean_iou(matrix: *const DillemaConfusion, out: *mut f64) -> DillemaStatus {
    guard(|| {
        let Some(m) = matrix.as_ref() else {
            return fail(DillemaStatus::NullArgument, "null matrix");
        };
        match m.0.mean_iou() {
            Some(v) => write_out(out, v),
            None => fail(DillemaStatus::Evaluation, "matrix is empty"),
        }
    })
}

/// Recall of `class`, i.e. the diagonal of the row-normalized matrix.
///
/// # Safety
/// `matrix` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_confusion_recall(
    matrix: *const DillemaConfusion,
    class: u32,
    out: *mut f64,
) -> DillemaStatus {
    guard(|| {
        let Some(m) = matrix.as_ref() else {
            return fail(DillemaStatus::NullArgument, "null matrix");
        };
        match m.0.recall().get(class as usize) {
            Some(Some(r)) => write_out(out, *r),
            Some(None) => fail(DillemaStatus::Evaluation, format!("class {class} has no support")),
            None => fail(DillemaStatus::OutOfRange, format!("class {class} out of range")),
        }
    })
}

/// # Safety
/// `matrix` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dillema_confusion_free(matrix: *mut DillemaConfusion) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Verdict for one question; `votes[i]` is nonzero for yes.
///
/// # Safety
/// `votes` must point to `len` readable bytes (or be null with `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn dillema_consensus_verdict(
    votes: *const u8,
    len: usize,
    out: *mut DillemaVerdict,
) -> DillemaStatus {
    guard(|| {
        if votes.is_null() && len > 0 {
            return fail(DillemaStatus::NullArgument, "null votes");
        }
        if len > dillema::consensus::VOTES_PER_QUESTION {
            return fail(DillemaStatus::InvalidArgument, format!("{len} votes for one question"));
        }
        let raw = if len == 0 { &[][..] } else { std::slice::from_raw_parts(votes, len) };
        let answers: Vec<Answer> = raw.iter().map(|v| if *v != 0 { Answer::Yes } else { Answer::No }).collect();
        let verdict = match consensus("q", &answers).verdict {
            Verdict::Valid => DillemaVerdict::Valid,
            Verdict::Invalid => DillemaVerdict::Invalid,
            Verdict::Discarded => DillemaVerdict::Discarded,
        };
        write_out(out, verdict)
    })
}

/// `augmented_error * validity_rate`, all fractions in `[0, 1]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_validity_adjusted_error(
    original_error: f64,
    augmented_error: f64,
    validity_rate: f64,
    out: *mut f64,
) -> DillemaStatus {
    guard(|| {
        if ![original_error, augmented_error, validity_rate].iter().all(|x| (0.0..=1.0).contains(x)) {
            return fail(DillemaStatus::InvalidArgument, "fractions must lie in [0, 1]");
        }
        let cmp = compare_rates(original_error, augmented_error, Some(validity_rate));
        write_out(out, cmp.validity_adjusted_error.expect("validity given"))
    })
}

/// Loads every intact record of a ledger file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_ledger_open(path: *const c_char, out: *mut *mut DillemaLedger) -> DillemaStatus {
    guard(|| {
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        if !Path::new(path).is_file() {
            return fail(DillemaStatus::Io, format!("no ledger at {path}"));
        }
        match read_ledger(Path::new(path)) {
            Ok((records, _)) => write_out(out, Box::into_raw(Box::new(DillemaLedger(records)))),
            Err(e) => fail(DillemaStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `ledger` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dillema_ledger_len(ledger: *const DillemaLedger) -> usize {
    ledger.as_ref().map_or(0, |l| l.0.len())
}

/// Record `index` as a JSON string. Free with [`dillema_string_free`].
///
/// # Safety
/// `ledger` must be a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_ledger_record_json(
    ledger: *const DillemaLedger,
    index: usize,
    out_json: *mut *mut c_char,
) -> DillemaStatus {
    guard(|| {
        let Some(l) = ledger.as_ref() else {
            return fail(DillemaStatus::NullArgument, "null ledger");
        };
        match l.0.get(index) {
            Some(r) => write_out(out_json, c_string(serde_json::to_string(r).expect("records serialize"))),
            None => fail(DillemaStatus::OutOfRange, format!("record {index} of {}", l.0.len())),
        }
    })
}

/// Checks that every augmentation of record `index` keeps the original ground truth.
///
/// # Safety
/// `ledger` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dillema_ledger_assert_metamorphic(
    ledger: *const DillemaLedger,
    index: usize,
    out: *mut DillemaMetamorphic,
) -> DillemaStatus {
    guard(|| {
        let Some(l) = ledger.as_ref() else {
            return fail(DillemaStatus::NullArgument, "null ledger");
        };
        let Some(record) = l.0.get(index) else {
            return fail(DillemaStatus::OutOfRange, format!("record {index} of {}", l.0.len()));
        };
        let verdict = match assert_metamorphic(record) {
            MetamorphicVerdict::Pass => DillemaMetamorphic::Pass,
            MetamorphicVerdict::Fail { .. } => DillemaMetamorphic::Fail,
            MetamorphicVerdict::NoAugmentations => DillemaMetamorphic::NoAugmentations,
        };
        write_out(out, verdict)
    })
}

/// # Safety
/// `ledger` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dillema_ledger_free(ledger: *mut DillemaLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}
