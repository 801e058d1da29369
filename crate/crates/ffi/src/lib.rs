//! C ABI over the trained artifacts: load a fitted tree or pair encoder from
//! a run directory, score rows, and compute metrics.
//!
//! Every fallible call returns an [`NllfStatus`]; on failure the message is
//! available from [`nllf_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Strings handed out by
//! the library are released with [`nllf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nllf_core::data_model::MetricMode;
use nllf_core::evaluation::metrics::{Confusion, EvalReport};
use nllf_core::models::DecisionTree;
use nllf_core::nllfg::{sigmoid_scores, NllfgModel};
use nllf_core::weak_labeler::{extract_answer, Answer, LabelMode, Lexicon};
use nllf_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NllfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Internal = 6,
    Panic = 7,
}

/// Fitted decision tree.
pub struct NllfTree(DecisionTree);

/// Trained question-answering pair encoder.
pub struct NllfEncoder(NllfgModel);

/// Metrics of one confusion matrix; the headline triple follows `macro_mode`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NllfMetrics {
    pub accuracy: f64,
    pub precision_pos: f64,
    pub recall_pos: f64,
    pub f1_pos: f64,
    pub precision_neg: f64,
    pub recall_neg: f64,
    pub f1_neg: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub headline_precision: f64,
    pub headline_recall: f64,
    pub headline_f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> NllfStatus {
    match e {
        Error::Io { .. } => NllfStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => NllfStatus::Parse,
        Error::Internal(_) => NllfStatus::Internal,
        _ => NllfStatus::Validation,
    }
}

struct Fail(NllfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NllfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NllfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside the library");
            NllfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(NllfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(NllfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn row<'a>(values: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if values.is_null() && len > 0 {
        return Err(null("values"));
    }
    Ok(if len == 0 { &[] } else { std::slice::from_raw_parts(values, len) })
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library and valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nllf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn nllf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a tree from the `tree.json` written by the training stage.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nllf_tree_load(path: *const c_char, out_tree: *mut *mut NllfTree) -> NllfStatus {
    guard(|| {
        let slot = out(out_tree, "out_tree")?;
        *slot = ptr::null_mut();
        let tree: DecisionTree = nllf_core::util::read_json(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(NllfTree(tree)));
        Ok(())
    })
}

/// # Safety
/// `tree` must come from [`nllf_tree_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nllf_tree_free(tree: *mut NllfTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Number of feature columns a row must have.
///
/// # Safety
/// `tree` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn nllf_tree_width(tree: *const NllfTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.feature_ids.len())
}

/// Id of feature column `index`, as a newly allocated string.
///
/// # Safety
/// `tree` must be a live handle; `out_id` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nllf_tree_feature_id(tree: *const NllfTree, index: usize, out_id: *mut *mut c_char) -> NllfStatus {
    guard(|| {
        let t = tree.as_ref().ok_or_else(|| null("tree"))?;
        let slot = out(out_id, "out_id")?;
        let id = t.0.feature_ids.get(index).ok_or_else(|| {
            Fail(NllfStatus::Validation, format!("feature index {index} out of range ({} columns)", t.0.feature_ids.len()))
        })?;
        *slot = CString::new(id.as_str()).map_err(|e| Fail(NllfStatus::Internal, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Predicts one row: class 0/1 and the leaf's positive share.
/// Either output pointer may be null.
///
/// # Safety
/// `values` must point at `len` doubles in the tree's column order.
#[no_mangle]
pub unsafe extern "C" fn nllf_tree_predict(
    tree: *const NllfTree,
    values: *const f64,
    len: usize,
    out_class: *mut i32,
    out_positive_share: *mut f64,
) -> NllfStatus {
    guard(|| {
        let t = &tree.as_ref().ok_or_else(|| null("tree"))?.0;
        let row = row(values, len)?;
        let path = t.predict_checked(row)?;
        if let Some(c) = out_class.as_mut() {
            *c = path.prediction as i32;
        }
        if let Some(p) = out_positive_share.as_mut() {
            *p = t.predict_proba(row);
        }
        Ok(())
    })
}

/// Decision path of one row as a JSON document; free with [`nllf_string_free`].
///
/// # Safety
/// As for [`nllf_tree_predict`]; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nllf_tree_explain(
    tree: *const NllfTree,
    values: *const f64,
    len: usize,
    out_json: *mut *mut c_char,
) -> NllfStatus {
    guard(|| {
        let t = &tree.as_ref().ok_or_else(|| null("tree"))?.0;
        let slot = out(out_json, "out_json")?;
        let path = t.predict_checked(row(values, len)?)?;
        let json = serde_json::to_string(&path).map_err(Error::from)?;
        *slot = CString::new(json).map_err(|e| Fail(NllfStatus::Internal, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Loads a trained pair encoder from its directory (`run/nllfg`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out_encoder` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nllf_encoder_load(dir: *const c_char, out_encoder: *mut *mut NllfEncoder) -> NllfStatus {
    guard(|| {
        let slot = out(out_encoder, "out_encoder")?;
        *slot = ptr::null_mut();
        let model = NllfgModel::load(Path::new(text(dir, "dir")?))?;
        *slot = Box::into_raw(Box::new(NllfEncoder(model)));
        Ok(())
    })
}

/// # Safety
/// `encoder` must come from [`nllf_encoder_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nllf_encoder_free(encoder: *mut NllfEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Independent yes and no scores in (0, 1) for a text and a question.
///
/// # Safety
/// `text` and `question` must be NUL-terminated; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nllf_encoder_score(
    encoder: *const NllfEncoder,
    text_: *const c_char,
    question: *const c_char,
    out_yes: *mut f64,
    out_no: *mut f64,
) -> NllfStatus {
    guard(|| {
        let m = &encoder.as_ref().ok_or_else(|| null("encoder"))?.0;
        let (premise, q) = (text(text_, "text")?, text(question, "question")?);
        let (yes_slot, no_slot) = (out(out_yes, "out_yes")?, out(out_no, "out_no")?);
        let (yes, no) = sigmoid_scores(&m.logits(premise, q));
        *yes_slot = yes;
        *no_slot = no;
        Ok(())
    })
}

/// Reads a yes/no verdict out of an LLM response with the default
/// vocabulary. `out_answer` gets 1 for yes, 0 for no, -1 when there is none.
///
/// # Safety
/// `response` must be NUL-terminated; `out_answer` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nllf_extract_answer(response: *const c_char, chain_of_thought: bool, out_answer: *mut i32) -> NllfStatus {
    guard(|| {
        let slot = out(out_answer, "out_answer")?;
        let mode = if chain_of_thought { LabelMode::Cot } else { LabelMode::Direct };
        *slot = match extract_answer(text(response, "response")?, mode, &Lexicon::default()) {
            Some(Answer::Yes) => 1,
            Some(Answer::No) => 0,
            None => -1,
        };
        Ok(())
    })
}

/// Metrics of a binary confusion matrix. Empty denominators give 0.
///
/// # Safety
/// `out_metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nllf_metrics(
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
    macro_mode: bool,
    out_metrics: *mut NllfMetrics,
) -> NllfStatus {
    guard(|| {
        let slot = out(out_metrics, "out_metrics")?;
        let size = |v: u64| usize::try_from(v).map_err(|_| Fail(NllfStatus::Validation, format!("count {v} too large")));
        let c = Confusion { tp: size(tp)?, fp: size(fp)?, tn: size(tn)?, fn_: size(fn_)? };
        let mode = if macro_mode { MetricMode::Macro } else { MetricMode::PositiveClass };
        let r = EvalReport::from_confusion(c, mode);
        *slot = NllfMetrics {
            accuracy: r.accuracy,
            precision_pos: r.positive.precision,
            recall_pos: r.positive.recall,
            f1_pos: r.positive.f1,
            precision_neg: r.negative.precision,
            recall_neg: r.negative.recall,
            f1_neg: r.negative.f1,
            macro_precision: r.macro_precision,
            macro_recall: r.macro_recall,
            macro_f1: r.macro_f1,
            headline_precision: r.headline.0,
            headline_recall: r.headline.1,
            headline_f1: r.headline.2,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nllf_core::models::TreeParams;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(nllf_last_error()).to_string_lossy().into_owned() }
    }

    #[test]
    fn metrics_match_hand_values() {
        let mut m = NllfMetrics::default();
        assert_eq!(unsafe { nllf_metrics(5, 15, 75, 5, false, &mut m) }, NllfStatus::Ok);
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.precision_pos, 0.25);
        assert_eq!(m.recall_pos, 0.5);
        assert_eq!(m.headline_f1, m.f1_pos);
        assert_eq!(unsafe { nllf_metrics(5, 15, 75, 5, true, &mut m) }, NllfStatus::Ok);
        assert_eq!(m.headline_f1, m.macro_f1);
    }

    #[test]
    fn null_outputs_are_rejected() {
        assert_eq!(unsafe { nllf_metrics(1, 1, 1, 1, false, ptr::null_mut()) }, NllfStatus::NullPointer);
        assert!(last_error().contains("out_metrics"));
        let mut a = 7;
        assert_eq!(unsafe { nllf_extract_answer(ptr::null(), false, &mut a) }, NllfStatus::NullPointer);
        assert_eq!(a, 7);
    }

    #[test]
    fn answers_are_extracted() {
        let mut a = 7;
        let r = c("Yes, it does.");
        assert_eq!(unsafe { nllf_extract_answer(r.as_ptr(), false, &mut a) }, NllfStatus::Ok);
        assert_eq!(a, 1);
        let r = c("I cannot tell.");
        unsafe { nllf_extract_answer(r.as_ptr(), false, &mut a) };
        assert_eq!(a, -1);
    }

    #[test]
    fn invalid_utf8_is_reported() {
        let bad = [0xffu8, 0xfe, 0];
        let mut a = 0;
        let s = unsafe { nllf_extract_answer(bad.as_ptr() as *const c_char, false, &mut a) };
        assert_eq!(s, NllfStatus::InvalidUtf8);
    }

    #[test]
    fn tree_round_trip_through_handle() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 2) as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| (i >= 10) as usize).collect();
        let ids = vec!["a".to_string(), "b".to_string()];
        let tree = DecisionTree::fit(&rows, &y, &ids, &ids, &TreeParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        std::fs::write(&path, serde_json::to_vec(&tree).unwrap()).unwrap();

        let mut h: *mut NllfTree = ptr::null_mut();
        let p = c(path.to_str().unwrap());
        assert_eq!(unsafe { nllf_tree_load(p.as_ptr(), &mut h) }, NllfStatus::Ok);
        assert_eq!(unsafe { nllf_tree_width(h) }, 2);

        let mut id: *mut c_char = ptr::null_mut();
        assert_eq!(unsafe { nllf_tree_feature_id(h, 1, &mut id) }, NllfStatus::Ok);
        assert_eq!(unsafe { CStr::from_ptr(id) }.to_str().unwrap(), "b");
        unsafe { nllf_string_free(id) };
        assert_eq!(unsafe { nllf_tree_feature_id(h, 2, &mut id) }, NllfStatus::Validation);

        for (r, &want) in rows.iter().zip(&y) {
            let mut class = -1;
            let mut share = -1.0;
            assert_eq!(unsafe { nllf_tree_predict(h, r.as_ptr(), r.len(), &mut class, &mut share) }, NllfStatus::Ok);
            assert_eq!(class as usize, want);
            assert!((0.0..=1.0).contains(&share));
        }
        let short = [1.0];
        assert_eq!(unsafe { nllf_tree_predict(h, short.as_ptr(), 1, ptr::null_mut(), ptr::null_mut()) }, NllfStatus::Validation);
        assert!(!last_error().is_empty());

        let mut json: *mut c_char = ptr::null_mut();
        assert_eq!(unsafe { nllf_tree_explain(h, rows[15].as_ptr(), 2, &mut json) }, NllfStatus::Ok);
        let doc: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
        assert_eq!(doc["prediction"], 1);
        unsafe {
            nllf_string_free(json);
            nllf_tree_free(h);
        }
    }

    #[test]
    fn missing_tree_file_is_io() {
        let mut h: *mut NllfTree = ptr::null_mut();
        let p = c("/nonexistent/tree.json");
        assert_eq!(unsafe { nllf_tree_load(p.as_ptr(), &mut h) }, NllfStatus::Io);
        assert!(h.is_null());
    }

    #[test]
    fn encoder_scores_through_handle() {
        use nllf_core::nllfg::TrainHyper;
        let hyper = TrainHyper { backbone_id: "tiny-encoder:h=8,l=1,a=2,ff=16".into(), max_len: 32, ..TrainHyper::default() };
        let texts = ["a red fox", "a blue whale"];
        let model = NllfgModel::untrained(texts.iter().copied(), &hyper).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();

        let mut h: *mut NllfEncoder = ptr::null_mut();
        let d = c(dir.path().to_str().unwrap());
        assert_eq!(unsafe { nllf_encoder_load(d.as_ptr(), &mut h) }, NllfStatus::Ok);
        let (t, q) = (c("a red fox"), c("Is an animal mentioned?"));
        let (mut yes, mut no) = (0.0, 0.0);
        assert_eq!(unsafe { nllf_encoder_score(h, t.as_ptr(), q.as_ptr(), &mut yes, &mut no) }, NllfStatus::Ok);
        let want = sigmoid_scores(&model.logits("a red fox", "Is an animal mentioned?"));
        assert_eq!((yes, no), want);
        unsafe { nllf_encoder_free(h) };
    }
}
