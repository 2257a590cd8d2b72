//! C ABI for lexplain: opaque handles, integer status codes, and a
//! thread-local last-error message. Every pointer returned by this library is
//! owned by its handle (or, for strings from `lx_result_to_json`, released
//! with `lx_string_free`).

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::sync::Arc;

use lexplain::attr::engine::{explain, ExplainerConfig};
use lexplain::concept::models::{fit, load_model, save_model, ConceptKind, ConceptModel, FitConfig};
use lexplain::model::{model_by_name, ModelAdapter};
use lexplain::text::Tokenizer;
use lexplain::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum LxStatus {
    /// Success.
    Ok = 0,
    /// Invalid configuration: unknown name, bad parameter.
    ErrConfig = 2,
    /// Runtime failure; see `lx_last_error_message`.
    ErrRuntime = 3,
    /// A required pointer argument was null.
    ErrNullArgument = 4,
    /// A string argument was not valid UTF-8.
    ErrInvalidUtf8 = 5,
    /// An index argument was out of range.
    ErrOutOfRange = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

fn status_of(err: &Error) -> LxStatus {
    match err {
        Error::Config(_)
        | Error::UnknownMethod(_)
        | Error::UnknownSplitPoint { .. }
        | Error::InvalidTarget(_) => LxStatus::ErrConfig,
        _ => LxStatus::ErrRuntime,
    }
}

fn fail(err: &Error) -> LxStatus {
    set_error(&err.to_string());
    status_of(err)
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, LxStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(LxStatus::ErrNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        LxStatus::ErrInvalidUtf8
    })
}

/// Message for the most recent error on this thread; empty when none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Model handle
// ---------------------------------------------------------------------------

/// Opaque handle over a built-in model and its tokenizer.
pub struct LxModel {
    adapter: Arc<dyn ModelAdapter>,
    tokenizer: Tokenizer,
}

/// Create a model by registry name (`tiny-gen`, `tiny-cls`, `linear-bow`,
/// `linear-bow-great`). On success writes a handle the caller must release
/// with `lx_model_free`.
///
/// # Safety
/// `name` must be a nul-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lx_model_new(
    name: *const c_char,
    seed: u64,
    out: *mut *mut LxModel,
) -> LxStatus {
    if out.is_null() {
        set_error("null output pointer");
        return LxStatus::ErrNullArgument;
    }
    let name = match utf8_arg(name) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match model_by_name(name, seed) {
        Ok((adapter, tokenizer)) => {
            *out = Box::into_raw(Box::new(LxModel { adapter, tokenizer }));
            LxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from `lx_model_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lx_model_free(model: *mut LxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------------------
// Attribution
// ---------------------------------------------------------------------------

/// Opaque handle over one attribution run: one result per explained target.
pub struct LxResult {
    results: Vec<lexplain::attr::AttributionResult>,
    unit_names: Vec<Vec<CString>>,
}

/// Explain `text` with the named attribution method at word granularity.
/// Classification models explain the argmax class; generation models produce
/// one result per generated token.
///
/// # Safety
/// All pointers must be valid; strings nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn lx_attribute(
    model: *const LxModel,
    method: *const c_char,
    text: *const c_char,
    seed: u64,
    out: *mut *mut LxResult,
) -> LxStatus {
    if model.is_null() || out.is_null() {
        set_error("null handle or output pointer");
        return LxStatus::ErrNullArgument;
    }
    let method = match utf8_arg(method) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let text = match utf8_arg(text) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let model = &*model;
    let cfg = ExplainerConfig {
        method: method.to_string(),
        seed,
        ..Default::default()
    };
    match explain(
        &cfg,
        model.adapter.as_ref(),
        &model.tokenizer,
        std::slice::from_ref(&text.to_string()),
        None,
    ) {
        Ok(results) => {
            let unit_names = results
                .iter()
                .map(|r| {
                    r.units
                        .iter()
                        .map(|u| CString::new(u.replace('\0', " ")).unwrap())
                        .collect()
                })
                .collect();
            *out = Box::into_raw(Box::new(LxResult {
                results,
                unit_names,
            }));
            LxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Number of results (explained targets) in the handle.
///
/// # Safety
/// `result` must be a live handle from `lx_attribute`.
#[no_mangle]
pub unsafe extern "C" fn lx_result_count(result: *const LxResult) -> usize {
    if result.is_null() {
        return 0;
    }
    (*result).results.len()
}

/// Number of interpretable units in result `index`; 0 when out of range.
///
/// # Safety
/// `result` must be a live handle from `lx_attribute`.
#[no_mangle]
pub unsafe extern "C" fn lx_result_num_units(result: *const LxResult, index: usize) -> usize {
    if result.is_null() {
        return 0;
    }
    (&(*result).results).get(index).map_or(0, |r| r.units.len())
}

/// Attribution score of one unit of one result.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lx_result_score(
    result: *const LxResult,
    index: usize,
    unit: usize,
    out: *mut f64,
) -> LxStatus {
    if result.is_null() || out.is_null() {
        set_error("null handle or output pointer");
        return LxStatus::ErrNullArgument;
    }
    match (&(*result).results).get(index).and_then(|r| r.scores.get(unit)) {
        Some(&s) => {
            *out = s;
            LxStatus::Ok
        }
        None => {
            set_error("result or unit index out of range");
            LxStatus::ErrOutOfRange
        }
    }
}

/// Display name of one unit; owned by the result handle. Null when out of
/// range.
///
/// # Safety
/// `result` must be a live handle; the pointer dies with the handle.
#[no_mangle]
pub unsafe extern "C" fn lx_result_unit_name(
    result: *const LxResult,
    index: usize,
    unit: usize,
) -> *const c_char {
    if result.is_null() {
        return std::ptr::null();
    }
    (&(*result).unit_names)
        .get(index)
        .and_then(|names| names.get(unit))
        .map_or(std::ptr::null(), |c| c.as_ptr())
}

/// Serialize all results as a JSON array. The caller releases the string with
/// `lx_string_free`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lx_result_to_json(
    result: *const LxResult,
    out: *mut *mut c_char,
) -> LxStatus {
    if result.is_null() || out.is_null() {
        set_error("null handle or output pointer");
        return LxStatus::ErrNullArgument;
    }
    match serde_json::to_string(&(*result).results) {
        Ok(json) => {
            *out = CString::new(json.replace('\0', " ")).unwrap().into_raw();
            LxStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            LxStatus::ErrRuntime
        }
    }
}

/// Release a result handle. Null is a no-op.
///
/// # Safety
/// `result` must come from `lx_attribute` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lx_result_free(result: *mut LxResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Release a string returned by `lx_result_to_json`. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Concept models
// ---------------------------------------------------------------------------

/// Opaque handle over a fitted concept model.
pub struct LxConceptModel {
    inner: ConceptModel,
}

fn kind_by_name(name: &str) -> Result<ConceptKind, Error> {
    Ok(match name {
        "neurons" => ConceptKind::Neurons,
        "kmeans" | "k_means" => ConceptKind::KMeans,
        "pca" => ConceptKind::Pca,
        "svd" => ConceptKind::Svd,
        "nmf" => ConceptKind::Nmf,
        "sae" | "sae_vanilla" => ConceptKind::SaeVanilla,
        "sae_top_k" | "sae_topk" => ConceptKind::SaeTopK,
        "sae_batch_top_k" | "sae_batch_topk" => ConceptKind::SaeBatchTopK,
        other => return Err(Error::Config(format!("unknown concept kind '{other}'"))),
    })
}

/// Fit a concept model over a corpus: `documents` is an array of
/// `n_documents` nul-terminated strings; activations are collected from
/// `split_point` at word granularity. Release with `lx_concept_free`.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lx_concept_fit(
    model: *const LxModel,
    split_point: *const c_char,
    kind: *const c_char,
    n_concepts: usize,
    documents: *const *const c_char,
    n_documents: usize,
    seed: u64,
    out: *mut *mut LxConceptModel,
) -> LxStatus {
    if model.is_null() || documents.is_null() || out.is_null() {
        set_error("null handle, documents, or output pointer");
        return LxStatus::ErrNullArgument;
    }
    let split_point = match utf8_arg(split_point) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let kind = match utf8_arg(kind) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let kind = match kind_by_name(kind) {
        Ok(k) => k,
        Err(e) => return fail(&e),
    };
    let model = &*model;
    let mut docs = Vec::with_capacity(n_documents);
    for i in 0..n_documents {
        match utf8_arg(*documents.add(i)) {
            Ok(s) => docs.push(s.to_string()),
            Err(status) => return status,
        }
    }
    let run = || -> Result<ConceptModel, Error> {
        let sm = lexplain::model::split(model.adapter.clone(), split_point)?;
        let bundle = lexplain::activations::collect_activations(
            &sm,
            &model.tokenizer,
            &docs,
            lexplain::text::ActivationGranularity::WordMean,
        )?;
        fit(
            kind,
            &bundle,
            &FitConfig {
                c: n_concepts,
                seed,
                ..Default::default()
            },
        )
    };
    match run() {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(LxConceptModel { inner }));
            LxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Number of concepts in the model.
///
/// # Safety
/// `model` must be a live concept-model handle.
#[no_mangle]
pub unsafe extern "C" fn lx_concept_count(model: *const LxConceptModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.c()
}

/// Save the concept model to `path` in the LXCPT format.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lx_concept_save(
    model: *const LxConceptModel,
    path: *const c_char,
) -> LxStatus {
    if model.is_null() {
        set_error("null concept model handle");
        return LxStatus::ErrNullArgument;
    }
    let path = match utf8_arg(path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match save_model(&(*model).inner, std::path::Path::new(path)) {
        Ok(()) => LxStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Load a concept model saved by `lx_concept_save` (or the CLI).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lx_concept_load(
    path: *const c_char,
    out: *mut *mut LxConceptModel,
) -> LxStatus {
    if out.is_null() {
        set_error("null output pointer");
        return LxStatus::ErrNullArgument;
    }
    let path = match utf8_arg(path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match load_model(std::path::Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(LxConceptModel { inner }));
            LxStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Release a concept-model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lx_concept_free(model: *mut LxConceptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
