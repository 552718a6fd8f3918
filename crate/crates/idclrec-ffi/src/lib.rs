//! C ABI for the idclrec pipeline.
//!
//! Conventions:
//! - Every function returns an `IdclrecStatus`; `IDCLREC_STATUS_OK` (0)
//!   means success. On failure a thread-local message is set and can be
//!   read with [`idclrec_last_error`].
//! - Handles ([`IdclrecDataset`], [`IdclrecModel`]) are opaque; free them
//!   with their `_free` function. Strings returned through out-parameters
//!   must be freed with [`idclrec_string_free`].
//! - Passing a null pointer where a value is required yields
//!   `IDCLREC_STATUS_NULL_ARGUMENT`; panics are caught at the boundary and
//!   reported as `IDCLREC_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use idclrec::data::{self, PaddedSequence, PreparedDataset};
use idclrec::error::Error;
use idclrec::metrics::{self, Split};
use idclrec::model::{AblationVariant, ModelSettings};
use idclrec::params::ModelParams;
use idclrec::trainer::{self, TrainConfig};

/// Status codes returned by every API function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdclrecStatus {
    Ok = 0,
    Io = 1,
    Parse = 2,
    Config = 3,
    Shape = 4,
    Numeric = 5,
    Data = 6,
    NullArgument = 7,
    InvalidUtf8 = 8,
    Internal = 9,
}

/// Opaque prepared dataset handle.
pub struct IdclrecDataset {
    inner: PreparedDataset,
}

/// Opaque trained-model handle.
pub struct IdclrecModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> IdclrecStatus {
    match err {
        Error::Io { .. } => IdclrecStatus::Io,
        Error::Parse { .. } => IdclrecStatus::Parse,
        Error::Config(_) => IdclrecStatus::Config,
        Error::Shape(_) => IdclrecStatus::Shape,
        Error::NonFinite(_) => IdclrecStatus::Numeric,
        Error::Data(_) => IdclrecStatus::Data,
    }
}

fn report(err: Error) -> IdclrecStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Run a fallible body with panic containment.
fn guarded(body: impl FnOnce() -> IdclrecStatus) -> IdclrecStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            IdclrecStatus::Internal
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, IdclrecStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(IdclrecStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        IdclrecStatus::InvalidUtf8
    })
}

fn settings_from(delta: f64, variant: &str) -> Result<ModelSettings, IdclrecStatus> {
    let variant = AblationVariant::parse(variant).map_err(report)?;
    Ok(ModelSettings { delta, variant })
}

/// Message describing the most recent error on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn idclrec_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn idclrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Free a string returned through an out-parameter.
///
/// # Safety
/// `ptr` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn idclrec_string_free(ptr: *mut c_char) {
    if !ptr.is_null() {
        drop(CString::from_raw(ptr));
    }
}

/// Ingest a raw interaction file (`user<sep>item<sep>timestamp` lines),
/// apply 5-core filtering and sequence construction, and return a dataset
/// handle. `format` is `"tsv"` or `"csv"`.
///
/// # Safety
/// `input`, `format` must be valid NUL-terminated strings; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn idclrec_dataset_prepare(
    input: *const c_char,
    format: *const c_char,
    max_len: usize,
    min_len: usize,
    seed: u64,
    out: *mut *mut IdclrecDataset,
) -> IdclrecStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return IdclrecStatus::NullArgument;
        }
        let input = match cstr_arg(input) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let format = match cstr_arg(format) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let format: data::Format = match format.parse() {
            Ok(f) => f,
            Err(e) => return report(e),
        };
        let records = match data::load_interactions(Path::new(input), format) {
            Ok(r) => r,
            Err(e) => return report(e),
        };
        let (dataset, _) = PreparedDataset::from_records(&records, max_len, min_len, seed);
        *out = Box::into_raw(Box::new(IdclrecDataset { inner: dataset }));
        IdclrecStatus::Ok
    })
}

/// Load a prepared dataset directory (`sequences.tsv` + `manifest.json`).
///
/// # Safety
/// `dir` must be a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn idclrec_dataset_load(
    dir: *const c_char,
    out: *mut *mut IdclrecDataset,
) -> IdclrecStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return IdclrecStatus::NullArgument;
        }
        let dir = match cstr_arg(dir) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match PreparedDataset::load(Path::new(dir)) {
            Ok(dataset) => {
                *out = Box::into_raw(Box::new(IdclrecDataset { inner: dataset }));
                IdclrecStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Write a dataset as `sequences.tsv` + `manifest.json` under `dir`.
///
/// # Safety
/// `dataset` must be a live handle; `dir` a valid string.
#[no_mangle]
pub unsafe extern "C" fn idclrec_dataset_save(
    dataset: *const IdclrecDataset,
    dir: *const c_char,
) -> IdclrecStatus {
    guarded(|| {
        let Some(dataset) = dataset.as_ref() else {
            set_error("null dataset handle");
            return IdclrecStatus::NullArgument;
        };
        let dir = match cstr_arg(dir) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match dataset.inner.save(Path::new(dir)) {
            Ok(()) => IdclrecStatus::Ok,
            Err(e) => report(e),
        }
    })
}

/// Number of users in the dataset; 0 for a null handle.
///
/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn idclrec_dataset_num_users(dataset: *const IdclrecDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.manifest.num_users)
}

/// Number of items in the dataset; 0 for a null handle.
///
/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn idclrec_dataset_num_items(dataset: *const IdclrecDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.manifest.num_items)
}

/// Free a dataset handle.
///
/// # Safety
/// `dataset` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn idclrec_dataset_free(dataset: *mut IdclrecDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train one model on the dataset with the given seed. `config_json` is a
/// JSON object of training hyperparameters (any subset of the config
/// fields; missing ones keep their defaults); null means all
/// defaults.
///
/// # Safety
/// `dataset` must be a live handle, `out` valid; `config_json` null or a
/// valid string.
#[no_mangle]
pub unsafe extern "C" fn idclrec_train(
    dataset: *const IdclrecDataset,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut IdclrecModel,
) -> IdclrecStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return IdclrecStatus::NullArgument;
        }
        let Some(dataset) = dataset.as_ref() else {
            set_error("null dataset handle");
            return IdclrecStatus::NullArgument;
        };
        let config = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = match cstr_arg(config_json) {
                Ok(s) => s,
                Err(status) => return status,
            };
            match TrainConfig::from_json(text) {
                Ok(c) => c,
                Err(e) => return report(e),
            }
        };
        match trainer::train(&config, &dataset.inner, seed, None) {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(IdclrecModel {
                    params: outcome.best_params,
                }));
                IdclrecStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Load a checkpoint written by the trainer (`<prefix>.json` +
/// `<prefix>.bin`).
///
/// # Safety
/// `prefix` must be a valid string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn idclrec_model_load(
    prefix: *const c_char,
    out: *mut *mut IdclrecModel,
) -> IdclrecStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return IdclrecStatus::NullArgument;
        }
        let prefix = match cstr_arg(prefix) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match ModelParams::load(Path::new(prefix)) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(IdclrecModel { params }));
                IdclrecStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// Write the model as a checkpoint under `prefix`.
///
/// # Safety
/// `model` must be a live handle; `prefix` a valid string.
#[no_mangle]
pub unsafe extern "C" fn idclrec_model_save(
    model: *const IdclrecModel,
    prefix: *const c_char,
) -> IdclrecStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            set_error("null model handle");
            return IdclrecStatus::NullArgument;
        };
        let prefix = match cstr_arg(prefix) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match model.params.save(Path::new(prefix)) {
            Ok(()) => IdclrecStatus::Ok,
            Err(e) => report(e),
        }
    })
}

/// Free a model handle.
///
/// # Safety
/// `model` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn idclrec_model_free(model: *mut IdclrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Full-ranking evaluation on `split` (`"valid"` or `"test"`). On success
/// `out_json` receives a JSON report; free it with
/// [`idclrec_string_free`].
///
/// # Safety
/// `model` and `dataset` must be live handles; `split`/`variant` valid
/// strings; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn idclrec_evaluate(
    model: *const IdclrecModel,
    dataset: *const IdclrecDataset,
    split: *const c_char,
    delta: f64,
    variant: *const c_char,
    out_json: *mut *mut c_char,
) -> IdclrecStatus {
    guarded(|| {
        if out_json.is_null() {
            set_error("null out pointer");
            return IdclrecStatus::NullArgument;
        }
        let (Some(model), Some(dataset)) = (model.as_ref(), dataset.as_ref()) else {
            set_error("null model or dataset handle");
            return IdclrecStatus::NullArgument;
        };
        let split_str = match cstr_arg(split) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let split: Split = match split_str.parse() {
            Ok(s) => s,
            Err(e) => return report(e),
        };
        let variant = match cstr_arg(variant) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let settings = match settings_from(delta, variant) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match metrics::evaluate(&model.params, &dataset.inner, split, &settings) {
            Ok(report) => {
                let json = serde_json::to_string(&report).unwrap_or_default();
                match CString::new(json) {
                    Ok(c) => {
                        *out_json = c.into_raw();
                        IdclrecStatus::Ok
                    }
                    Err(_) => {
                        set_error("report contained an interior NUL");
                        IdclrecStatus::Internal
                    }
                }
            }
            Err(e) => report(e),
        }
    })
}

/// Score an item history (1-based item indices, most recent last) and
/// return the top-k recommendations. `out_items` and `out_scores` must
/// hold at least `k` entries; `*out_count` reports the number written
/// (less than `k` when the catalog is smaller).
///
/// # Safety
/// `model` must be a live handle; `items` must point to `len` values;
/// `out_items`/`out_scores` must hold `k` entries; `variant` a valid
/// string; `out_count` valid.
#[no_mangle]
pub unsafe extern "C" fn idclrec_recommend(
    model: *const IdclrecModel,
    items: *const u32,
    len: usize,
    k: usize,
    delta: f64,
    variant: *const c_char,
    out_items: *mut u32,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> IdclrecStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            set_error("null model handle");
            return IdclrecStatus::NullArgument;
        };
        if items.is_null() || out_items.is_null() || out_scores.is_null() || out_count.is_null() {
            set_error("null buffer argument");
            return IdclrecStatus::NullArgument;
        }
        if len == 0 {
            set_error("item history is empty");
            return IdclrecStatus::Data;
        }
        let variant = match cstr_arg(variant) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let settings = match settings_from(delta, variant) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let history = std::slice::from_raw_parts(items, len);
        let input = PaddedSequence::from_items(history, model.params.dims.max_len);
        let scores = match metrics::score_all_items(&model.params, &input, &settings) {
            Ok(s) => s,
            Err(e) => return report(e),
        };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let count = k.min(order.len());
        for (slot, &idx) in order[..count].iter().enumerate() {
            *out_items.add(slot) = idx as u32 + 1;
            *out_scores.add(slot) = scores[idx];
        }
        *out_count = count;
        IdclrecStatus::Ok
    })
}
