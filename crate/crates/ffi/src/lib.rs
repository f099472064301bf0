//! C ABI over the `airex` crate.
//!
//! Datasets and models are opaque heap handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns
//! an [`AirexStatus`]; on failure the message is kept per thread and can be
//! read with [`airex_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use airex::data::{generate_synthetic, load_dataset, save_dataset, Dataset, DatasetPaths, SynthConfig};
use airex::geo::{FeatureBuilder, GeoPoint, TargetSpec};
use airex::network::Model;
use airex::training::{split_train_test, train, TrainConfig};
use airex::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AirexStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    /// Dataset integrity problems or missing readings.
    Data = 5,
    Checkpoint = 6,
    Diverged = 7,
    /// An output buffer is too small; nothing was written to it.
    BufferTooSmall = 8,
    /// A Rust panic was caught. Handles touched by the call stay valid.
    Panic = 9,
}

/// A loaded or generated dataset.
pub struct AirexDataset {
    inner: Dataset,
}

/// A trained network together with its feature normalization.
pub struct AirexModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(AirexStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => AirexStatus::Io,
            Error::Csv(c) if c.is_io_error() => AirexStatus::Io,
            Error::Parse { .. } | Error::Csv(_) | Error::Json(_) | Error::Vocabulary { .. } => AirexStatus::Parse,
            Error::Integrity(_) | Error::MissingData { .. } => AirexStatus::Data,
            Error::Checkpoint(_) => AirexStatus::Checkpoint,
            Error::Diverged { .. } => AirexStatus::Diverged,
            _ => AirexStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AirexStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AirexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AirexStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AirexStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(AirexStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(AirexStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(AirexStatus::NullArgument, format!("{name} is null")))
}

/// Overlays the keys of a JSON object onto `T::default()`.
fn with_overrides<T: Default + serde::Serialize + serde::de::DeserializeOwned>(json: Option<&str>) -> Result<T, Failure> {
    let Some(json) = json else { return Ok(T::default()) };
    let mut base = serde_json::to_value(T::default()).map_err(|e| invalid(e.to_string()))?;
    let over: serde_json::Value = serde_json::from_str(json).map_err(|e| Failure(AirexStatus::Parse, format!("config: {e}")))?;
    let Some(over) = over.as_object() else { return Err(invalid("config must be a JSON object")) };
    let obj = base.as_object_mut().expect("config serializes to an object");
    for (k, v) in over {
        if !obj.contains_key(k) {
            return Err(invalid(format!("unknown config key {k:?}")));
        }
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(base).map_err(|e| Failure(AirexStatus::Parse, format!("config: {e}")))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `cap` bytes. Returns the buffer
/// size needed for the full message including the terminator. `buf` may be
/// null to query the size.
///
/// # Safety
/// `buf` must be null or point to at least `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn airex_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads the six dataset CSV files from directory `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn airex_dataset_load(dir: *const c_char, out: *mut *mut AirexDataset) -> AirexStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = str_arg(dir, "dir")?;
        let inner = load_dataset(&DatasetPaths::in_dir(dir))?;
        *out = Box::into_raw(Box::new(AirexDataset { inner }));
        Ok(())
    })
}

/// Generates a synthetic dataset. `config_json` is null for the defaults or
/// a JSON object overriding individual generator fields, e.g.
/// `{"n_cities": 3, "seed": 7}`.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn airex_dataset_synthetic(config_json: *const c_char, out: *mut *mut AirexDataset) -> AirexStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg: SynthConfig = with_overrides(opt_str_arg(config_json, "config_json")?)?;
        let inner = generate_synthetic(&cfg)?;
        *out = Box::into_raw(Box::new(AirexDataset { inner }));
        Ok(())
    })
}

/// Writes the dataset as CSV files into directory `dir`.
///
/// # Safety
/// `dataset` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn airex_dataset_save(dataset: *const AirexDataset, dir: *const c_char) -> AirexStatus {
    guard(|| {
        let d = ref_arg(dataset, "dataset")?;
        let dir = str_arg(dir, "dir")?;
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        save_dataset(&d.inner, &DatasetPaths::in_dir(dir))?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn airex_dataset_station_count(dataset: *const AirexDataset, out: *mut usize) -> AirexStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(dataset, "dataset")?.inner.stations.len();
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn airex_dataset_free(dataset: *mut AirexDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn airex_model_load(path: *const c_char, out: *mut *mut AirexModel) -> AirexStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = Model::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(AirexModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn airex_model_save(model: *const AirexModel, path: *const c_char) -> AirexStatus {
    guard(|| {
        ref_arg(model, "model")?.inner.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Trains a model for `target_city`. `sources_csv` is a comma-separated
/// list of source cities, or null for every other city. `config_json` is
/// null or a JSON object overriding training fields, e.g.
/// `{"epochs": 5, "lstm_hidden": 8}`.
///
/// # Safety
/// `dataset` must be a live handle, string arguments NUL-terminated or
/// null where allowed, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn airex_model_train(
    dataset: *const AirexDataset,
    target_city: *const c_char,
    sources_csv: *const c_char,
    config_json: *const c_char,
    out: *mut *mut AirexModel,
) -> AirexStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let data = &ref_arg(dataset, "dataset")?.inner;
        let target = str_arg(target_city, "target_city")?;
        let sources: Vec<String> = match opt_str_arg(sources_csv, "sources_csv")? {
            Some(s) => s.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect(),
            None => data.city_ids().into_iter().filter(|c| c != target).collect(),
        };
        let cfg: TrainConfig = with_overrides(opt_str_arg(config_json, "config_json")?)?;
        let split = split_train_test(data, target, &sources, cfg.per_city, cfg.seed)?;
        let inner = train(data, &split, &cfg)?.model;
        *out = Box::into_raw(Box::new(AirexModel { inner }));
        Ok(())
    })
}

/// Number of source cities, which is also the length of the `beta` output
/// of [`airex_model_predict`].
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn airex_model_source_count(model: *const AirexModel, out: *mut usize) -> AirexStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.inner.layout.cities.len();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn airex_model_window(model: *const AirexModel, out: *mut usize) -> AirexStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.inner.window;
        Ok(())
    })
}

/// Infers PM2.5 at (`lat`, `lon`) in `city_id` for the window ending at
/// hour `t`. When `station_id` is non-null that station's own readings are
/// excluded from the inputs. Writes the estimate to `out_y` and, when
/// `out_beta` is non-null, the city weights in source-city order.
///
/// # Safety
/// Handles must be live, strings NUL-terminated (or null for
/// `station_id`), `out_y` writable and `out_beta` null or valid for
/// `beta_cap` doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn airex_model_predict(
    model: *const AirexModel,
    dataset: *const AirexDataset,
    city_id: *const c_char,
    lat: f64,
    lon: f64,
    station_id: *const c_char,
    t: i64,
    out_y: *mut f64,
    out_beta: *mut f64,
    beta_cap: usize,
) -> AirexStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.inner;
        let data = &ref_arg(dataset, "dataset")?.inner;
        let out_y = out_arg(out_y, "out_y")?;
        let target = TargetSpec {
            city_id: str_arg(city_id, "city_id")?.to_string(),
            location: GeoPoint::new(lat, lon)?,
            station_id: opt_str_arg(station_id, "station_id")?.map(str::to_string),
        };
        let k = model.layout.cities.len();
        if !out_beta.is_null() && beta_cap < k {
            return Err(Failure(AirexStatus::BufferTooSmall, format!("beta needs {k} entries, got {beta_cap}")));
        }
        let builder = FeatureBuilder::new(data, model.schema.clone(), model.window)?;
        let p = model.predict(&builder, &[(target, t)])?.pop().expect("one query, one prediction");
        *out_y = p.y;
        if !out_beta.is_null() {
            let beta = std::slice::from_raw_parts_mut(out_beta, k);
            for (dst, (_, b)) in beta.iter_mut().zip(&p.beta) {
                *dst = *b;
            }
        }
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn airex_model_free(model: *mut AirexModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
