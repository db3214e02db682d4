//! C ABI over the geovit crate.
//!
//! Design rules, enforced by every function in this file:
//! - handles (`GvModel`, `GvDataset`) are opaque boxes; callers only ever
//!   hold pointers and release them through the matching `gv_*_free`,
//! - every fallible call returns a GvStatus and stores a human-readable
//!   message retrievable via gv_last_error_message() on failure,
//! - out-parameters are written only when the call returns GV_STATUS_OK,
//! - panics never cross the boundary: they are caught and reported as
//!   GV_STATUS_PANIC.
//!
//! The companion header `include/geovit.h` is regenerated by the build
//! script on every compile, so it cannot drift from these signatures.

use std::any::Any;
use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use geovit::checkpoint::{load_checkpoint, save_checkpoint};
use geovit::data::{load_dataset, save_dataset, Dataset, NormStats};
use geovit::error::Error;
use geovit::gradcheck::run_gradcheck;
use geovit::metrics::{argmax, evaluate, logits_to_mask};
use geovit::model::{Model, ModelConfig, Variant, WEATHER_DIM};
use geovit::tensor::Tensor;
use geovit::train::{train_loop, TrainConfig};

/// Result of every fallible call in this ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GvStatus {
    /// The call succeeded and all out-parameters were written.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A configuration document or value was rejected.
    Config = 3,
    /// Tensor shapes disagreed.
    Shape = 4,
    /// An API precondition was violated (wrong variant, bad buffer length, ...).
    Contract = 5,
    /// A numerical check failed (non-finite loss, gradient check, ...).
    Numerical = 6,
    /// A file existed but its contents were malformed.
    Format = 7,
    /// The operating system reported an I/O failure.
    Io = 8,
    /// An internal invariant broke; the library state is still consistent.
    Panic = 9,
}

/// Which task a model solves.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GvVariant {
    /// Plume segmentation, fuel classification, and power regression.
    Co2 = 0,
    /// Surface concentration regression from two image streams.
    No2 = 1,
}

/// Which part of a dataset an operation runs over.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GvSplit {
    /// Every sample.
    All = 0,
    /// The deterministic leading 80% used for optimization.
    Train = 1,
    /// The deterministic trailing 20% held out for evaluation.
    Eval = 2,
}

impl From<GvVariant> for Variant {
    fn from(v: GvVariant) -> Variant {
        match v {
            GvVariant::Co2 => Variant::Co2,
            GvVariant::No2 => Variant::No2,
        }
    }
}

impl From<Variant> for GvVariant {
    fn from(v: Variant) -> GvVariant {
        match v {
            Variant::Co2 => GvVariant::Co2,
            Variant::No2 => GvVariant::No2,
        }
    }
}

/// Opaque model handle: the network parameters plus the training
/// configuration and target statistics that travel with them through
/// checkpoints.
pub struct GvModel {
    model: Model<f32>,
    train_config: TrainConfig,
    norm: NormStats,
}

/// Opaque dataset handle.
pub struct GvDataset {
    ds: Dataset<f32>,
}

/// Per-record training callback: receives one JSON history record per
/// optimization step. Returning nonzero aborts the run.
pub type GvRecordCallback =
    Option<unsafe extern "C" fn(record_json: *const c_char, user_data: *mut c_void) -> i32>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', "?")).expect("nul bytes replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn status_of(e: &Error) -> GvStatus {
    match e {
        Error::ShapeMismatch { .. } => GvStatus::Shape,
        Error::Config(_) => GvStatus::Config,
        Error::Contract(_) => GvStatus::Contract,
        Error::Numerical(_) => GvStatus::Numerical,
        Error::Format { .. } | Error::Json(_) => GvStatus::Format,
        Error::Io { .. } => GvStatus::Io,
    }
}

fn fail(e: Error) -> GvStatus {
    set_last_error(&e.to_string());
    status_of(&e)
}

fn null_arg(name: &str) -> GvStatus {
    set_last_error(&format!("{name} must not be null"));
    GvStatus::NullArgument
}

fn panic_text(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic payload".to_string()
    }
}

/// Run `f`, translating success, failure, and panics into a status.
fn guarded(f: impl FnOnce() -> Result<(), GvStatus>) -> GvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GvStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            set_last_error(&format!("internal panic: {}", panic_text(payload)));
            GvStatus::Panic
        }
    }
}

unsafe fn arg_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, GvStatus> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    Ok(&*p)
}

unsafe fn arg_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, GvStatus> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    Ok(&mut *p)
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, GvStatus> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_last_error(&format!("{name} is not valid UTF-8"));
        GvStatus::InvalidUtf8
    })
}

unsafe fn arg_slice<'a>(p: *const f32, len: usize, name: &str) -> Result<&'a [f32], GvStatus> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn check_out<T>(p: *mut T, name: &str) -> Result<(), GvStatus> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    Ok(())
}

fn image_tensor(
    data: &[f32],
    bands: usize,
    size: usize,
    name: &str,
) -> Result<Tensor<f32>, GvStatus> {
    let want = bands * size * size;
    if data.len() != want {
        return Err(fail(Error::contract(format!(
            "{name} buffer holds {} values, expected {bands}x{size}x{size} = {want}",
            data.len()
        ))));
    }
    Tensor::from_vec(vec![bands, size, size], data.to_vec()).map_err(fail)
}

fn owned_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "?"))
        .expect("nul bytes replaced")
        .into_raw()
}

/// Library version as a static, nul-terminated string. Never fails; the
/// returned pointer is valid for the lifetime of the process.
#[no_mangle]
pub extern "C" fn gv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on the calling thread, as a
/// nul-terminated string. The pointer stays valid until the next geovit
/// call on the same thread. Returns an empty string when no failure has
/// been recorded.
#[no_mangle]
pub extern "C" fn gv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string previously returned through a `char**` out-parameter.
/// Passing null is a no-op.
///
/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn gv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Create a model with the default architecture for `variant`, initializing
/// parameters from `seed`. On success `*out` owns the new handle.
///
/// # Safety
/// `out` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gv_model_new(
    variant: GvVariant,
    seed: u64,
    out: *mut *mut GvModel,
) -> GvStatus {
    guarded(|| {
        check_out(out, "out")?;
        let cfg = ModelConfig::default_for(variant.into());
        let mut model = Model::<f32>::new(cfg).map_err(fail)?;
        model.init(seed);
        let handle = Box::new(GvModel {
            model,
            train_config: TrainConfig::default(),
            norm: NormStats::identity(),
        });
        ptr::write(out, Box::into_raw(handle));
        Ok(())
    })
}

/// Create a model from a complete architecture document — the same JSON
/// shape that gv_model_config_json() returns — initializing parameters
/// from `seed`.
///
/// # Safety
/// `config_json` must be a nul-terminated string; `out` must point to
/// writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gv_model_new_from_json(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut GvModel,
) -> GvStatus {
    guarded(|| {
        check_out(out, "out")?;
        let text = arg_str(config_json, "config_json")?;
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| fail(Error::Json(e)))?;
        cfg.validate().map_err(fail)?;
        let mut model = Model::<f32>::new(cfg).map_err(fail)?;
        model.init(seed);
        let handle = Box::new(GvModel {
            model,
            train_config: TrainConfig::default(),
            norm: NormStats::identity(),
        });
        ptr::write(out, Box::into_raw(handle));
        Ok(())
    })
}

/// Release a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn gv_model_free(model: *mut GvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Report which task `model` solves.
///
/// # Safety
/// Both pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gv_model_variant(
    model: *const GvModel,
    out: *mut GvVariant,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        check_out(out, "out")?;
        ptr::write(out, handle.model.variant().into());
        Ok(())
    })
}

/// Serialize the model architecture as JSON. On success `*out` owns the
/// string; release it with gv_string_free().
///
/// # Safety
/// Both pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gv_model_config_json(
    model: *const GvModel,
    out: *mut *mut c_char,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        check_out(out, "out")?;
        let text =
            serde_json::to_string(handle.model.config()).map_err(|e| fail(Error::Json(e)))?;
        ptr::write(out, owned_c_string(text));
        Ok(())
    })
}

/// Total number of trainable scalars in the model.
///
/// # Safety
/// Both pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gv_model_scalar_count(
    model: *const GvModel,
    out: *mut usize,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        check_out(out, "out")?;
        let n: usize = handle
            .model
            .store()
            .iter()
            .map(|(_, entry)| entry.value.numel())
            .sum();
        ptr::write(out, n);
        Ok(())
    })
}

/// Number of optimization steps the model has absorbed.
///
/// # Safety
/// Both pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gv_model_step_count(
    model: *const GvModel,
    out: *mut u64,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        check_out(out, "out")?;
        ptr::write(out, handle.model.store().step_count());
        Ok(())
    })
}

/// Target destandardization statistics carried by the model: predictions
/// are reported as `value * std + mean`.
///
/// # Safety
/// All pointers must be valid; the out-parameters must be writable.
#[no_mangle]
pub unsafe extern "C" fn gv_model_norm(
    model: *const GvModel,
    out_mean: *mut f64,
    out_std: *mut f64,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        check_out(out_mean, "out_mean")?;
        check_out(out_std, "out_std")?;
        ptr::write(out_mean, handle.norm.target_mean);
        ptr::write(out_std, handle.norm.target_std);
        Ok(())
    })
}

/// Write the model, its optimizer state, its training configuration, and
/// its target statistics as a checkpoint directory.
///
/// # Safety
/// `model` must be valid; `dir` must be a nul-terminated path.
#[no_mangle]
pub unsafe extern "C" fn gv_model_save(
    model: *const GvModel,
    dir: *const c_char,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        let dir = arg_str(dir, "dir")?;
        save_checkpoint(
            Path::new(dir),
            handle.model.store(),
            handle.model.config(),
            &handle.train_config,
            &handle.norm,
        )
        .map_err(fail)
    })
}

/// Load a checkpoint directory into a fresh handle. On success `*out` owns
/// the model together with the training configuration and target
/// statistics stored alongside it.
///
/// # Safety
/// `dir` must be a nul-terminated path; `out` must point to writable
/// memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gv_model_load(
    dir: *const c_char,
    out: *mut *mut GvModel,
) -> GvStatus {
    guarded(|| {
        check_out(out, "out")?;
        let dir = arg_str(dir, "dir")?;
        let (model, meta) = load_checkpoint::<f32>(Path::new(dir)).map_err(fail)?;
        let handle = Box::new(GvModel {
            model,
            train_config: meta.train_config,
            norm: meta.norm,
        });
        ptr::write(out, Box::into_raw(handle));
        Ok(())
    })
}

/// Generate `count` synthetic samples matching the model's architecture
/// (variant, image size, band counts), seeded by `seed`. On success `*out`
/// owns the dataset handle.
///
/// # Safety
/// `model` must be valid; `out` must point to writable memory for one
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn gv_dataset_generate(
    model: *const GvModel,
    count: usize,
    seed: u64,
    out: *mut *mut GvDataset,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        check_out(out, "out")?;
        let ds = Dataset::<f32>::generate(handle.model.config(), count, seed).map_err(fail)?;
        ptr::write(out, Box::into_raw(Box::new(GvDataset { ds })));
        Ok(())
    })
}

/// Load a dataset directory written by gv_dataset_save() (or the CLI).
///
/// # Safety
/// `dir` must be a nul-terminated path; `out` must point to writable
/// memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gv_dataset_load(
    dir: *const c_char,
    out: *mut *mut GvDataset,
) -> GvStatus {
    guarded(|| {
        check_out(out, "out")?;
        let dir = arg_str(dir, "dir")?;
        let ds = load_dataset::<f32>(Path::new(dir)).map_err(fail)?;
        ptr::write(out, Box::into_raw(Box::new(GvDataset { ds })));
        Ok(())
    })
}

/// Write the dataset as a manifest plus one tensor file per array.
///
/// # Safety
/// `dataset` must be valid; `dir` must be a nul-terminated path.
#[no_mangle]
pub unsafe extern "C" fn gv_dataset_save(
    dataset: *const GvDataset,
    dir: *const c_char,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(dataset, "dataset")?;
        let dir = arg_str(dir, "dir")?;
        save_dataset(&handle.ds, Path::new(dir), None).map_err(fail)
    })
}

/// Number of samples in the dataset.
///
/// # Safety
/// Both pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gv_dataset_len(
    dataset: *const GvDataset,
    out: *mut usize,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(dataset, "dataset")?;
        check_out(out, "out")?;
        ptr::write(out, handle.ds.len());
        Ok(())
    })
}

/// Report which task the dataset's samples belong to.
///
/// # Safety
/// Both pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gv_dataset_variant(
    dataset: *const GvDataset,
    out: *mut GvVariant,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(dataset, "dataset")?;
        check_out(out, "out")?;
        ptr::write(out, handle.ds.variant.into());
        Ok(())
    })
}

/// Release a dataset handle. Passing null is a no-op.
///
/// # Safety
/// `dataset` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn gv_dataset_free(dataset: *mut GvDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Run optimization steps on `model` over the dataset's train split.
///
/// `train_config_json` may be null to keep the configuration already
/// carried by the handle; otherwise it is parsed as a training
/// configuration document in which every omitted key takes its built-in
/// default. A nonzero `steps` overrides the step count from either source.
/// `on_record` (nullable) receives one JSON history record per step;
/// returning nonzero aborts the run with a contract error. On success the
/// handle's training configuration and target statistics are updated to
/// match the run, so a following gv_model_save() records them.
///
/// # Safety
/// `model` and `dataset` must be valid handles; `train_config_json`, when
/// non-null, must be nul-terminated; `user_data` is passed through to the
/// callback untouched.
#[no_mangle]
pub unsafe extern "C" fn gv_train(
    model: *mut GvModel,
    dataset: *const GvDataset,
    train_config_json: *const c_char,
    steps: u64,
    on_record: GvRecordCallback,
    user_data: *mut c_void,
) -> GvStatus {
    guarded(|| {
        let handle = arg_mut(model, "model")?;
        let data = arg_ref(dataset, "dataset")?;
        let mut cfg = if train_config_json.is_null() {
            handle.train_config.clone()
        } else {
            let text = arg_str(train_config_json, "train_config_json")?;
            serde_json::from_str::<TrainConfig>(text).map_err(|e| fail(Error::Json(e)))?
        };
        if steps > 0 {
            cfg.steps = steps;
        }
        cfg.validate().map_err(fail)?;

        train_loop(&mut handle.model, &data.ds, &cfg, |record| {
            if let Some(cb) = on_record {
                let line = serde_json::to_string(record)?;
                let line = CString::new(line).expect("json never holds nul bytes");
                let verdict = cb(line.as_ptr(), user_data);
                if verdict != 0 {
                    return Err(Error::contract(format!(
                        "training aborted by callback (returned {verdict})"
                    )));
                }
            }
            Ok(())
        })
        .map_err(fail)?;

        handle.train_config = cfg;
        handle.norm = data.ds.norm;
        Ok(())
    })
}

/// Evaluate `model` over one split of the dataset and return the metrics
/// report as JSON. Regression metrics are destandardized with the target
/// statistics carried by the model handle (for a loaded checkpoint these
/// are its training-time statistics). On success `*out_report_json` owns
/// the string; release it with gv_string_free().
///
/// # Safety
/// All pointers must be valid; `out_report_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gv_evaluate(
    model: *const GvModel,
    dataset: *const GvDataset,
    split: GvSplit,
    out_report_json: *mut *mut c_char,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        let data = arg_ref(dataset, "dataset")?;
        check_out(out_report_json, "out_report_json")?;
        let samples = match split {
            GvSplit::All => &data.ds.samples[..],
            GvSplit::Train => data.ds.train(),
            GvSplit::Eval => data.ds.eval(),
        };
        let report = evaluate(&handle.model, samples, &handle.norm).map_err(fail)?;
        let text = serde_json::to_string(&report).map_err(|e| fail(Error::Json(e)))?;
        ptr::write(out_report_json, owned_c_string(text));
        Ok(())
    })
}

/// Run the CO2 model on one scene.
///
/// `s2` must hold exactly `s2_bands * image_size * image_size` values in
/// band-major row-major order; `weather` must hold exactly 3 values. The
/// predicted power (destandardized) and fuel class are written to
/// `out_power` and `out_fuel_class`. When `out_mask` is non-null it must
/// hold `image_size * image_size` floats (`mask_len`) and receives the
/// predicted plume mask as 0.0/1.0 values.
///
/// # Safety
/// All non-null pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gv_predict_co2(
    model: *const GvModel,
    s2: *const f32,
    s2_len: usize,
    weather: *const f32,
    weather_len: usize,
    out_power: *mut f64,
    out_fuel_class: *mut u32,
    out_mask: *mut f32,
    mask_len: usize,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        check_out(out_power, "out_power")?;
        check_out(out_fuel_class, "out_fuel_class")?;
        let Model::Co2(m) = &handle.model else {
            return Err(fail(Error::contract(
                "model solves the no2 task; call gv_predict_no2",
            )));
        };
        let cfg = handle.model.config();
        let s2 = arg_slice(s2, s2_len, "s2")?;
        let weather = arg_slice(weather, weather_len, "weather")?;
        if weather.len() != WEATHER_DIM {
            return Err(fail(Error::contract(format!(
                "weather buffer holds {} values, expected {WEATHER_DIM}",
                weather.len()
            ))));
        }
        let image = image_tensor(s2, cfg.s2_bands, cfg.image_size, "s2")?;
        let weather =
            Tensor::from_vec(vec![WEATHER_DIM], weather.to_vec()).map_err(fail)?;

        let pixels = cfg.image_size * cfg.image_size;
        if !out_mask.is_null() && mask_len != pixels {
            return Err(fail(Error::contract(format!(
                "mask buffer holds {mask_len} values, expected {pixels}"
            ))));
        }

        let pt = handle.model.store().frozen();
        let output = m.forward(&pt, &image, &weather).map_err(fail)?;
        let power = output.power.item().map_err(fail)? as f64;
        let power = power * handle.norm.target_std + handle.norm.target_mean;
        let fuel = argmax(output.fuel_logits.data()) as u32;
        let mask = logits_to_mask(&output.seg_logits).map_err(fail)?;

        ptr::write(out_power, power);
        ptr::write(out_fuel_class, fuel);
        if !out_mask.is_null() {
            ptr::copy_nonoverlapping(mask.data().as_ptr(), out_mask, pixels);
        }
        Ok(())
    })
}

/// Run the NO2 model on one scene.
///
/// `s2` must hold exactly `s2_bands * image_size * image_size` values and
/// `s5p` exactly `s5p_bands * image_size * image_size`, both band-major
/// row-major. The predicted concentration (destandardized) is written to
/// `out_concentration`.
///
/// # Safety
/// All pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gv_predict_no2(
    model: *const GvModel,
    s2: *const f32,
    s2_len: usize,
    s5p: *const f32,
    s5p_len: usize,
    out_concentration: *mut f64,
) -> GvStatus {
    guarded(|| {
        let handle = arg_ref(model, "model")?;
        check_out(out_concentration, "out_concentration")?;
        let Model::No2(m) = &handle.model else {
            return Err(fail(Error::contract(
                "model solves the co2 task; call gv_predict_co2",
            )));
        };
        let cfg = handle.model.config();
        let s2 = arg_slice(s2, s2_len, "s2")?;
        let s5p = arg_slice(s5p, s5p_len, "s5p")?;
        let s2 = image_tensor(s2, cfg.s2_bands, cfg.image_size, "s2")?;
        let s5p = image_tensor(s5p, cfg.s5p_bands, cfg.image_size, "s5p")?;

        let pt = handle.model.store().frozen();
        let output = m.forward(&pt, &s2, &s5p).map_err(fail)?;
        let value = output.concentration.item().map_err(fail)? as f64;
        let value = value * handle.norm.target_std + handle.norm.target_mean;
        ptr::write(out_concentration, value);
        Ok(())
    })
}

/// Compare analytic gradients of a small 64-bit model against central
/// finite differences. On success writes the largest relative error seen;
/// a failed comparison returns GV_STATUS_NUMERICAL with the offending
/// parameter named in the error message.
///
/// # Safety
/// `out_max_rel_error` must point to writable memory for one double.
#[no_mangle]
pub unsafe extern "C" fn gv_gradcheck(
    variant: GvVariant,
    seed: u64,
    out_max_rel_error: *mut f64,
) -> GvStatus {
    guarded(|| {
        check_out(out_max_rel_error, "out_max_rel_error")?;
        let report = run_gradcheck(variant.into(), seed).map_err(fail)?;
        if !report.passed() {
            return Err(fail(Error::numerical(format!(
                "gradient check failed: max rel error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                report.max_rel_error,
                report.worst_param,
                report.worst_coord,
                report.analytic,
                report.numeric
            ))));
        }
        ptr::write(out_max_rel_error, report.max_rel_error);
        Ok(())
    })
}
