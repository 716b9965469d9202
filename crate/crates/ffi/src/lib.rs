//! C ABI over `ratiovr`.
//!
//! Every fallible call returns an [`RvrStatus`]; on failure the message is
//! available from [`rvr_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function, and strings returned by the
//! library are released with [`rvr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ratiovr::eval::{analyze_experiment, sample_size_reduction};
use ratiovr::gbdt::{self, FeatureMatrix, GbdtModel, GbdtParams};
use ratiovr::io::{self, Format, IngestOptions};
use ratiovr::ratio::{self, RatioMetricSpec};
use ratiovr::stats::{self, SampleStats};
use ratiovr::{CovariateSet, Error, Experiment, UnitRecord, VrConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RvrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Rejected input data or configuration.
    Validation = 3,
    Io = 4,
    Internal = 5,
    Panic = 6,
}

/// Unit records collected for one experiment.
pub struct RvrExperiment {
    control: String,
    units: Vec<UnitRecord>,
}

/// A trained gradient-boosted tree ensemble.
pub struct RvrModel {
    model: GbdtModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvrGbdtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_bins: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl From<RvrGbdtParams> for GbdtParams {
    fn from(p: RvrGbdtParams) -> Self {
        GbdtParams {
            n_trees: p.n_trees,
            learning_rate: p.learning_rate,
            max_depth: p.max_depth,
            min_samples_leaf: p.min_samples_leaf,
            max_bins: p.max_bins,
            subsample: p.subsample,
            seed: p.seed,
        }
    }
}

impl From<&GbdtParams> for RvrGbdtParams {
    fn from(p: &GbdtParams) -> Self {
        RvrGbdtParams {
            n_trees: p.n_trees,
            learning_rate: p.learning_rate,
            max_depth: p.max_depth,
            min_samples_leaf: p.min_samples_leaf,
            max_bins: p.max_bins,
            subsample: p.subsample,
            seed: p.seed,
        }
    }
}

/// Raw and variance-reduced test of one experiment.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RvrAnalysis {
    pub z_raw: f64,
    pub p_raw: f64,
    pub ate_raw: f64,
    pub z_reduced: f64,
    pub p_reduced: f64,
    pub ate_reduced: f64,
    pub variance_reduction_pct: f64,
    pub linearization_c: f64,
    pub n_treatment: usize,
    pub n_control: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Status(RvrStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn status_of(e: &Error) -> RvrStatus {
    match e {
        Error::Io { .. } => RvrStatus::Io,
        _ if e.is_validation() => RvrStatus::Validation,
        _ => RvrStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RvrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RvrStatus::Ok
        }
        Ok(Err(Failure::Status(status, message))) => {
            set_last_error(message);
            status
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("panic inside ratiovr".into());
            RvrStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure::Status(RvrStatus::NullPointer, format!("{name} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(RvrStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn read_slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::Status(RvrStatus::Internal, "string contains NUL".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rvr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn rvr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rvr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn rvr_std_normal_cdf(x: f64) -> f64 {
    stats::std_normal_cdf(x)
}

/// Two-tailed p-value of a z statistic.
#[no_mangle]
pub extern "C" fn rvr_p_value(z: f64) -> f64 {
    stats::p_value(z)
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rvr_sample_size_reduction(relative_z: f64, out: *mut f64) -> RvrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = sample_size_reduction(relative_z)?;
        Ok(())
    })
}

/// Per-unit Delta-method variance of a ratio from component moments.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rvr_delta_variance(
    mean_num: f64,
    var_num: f64,
    mean_den: f64,
    var_den: f64,
    cov: f64,
    out: *mut f64,
) -> RvrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let stats = |mean, variance| SampleStats { n: 2, mean, variance };
        *out = ratio::delta_variance(&stats(mean_num, var_num), &stats(mean_den, var_den), cov)?;
        Ok(())
    })
}

/// # Safety
/// `control` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rvr_experiment_new(control: *const c_char, out: *mut *mut RvrExperiment) -> RvrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let control = read_str(control, "control")?.to_string();
        *out = Box::into_raw(Box::new(RvrExperiment {
            control,
            units: Vec::new(),
        }));
        Ok(())
    })
}

/// Appends one unit. Pass NaN for a missing pre-period value; `features` may
/// be NULL when `n_features` is 0.
///
/// # Safety
/// `experiment` must be a live handle, the strings NUL-terminated and
/// `features` readable for `n_features` values.
#[no_mangle]
pub unsafe extern "C" fn rvr_experiment_add_unit(
    experiment: *mut RvrExperiment,
    unit_id: *const c_char,
    variant: *const c_char,
    numerator: f64,
    denominator: f64,
    pre_numerator: f64,
    pre_denominator: f64,
    features: *const f64,
    n_features: usize,
) -> RvrStatus {
    guard(|| {
        let exp = experiment.as_mut().ok_or_else(|| null("experiment"))?;
        let optional = |v: f64| if v.is_nan() { None } else { Some(v) };
        let unit = UnitRecord {
            unit_id: read_str(unit_id, "unit_id")?.to_string(),
            variant: read_str(variant, "variant")?.to_string(),
            numerator,
            denominator,
            pre_numerator: optional(pre_numerator),
            pre_denominator: optional(pre_denominator),
            features: read_slice(features, n_features, "features")?.to_vec(),
        };
        unit.validate(Some(&RatioMetricSpec::retention()))
            .map_err(|reason| Failure::Status(RvrStatus::Validation, reason))?;
        exp.units.push(unit);
        Ok(())
    })
}

/// Loads unit records from a CSV or JSONL file. `format` is "csv", "jsonl"
/// or NULL to infer it from the extension.
///
/// # Safety
/// Strings must be NUL-terminated (`format` may be NULL) and `out` valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn rvr_experiment_load(
    path: *const c_char,
    format: *const c_char,
    control: *const c_char,
    out: *mut *mut RvrExperiment,
) -> RvrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = Path::new(read_str(path, "path")?);
        let format = if format.is_null() {
            Format::from_path(path)
        } else {
            match read_str(format, "format")? {
                "csv" => Some(Format::Csv),
                "jsonl" => Some(Format::Jsonl),
                _ => None,
            }
        }
        .ok_or_else(|| Failure::Status(RvrStatus::Validation, "unknown format".into()))?;
        let control = read_str(control, "control")?.to_string();
        let spec = RatioMetricSpec::retention();
        let opts = IngestOptions {
            metric: Some(&spec),
            ..IngestOptions::default()
        };
        let ingested = io::ingest(path, format, &opts)?;
        *out = Box::into_raw(Box::new(RvrExperiment {
            control,
            units: ingested.records,
        }));
        Ok(())
    })
}

/// Number of units held, or 0 for NULL.
///
/// # Safety
/// `experiment` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rvr_experiment_len(experiment: *const RvrExperiment) -> usize {
    experiment.as_ref().map_or(0, |e| e.units.len())
}

/// # Safety
/// `experiment` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rvr_experiment_free(experiment: *mut RvrExperiment) {
    if !experiment.is_null() {
        drop(Box::from_raw(experiment));
    }
}

/// Tests the retention ratio of an experiment, raw and reduced with
/// `method` ("raw", "pre", "pred" or "union"). `folds` is the number of
/// cross-fitting folds for the GBDT predictions; `params` may be NULL for
/// the defaults.
///
/// # Safety
/// `experiment` must be a live handle, `method` NUL-terminated, `params`
/// NULL or readable and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rvr_analyze(
    experiment: *const RvrExperiment,
    method: *const c_char,
    folds: usize,
    params: *const RvrGbdtParams,
    alpha: f64,
    out: *mut RvrAnalysis,
) -> RvrStatus {
    guard(|| {
        let exp = experiment.as_ref().ok_or_else(|| null("experiment"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config = VrConfig {
            covariate_set: CovariateSet::from_label(read_str(method, "method")?)?,
            gbdt_params: params.as_ref().map_or_else(GbdtParams::default, |p| (*p).into()),
            cross_fit_folds: folds,
            ..VrConfig::default()
        };
        let experiment = Experiment::from_units("ffi", exp.units.clone(), &exp.control)?;
        let report = analyze_experiment(&experiment, &RatioMetricSpec::retention(), &config, alpha)?;
        *out = RvrAnalysis {
            z_raw: report.raw.z,
            p_raw: report.raw.p_value,
            ate_raw: report.raw.ate,
            z_reduced: report.reduced.z,
            p_reduced: report.reduced.p_value,
            ate_reduced: report.reduced.ate,
            variance_reduction_pct: report.variance_reduction_pct,
            linearization_c: report.linearization_c,
            n_treatment: report.raw.n_a,
            n_control: report.raw.n_b,
        };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn rvr_gbdt_params_default() -> RvrGbdtParams {
    (&GbdtParams::default()).into()
}

/// Fits a model on a row-major `n_rows x n_cols` matrix.
///
/// # Safety
/// `features` must hold `n_rows * n_cols` values, `targets` `n_rows`
/// values, `params` be NULL or readable, and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rvr_gbdt_fit(
    features: *const f64,
    n_rows: usize,
    n_cols: usize,
    targets: *const f64,
    params: *const RvrGbdtParams,
    out: *mut *mut RvrModel,
) -> RvrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n_rows
            .checked_mul(n_cols)
            .ok_or_else(|| Failure::Status(RvrStatus::Validation, "matrix too large".into()))?;
        let x = FeatureMatrix::new(read_slice(features, len, "features")?.to_vec(), n_rows, n_cols)?;
        let y = read_slice(targets, n_rows, "targets")?;
        let params = params.as_ref().map_or_else(GbdtParams::default, |p| (*p).into());
        let model = gbdt::fit(&x, y, &params)?;
        *out = Box::into_raw(Box::new(RvrModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle, `features` hold `n_rows * n_cols` values
/// and `out` be writable for `n_rows` values.
#[no_mangle]
pub unsafe extern "C" fn rvr_gbdt_predict(
    model: *const RvrModel,
    features: *const f64,
    n_rows: usize,
    n_cols: usize,
    out: *mut f64,
) -> RvrStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() && n_rows > 0 {
            return Err(null("out"));
        }
        let len = n_rows
            .checked_mul(n_cols)
            .ok_or_else(|| Failure::Status(RvrStatus::Validation, "matrix too large".into()))?;
        let x = FeatureMatrix::new(read_slice(features, len, "features")?.to_vec(), n_rows, n_cols)?;
        let predictions = model.predict(&x)?;
        if n_rows > 0 {
            std::slice::from_raw_parts_mut(out, n_rows).copy_from_slice(&predictions);
        }
        Ok(())
    })
}

/// Serializes a model; free the string with [`rvr_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rvr_gbdt_to_json(model: *const RvrModel, out: *mut *mut c_char) -> RvrStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = into_c_string(model.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `json` must be NUL-terminated and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rvr_gbdt_from_json(json: *const c_char, out: *mut *mut RvrModel) -> RvrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = GbdtModel::from_json(read_str(json, "json")?)?;
        *out = Box::into_raw(Box::new(RvrModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rvr_gbdt_free(model: *mut RvrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
