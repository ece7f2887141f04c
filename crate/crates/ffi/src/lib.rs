//! C interface to `music-core`.
//!
//! Every fallible function returns a [`MusicStatus`]. On failure the message is
//! kept per thread and can be read with [`music_last_error_message`]. Stores
//! and reports are opaque handles owned by the caller and released with their
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use music_core::classifier::TrainSpec;
use music_core::engine::{DeltaSchedule, Mode, MusicConfig};
use music_core::episode::{EpisodeConfig, Setting};
use music_core::evaluation::{run_benchmark, serialize_report, ReportFormat, RunReport};
use music_core::feature_store::{generate_synthetic, load_store, read_store, save_store, FeatureStore, SyntheticConfig};
use music_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MusicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    Config = 6,
    Sampling = 7,
    Numeric = 8,
    Contract = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MusicSetting {
    Inductive = 0,
    Transductive = 1,
    Distractive = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MusicMode {
    Full = 0,
    OnlyNeg = 1,
    OnlyPos = 2,
    NoDelta = 3,
    NoMinent = 4,
    AlternatingNegFirst = 5,
    AlternatingPosFirst = 6,
    SupportOnly = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MusicDeltaSchedule {
    Fixed = 0,
    Admissible = 1,
}

/// Parameters of the Gaussian-cluster generator.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MusicSyntheticConfig {
    pub num_classes: u32,
    pub dim: u32,
    pub samples_per_class: u32,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Episode, engine and scheduling options for [`music_run`].
///
/// Obtain defaults from [`music_run_options_default`] and override fields.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MusicRunOptions {
    pub ways: u32,
    pub shots: u32,
    pub unlabeled_per_class: u32,
    pub queries_per_class: u32,
    pub setting: MusicSetting,
    pub distractor_classes: u32,
    /// Negative means "same as `unlabeled_per_class`".
    pub distractor_unlabeled_per_class: i64,
    pub episodes: u32,
    pub base_seed: u64,
    pub mode: MusicMode,
    /// Reject threshold. Zero or negative means `1 / ways`.
    pub delta: f64,
    pub delta_schedule: MusicDeltaSchedule,
    pub minent_weight: f64,
    pub pos_threshold: f64,
    pub steps: u32,
    pub learning_rate: f64,
    pub momentum: f64,
    pub anchor_support: bool,
    pub bias: bool,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub threads: u32,
}

/// Opaque feature store handle.
pub struct MusicStore {
    inner: FeatureStore,
}

/// Opaque benchmark report handle.
pub struct MusicReport {
    inner: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MusicStatus {
    match err {
        Error::Io { .. } => MusicStatus::Io,
        Error::Format(_) | Error::Truncated(_) | Error::Manifest(_) => MusicStatus::Format,
        Error::Data { .. } => MusicStatus::Data,
        Error::Config(_) => MusicStatus::Config,
        Error::Sampling(_) => MusicStatus::Sampling,
        Error::Numeric(_) | Error::Training { .. } => MusicStatus::Numeric,
        Error::Contract(_) => MusicStatus::Contract,
    }
}

enum Failure {
    Status(MusicStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(MusicStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(MusicStatus::InvalidArgument, msg.into())
}

fn guard<F>(body: F) -> MusicStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MusicStatus::Ok,
        Ok(Err(Failure::Status(status, msg))) => {
            set_last_error(msg);
            status
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            MusicStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn put<T>(out: *mut *mut T, value: T) {
    // SAFETY: callers check `out` for null before building `value`.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message of the last failed call on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn music_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code, e.g. `"format"`.
#[no_mangle]
pub extern "C" fn music_status_name(status: MusicStatus) -> *const c_char {
    let s: &'static CStr = match status {
        MusicStatus::Ok => c"ok",
        MusicStatus::NullPointer => c"null pointer",
        MusicStatus::InvalidArgument => c"invalid argument",
        MusicStatus::Io => c"io",
        MusicStatus::Format => c"format",
        MusicStatus::Data => c"data",
        MusicStatus::Config => c"config",
        MusicStatus::Sampling => c"sampling",
        MusicStatus::Numeric => c"numeric",
        MusicStatus::Contract => c"contract",
        MusicStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Reads a store (and its manifest sidecar, if present) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn music_store_read(path: *const c_char, out: *mut *mut MusicStore) -> MusicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        put(out, MusicStore { inner: load_store(&path)? });
        Ok(())
    })
}

/// Decodes a store from an in-memory buffer.
///
/// # Safety
/// `bytes` must point to `len` readable bytes (it may be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn music_store_decode(bytes: *const u8, len: usize, out: *mut *mut MusicStore) -> MusicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data: &[u8] = if len == 0 {
            &[]
        } else if bytes.is_null() {
            return Err(null("bytes"));
        } else {
            std::slice::from_raw_parts(bytes, len)
        };
        put(out, MusicStore { inner: read_store(data)? });
        Ok(())
    })
}

/// Writes `store` to `path`, plus its manifest sidecar when it has one.
///
/// # Safety
/// `store` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn music_store_write(store: *const MusicStore, path: *const c_char) -> MusicStatus {
    guard(|| {
        let store = store.as_ref().ok_or_else(|| null("store"))?;
        let path = path_arg(path)?;
        save_store(&store.inner, &path)?;
        Ok(())
    })
}

/// Generates a synthetic Gaussian-cluster store.
///
/// # Safety
/// `config` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn music_store_generate_synthetic(
    config: *const MusicSyntheticConfig,
    out: *mut *mut MusicStore,
) -> MusicStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = SyntheticConfig {
            num_classes: c.num_classes as usize,
            dim: c.dim as usize,
            samples_per_class: c.samples_per_class as usize,
            separation: c.separation,
            noise_sigma: c.noise_sigma,
            seed: c.seed,
        };
        put(out, MusicStore { inner: generate_synthetic(&cfg)? });
        Ok(())
    })
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn music_store_dim(store: *const MusicStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.dim())
}

/// Number of classes declared in the header, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn music_store_num_classes(store: *const MusicStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.num_classes())
}

/// Number of records, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn music_store_len(store: *const MusicStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.len())
}

/// # Safety
/// `store` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn music_store_free(store: *mut MusicStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

#[no_mangle]
pub extern "C" fn music_run_options_default() -> MusicRunOptions {
    let e = EpisodeConfig::default();
    let m = MusicConfig::default();
    MusicRunOptions {
        ways: e.ways as u32,
        shots: e.shots as u32,
        unlabeled_per_class: e.unlabeled_per_class as u32,
        queries_per_class: e.queries_per_class as u32,
        setting: MusicSetting::Inductive,
        distractor_classes: e.distractor_classes as u32,
        distractor_unlabeled_per_class: -1,
        episodes: e.episodes as u32,
        base_seed: e.base_seed,
        mode: MusicMode::Full,
        delta: 0.0,
        delta_schedule: MusicDeltaSchedule::Fixed,
        minent_weight: m.minent_weight,
        pos_threshold: m.pos_threshold,
        steps: m.train.steps as u32,
        learning_rate: m.train.learning_rate,
        momentum: m.train.momentum,
        anchor_support: m.anchor_support,
        bias: m.bias,
        threads: 0,
    }
}

fn configs(o: &MusicRunOptions) -> (EpisodeConfig, MusicConfig) {
    let episode = EpisodeConfig {
        ways: o.ways as usize,
        shots: o.shots as usize,
        unlabeled_per_class: o.unlabeled_per_class as usize,
        queries_per_class: o.queries_per_class as usize,
        setting: match o.setting {
            MusicSetting::Inductive => Setting::Inductive,
            MusicSetting::Transductive => Setting::Transductive,
            MusicSetting::Distractive => Setting::Distractive,
        },
        distractor_classes: o.distractor_classes as usize,
        distractor_unlabeled_per_class: usize::try_from(o.distractor_unlabeled_per_class).ok(),
        episodes: o.episodes as usize,
        base_seed: o.base_seed,
    };
    let music = MusicConfig {
        delta: (o.delta > 0.0).then_some(o.delta),
        delta_schedule: match o.delta_schedule {
            MusicDeltaSchedule::Fixed => DeltaSchedule::Fixed,
            MusicDeltaSchedule::Admissible => DeltaSchedule::Admissible,
        },
        minent_weight: o.minent_weight,
        mode: match o.mode {
            MusicMode::Full => Mode::Full,
            MusicMode::OnlyNeg => Mode::OnlyNeg,
            MusicMode::OnlyPos => Mode::OnlyPos,
            MusicMode::NoDelta => Mode::NoDelta,
            MusicMode::NoMinent => Mode::NoMinent,
            MusicMode::AlternatingNegFirst => Mode::AlternatingNegFirst,
            MusicMode::AlternatingPosFirst => Mode::AlternatingPosFirst,
            MusicMode::SupportOnly => Mode::SupportOnly,
        },
        pos_threshold: o.pos_threshold,
        train: TrainSpec {
            steps: o.steps as usize,
            learning_rate: o.learning_rate,
            momentum: o.momentum,
        },
        anchor_support: o.anchor_support,
        bias: o.bias,
    };
    (episode, music)
}

/// Runs `options.episodes` episodes on `store` and returns the report.
///
/// # Safety
/// `store` and `options` must be live and readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn music_run(
    store: *const MusicStore,
    options: *const MusicRunOptions,
    out: *mut *mut MusicReport,
) -> MusicStatus {
    guard(|| {
        let store = store.as_ref().ok_or_else(|| null("store"))?;
        let options = options.as_ref().ok_or_else(|| null("options"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (episode, music) = configs(options);
        let report = run_benchmark(&store.inner, "ffi", &episode, &music, options.threads as usize)?;
        put(out, MusicReport { inner: report });
        Ok(())
    })
}

/// Mean query accuracy as a fraction in [0, 1], or NaN for a null handle.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn music_report_mean_accuracy(report: *const MusicReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.inner.mean_accuracy)
}

/// 95% confidence half-width of the mean accuracy (same units), or NaN for
/// a null handle.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn music_report_ci95(report: *const MusicReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.inner.ci95_halfwidth)
}

/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn music_report_episodes(report: *const MusicReport) -> u64 {
    report.as_ref().map_or(0, |r| r.inner.episodes)
}

/// Serializes the report as JSON into a new string; free it with
/// [`music_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn music_report_to_json(report: *const MusicReport, out: *mut *mut c_char) -> MusicStatus {
    guard(|| {
        let report = report.as_ref().ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = serialize_report(&report.inner, ReportFormat::Json)?;
        let s = CString::new(bytes).map_err(|_| invalid("report contains a NUL byte"))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn music_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn music_report_free(report: *mut MusicReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
