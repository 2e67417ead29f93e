//! C ABI over the spectree library.
//!
//! Panels and posterior draws cross the boundary as opaque handles that the
//! caller releases with the matching `*_free` function. Every fallible call
//! returns a [`SpectreeStatus`]; on failure the message is available from
//! [`spectree_last_error`] on the same thread until the next failing call.
//! Numeric outputs are written into caller-owned buffers whose length is
//! passed alongside and checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use spectree::analysis::{ale_lf_hf, inclusion_probabilities, predict_log_spectrum};
use spectree::panel::{demean, load_panel, n_fourier, PanelSchema, TimeSeriesPanel};
use spectree::sampler::{run_sampler, PosteriorDraws, SamplerConfig};
use spectree::simgen::{mse_log_scale, SimKind, SimSetting};
use spectree::{Error, RowMatrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectreeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Numerical = 6,
    Dimension = 7,
    Panic = 8,
}

/// Opaque panel handle.
pub struct SpectreePanel {
    panel: TimeSeriesPanel,
}

/// Opaque handle to the draws of one chain.
pub struct SpectreeDraws {
    draws: PosteriorDraws,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SpectreeStatus {
    match e {
        Error::Io(_) => SpectreeStatus::Io,
        Error::Csv(_) | Error::Json(_) | Error::Decode(_) | Error::Encode(_) | Error::NonNumeric { .. } => {
            SpectreeStatus::Parse
        }
        Error::DrawsFormat(_) => SpectreeStatus::Parse,
        Error::Config(_) | Error::UnknownSetting { .. } | Error::CheckpointMismatch(_) => SpectreeStatus::Config,
        Error::ModeNotConverged { .. } | Error::NonStationary(_) | Error::NonPositiveTruth(_) => {
            SpectreeStatus::Numerical
        }
        Error::Dimension(_) | Error::EmptyBand(_) => SpectreeStatus::Dimension,
        _ => SpectreeStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (SpectreeStatus, String)>) -> SpectreeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpectreeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(format!("internal panic: {msg}"));
            SpectreeStatus::Panic
        }
    }
}

type FfiResult<T> = Result<T, (SpectreeStatus, String)>;

fn lib<T>(r: spectree::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (SpectreeStatus, String) {
    (SpectreeStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SpectreeStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, expected: usize, what: &str) -> FfiResult<&'a mut [f64]> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expected {
        return Err((
            SpectreeStatus::Dimension,
            format!("`{what}` has length {len}, expected {expected}"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn spectree_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spectree_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a panel from series CSV, covariates CSV and schema JSON files.
///
/// # Safety
/// Path arguments must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spectree_panel_load(
    series_path: *const c_char,
    covariates_path: *const c_char,
    schema_path: *const c_char,
    demean_series: bool,
    out: *mut *mut SpectreePanel,
) -> SpectreeStatus {
    guard(|| {
        let series = PathBuf::from(str_arg(series_path, "series_path")?);
        let covariates = PathBuf::from(str_arg(covariates_path, "covariates_path")?);
        let schema = lib(PanelSchema::from_json_file(str_arg(schema_path, "schema_path")?))?;
        let panel = lib(load_panel(series, covariates, &schema))?;
        let panel = if demean_series { demean(&panel) } else { panel };
        put(out, Box::into_raw(Box::new(SpectreePanel { panel })), "out")
    })
}

/// Generates a simulated (demeaned) panel. When `truth_log` is non-null it
/// receives the `L x N` true log spectra in row-major order and
/// `truth_len` must equal `L * N`.
///
/// # Safety
/// `setting` must be a NUL-terminated string, `out` writable, and
/// `truth_log` either null or valid for `truth_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spectree_simulate(
    setting: *const c_char,
    n_series: usize,
    series_len: usize,
    seed: u64,
    out: *mut *mut SpectreePanel,
    truth_log: *mut f64,
    truth_len: usize,
) -> SpectreeStatus {
    guard(|| {
        let kind: SimKind = lib(str_arg(setting, "setting")?.parse())?;
        let (panel, truth) = lib(SimSetting::new(kind, n_series, series_len, seed).generate())?;
        if !truth_log.is_null() {
            let log = truth.log_spectra();
            out_slice(truth_log, truth_len, log.as_slice().len(), "truth_log")?.copy_from_slice(log.as_slice());
        }
        put(out, Box::into_raw(Box::new(SpectreePanel { panel: demean(&panel) })), "out")
    })
}

/// Panel dimensions: series count `L`, length `T`, covariates `P` and
/// Fourier frequencies `N`. Any output pointer may be null.
///
/// # Safety
/// `panel` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn spectree_panel_dims(
    panel: *const SpectreePanel,
    n_series: *mut usize,
    series_len: *mut usize,
    n_covariates: *mut usize,
    n_freqs: *mut usize,
) -> SpectreeStatus {
    guard(|| {
        let p = &ref_arg(panel, "panel")?.panel;
        for (ptr, v) in [
            (n_series, p.n_series()),
            (series_len, p.series_len()),
            (n_covariates, p.n_covariates()),
            (n_freqs, n_fourier(p.series_len())),
        ] {
            if !ptr.is_null() {
                ptr.write(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `panel` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spectree_panel_free(panel: *mut SpectreePanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Runs the sampler. `config_json` holds a sampler configuration document
/// (the `sampler` section of a run config) or is null for the defaults.
///
/// # Safety
/// `panel` must be a live handle, `config_json` null or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spectree_fit(
    panel: *const SpectreePanel,
    config_json: *const c_char,
    out: *mut *mut SpectreeDraws,
) -> SpectreeStatus {
    guard(|| {
        let p = &ref_arg(panel, "panel")?.panel;
        let config: SamplerConfig = if config_json.is_null() {
            SamplerConfig::default()
        } else {
            lib(SamplerConfig::from_json_str(str_arg(config_json, "config_json")?))?
        };
        let draws = lib(run_sampler(p, config))?;
        put(out, Box::into_raw(Box::new(SpectreeDraws { draws })), "out")
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_read(path: *const c_char, out: *mut *mut SpectreeDraws) -> SpectreeStatus {
    guard(|| {
        let draws = lib(spectree::io::read_draws(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(SpectreeDraws { draws })), "out")
    })
}

/// # Safety
/// `draws` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_write(draws: *const SpectreeDraws, path: *const c_char) -> SpectreeStatus {
    guard(|| {
        let d = &ref_arg(draws, "draws")?.draws;
        lib(spectree::io::write_draws(str_arg(path, "path")?, d))
    })
}

/// Kept draws, subjects `L`, frequencies `N` and covariates `P`. Any output
/// pointer may be null.
///
/// # Safety
/// `draws` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_dims(
    draws: *const SpectreeDraws,
    n_draws: *mut usize,
    n_subjects: *mut usize,
    n_freqs: *mut usize,
    n_covariates: *mut usize,
) -> SpectreeStatus {
    guard(|| {
        let d = &ref_arg(draws, "draws")?.draws;
        for (ptr, v) in [
            (n_draws, d.n_draws()),
            (n_subjects, d.n_subjects()),
            (n_freqs, d.n_freqs()),
            (n_covariates, d.schema.covariates.len()),
        ] {
            if !ptr.is_null() {
                ptr.write(v);
            }
        }
        Ok(())
    })
}

/// Fourier frequencies of the fitted panel; `len` must equal `N`.
///
/// # Safety
/// `draws` must be a live handle and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_freqs(draws: *const SpectreeDraws, out: *mut f64, len: usize) -> SpectreeStatus {
    guard(|| {
        let d = &ref_arg(draws, "draws")?.draws;
        out_slice(out, len, d.n_freqs(), "out")?.copy_from_slice(&d.freqs);
        Ok(())
    })
}

/// Posterior mean log spectrum of every subject, row-major `L x N`.
///
/// # Safety
/// `draws` must be a live handle and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_posterior_mean(
    draws: *const SpectreeDraws,
    out: *mut f64,
    len: usize,
) -> SpectreeStatus {
    guard(|| {
        let d = &ref_arg(draws, "draws")?.draws;
        if d.n_draws() == 0 {
            return Err((SpectreeStatus::Dimension, "no kept draws".into()));
        }
        let mean = d.posterior_mean();
        out_slice(out, len, mean.as_slice().len(), "out")?.copy_from_slice(mean.as_slice());
        Ok(())
    })
}

/// Log spectrum of kept draw `draw_index` at covariate vector `omega`
/// (length `P`, categorical entries as level indices); `out` has length `N`.
///
/// # Safety
/// `draws` must be a live handle, `omega` valid for `p` doubles and `out`
/// valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_predict(
    draws: *const SpectreeDraws,
    draw_index: usize,
    omega: *const f64,
    p: usize,
    out: *mut f64,
    len: usize,
) -> SpectreeStatus {
    guard(|| {
        let d = &ref_arg(draws, "draws")?.draws;
        let forest = d.forests.get(draw_index).ok_or_else(|| {
            (
                SpectreeStatus::InvalidArgument,
                format!("draw index {draw_index} out of range ({} draws)", d.n_draws()),
            )
        })?;
        if omega.is_null() {
            return Err(null("omega"));
        }
        let n_cov = d.schema.covariates.len();
        if p != n_cov {
            return Err((SpectreeStatus::Dimension, format!("omega has length {p}, expected {n_cov}")));
        }
        let omega = std::slice::from_raw_parts(omega, p);
        let basis = lib(d.basis())?;
        let log_f = predict_log_spectrum(omega, forest, &basis);
        out_slice(out, len, d.n_freqs(), "out")?.copy_from_slice(&log_f);
        Ok(())
    })
}

/// Posterior inclusion probability of each covariate; `len` must equal `P`.
///
/// # Safety
/// `draws` must be a live handle and `out` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_inclusion(
    draws: *const SpectreeDraws,
    out: *mut f64,
    len: usize,
) -> SpectreeStatus {
    guard(|| {
        let d = &ref_arg(draws, "draws")?.draws;
        let probs = lib(inclusion_probabilities(d))?;
        out_slice(out, len, probs.len(), "out")?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Posterior mean ALE of the LF/HF ratio for covariate `covariate` over `h`
/// equal-count intervals. Tied partition points merge, so the number of
/// reported points `h_used <= h` is written to `*h_used`; `points` and
/// `mean` must each hold at least `h` doubles.
///
/// # Safety
/// `draws` must be a live handle; `points` and `mean` valid for `h`
/// doubles; `h_used` writable.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_ale_lfhf(
    draws: *const SpectreeDraws,
    covariate: usize,
    h: usize,
    points: *mut f64,
    mean: *mut f64,
    h_used: *mut usize,
) -> SpectreeStatus {
    guard(|| {
        let d = &ref_arg(draws, "draws")?.draws;
        if points.is_null() || mean.is_null() {
            return Err(null("points/mean"));
        }
        let curve = lib(ale_lf_hf(d, covariate, h))?;
        let used = curve.grid.n_intervals();
        let pts = std::slice::from_raw_parts_mut(points, h);
        let mn = std::slice::from_raw_parts_mut(mean, h);
        for i in 0..used {
            pts[i] = curve.grid.points[i + 1];
            mn[i] = curve.mean[i][0];
        }
        put(h_used, used, "h_used")
    })
}

/// # Safety
/// `draws` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spectree_draws_free(draws: *mut SpectreeDraws) {
    if !draws.is_null() {
        drop(Box::from_raw(draws));
    }
}

/// Mean squared difference of two `rows x cols` row-major log-spectrum
/// matrices.
///
/// # Safety
/// `estimated` and `truth` must each be valid for `rows * cols` doubles and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spectree_mse_log(
    estimated: *const f64,
    truth: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> SpectreeStatus {
    guard(|| {
        if estimated.is_null() || truth.is_null() {
            return Err(null("estimated/truth"));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| (SpectreeStatus::InvalidArgument, "rows * cols overflows".to_string()))?;
        let e = RowMatrix::from_vec(rows, cols, std::slice::from_raw_parts(estimated, n).to_vec());
        let t = RowMatrix::from_vec(rows, cols, std::slice::from_raw_parts(truth, n).to_vec());
        put(out, lib(mse_log_scale(&e, &t))?, "out")
    })
}
