//! C ABI over the spotvol estimator.
//!
//! Every function returns a [`SpotvolStatus`]; on failure the message is
//! available from [`spotvol_last_error`] on the same thread. Handles are
//! opaque, created by the `*_from_*` and `spotvol_estimate` functions and
//! released with the matching `*_free`. Matrices cross the boundary as row-major `double`
//! buffers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use spotvol::experiment::{self, FactorMode, PipelineConfig, PseudoStep, SpotBandwidth, TauGrid, ThresholdChoice};
use spotvol::preavg::BandwidthMode;
use spotvol::shrink::{self, ShrinkRule, SpotEstimate};
use spotvol::{Error, FilteredPanel, Kernel, TickSeries};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpotvolStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    BufferTooSmall = 4,
    Unavailable = 5,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpotvolKernel {
    Epanechnikov = 0,
    Uniform = 1,
    Gaussian = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpotvolRule {
    None = 0,
    Scad = 1,
    AdaptiveLasso = 2,
    Soft = 3,
    Hard = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpotvolMatrix {
    SigmaX = 0,
    SigmaC = 1,
    SigmaU = 2,
    Loadings = 3,
    Precision = 4,
}

/// Estimation options. Non-positive bandwidths and a negative `c_rho` select
/// the data-driven choices; `fixed_k < 0` selects the eigenvalue ratio.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpotvolOptions {
    pub spot_kernel: SpotvolKernel,
    pub h: f64,
    pub fixed_k: i32,
    /// 0 for the default search limit.
    pub k_max: u32,
    pub rule: SpotvolRule,
    pub c_rho: f64,
    pub with_precision: bool,
}

/// Filtered prices of `p` assets on a shared pseudo-grid.
pub struct SpotvolPanel {
    inner: FilteredPanel,
}

/// Spot volatility estimate at one time point.
pub struct SpotvolEstimate {
    inner: SpotEstimate,
    h: f64,
    capped: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: SpotvolStatus, msg: impl Into<String>) -> SpotvolStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> SpotvolStatus {
    let status = if e.is_validation() {
        SpotvolStatus::InvalidArgument
    } else {
        SpotvolStatus::Numerical
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SpotvolStatus) -> SpotvolStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SpotvolStatus::Panic, "internal panic"),
    }
}

impl From<SpotvolKernel> for Kernel {
    fn from(k: SpotvolKernel) -> Self {
        match k {
            SpotvolKernel::Epanechnikov => Kernel::Epanechnikov,
            SpotvolKernel::Uniform => Kernel::Uniform,
            SpotvolKernel::Gaussian => Kernel::Gaussian,
        }
    }
}

impl From<SpotvolRule> for ShrinkRule {
    fn from(r: SpotvolRule) -> Self {
        match r {
            SpotvolRule::None => ShrinkRule::None,
            SpotvolRule::Scad => ShrinkRule::scad(),
            SpotvolRule::AdaptiveLasso => ShrinkRule::adaptive_lasso(),
            SpotvolRule::Soft => ShrinkRule::Soft,
            SpotvolRule::Hard => ShrinkRule::Hard,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spotvol_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn spotvol_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn spotvol_options_default() -> SpotvolOptions {
    SpotvolOptions {
        spot_kernel: SpotvolKernel::Epanechnikov,
        h: 0.0,
        fixed_k: -1,
        k_max: 0,
        rule: SpotvolRule::Scad,
        c_rho: -1.0,
        with_precision: false,
    }
}

/// Filter tick data into a panel.
///
/// Asset `i` owns `counts[i]` consecutive entries of `times` and `prices`.
/// `delta0 <= 0` picks the default pseudo step, `b <= 0` cross-validates the
/// pre-averaging bandwidth per asset.
///
/// # Safety
/// `counts` must point to `n_assets` values; `times` and `prices` to
/// `sum(counts)` values each; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spotvol_panel_from_ticks(
    n_assets: usize,
    counts: *const usize,
    times: *const f64,
    prices: *const f64,
    horizon: f64,
    delta0: f64,
    b: f64,
    kernel: SpotvolKernel,
    out: *mut *mut SpotvolPanel,
) -> SpotvolStatus {
    guard(|| {
        if counts.is_null() || times.is_null() || prices.is_null() || out.is_null() {
            return fail(SpotvolStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let counts = std::slice::from_raw_parts(counts, n_assets);
        let total: usize = counts.iter().sum();
        let times = std::slice::from_raw_parts(times, total);
        let prices = std::slice::from_raw_parts(prices, total);
        let mut ticks = Vec::with_capacity(n_assets);
        let mut start = 0;
        for (i, &c) in counts.iter().enumerate() {
            let s = TickSeries::new(i, times[start..start + c].to_vec(), prices[start..start + c].to_vec());
            match s {
                Ok(s) => ticks.push(s),
                Err(e) => return from_error(e),
            }
            start += c;
        }
        let cfg = PipelineConfig {
            filter_kernel: kernel.into(),
            pseudo_step: if delta0 > 0.0 {
                PseudoStep::Fixed { delta0 }
            } else {
                PseudoStep::Auto
            },
            preavg_bandwidth: if b > 0.0 {
                BandwidthMode::Fixed { b }
            } else {
                BandwidthMode::CrossValidated { candidates: None }
            },
            ..PipelineConfig::default()
        };
        match experiment::filter_panel(&ticks, horizon, &cfg) {
            Ok(panel) => {
                *out = Box::into_raw(Box::new(SpotvolPanel { inner: panel }));
                SpotvolStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Wrap already-filtered prices (`p x n_points`, row-major) on the grid
/// `0, delta0, ..., (n_points - 1) delta0`.
///
/// # Safety
/// `values` must point to `p * n_points` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spotvol_panel_from_values(
    p: usize,
    n_points: usize,
    values: *const f64,
    delta0: f64,
    out: *mut *mut SpotvolPanel,
) -> SpotvolStatus {
    guard(|| {
        if values.is_null() || out.is_null() {
            return fail(SpotvolStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let data = std::slice::from_raw_parts(values, p * n_points);
        match FilteredPanel::from_values(DMatrix::from_row_slice(p, n_points, data), delta0) {
            Ok(panel) => {
                *out = Box::into_raw(Box::new(SpotvolPanel { inner: panel }));
                SpotvolStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `panel` must come from this library; output pointers may be NULL.
#[no_mangle]
pub unsafe extern "C" fn spotvol_panel_dims(
    panel: *const SpotvolPanel,
    p: *mut usize,
    n_increments: *mut usize,
    delta0: *mut f64,
) -> SpotvolStatus {
    guard(|| {
        let Some(panel) = panel.as_ref() else {
            return fail(SpotvolStatus::NullPointer, "null panel");
        };
        if !p.is_null() {
            *p = panel.inner.p();
        }
        if !n_increments.is_null() {
            *n_increments = panel.inner.n();
        }
        if !delta0.is_null() {
            *delta0 = panel.inner.delta0;
        }
        SpotvolStatus::Ok
    })
}

/// # Safety
/// `panel` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spotvol_panel_free(panel: *mut SpotvolPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

fn pipeline_from_options(opts: &SpotvolOptions, tau: f64) -> PipelineConfig {
    PipelineConfig {
        spot_kernel: opts.spot_kernel.into(),
        spot_bandwidth: if opts.h > 0.0 {
            SpotBandwidth::Fixed { h: opts.h }
        } else {
            SpotBandwidth::CrossValidated { candidates: None }
        },
        factors: if opts.fixed_k >= 0 {
            FactorMode::Fixed {
                k: opts.fixed_k as usize,
            }
        } else {
            FactorMode::EigenRatio {
                k_max: (opts.k_max > 0).then_some(opts.k_max as usize),
            }
        },
        taus: TauGrid::Explicit { taus: vec![tau] },
        threshold: if opts.c_rho >= 0.0 {
            ThresholdChoice::Fixed { c_rho: opts.c_rho }
        } else {
            ThresholdChoice::MinPd {
                grid: shrink::default_cpd_grid(),
            }
        },
        ..PipelineConfig::default()
    }
}

/// Estimate the spot volatility matrix at `tau`. `options` may be NULL for
/// the defaults.
///
/// # Safety
/// `panel` must come from this library; `options` is NULL or valid; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn spotvol_estimate(
    panel: *const SpotvolPanel,
    tau: f64,
    options: *const SpotvolOptions,
    out: *mut *mut SpotvolEstimate,
) -> SpotvolStatus {
    guard(|| {
        if out.is_null() {
            return fail(SpotvolStatus::NullPointer, "null output");
        }
        *out = ptr::null_mut();
        let Some(panel) = panel.as_ref() else {
            return fail(SpotvolStatus::NullPointer, "null panel");
        };
        let opts = options.as_ref().copied().unwrap_or_else(|| spotvol_options_default());
        let cfg = pipeline_from_options(&opts, tau);
        if let Err(e) = cfg.taus.resolve(panel.inner.horizon) {
            return from_error(e);
        }
        let run = || -> spotvol::Result<SpotvolEstimate> {
            let h = experiment::select_spot_bandwidth(&panel.inner, &cfg)?;
            let stage = experiment::spot_stage(&panel.inner, &cfg, h, tau)?;
            let (est, cert) =
                experiment::finish_estimate(&stage, opts.rule.into(), &cfg.threshold, opts.with_precision)?;
            Ok(SpotvolEstimate {
                inner: est,
                h,
                capped: cert.is_some_and(|c| c.capped),
            })
        };
        match run() {
            Ok(est) => {
                *out = Box::into_raw(Box::new(est));
                SpotvolStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Dimension `p`, factor count and the diagnostics of an estimate. Output
/// pointers may be NULL.
///
/// # Safety
/// `est` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn spotvol_estimate_info(
    est: *const SpotvolEstimate,
    p: *mut usize,
    k_hat: *mut usize,
    h: *mut f64,
    c_rho: *mut f64,
    c_rho_capped: *mut bool,
) -> SpotvolStatus {
    guard(|| {
        let Some(est) = est.as_ref() else {
            return fail(SpotvolStatus::NullPointer, "null estimate");
        };
        if !p.is_null() {
            *p = est.inner.sigma_hat_x.nrows();
        }
        if !k_hat.is_null() {
            *k_hat = est.inner.k_hat;
        }
        if !h.is_null() {
            *h = est.h;
        }
        if !c_rho.is_null() {
            *c_rho = est.inner.c_rho_used;
        }
        if !c_rho_capped.is_null() {
            *c_rho_capped = est.capped;
        }
        SpotvolStatus::Ok
    })
}

/// Copy one matrix of the estimate row-major into `buf`. `len` is the buffer
/// length in doubles; the required length is written to `needed` (may be
/// NULL) even when the buffer is too small.
///
/// # Safety
/// `est` must come from this library and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spotvol_estimate_copy(
    est: *const SpotvolEstimate,
    which: SpotvolMatrix,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> SpotvolStatus {
    guard(|| {
        let Some(est) = est.as_ref() else {
            return fail(SpotvolStatus::NullPointer, "null estimate");
        };
        let m = match which {
            SpotvolMatrix::SigmaX => &est.inner.sigma_hat_x,
            SpotvolMatrix::SigmaC => &est.inner.sigma_tilde_c,
            SpotvolMatrix::SigmaU => &est.inner.sigma_hat_u,
            SpotvolMatrix::Loadings => &est.inner.loadings,
            SpotvolMatrix::Precision => match &est.inner.precision {
                Some(m) => m,
                None => return fail(SpotvolStatus::Unavailable, "precision was not requested"),
            },
        };
        let count = m.nrows() * m.ncols();
        if !needed.is_null() {
            *needed = count;
        }
        if buf.is_null() {
            return fail(SpotvolStatus::NullPointer, "null buffer");
        }
        if len < count {
            return fail(
                SpotvolStatus::BufferTooSmall,
                format!("buffer holds {len} values, {count} needed"),
            );
        }
        let out = std::slice::from_raw_parts_mut(buf, count);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[i * m.ncols() + j] = m[(i, j)];
            }
        }
        SpotvolStatus::Ok
    })
}

/// # Safety
/// `est` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spotvol_estimate_free(est: *mut SpotvolEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Apply a shrinkage rule with threshold `rho` to one value.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spotvol_shrink_value(u: f64, rho: f64, rule: SpotvolRule, out: *mut f64) -> SpotvolStatus {
    guard(|| {
        if out.is_null() {
            return fail(SpotvolStatus::NullPointer, "null output");
        }
        if !(rho >= 0.0) {
            return fail(
                SpotvolStatus::InvalidArgument,
                format!("threshold must be non-negative, got {rho}"),
            );
        }
        *out = shrink::shrink_value(u, rho, rule.into());
        SpotvolStatus::Ok
    })
}

/// Smallest correlation-scaled threshold constant on `{0, 0.01, ..., 1}`
/// (refined by bisection) making the shrunk `p x p` matrix positive definite.
///
/// # Safety
/// `matrix` must hold `p * p` values; `c_rho` must be writable and
/// `capped` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn spotvol_min_cpd(
    p: usize,
    matrix: *const f64,
    rule: SpotvolRule,
    c_rho: *mut f64,
    capped: *mut bool,
) -> SpotvolStatus {
    guard(|| {
        if matrix.is_null() || c_rho.is_null() {
            return fail(SpotvolStatus::NullPointer, "null argument");
        }
        let m = DMatrix::from_row_slice(p, p, std::slice::from_raw_parts(matrix, p * p));
        match shrink::min_cpd(&m, rule.into(), &shrink::default_cpd_grid()) {
            Ok(cert) => {
                *c_rho = cert.c_rho;
                if !capped.is_null() {
                    *capped = cert.capped;
                }
                SpotvolStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Human-readable name of a status code (static string).
#[no_mangle]
pub extern "C" fn spotvol_status_name(status: SpotvolStatus) -> *const c_char {
    let s: &'static CStr = match status {
        SpotvolStatus::Ok => c"ok",
        SpotvolStatus::NullPointer => c"null pointer",
        SpotvolStatus::InvalidArgument => c"invalid argument",
        SpotvolStatus::Numerical => c"numerical failure",
        SpotvolStatus::BufferTooSmall => c"buffer too small",
        SpotvolStatus::Unavailable => c"unavailable",
        SpotvolStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}
