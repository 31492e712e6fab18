//! Kernel-weighted pre-averaging of noisy asynchronous ticks onto a common
//! pseudo-grid.
//!
//! For asset `i` with ticks `(t_j, Y_j)` and the convention `t_0 = 0`,
//!
//! ```text
//! X~(t) = sum_j (t_j - t_{j-1}) L_b(t_j - t) Y_j,     L_b(u) = L(u / b) / b.
//! ```
//!
//! The spacing weights make the filter a Riemann sum of the kernel, so it
//! passes smooth signals through and synchronises assets with different clocks.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

pub use crate::sim::TickSeries;

/// Number of points in the default bandwidth candidate grid.
pub const DEFAULT_CANDIDATES: usize = 10;

/// Fraction of the sample trimmed at each end of the CV evaluation window.
pub const CV_TRIM: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub values: Vec<f64>,
    /// Grid indices with no observation inside the kernel window. Their values
    /// are copied from the nearest grid point that had data.
    pub degenerate: Vec<usize>,
}

/// Spacing weights `t_j - t_{j-1}` with `t_0 = 0`.
fn spacing_weights(times: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    times
        .iter()
        .map(|&t| {
            let w = t - prev;
            prev = t;
            w
        })
        .collect()
}

/// Index range of ticks within `radius * b` of `t`.
fn window(times: &[f64], t: f64, b: f64, radius: f64) -> (usize, usize) {
    if radius.is_infinite() {
        return (0, times.len());
    }
    let half = radius * b;
    let lo = times.partition_point(|&s| s < t - half);
    let hi = times.partition_point(|&s| s <= t + half);
    (lo, hi)
}

pub fn kernel_filter(ticks: &TickSeries, kernel: &KernelSpec, b: f64, grid: &[f64]) -> Result<FilterOutput> {
    ticks.validate()?;
    if !(b > 0.0) {
        return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {b}")));
    }
    let weights = spacing_weights(&ticks.times);
    let radius = kernel.radius();

    let mut values = Vec::with_capacity(grid.len());
    let mut degenerate = Vec::new();
    for (g, &t) in grid.iter().enumerate() {
        let (lo, hi) = window(&ticks.times, t, b, radius);
        let mut acc = 0.0;
        let mut hit = false;
        for j in lo..hi {
            let kw = kernel.weight(ticks.times[j] - t, b);
            if kw > 0.0 {
                hit = true;
                acc += weights[j] * kw * ticks.prices[j];
            }
        }
        if !hit {
            degenerate.push(g);
        }
        values.push(acc);
    }

    if !degenerate.is_empty() {
        if degenerate.len() == grid.len() {
            return Err(Error::DegenerateWindow);
        }
        impute_nearest(&mut values, &degenerate);
    }
    Ok(FilterOutput { values, degenerate })
}

/// Replace each degenerate entry by the value at the nearest valid index,
/// preferring the earlier one on ties.
fn impute_nearest(values: &mut [f64], degenerate: &[usize]) {
    let n = values.len();
    let mut valid = vec![true; n];
    for &d in degenerate {
        valid[d] = false;
    }
    let source = values.to_vec();
    for &d in degenerate {
        let mut best = None;
        for dist in 1..n {
            if d >= dist && valid[d - dist] {
                best = Some(d - dist);
                break;
            }
            if d + dist < n && valid[d + dist] {
                best = Some(d + dist);
                break;
            }
        }
        if let Some(src) = best {
            values[d] = source[src];
        }
    }
}

/// Leave-one-out cross-validation loss of one bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvLoss {
    /// Mean squared prediction error over the non-degenerate evaluation points.
    pub loss: f64,
    pub evaluated: usize,
    pub degenerate: usize,
}

impl CvLoss {
    pub fn is_usable(&self) -> bool {
        self.evaluated > 0 && self.degenerate * 2 <= self.evaluated + self.degenerate
    }
}

/// CV loss of the pre-averaging filter at bandwidth `b`, evaluated on ticks in
/// `[0.05 T_i, 0.95 T_i]` where `T_i` is the last observation time.
///
/// Removing tick `j` merges its spacing into tick `j + 1`, so the
/// leave-one-out value follows from the full one by an O(1) correction.
pub fn preaverage_cv_loss(ticks: &TickSeries, kernel: &KernelSpec, b: f64) -> CvLoss {
    let times = &ticks.times;
    let prices = &ticks.prices;
    let weights = spacing_weights(times);
    let end = ticks.end();
    let (lower, upper) = (CV_TRIM * end, (1.0 - CV_TRIM) * end);
    let radius = kernel.radius();
    let n = times.len();

    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut degenerate = 0;
    for j in 0..n {
        let t = times[j];
        if t < lower || t > upper {
            continue;
        }
        let (lo, hi) = window(times, t, b, radius);
        let mut full = 0.0;
        let mut hit = false;
        for m in lo..hi {
            let kw = kernel.weight(times[m] - t, b);
            if m != j && kw > 0.0 {
                hit = true;
            }
            full += weights[m] * kw * prices[m];
        }
        if !hit {
            degenerate += 1;
            continue;
        }
        let mut loo = full - weights[j] * kernel.weight(0.0, b) * prices[j];
        if j + 1 < n {
            loo += weights[j] * kernel.weight(times[j + 1] - t, b) * prices[j + 1];
        }
        let r = prices[j] - loo;
        sum += r * r;
        evaluated += 1;
    }
    CvLoss {
        loss: if evaluated > 0 {
            sum / evaluated as f64
        } else {
            f64::INFINITY
        },
        evaluated,
        degenerate,
    }
}

/// First minimiser of `losses` among usable candidates.
pub(crate) fn argmin_usable(candidates: &[f64], losses: &[CvLoss]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (&c, l) in candidates.iter().zip(losses) {
        if !l.is_usable() || !l.loss.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, bl)| l.loss < bl) {
            best = Some((c, l.loss));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::AllDegenerate)
}

fn check_candidates(candidates: &[f64]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("bandwidth candidate grid is empty".into()));
    }
    if let Some(c) = candidates.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::InvalidConfig(format!("bandwidth candidate {c} is not positive")));
    }
    Ok(())
}

pub fn cv_bandwidth_preaverage(ticks: &TickSeries, kernel: &KernelSpec, candidates: &[f64]) -> Result<f64> {
    check_candidates(candidates)?;
    ticks.validate()?;
    if ticks.len() < 10 {
        return Err(Error::EmptySeries {
            asset_id: ticks.asset_id,
            count: ticks.len(),
        });
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let losses: Vec<CvLoss> = candidates
        .iter()
        .map(|&b| preaverage_cv_loss(ticks, kernel, b))
        .collect();
    argmin_usable(candidates, &losses)
}

/// `count` geometrically spaced values from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 || hi <= lo {
        return vec![lo];
    }
    let ratio = (hi / lo).powf(1.0 / (count - 1) as f64);
    (0..count).map(|i| lo * ratio.powi(i as i32)).collect()
}

/// Geometric grid from twice the median inter-tick gap up to `0.1 T`.
pub fn default_preaverage_candidates(ticks: &TickSeries, horizon: f64) -> Vec<f64> {
    let mut gaps: Vec<f64> = ticks.times.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return vec![0.1 * horizon];
    }
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    geometric_grid(2.0 * median, 0.1 * horizon, DEFAULT_CANDIDATES)
}

/// Pseudo-grid step giving `floor(n^(2/3))` cells, where `n` is the smallest
/// per-asset tick count.
pub fn default_pseudo_step(all_ticks: &[TickSeries], horizon: f64) -> f64 {
    let n_min = all_ticks.iter().map(TickSeries::len).min().unwrap_or(1).max(1);
    let cells = (((n_min as f64).powf(2.0 / 3.0) + 1e-9).floor() as usize).max(1);
    horizon / cells as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BandwidthMode {
    Fixed {
        b: f64,
    },
    PerAsset {
        b: Vec<f64>,
    },
    /// Leave-one-out CV per asset; `None` uses each asset's default grid.
    CrossValidated {
        candidates: Option<Vec<f64>>,
    },
}

/// Filtered prices of all assets on the pseudo-grid `t_j = j delta0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredPanel {
    pub grid: Vec<f64>,
    /// `p x (N + 1)` filtered log-prices, rows in input asset order.
    pub values: DMatrix<f64>,
    pub bandwidths: Vec<f64>,
    pub asset_ids: Vec<usize>,
    pub delta0: f64,
    pub horizon: f64,
    /// Grid points (summed over assets) whose value had to be imputed.
    pub degenerate_points: usize,
}

impl FilteredPanel {
    /// Build a panel from already-filtered values on an equispaced grid.
    pub fn from_values(values: DMatrix<f64>, delta0: f64) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(Error::InvalidConfig("panel needs at least two grid points".into()));
        }
        if !(delta0 > 0.0) {
            return Err(Error::InvalidConfig("pseudo step must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("panel values must be finite".into()));
        }
        let n = values.ncols() - 1;
        let p = values.nrows();
        Ok(Self {
            grid: (0..=n).map(|j| j as f64 * delta0).collect(),
            values,
            bandwidths: vec![f64::NAN; p],
            asset_ids: (0..p).collect(),
            delta0,
            horizon: n as f64 * delta0,
            degenerate_points: 0,
        })
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    /// Number of increments `N`.
    pub fn n(&self) -> usize {
        self.grid.len() - 1
    }

    /// `p x N` matrix whose column `j - 1` is `X~(t_j) - X~(t_{j-1})`.
    pub fn increments(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(self.p(), n, |i, j| self.values[(i, j + 1)] - self.values[(i, j)])
    }
}

pub fn build_panel(
    all_ticks: &[TickSeries],
    kernel: &KernelSpec,
    delta0: f64,
    horizon: f64,
    bw: &BandwidthMode,
) -> Result<FilteredPanel> {
    if all_ticks.is_empty() {
        return Err(Error::InvalidConfig("no assets supplied".into()));
    }
    if !(delta0 > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidConfig("pseudo step and horizon must be positive".into()));
    }
    if let BandwidthMode::PerAsset { b } = bw {
        if b.len() != all_ticks.len() {
            return Err(Error::shape(
                format!("{} bandwidths", all_ticks.len()),
                format!("{} bandwidths", b.len()),
            ));
        }
    }
    let n = (horizon / delta0 + 1e-9).floor() as usize;
    if n < 1 {
        return Err(Error::InvalidConfig(format!(
            "pseudo step {delta0} exceeds horizon {horizon}"
        )));
    }
    let grid: Vec<f64> = (0..=n).map(|j| j as f64 * delta0).collect();

    let rows: Vec<(f64, FilterOutput)> = all_ticks
        .par_iter()
        .enumerate()
        .map(|(idx, ticks)| {
            let id = ticks.asset_id;
            ticks.validate().map_err(|e| e.for_asset(id))?;
            if ticks.end() > horizon * (1.0 + 1e-12) {
                return Err(
                    Error::InvalidSeries(format!("last tick {} is beyond the horizon {horizon}", ticks.end()))
                        .for_asset(id),
                );
            }
            let b = match bw {
                BandwidthMode::Fixed { b } => *b,
                BandwidthMode::PerAsset { b } => b[idx],
                BandwidthMode::CrossValidated { candidates } => {
                    let own;
                    let cands = match candidates {
                        Some(c) => c.as_slice(),
                        None => {
                            own = default_preaverage_candidates(ticks, horizon);
                            own.as_slice()
                        }
                    };
                    cv_bandwidth_preaverage(ticks, kernel, cands).map_err(|e| e.for_asset(id))?
                }
            };
            let out = kernel_filter(ticks, kernel, b, &grid).map_err(|e| e.for_asset(id))?;
            Ok((b, out))
        })
        .collect::<Result<_>>()?;

    let p = all_ticks.len();
    let mut values = DMatrix::zeros(p, n + 1);
    let mut bandwidths = Vec::with_capacity(p);
    let mut degenerate_points = 0;
    for (i, (b, out)) in rows.into_iter().enumerate() {
        for (j, v) in out.values.into_iter().enumerate() {
            values[(i, j)] = v;
        }
        bandwidths.push(b);
        degenerate_points += out.degenerate.len();
    }
    Ok(FilteredPanel {
        grid,
        values,
        bandwidths,
        asset_ids: all_ticks.iter().map(|t| t.asset_id).collect(),
        delta0,
        horizon,
        degenerate_points,
    })
}
