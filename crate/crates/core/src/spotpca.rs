//! Kernel-weighted realised spot volatility and its low-rank/residual split.
//!
//! With pseudo-grid increments `dX_j = X~(t_j) - X~(t_{j-1})`,
//!
//! ```text
//! S(tau) = sum_{j=1}^{N} K_h(t_j - tau) dX_j dX_j^T
//! ```
//!
//! The top-`k` eigen-reconstruction of `S(tau)` is the common component and the
//! remainder the idiosyncratic one. Local PCA on the `N x N` Gram matrix of
//! the kernel-weighted increments produces the same split through loadings and
//! residuals; both routes are provided.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::{self, fix_sign, symmetrize};
use crate::preavg::{argmin_usable, CvLoss, FilteredPanel, CV_TRIM};

/// Upper bound on the default eigenvalue-ratio search range.
pub const K_MAX_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenPath {
    /// Decomposed the `p x p` matrix directly.
    Covariance,
    /// Decomposed the Gram matrix of the active weighted increments.
    Gram,
}

#[derive(Debug, Clone)]
pub struct SpotRaw {
    pub tau: f64,
    pub h: f64,
    pub sigma_tilde_x: DMatrix<f64>,
    /// Descending, length `p`, negatives from rounding clipped to zero.
    pub eigvals: DVector<f64>,
    /// Orthonormal eigenvectors for the leading eigenvalues. On the Gram path
    /// only the first `min(p, active increments)` are available.
    pub eigvecs: DMatrix<f64>,
    /// `delta0 * sum_j K_h(t_j - tau)`; close to 1 away from the boundary.
    pub kernel_mass: f64,
    /// Increments with positive kernel weight; bounds the rank of the matrix.
    pub active_increments: usize,
    /// Whether `h <= tau <= T - h`.
    pub in_bandwidth_range: bool,
    pub path: EigenPath,
}

impl SpotRaw {
    pub fn p(&self) -> usize {
        self.sigma_tilde_x.nrows()
    }
}

/// `Err(OutOfBandwidthRange)` unless `h <= tau <= T - h`.
pub fn check_bandwidth_range(tau: f64, h: f64, horizon: f64) -> Result<()> {
    if tau >= h && tau <= horizon - h {
        Ok(())
    } else {
        Err(Error::OutOfBandwidthRange {
            tau,
            lower: h,
            upper: horizon - h,
        })
    }
}

fn check_bandwidth(panel: &FilteredPanel, h: f64) -> Result<()> {
    if !(h > panel.delta0) {
        return Err(Error::InvalidConfig(format!(
            "spot bandwidth h = {h} must exceed the pseudo step {}",
            panel.delta0
        )));
    }
    Ok(())
}

/// Kernel-weighted increments `dX_j K_h(t_j - tau)^{1/2}` as a `p x N` matrix
/// together with the raw kernel weights.
pub fn weighted_increments(panel: &FilteredPanel, kernel: &KernelSpec, h: f64, tau: f64) -> (DMatrix<f64>, Vec<f64>) {
    let n = panel.n();
    let weights: Vec<f64> = (1..=n).map(|j| kernel.weight(panel.grid[j] - tau, h)).collect();
    let mut d = panel.increments();
    for (j, w) in weights.iter().enumerate() {
        d.column_mut(j).scale_mut(w.sqrt());
    }
    (d, weights)
}

fn active_columns(weights: &[f64]) -> Vec<usize> {
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(j, _)| j)
        .collect()
}

fn select_columns(d: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(d.nrows(), cols.len(), |i, j| d[(i, cols[j])])
}

pub fn realized_spot_matrix(panel: &FilteredPanel, kernel: &KernelSpec, h: f64, tau: f64) -> Result<SpotRaw> {
    check_bandwidth(panel, h)?;
    let p = panel.p();
    let (d, weights) = weighted_increments(panel, kernel, h, tau);
    let active = active_columns(&weights);
    let d_active = select_columns(&d, &active);
    let sigma = linalg::gram_outer(&d_active);
    let kernel_mass = panel.delta0 * weights.iter().sum::<f64>();
    let in_bandwidth_range = check_bandwidth_range(tau, h, panel.horizon).is_ok();
    let eig_err = |_| Error::EigenFailure { tau: Some(tau) };

    let (mut eigvals, eigvecs, path) = if p <= active.len() {
        let eig = linalg::sym_eigen(&sigma).map_err(eig_err)?;
        (eig.values, eig.vectors, EigenPath::Covariance)
    } else {
        let gram = linalg::gram_outer(&d_active.transpose());
        let eig = linalg::sym_eigen(&gram).map_err(eig_err)?;
        let m = active.len();
        let mut values = DVector::zeros(p);
        let top = if eig.values.is_empty() { 0.0 } else { eig.values[0] };
        let usable = eig.values.iter().take_while(|&&v| v > 1e-14 * top && v > 0.0).count();
        let mut vectors = DMatrix::zeros(p, usable);
        for l in 0..m.min(p) {
            values[l] = eig.values[l];
        }
        for l in 0..usable {
            let mut eta = &d_active * eig.vectors.column(l) / eig.values[l].sqrt();
            let norm = eta.norm();
            eta /= norm;
            fix_sign(&mut eta);
            vectors.set_column(l, &eta);
        }
        (values, vectors, EigenPath::Gram)
    };
    for v in eigvals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }

    Ok(SpotRaw {
        tau,
        h,
        sigma_tilde_x: sigma,
        eigvals,
        eigvecs,
        kernel_mass,
        active_increments: active.len(),
        in_bandwidth_range,
        path,
    })
}

/// Split into the top-`k` eigen-reconstruction and the remainder.
pub fn spectral_split(raw: &SpotRaw, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = raw.p();
    if k > p {
        return Err(Error::InvalidConfig(format!("factor count {k} exceeds dimension {p}")));
    }
    let used = k.min(raw.eigvecs.ncols());
    let mut common = DMatrix::zeros(p, p);
    for l in 0..used {
        let eta = raw.eigvecs.column(l);
        common.ger(raw.eigvals[l], &eta, &eta, 1.0);
    }
    symmetrize(&mut common);
    let idio = &raw.sigma_tilde_x - &common;
    Ok((common, idio))
}

/// Largest `k_max` for the eigenvalue-ratio search: `min(p, N) / 2`, capped.
pub fn default_k_max(p: usize, n: usize) -> usize {
    (p.min(n) / 2).clamp(1, K_MAX_CAP)
}

/// Eigenvalue-ratio estimate `argmax_{1 <= l <= k_max} lambda_l / lambda_{l+1}`.
///
/// A zero denominator gives `+inf` when the numerator is positive and a ratio
/// of 1 when both vanish. Ties go to the smallest `l`.
pub fn estimate_factor_number(eigvals: &[f64], k_max: usize) -> Result<usize> {
    if k_max < 1 || eigvals.len() < k_max + 1 {
        return Err(Error::InvalidConfig(format!(
            "eigenvalue-ratio search needs k_max >= 1 and at least k_max + 1 eigenvalues (k_max = {k_max}, got {})",
            eigvals.len()
        )));
    }
    if eigvals[0] <= 0.0 {
        return Err(Error::AllZero);
    }
    let mut best = (1, f64::NEG_INFINITY);
    for l in 1..=k_max {
        let (num, den) = (eigvals[l - 1].max(0.0), eigvals[l].max(0.0));
        let ratio = if den > 0.0 {
            num / den
        } else if num > 0.0 {
            f64::INFINITY
        } else {
            1.0
        };
        if ratio > best.1 {
            best = (l, ratio);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone)]
pub struct LocalPcaFit {
    pub k: usize,
    /// `N x k`, orthonormal columns.
    pub delta_f: DMatrix<f64>,
    /// `p x k` loadings `D F`.
    pub loadings: DMatrix<f64>,
    /// `p x N` residuals `D - L F^T`.
    pub residuals: DMatrix<f64>,
    /// `p x p` residual covariance `R R^T`.
    pub sigma_check_u: DMatrix<f64>,
}

/// Local PCA at `tau`: the leading eigenvectors of `D^T D`, with
/// `D = [dX_1 K_h^{1/2}(t_1 - tau), ..., dX_N K_h^{1/2}(t_N - tau)]`, give the
/// factor increments and `D F` the loadings.
pub fn local_pca(panel: &FilteredPanel, kernel: &KernelSpec, h: f64, tau: f64, k: usize) -> Result<LocalPcaFit> {
    check_bandwidth(panel, h)?;
    let (p, n) = (panel.p(), panel.n());
    if k > p.min(n) {
        return Err(Error::InvalidConfig(format!(
            "factor count {k} exceeds min(p, N) = {}",
            p.min(n)
        )));
    }
    let (d, weights) = weighted_increments(panel, kernel, h, tau);
    let active = active_columns(&weights);
    let m = active.len();

    let mut delta_f = DMatrix::zeros(n, k);
    if k > 0 {
        // zero-weight columns contribute zero rows and columns to D^T D, so
        // the leading eigenvectors live on the active coordinates
        let d_active = select_columns(&d, &active);
        let gram = linalg::gram_outer(&d_active.transpose());
        let eig = linalg::sym_eigen(&gram).map_err(|_| Error::EigenFailure { tau: Some(tau) })?;
        for l in 0..k.min(m) {
            let mut col = DVector::zeros(n);
            for (a, &j) in active.iter().enumerate() {
                col[j] = eig.vectors[(a, l)];
            }
            fix_sign(&mut col);
            delta_f.set_column(l, &col);
        }
        let inactive = (0..n).filter(|j| weights[*j] <= 0.0);
        for (l, j) in (m..k).zip(inactive) {
            delta_f[(j, l)] = 1.0;
        }
    }

    let loadings = &d * &delta_f;
    let residuals = &d - &loadings * delta_f.transpose();
    let sigma_check_u = linalg::gram_outer(&residuals);
    Ok(LocalPcaFit {
        k,
        delta_f,
        loadings,
        residuals,
        sigma_check_u,
    })
}

/// Pseudo-grid increment index nearest to `tau`, in `1..=N`.
fn increment_index(panel: &FilteredPanel, tau: f64) -> usize {
    ((tau / panel.delta0).round() as usize).clamp(1, panel.n())
}

/// Increment times inside `[0.05 T, 0.95 T]`.
pub fn default_cv_taus(panel: &FilteredPanel) -> Vec<f64> {
    let (lo, hi) = (CV_TRIM * panel.horizon, (1.0 - CV_TRIM) * panel.horizon);
    panel.grid[1..]
        .iter()
        .copied()
        .filter(|t| *t >= lo && *t <= hi)
        .collect()
}

/// Diagonal-only leave-one-out loss of the spot estimator at bandwidth `h`.
///
/// At each evaluation time `t_j` the proxy `dX_{ij}^2 / delta0` is compared
/// with `sum_{m != j} K_h(t_m - t_j) dX_{im}^2`.
pub fn spot_cv_loss(panel: &FilteredPanel, kernel: &KernelSpec, h: f64, tau_grid: &[f64]) -> CvLoss {
    let inc = panel.increments();
    let sq = inc.map(|v| v * v);
    let n = panel.n();
    let reach = if kernel.radius().is_finite() {
        (kernel.radius() * h / panel.delta0).ceil() as usize + 1
    } else {
        n
    };

    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut degenerate = 0;
    let mut loo = vec![0.0; panel.p()];
    for &tau in tau_grid {
        let j = increment_index(panel, tau);
        let t = panel.grid[j];
        loo.iter_mut().for_each(|v| *v = 0.0);
        let mut hit = false;
        for m in j.saturating_sub(reach).max(1)..=(j + reach).min(n) {
            if m == j {
                continue;
            }
            let w = kernel.weight(panel.grid[m] - t, h);
            if w > 0.0 {
                hit = true;
                for (i, acc) in loo.iter_mut().enumerate() {
                    *acc += w * sq[(i, m - 1)];
                }
            }
        }
        if !hit {
            degenerate += 1;
            continue;
        }
        for (i, acc) in loo.iter().enumerate() {
            let r = sq[(i, j - 1)] / panel.delta0 - acc;
            sum += r * r;
        }
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

pub fn cv_bandwidth_spot(
    panel: &FilteredPanel,
    kernel: &KernelSpec,
    candidates: &[f64],
    tau_grid: &[f64],
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("bandwidth candidate grid is empty".into()));
    }
    if let Some(c) = candidates.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::InvalidConfig(format!("bandwidth candidate {c} is not positive")));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    if tau_grid.is_empty() {
        return Err(Error::InvalidConfig("empty tau grid for bandwidth CV".into()));
    }
    let losses: Vec<CvLoss> = candidates
        .iter()
        .map(|&h| spot_cv_loss(panel, kernel, h, tau_grid))
        .collect();
    argmin_usable(candidates, &losses)
}
