//! Matrix norms and the Monte-Carlo evaluation statistics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Symmetry tolerance (relative to the largest entry) for taking the
/// eigenvalue route to the spectral norm.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixNorms {
    pub max: f64,
    pub spectral: f64,
    pub frobenius: f64,
    pub l1_induced: f64,
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let scale = linalg::max_abs(a).max(f64::MIN_POSITIVE);
    (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= SYMMETRY_TOL * scale))
}

/// Largest singular value; the largest absolute eigenvalue when `a` is
/// symmetric.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    if a.is_square() && is_symmetric(a) {
        let mut s = a.clone();
        linalg::symmetrize(&mut s);
        if let Ok(eig) = linalg::sym_eigen(&s) {
            return eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        }
    }
    a.clone().singular_values().max()
}

pub fn norms(a: &DMatrix<f64>) -> MatrixNorms {
    let l1_induced = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    MatrixNorms {
        max: linalg::max_abs(a),
        spectral: spectral_norm(a),
        frobenius: a.norm(),
        l1_induced,
    }
}

/// `max_i sum_j |a_ij|^q` with `0^0 = 0`, so `q = 0` counts nonzero entries.
pub fn inf_q(a: &DMatrix<f64>, q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("inf_q needs 0 <= q < 1, got {q}")));
    }
    Ok(a.row_iter()
        .map(|r| r.iter().filter(|v| **v != 0.0).map(|v| v.abs().powf(q)).sum::<f64>())
        .fold(0.0, f64::max))
}

/// `p^{-1/2} || S^{-1/2} S_hat S^{-1/2} - I ||_F`.
pub fn relative_error_norm(sigma_hat: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let p = sigma.nrows();
    if !sigma.is_square() || sigma_hat.shape() != sigma.shape() {
        return Err(Error::shape(
            format!("{p}x{p} pair"),
            format!(
                "{}x{} and {}x{}",
                sigma_hat.nrows(),
                sigma_hat.ncols(),
                sigma.nrows(),
                sigma.ncols()
            ),
        ));
    }
    let mut s = sigma.clone();
    linalg::symmetrize(&mut s);
    let eig = linalg::sym_eigen(&s)?;
    let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::NotPd { min_eigenvalue: min });
    }
    let inv_sqrt = linalg::spectral_map(&eig, |v| 1.0 / v.sqrt());
    let m = &inv_sqrt * sigma_hat * &inv_sqrt - DMatrix::identity(p, p);
    Ok(m.norm() / (p as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Statistic {
    /// Spectral-norm error of the idiosyncratic part.
    MsnU,
    /// Spectral-norm error of the full matrix.
    MsnX,
    /// Relative-norm error of the full matrix.
    MrnX,
}

impl Statistic {
    pub const ALL: [Statistic; 3] = [Statistic::MsnU, Statistic::MsnX, Statistic::MrnX];

    pub fn label(&self) -> &'static str {
        match self {
            Statistic::MsnU => "MSN_U",
            Statistic::MsnX => "MSN_X",
            Statistic::MrnX => "MRN_X",
        }
    }
}

/// Error values at one `(replication, tau)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellErrors {
    pub msn_u: f64,
    pub msn_x: f64,
    pub mrn_x: f64,
}

impl CellErrors {
    pub fn compute(
        sigma_hat_u: &DMatrix<f64>,
        sigma_hat_x: &DMatrix<f64>,
        sigma_u: &DMatrix<f64>,
        sigma_x: &DMatrix<f64>,
    ) -> Result<Self> {
        Ok(Self {
            msn_u: spectral_norm(&(sigma_hat_u - sigma_u)),
            msn_x: spectral_norm(&(sigma_hat_x - sigma_x)),
            mrn_x: relative_error_norm(sigma_hat_x, sigma_x)?,
        })
    }

    pub fn get(&self, which: Statistic) -> f64 {
        match which {
            Statistic::MsnU => self.msn_u,
            Statistic::MsnX => self.msn_x,
            Statistic::MrnX => self.mrn_x,
        }
    }
}

/// Mean over each row, then mean over rows.
pub fn aggregate(cells: &[Vec<f64>]) -> Result<f64> {
    let first = cells
        .first()
        .ok_or_else(|| Error::InvalidConfig("no replications to aggregate".into()))?;
    let expected = first.len();
    if expected == 0 {
        return Err(Error::InvalidConfig("no evaluation points to aggregate".into()));
    }
    let mut total = 0.0;
    for (row, values) in cells.iter().enumerate() {
        if values.len() != expected {
            return Err(Error::RaggedInput {
                row,
                expected,
                found: values.len(),
            });
        }
        total += values.iter().sum::<f64>() / expected as f64;
    }
    Ok(total / cells.len() as f64)
}

/// Standard error of the replication means.
pub fn replication_std_error(cells: &[Vec<f64>]) -> f64 {
    let means: Vec<f64> = cells
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64)
        .collect();
    let r = means.len();
    if r < 2 {
        return f64::NAN;
    }
    let mean = means.iter().sum::<f64>() / r as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
    (var / r as f64).sqrt()
}

/// Per-replication, per-tau errors for one configuration plus the aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub p: usize,
    pub sigma_eps: f64,
    pub rule: String,
    pub synchronous: bool,
    pub taus: Vec<f64>,
    /// `cells[r][j]` for replication `r` and `taus[j]`.
    pub cells: Vec<Vec<CellErrors>>,
    pub msn_u: f64,
    pub msn_x: f64,
    pub mrn_x: f64,
    pub msn_u_se: f64,
    pub msn_x_se: f64,
    pub mrn_x_se: f64,
}

impl EvalReport {
    pub fn new(
        p: usize,
        sigma_eps: f64,
        rule: String,
        synchronous: bool,
        taus: Vec<f64>,
        cells: Vec<Vec<CellErrors>>,
    ) -> Result<Self> {
        let column = |which: Statistic| -> Vec<Vec<f64>> {
            cells.iter().map(|r| r.iter().map(|c| c.get(which)).collect()).collect()
        };
        let (u, x, rel) = (
            column(Statistic::MsnU),
            column(Statistic::MsnX),
            column(Statistic::MrnX),
        );
        Ok(Self {
            p,
            sigma_eps,
            rule,
            synchronous,
            taus,
            msn_u: aggregate(&u)?,
            msn_x: aggregate(&x)?,
            mrn_x: aggregate(&rel)?,
            msn_u_se: replication_std_error(&u),
            msn_x_se: replication_std_error(&x),
            mrn_x_se: replication_std_error(&rel),
            cells,
        })
    }

    pub fn value(&self, which: Statistic) -> f64 {
        match which {
            Statistic::MsnU => self.msn_u,
            Statistic::MsnX => self.msn_x,
            Statistic::MrnX => self.mrn_x,
        }
    }

    pub fn std_error(&self, which: Statistic) -> f64 {
        match which {
            Statistic::MsnU => self.msn_u_se,
            Statistic::MsnX => self.msn_x_se,
            Statistic::MrnX => self.mrn_x_se,
        }
    }
}

/// Indices of the series sorted by sample variance over time, descending.
/// `series[i]` is one series; ties keep index order.
pub fn rank_by_variance(series: &[Vec<f64>]) -> Vec<usize> {
    let var = |s: &Vec<f64>| -> f64 {
        if s.len() < 2 {
            return 0.0;
        }
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64
    };
    let vars: Vec<f64> = series.iter().map(var).collect();
    let mut idx: Vec<usize> = (0..series.len()).collect();
    idx.sort_by(|&a, &b| vars[b].total_cmp(&vars[a]));
    idx
}

/// Index at quantile `q` in `[0, 1]` of a ranking (0 = highest variance).
pub fn quantile_pick(ranking: &[usize], q: f64) -> Option<usize> {
    if ranking.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let pos = (q * (ranking.len() - 1) as f64).round() as usize;
    Some(ranking[pos])
}
