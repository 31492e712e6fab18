//! Generalised shrinkage of the idiosyncratic spot volatility matrix, the
//! minimal positive-definiteness threshold, the final estimate and its
//! precision matrix.
//!
//! Every rule `s_rho` satisfies, for all `u` and `rho >= 0`,
//! `|s(u)| <= |u|`, `s(u) = 0` when `|u| <= rho`, and `|s(u) - u| <= rho`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};

/// SCAD knot parameter.
pub const SCAD_A: f64 = 3.7;
/// Adaptive-lasso exponent.
pub const ALASSO_ETA: f64 = 3.0;
/// Eigenvalue margin used by the positive-definiteness test.
pub const PD_EPS: f64 = 1e-10;
/// Width at which the threshold-constant bisection stops.
pub const CPD_RESOLUTION: f64 = 1e-3;
/// Condition number above which the Woodbury inner matrix counts as singular.
pub const MAX_INNER_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ShrinkRule {
    Scad { a: f64 },
    AdaptiveLasso { eta: f64 },
    Soft,
    Hard,
    None,
}

impl ShrinkRule {
    pub fn scad() -> Self {
        ShrinkRule::Scad { a: SCAD_A }
    }

    pub fn adaptive_lasso() -> Self {
        ShrinkRule::AdaptiveLasso { eta: ALASSO_ETA }
    }

    /// The five columns of the comparison tables, in table order.
    pub fn table_rules() -> [ShrinkRule; 5] {
        [
            ShrinkRule::None,
            ShrinkRule::scad(),
            ShrinkRule::adaptive_lasso(),
            ShrinkRule::Soft,
            ShrinkRule::Hard,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            ShrinkRule::None => "Naive",
            ShrinkRule::Scad { .. } => "SCAD",
            ShrinkRule::AdaptiveLasso { .. } => "A-Lasso",
            ShrinkRule::Soft => "Soft",
            ShrinkRule::Hard => "Hard",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ShrinkRule::Scad { a } if !(a > 2.0) => Err(Error::InvalidConfig(format!("SCAD needs a > 2, got {a}"))),
            ShrinkRule::AdaptiveLasso { eta } if !(eta >= 1.0) => Err(Error::InvalidConfig(format!(
                "adaptive lasso needs eta >= 1, got {eta}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ShrinkRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShrinkRule::Scad { a } => write!(f, "scad:{a}"),
            ShrinkRule::AdaptiveLasso { eta } => write!(f, "alasso:{eta}"),
            ShrinkRule::Soft => f.write_str("soft"),
            ShrinkRule::Hard => f.write_str("hard"),
            ShrinkRule::None => f.write_str("none"),
        }
    }
}

impl FromStr for ShrinkRule {
    type Err = Error;

    /// `none | soft | hard | scad[:a] | alasso[:eta]`
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, param) = match lower.split_once(':') {
            Some((n, v)) => (n, Some(v)),
            None => (lower.as_str(), None),
        };
        let param = param
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad shrinkage parameter `{v}`")))
            })
            .transpose()?;
        let rule = match (name, param) {
            ("none" | "naive", None) => ShrinkRule::None,
            ("soft", None) => ShrinkRule::Soft,
            ("hard", None) => ShrinkRule::Hard,
            ("scad", a) => ShrinkRule::Scad { a: a.unwrap_or(SCAD_A) },
            ("alasso" | "adaptive-lasso" | "a-lasso", eta) => ShrinkRule::AdaptiveLasso {
                eta: eta.unwrap_or(ALASSO_ETA),
            },
            _ => return Err(Error::InvalidConfig(format!("unknown shrinkage rule `{s}`"))),
        };
        rule.validate()?;
        Ok(rule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `rho_ij = c_rho * sqrt(sigma_ii sigma_jj)`
    CorrelationScaled { c_rho: f64 },
    /// `rho_ij = rho`
    Flat { rho: f64 },
}

/// Shrinkage rule plus threshold. The diagonal is never shrunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageSpec {
    pub rule: ShrinkRule,
    pub threshold: ThresholdMode,
}

impl ShrinkageSpec {
    pub fn correlation_scaled(rule: ShrinkRule, c_rho: f64) -> Self {
        Self {
            rule,
            threshold: ThresholdMode::CorrelationScaled { c_rho },
        }
    }
}

fn raw_shrink(u: f64, rho: f64, rule: ShrinkRule) -> f64 {
    let abs = u.abs();
    match rule {
        ShrinkRule::None => u,
        ShrinkRule::Hard => {
            if abs > rho {
                u
            } else {
                0.0
            }
        }
        ShrinkRule::Soft => u.signum() * (abs - rho).max(0.0),
        ShrinkRule::AdaptiveLasso { eta } => {
            if abs <= rho {
                0.0
            } else {
                u * (1.0 - (rho / abs).powf(eta)).max(0.0)
            }
        }
        ShrinkRule::Scad { a } => {
            if abs <= 2.0 * rho {
                u.signum() * (abs - rho).max(0.0)
            } else if abs <= a * rho {
                ((a - 1.0) * u - u.signum() * a * rho) / (a - 2.0)
            } else {
                u
            }
        }
    }
}

/// Apply `rule` with threshold `rho` to a single value.
///
/// The algebraic formulas can overshoot the bounds by an ulp after rounding
/// (e.g. `(u - rho) - u` for large `u`); the result is then nudged toward `u`
/// until the bounds hold in floating point.
pub fn shrink_value(u: f64, rho: f64, rule: ShrinkRule) -> f64 {
    if matches!(rule, ShrinkRule::None) || rho == 0.0 {
        return u;
    }
    if !u.is_finite() || !(rho > 0.0) {
        return raw_shrink(u, rho, rule);
    }
    if u.abs() <= rho {
        return 0.0;
    }
    let mut s = raw_shrink(u, rho, rule);
    if s.abs() > u.abs() {
        s = u;
    }
    while (s - u).abs() > rho {
        s = if u > s { s.next_up() } else { s.next_down() };
    }
    s
}

/// Shrink every off-diagonal entry of a symmetric matrix.
pub fn shrink_matrix(sigma_u: &DMatrix<f64>, spec: &ShrinkageSpec) -> Result<DMatrix<f64>> {
    let p = sigma_u.nrows();
    if !sigma_u.is_square() {
        return Err(Error::shape("square matrix", format!("{}x{}", p, sigma_u.ncols())));
    }
    spec.rule.validate()?;
    if matches!(spec.rule, ShrinkRule::None) {
        return Ok(sigma_u.clone());
    }
    let diag: Vec<f64> = (0..p).map(|i| sigma_u[(i, i)]).collect();
    let threshold: Box<dyn Fn(usize, usize) -> f64> = match spec.threshold {
        ThresholdMode::Flat { rho } => {
            if !(rho >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "threshold must be non-negative, got {rho}"
                )));
            }
            Box::new(move |_, _| rho)
        }
        ThresholdMode::CorrelationScaled { c_rho } => {
            if !(c_rho >= 0.0) {
                return Err(Error::InvalidConfig(format!("c_rho must be non-negative, got {c_rho}")));
            }
            if let Some((index, &value)) = diag.iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
                return Err(Error::NonPositiveDiagonal { index, value });
            }
            let diag = diag.clone();
            Box::new(move |i, j| c_rho * (diag[i] * diag[j]).sqrt())
        }
    };

    let mut out = sigma_u.clone();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = shrink_value(sigma_u[(i, j)], threshold(i, j), spec.rule);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Outcome of the minimal positive-definiteness search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpdCertificate {
    /// Smallest constant found that makes the shrunk matrix positive definite.
    pub c_rho: f64,
    /// A constant below `c_rho`, within `CPD_RESOLUTION`, whose shrunk matrix
    /// fails the test. `None` when the first grid value already passes.
    pub failing_below: Option<f64>,
    /// No grid value passed; the estimate falls back to the diagonal.
    pub capped: bool,
}

impl CpdCertificate {
    /// Shrunk matrix implied by this certificate.
    pub fn apply(&self, sigma_u: &DMatrix<f64>, rule: ShrinkRule) -> Result<DMatrix<f64>> {
        if self.capped {
            return Ok(DMatrix::from_diagonal(&sigma_u.diagonal()));
        }
        shrink_matrix(sigma_u, &ShrinkageSpec::correlation_scaled(rule, self.c_rho))
    }
}

/// Default search grid `0, 0.01, ..., 1`.
pub fn default_cpd_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn passes_pd(sigma_u: &DMatrix<f64>, rule: ShrinkRule, c: f64) -> Result<bool> {
    let shrunk = shrink_matrix(sigma_u, &ShrinkageSpec::correlation_scaled(rule, c))?;
    Ok(linalg::is_positive_definite(&shrunk, PD_EPS))
}

/// Smallest correlation-scaled threshold constant making the shrunk matrix
/// positive definite.
///
/// The grid is scanned in order, since the smallest eigenvalue need not be
/// monotone in `c` for the continuous rules; the first passing value is then
/// refined by bisection against its failing predecessor.
pub fn min_cpd(sigma_u: &DMatrix<f64>, rule: ShrinkRule, grid: &[f64]) -> Result<CpdCertificate> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 || grid[grid.len() - 1] > 1.0 {
        return Err(Error::InvalidConfig(
            "threshold grid must be strictly ascending within [0, 1]".into(),
        ));
    }
    rule.validate()?;
    let p = sigma_u.nrows();
    if let Some(index) = (0..p).find(|&i| !(sigma_u[(i, i)] > 0.0)) {
        return Err(Error::NonPositiveDiagonal {
            index,
            value: sigma_u[(index, index)],
        });
    }

    let mut prev_fail: Option<f64> = None;
    for &c in grid {
        if passes_pd(sigma_u, rule, c)? {
            let Some(mut lo) = prev_fail else {
                return Ok(CpdCertificate {
                    c_rho: c,
                    failing_below: None,
                    capped: false,
                });
            };
            let mut hi = c;
            while hi - lo > CPD_RESOLUTION {
                let mid = 0.5 * (lo + hi);
                if passes_pd(sigma_u, rule, mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(CpdCertificate {
                c_rho: hi,
                failing_below: Some(lo),
                capped: false,
            });
        }
        prev_fail = Some(c);
    }

    let diag = DMatrix::from_diagonal(&sigma_u.diagonal());
    if !linalg::is_positive_definite(&diag, PD_EPS) {
        return Err(Error::NoPdInRange);
    }
    Ok(CpdCertificate {
        c_rho: 1.0,
        failing_below: prev_fail,
        capped: true,
    })
}

/// Final estimate at one time point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpotEstimate {
    pub tau: f64,
    pub sigma_hat_x: DMatrix<f64>,
    pub sigma_tilde_c: DMatrix<f64>,
    pub sigma_hat_u: DMatrix<f64>,
    /// `p x k_hat`; empty when the estimate was built from the common part.
    pub loadings: DMatrix<f64>,
    pub k_hat: usize,
    pub c_rho_used: f64,
    pub precision: Option<DMatrix<f64>>,
}

/// The low-rank part as either a matrix or loadings `L` (with `L L^T`).
#[derive(Debug, Clone, Copy)]
pub enum CommonPart<'a> {
    Matrix(&'a DMatrix<f64>),
    Loadings(&'a DMatrix<f64>),
}

/// `Sigma_hat_X = Sigma_C + Sigma_hat_U`.
pub fn poet_estimate(
    tau: f64,
    common: CommonPart<'_>,
    sigma_u_shrunk: &DMatrix<f64>,
    c_rho: f64,
) -> Result<SpotEstimate> {
    let p = sigma_u_shrunk.nrows();
    if !sigma_u_shrunk.is_square() {
        return Err(Error::shape(
            "square idiosyncratic matrix",
            format!("{}x{}", p, sigma_u_shrunk.ncols()),
        ));
    }
    let (sigma_tilde_c, loadings) = match common {
        CommonPart::Matrix(c) => {
            if c.shape() != (p, p) {
                return Err(Error::shape(format!("{p}x{p}"), format!("{}x{}", c.nrows(), c.ncols())));
            }
            (c.clone(), DMatrix::zeros(p, 0))
        }
        CommonPart::Loadings(l) => {
            if l.nrows() != p {
                return Err(Error::shape(format!("{p} loading rows"), format!("{}", l.nrows())));
            }
            (linalg::gram_outer(l), l.clone())
        }
    };
    let sigma_hat_x = &sigma_tilde_c + sigma_u_shrunk;
    Ok(SpotEstimate {
        tau,
        sigma_hat_x,
        sigma_tilde_c,
        sigma_hat_u: sigma_u_shrunk.clone(),
        k_hat: loadings.ncols(),
        loadings,
        c_rho_used: c_rho,
        precision: None,
    })
}

/// Inverse of `L L^T + S` by the Sherman-Morrison-Woodbury identity:
/// `S^-1 - S^-1 L (I + L^T S^-1 L)^-1 L^T S^-1`.
pub fn precision_matrix(loadings: &DMatrix<f64>, sigma_u_shrunk: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = sigma_u_shrunk.nrows();
    if !sigma_u_shrunk.is_square() || loadings.nrows() != p {
        return Err(Error::shape(
            format!("{p}x{p} and {p}xk"),
            format!(
                "{}x{} and {}x{}",
                p,
                sigma_u_shrunk.ncols(),
                loadings.nrows(),
                loadings.ncols()
            ),
        ));
    }
    if !linalg::is_positive_definite(sigma_u_shrunk, PD_EPS) {
        return Err(Error::NotPd {
            min_eigenvalue: linalg::min_eigenvalue(sigma_u_shrunk).unwrap_or(f64::NAN),
        });
    }
    let chol = Cholesky::new(sigma_u_shrunk.clone()).ok_or(Error::NotPd { min_eigenvalue: 0.0 })?;
    let mut s_inv = chol.inverse();
    symmetrize(&mut s_inv);
    let k = loadings.ncols();
    if k == 0 {
        return Ok(s_inv);
    }

    let s_inv_l = &s_inv * loadings;
    let mut inner = DMatrix::identity(k, k) + loadings.transpose() * &s_inv_l;
    symmetrize(&mut inner);
    let eig = linalg::sym_eigen(&inner)?;
    let (top, bottom) = (eig.values[0], eig.values[k - 1]);
    let condition = if bottom > 0.0 { top / bottom } else { f64::INFINITY };
    if condition > MAX_INNER_CONDITION {
        return Err(Error::SingularInner { condition });
    }
    let inner_inv = linalg::spectral_map(&eig, |v| 1.0 / v);
    let mut out = s_inv - &s_inv_l * inner_inv * s_inv_l.transpose();
    symmetrize(&mut out);
    Ok(out)
}
