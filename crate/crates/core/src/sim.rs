//! Synthetic ground truth from a drift-free time-varying factor model.
//!
//! Squared loadings and squared idiosyncratic volatilities follow
//! mean-reverting square-root diffusions, simulated with Euler-Maruyama and
//! full truncation at zero. Prices are then contaminated with noise and
//! sampled on either the fine grid or independent Poisson clocks.
//!
//! Random streams: every draw comes from a `ChaCha8Rng` seeded with
//! `SimConfig::seed`, using stream 0 for the correlation parameter, stream 1
//! for the latent paths and stream `2 + i` for asset `i`'s clock and noise.
//! Results are therefore bitwise reproducible and independent of thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};

/// Trading seconds in one day (6.5 hours).
pub const SECONDS_PER_DAY: f64 = 23_400.0;

/// Smallest eigenvalue allowed in the repaired idiosyncratic correlation.
pub const CORR_EIGEN_FLOOR: f64 = 1e-8;

const STREAM_RHO: u64 = 0;
const STREAM_PATHS: u64 = 1;
const STREAM_ASSET_BASE: u64 = 2;

/// Derive the seed of replication `index` from a base seed.
///
/// Both inputs go through the SplitMix64 finaliser, so neighbouring indices
/// give unrelated seeds.
pub fn replication_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(1)))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    /// Observe every `step`-th fine-grid point.
    Synchronous { step: usize },
    /// Exponential inter-arrival times with mean `lambda * base_unit`, where
    /// `lambda ~ U(lambda_low, lambda_high)` is drawn once per asset. Prices are
    /// read from the nearest fine-grid point; times are kept as drawn.
    PoissonClock {
        lambda_low: f64,
        lambda_high: f64,
        /// Length of one clock unit in day fractions.
        base_unit: f64,
    },
}

impl Sampling {
    pub fn synchronous() -> Self {
        Sampling::Synchronous { step: 1 }
    }

    /// Ticks every 10 to 30 seconds on average.
    pub fn poisson_default() -> Self {
        Sampling::PoissonClock {
            lambda_low: 1.0,
            lambda_high: 3.0,
            base_unit: 10.0 / SECONDS_PER_DAY,
        }
    }

    pub fn is_synchronous(&self) -> bool {
        matches!(self, Sampling::Synchronous { .. })
    }
}

/// How the noise level `sigma_eps` enters the proportional noise model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaling {
    /// `eps = sigma_eps * sqrt(sigma_ii(t)) * z`
    #[default]
    StdDev,
    /// `eps = sqrt(sigma_eps * sigma_ii(t)) * z`
    Variance,
}

/// Time profile `chi_i(t)` of the generalised noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum ChiProfile {
    Constant {
        level: f64,
    },
    /// `a + b (t / T - 1/2)^2`
    UShape {
        a: f64,
        b: f64,
    },
}

impl ChiProfile {
    pub fn eval(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            ChiProfile::Constant { level } => level,
            ChiProfile::UShape { a, b } => {
                let x = t / horizon - 0.5;
                a + b * x * x
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoiseModel {
    /// Gaussian noise scaled by the true spot variance of the asset.
    Proportional { scaling: NoiseScaling },
    /// `eps_ij = n_i^{-beta_i} chi_i(t_j) z_ij` with `0 <= beta_i < 1/2`.
    /// A single `beta` entry is broadcast to every asset.
    Generalized { beta: Vec<f64>, chi: ChiProfile },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Proportional {
            scaling: NoiseScaling::StdDev,
        }
    }
}

/// Brownian drivers of the squared-loading diffusions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoadingDrivers {
    /// One driver per (asset, factor) pair.
    #[default]
    Independent,
    /// One driver per asset, shared by all of its loadings.
    SharedPerAsset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub p: usize,
    pub k: usize,
    /// Horizon in days.
    pub horizon: f64,
    /// Fine simulation step in days.
    pub delta: f64,
    pub sigma_eps: f64,
    pub sampling: Sampling,
    pub seed: u64,
    /// Half-bandwidth of the idiosyncratic correlation band.
    pub band: usize,
    /// Correlation decay; drawn from `U(0, 0.5)` when `None`.
    pub rho: Option<f64>,
    pub loading_drivers: LoadingDrivers,
    pub noise: NoiseModel,
    /// Multiplier on every vol-of-vol coefficient; 0 makes the loading and
    /// idiosyncratic variance paths deterministic.
    pub diffusion_scale: f64,
    /// Hold loadings and idiosyncratic volatilities at their initial values.
    pub freeze_coefficients: bool,
}

impl SimConfig {
    /// One trading day of 10-second steps with the default design.
    pub fn new(p: usize, seed: u64) -> Self {
        Self {
            p,
            k: 3,
            horizon: 1.0,
            delta: 1.0 / (6.5 * 60.0 * 6.0),
            sigma_eps: 0.05,
            sampling: Sampling::synchronous(),
            seed,
            band: 3,
            rho: None,
            loading_drivers: LoadingDrivers::Independent,
            noise: NoiseModel::default(),
            diffusion_scale: 1.0,
            freeze_coefficients: false,
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.delta).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k < 1 || self.p < self.k {
            return bad(format!("need p >= k >= 1, got p = {}, k = {}", self.p, self.k));
        }
        if !(self.delta > 0.0) || !(self.horizon > 0.0) {
            return bad("delta and horizon must be positive".into());
        }
        let ratio = self.horizon / self.delta;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) || ratio.round() < 1.0 {
            return bad(format!("horizon / delta = {ratio} is not a whole number of steps"));
        }
        if !(self.sigma_eps >= 0.0) {
            return bad(format!("sigma_eps must be non-negative, got {}", self.sigma_eps));
        }
        if let Some(rho) = self.rho {
            if !(0.0..=0.5).contains(&rho) {
                return bad(format!("rho must lie in [0, 0.5], got {rho}"));
            }
        }
        if !(self.diffusion_scale >= 0.0) {
            return bad("diffusion_scale must be non-negative".into());
        }
        match &self.sampling {
            Sampling::Synchronous { step } if *step == 0 => return bad("synchronous step must be at least 1".into()),
            Sampling::PoissonClock {
                lambda_low,
                lambda_high,
                base_unit,
            } if !(*lambda_low > 0.0 && lambda_high >= lambda_low && *base_unit > 0.0) => {
                return bad("Poisson clock needs 0 < lambda_low <= lambda_high and base_unit > 0".into());
            }
            _ => {}
        }
        if let NoiseModel::Generalized { beta, .. } = &self.noise {
            if beta.len() != 1 && beta.len() != self.p {
                return bad(format!(
                    "beta must have 1 or p = {} entries, got {}",
                    self.p,
                    beta.len()
                ));
            }
            if let Some(b) = beta.iter().find(|b| !(0.0..0.5).contains(*b)) {
                return bad(format!("beta must satisfy 0 <= beta < 1/2, got {b}"));
            }
        }
        Ok(())
    }
}

/// Coefficients of the loading and idiosyncratic variance diffusions.
///
/// `dL2 = b (a - L2) dt + s0 sqrt(L2) dW` per (asset, factor), and
/// `dV = kappa (theta - V) dt + xi sqrt(V) dW` per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpCoefficients {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub s0: DMatrix<f64>,
    pub kappa: DVector<f64>,
    pub theta: DVector<f64>,
    pub xi: DVector<f64>,
}

impl DgpCoefficients {
    /// Standard design. Assets are indexed from 1 in the formulas; factors
    /// beyond the third reuse the offsets of factor `(l mod 3)`.
    pub fn standard(p: usize, k: usize) -> Self {
        const A0: [f64; 3] = [0.01, 0.0115, 0.0105];
        const B0: [f64; 3] = [0.006, 0.007, 0.008];
        const S0: [f64; 3] = [0.3, 0.4, 0.4];
        let pf = p as f64;
        let frac = |i: usize| (i + 1) as f64 / pf;
        Self {
            a: DMatrix::from_fn(p, k, |i, l| A0[l % 3] + frac(i)),
            b: DMatrix::from_fn(p, k, |i, l| B0[l % 3] + frac(i) / 100.0),
            s0: DMatrix::from_fn(p, k, |i, l| S0[l % 3] + frac(i) / 5.0),
            kappa: DVector::from_fn(p, |i, _| 0.00053 + frac(i) / 100.0),
            theta: DVector::from_fn(p, |i, _| 0.0017 + frac(i)),
            xi: DVector::from_fn(p, |i, _| 0.0013 + frac(i) / 10.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Fine grid `0, delta, ..., M delta`.
    pub times: Vec<f64>,
    /// Latent log-prices, `p x (M + 1)`.
    pub x: DMatrix<f64>,
    /// Loadings per fine-grid point, each `p x k`.
    pub loadings: Vec<DMatrix<f64>>,
    /// Idiosyncratic volatilities, `p x (M + 1)`.
    pub idio_vol: DMatrix<f64>,
    /// Idiosyncratic correlation matrix after positive-definite repair.
    pub corr: DMatrix<f64>,
    pub rho: f64,
    pub horizon: f64,
    pub delta: f64,
}

impl GroundTruth {
    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Index of the fine-grid point nearest to `t`.
    pub fn grid_index(&self, t: f64) -> usize {
        ((t / self.delta).round().max(0.0) as usize).min(self.steps())
    }

    /// Diagonal of the true spot volatility matrix at grid index `n`.
    pub fn spot_variance(&self, asset: usize, n: usize) -> f64 {
        let lam = self.loadings[n].row(asset);
        let s = self.idio_vol[(asset, n)];
        lam.dot(&lam) + s * s * self.corr[(asset, asset)]
    }
}

/// One asset's observation times and noisy log-prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickSeries {
    pub asset_id: usize,
    pub times: Vec<f64>,
    pub prices: Vec<f64>,
}

impl TickSeries {
    pub fn new(asset_id: usize, times: Vec<f64>, prices: Vec<f64>) -> Result<Self> {
        let s = Self {
            asset_id,
            times,
            prices,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidSeries(format!("asset {}: {m}", self.asset_id)));
        if self.times.len() != self.prices.len() {
            return err(format!("{} times but {} prices", self.times.len(), self.prices.len()));
        }
        if let Some(t) = self.times.first() {
            if !(*t >= 0.0) {
                return err(format!("first time {t} is negative"));
            }
        }
        if let Some(w) = self.times.windows(2).find(|w| !(w[1] > w[0])) {
            return err(format!("times not strictly increasing at {} -> {}", w[0], w[1]));
        }
        if self.prices.iter().any(|y| !y.is_finite()) {
            return err("non-finite price".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Last observation time.
    pub fn end(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }
}

/// Banded correlation `rho^|i-j| 1{|i-j| <= band}` with unit diagonal,
/// repaired to have smallest eigenvalue at least [`CORR_EIGEN_FLOOR`].
pub fn build_banded_correlation(p: usize, rho: f64, band: usize) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(p, p, |i, j| {
        let d = i.abs_diff(j);
        if d == 0 {
            1.0
        } else if d <= band {
            rho.powi(d as i32)
        } else {
            0.0
        }
    });
    repair_correlation(raw)
}

/// Clip eigenvalues from below, rebuild and rescale to unit diagonal until the
/// smallest eigenvalue clears the floor.
fn repair_correlation(mut c: DMatrix<f64>) -> DMatrix<f64> {
    let mut floor = CORR_EIGEN_FLOOR;
    for _ in 0..64 {
        let eig = match linalg::sym_eigen(&c) {
            Ok(e) => e,
            Err(_) => break,
        };
        let lmin = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
        if lmin >= CORR_EIGEN_FLOOR {
            return c;
        }
        let clipped = linalg::spectral_map(&eig, |v| v.max(floor));
        let d: Vec<f64> = (0..c.nrows()).map(|i| clipped[(i, i)].sqrt()).collect();
        c = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
            if i == j {
                1.0
            } else {
                clipped[(i, j)] / (d[i] * d[j])
            }
        });
        symmetrize(&mut c);
        floor *= 2.0;
    }
    c
}

pub fn simulate_ground_truth(cfg: &SimConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let (p, k) = (cfg.p, cfg.k);
    let steps = cfg.steps();
    let dt = cfg.horizon / steps as f64;
    let sqdt = dt.sqrt();

    let rho = match cfg.rho {
        Some(r) => r,
        None => stream_rng(cfg.seed, STREAM_RHO).random_range(0.0..0.5),
    };
    let corr = build_banded_correlation(p, rho, cfg.band);
    let chol = nalgebra::Cholesky::new(corr.clone())
        .ok_or(Error::NotPd {
            min_eigenvalue: linalg::min_eigenvalue(&corr).unwrap_or(f64::NAN),
        })?
        .l();

    let coef = DgpCoefficients::standard(p, k);
    let vol_scale = cfg.diffusion_scale;

    let mut rng = stream_rng(cfg.seed, STREAM_PATHS);
    let mut lam2: DMatrix<f64> = coef.a.clone();
    let mut var_u = coef.theta.clone();

    let mut x = DMatrix::zeros(p, steps + 1);
    let mut idio_vol = DMatrix::zeros(p, steps + 1);
    let mut loadings = Vec::with_capacity(steps + 1);
    let mut z_u = DVector::zeros(p);
    let mut z_f = vec![0.0; k];
    let mut z_load = vec![
        0.0;
        if cfg.loading_drivers == LoadingDrivers::Independent {
            p * k
        } else {
            p
        }
    ];

    for n in 0..=steps {
        let lam = lam2.map(f64::sqrt);
        let vol = var_u.map(f64::sqrt);
        idio_vol.set_column(n, &vol);
        if n == steps {
            loadings.push(lam);
            break;
        }

        for z in z_f.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        for z in z_u.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        for z in z_load.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        // correlated idiosyncratic shocks, shared with the variance paths
        let dw_u = &chol * &z_u * sqdt;

        for i in 0..p {
            let mut dx = vol[i] * dw_u[i];
            for l in 0..k {
                dx += lam[(i, l)] * z_f[l] * sqdt;
            }
            x[(i, n + 1)] = x[(i, n)] + dx;
        }

        if !cfg.freeze_coefficients {
            for i in 0..p {
                for l in 0..k {
                    let z = match cfg.loading_drivers {
                        LoadingDrivers::Independent => z_load[i * k + l],
                        LoadingDrivers::SharedPerAsset => z_load[i],
                    };
                    let v = lam2[(i, l)];
                    let next = v
                        + coef.b[(i, l)] * (coef.a[(i, l)] - v) * dt
                        + vol_scale * coef.s0[(i, l)] * v.sqrt() * z * sqdt;
                    lam2[(i, l)] = next.max(0.0);
                }
                let v = var_u[i];
                let next = v + coef.kappa[i] * (coef.theta[i] - v) * dt + vol_scale * coef.xi[i] * v.sqrt() * dw_u[i];
                var_u[i] = next.max(0.0);
            }
        }

        let finite = x.column(n + 1).iter().all(|v: &f64| v.is_finite())
            && lam2.iter().all(|v| v.is_finite())
            && var_u.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteState { step: n + 1 });
        }
        loadings.push(lam);
    }

    Ok(GroundTruth {
        times: (0..=steps).map(|n| n as f64 * dt).collect(),
        x,
        loadings,
        idio_vol,
        corr,
        rho,
        horizon: cfg.horizon,
        delta: dt,
    })
}

/// True spot volatility matrices at `tau`.
#[derive(Debug, Clone)]
pub struct TrueSpot {
    pub tau: f64,
    pub sigma_x: DMatrix<f64>,
    pub sigma_c: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
}

/// `Sigma_C = L L^T`, `Sigma_U = D Sigma_rho D` with `D = diag(sigma_U)`, and
/// `Sigma_X = Sigma_C + Sigma_U`, at the fine-grid point nearest `tau`.
pub fn true_spot_volatility(gt: &GroundTruth, tau: f64) -> Result<TrueSpot> {
    if !(tau > 0.0 && tau < gt.horizon) {
        return Err(Error::OutOfRange {
            tau,
            horizon: gt.horizon,
        });
    }
    let n = gt.grid_index(tau);
    Ok(spot_from_parts(
        tau,
        &gt.loadings[n],
        gt.idio_vol.column(n).as_slice(),
        &gt.corr,
    ))
}

pub(crate) fn spot_from_parts(tau: f64, loadings: &DMatrix<f64>, vol: &[f64], corr: &DMatrix<f64>) -> TrueSpot {
    let p = loadings.nrows();
    let sigma_c = linalg::gram_outer(loadings);
    let sigma_u = DMatrix::from_fn(p, p, |i, j| vol[i] * corr[(i, j)] * vol[j]);
    let sigma_x = &sigma_c + &sigma_u;
    TrueSpot {
        tau,
        sigma_x,
        sigma_c,
        sigma_u,
    }
}

/// Observation times (as fine-grid indices) and noisy prices for every asset.
pub fn contaminate_and_sample(gt: &GroundTruth, cfg: &SimConfig) -> Result<Vec<TickSeries>> {
    cfg.validate()?;
    if gt.p() != cfg.p || (gt.horizon - cfg.horizon).abs() > 1e-12 {
        return Err(Error::shape(
            format!("p = {}, T = {}", cfg.p, cfg.horizon),
            format!("p = {}, T = {}", gt.p(), gt.horizon),
        ));
    }
    (0..cfg.p).into_par_iter().map(|i| sample_asset(gt, cfg, i)).collect()
}

fn sample_asset(gt: &GroundTruth, cfg: &SimConfig, i: usize) -> Result<TickSeries> {
    let mut rng = stream_rng(cfg.seed, STREAM_ASSET_BASE + i as u64);
    let steps = gt.steps();
    // (observation time, fine-grid index carrying the latent price)
    let obs: Vec<(f64, usize)> = match cfg.sampling {
        Sampling::Synchronous { step } => (0..=steps).step_by(step).map(|n| (gt.times[n], n)).collect(),
        Sampling::PoissonClock {
            lambda_low,
            lambda_high,
            base_unit,
        } => {
            let lambda = if lambda_high > lambda_low {
                rng.random_range(lambda_low..lambda_high)
            } else {
                lambda_low
            };
            let mean_gap = lambda * base_unit;
            let mut out: Vec<(f64, usize)> = Vec::new();
            let mut t = 0.0;
            loop {
                let e: f64 = rng.sample(Exp1);
                t += e * mean_gap;
                if t > gt.horizon {
                    break;
                }
                if out.last().is_none_or(|&(last, _)| t > last) {
                    out.push((t, gt.grid_index(t)));
                }
            }
            out
        }
    };
    if obs.len() < 2 {
        return Err(Error::EmptySeries {
            asset_id: i,
            count: obs.len(),
        });
    }

    let n_obs = obs.len() as f64;
    let prices = obs
        .iter()
        .map(|&(t, n)| {
            let z: f64 = rng.sample(StandardNormal);
            let scale = match &cfg.noise {
                NoiseModel::Proportional { scaling } => {
                    let s_ii = gt.spot_variance(i, n);
                    match scaling {
                        NoiseScaling::StdDev => cfg.sigma_eps * s_ii.sqrt(),
                        NoiseScaling::Variance => (cfg.sigma_eps * s_ii).sqrt(),
                    }
                }
                NoiseModel::Generalized { beta, chi } => {
                    let b = if beta.len() == 1 { beta[0] } else { beta[i] };
                    n_obs.powf(-b) * chi.eval(t, gt.horizon)
                }
            };
            gt.x[(i, n)] + scale * z
        })
        .collect();
    let times = obs.iter().map(|&(t, _)| t).collect();
    Ok(TickSeries {
        asset_id: i,
        times,
        prices,
    })
}
