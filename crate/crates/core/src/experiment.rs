//! End-to-end estimation pipeline and the Monte-Carlo comparison harness.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelSpec};
use crate::metrics::{CellErrors, EvalReport, Statistic};
use crate::preavg::{self, BandwidthMode, FilteredPanel};
use crate::shrink::{self, CommonPart, CpdCertificate, ShrinkRule, ShrinkageSpec, SpotEstimate};
use crate::sim::{self, LoadingDrivers, NoiseScaling, Sampling, SimConfig, TickSeries};
use crate::spotpca::{self, SpotRaw};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PseudoStep {
    /// `N = floor(n_min^{2/3})` cells over the horizon.
    #[default]
    Auto,
    Fixed {
        delta0: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SpotBandwidth {
    Fixed {
        h: f64,
    },
    /// `None` uses [`default_spot_candidates`].
    CrossValidated {
        candidates: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FactorMode {
    /// Eigenvalue-ratio criterion; `None` picks `min(p, m) / 2` capped at 20,
    /// with `m` the number of increments inside the kernel window.
    EigenRatio {
        k_max: Option<usize>,
    },
    Fixed {
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdChoice {
    /// Smallest constant on the grid that gives a positive definite result.
    MinPd {
        grid: Vec<f64>,
    },
    Fixed {
        c_rho: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TauGrid {
    /// `count` equidistant points from `lower * T` to `upper * T`.
    Uniform {
        lower: f64,
        upper: f64,
        count: usize,
    },
    Explicit {
        taus: Vec<f64>,
    },
}

impl TauGrid {
    pub fn resolve(&self, horizon: f64) -> Result<Vec<f64>> {
        match self {
            TauGrid::Uniform { lower, upper, count } => {
                if *count == 0 || !(0.0 < *lower && lower <= upper && *upper < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "tau grid needs 0 < lower <= upper < 1 and count >= 1 (got {lower}, {upper}, {count})"
                    )));
                }
                if *count == 1 {
                    return Ok(vec![0.5 * (lower + upper) * horizon]);
                }
                let step = (upper - lower) / (*count - 1) as f64;
                Ok((0..*count).map(|j| (lower + step * j as f64) * horizon).collect())
            }
            TauGrid::Explicit { taus } => {
                if taus.is_empty() {
                    return Err(Error::InvalidConfig("empty tau list".into()));
                }
                if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < horizon)) {
                    return Err(Error::OutOfRange { tau: *t, horizon });
                }
                Ok(taus.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Pre-averaging kernel `L`.
    pub filter_kernel: Kernel,
    /// Spot smoothing kernel `K`.
    pub spot_kernel: Kernel,
    /// Sum Gaussian kernels over all points instead of truncating.
    pub exact_kernels: bool,
    pub pseudo_step: PseudoStep,
    pub preavg_bandwidth: BandwidthMode,
    pub spot_bandwidth: SpotBandwidth,
    pub factors: FactorMode,
    pub taus: TauGrid,
    pub threshold: ThresholdChoice,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            filter_kernel: Kernel::Epanechnikov,
            spot_kernel: Kernel::Epanechnikov,
            exact_kernels: false,
            pseudo_step: PseudoStep::Auto,
            preavg_bandwidth: BandwidthMode::CrossValidated { candidates: None },
            spot_bandwidth: SpotBandwidth::CrossValidated { candidates: None },
            factors: FactorMode::EigenRatio { k_max: None },
            taus: TauGrid::Uniform {
                lower: 0.1,
                upper: 0.9,
                count: 10,
            },
            threshold: ThresholdChoice::MinPd {
                grid: shrink::default_cpd_grid(),
            },
        }
    }
}

impl PipelineConfig {
    pub fn filter_spec(&self) -> KernelSpec {
        KernelSpec {
            kernel: self.filter_kernel,
            exact: self.exact_kernels,
        }
    }

    pub fn spot_spec(&self) -> KernelSpec {
        KernelSpec {
            kernel: self.spot_kernel,
            exact: self.exact_kernels,
        }
    }
}

pub fn resolve_pseudo_step(ticks: &[TickSeries], horizon: f64, rule: PseudoStep) -> Result<f64> {
    match rule {
        PseudoStep::Auto => Ok(preavg::default_pseudo_step(ticks, horizon)),
        PseudoStep::Fixed { delta0 } if delta0 > 0.0 && delta0 < horizon => Ok(delta0),
        PseudoStep::Fixed { delta0 } => Err(Error::InvalidConfig(format!(
            "pseudo step {delta0} must lie in (0, {horizon})"
        ))),
    }
}

pub fn filter_panel(ticks: &[TickSeries], horizon: f64, cfg: &PipelineConfig) -> Result<FilteredPanel> {
    let delta0 = resolve_pseudo_step(ticks, horizon, cfg.pseudo_step)?;
    preavg::build_panel(ticks, &cfg.filter_spec(), delta0, horizon, &cfg.preavg_bandwidth)
}

/// Geometric grid of 10 spot bandwidths from `2 delta0` to `0.1 T`.
pub fn default_spot_candidates(panel: &FilteredPanel) -> Vec<f64> {
    let lo = 2.0 * panel.delta0;
    let hi = (0.1 * panel.horizon).max(lo);
    preavg::geometric_grid(lo, hi, preavg::DEFAULT_CANDIDATES)
}

pub fn select_spot_bandwidth(panel: &FilteredPanel, cfg: &PipelineConfig) -> Result<f64> {
    match &cfg.spot_bandwidth {
        SpotBandwidth::Fixed { h } => Ok(*h),
        SpotBandwidth::CrossValidated { candidates } => {
            let grid = candidates.clone().unwrap_or_else(|| default_spot_candidates(panel));
            let taus = spotpca::default_cv_taus(panel);
            spotpca::cv_bandwidth_spot(panel, &cfg.spot_spec(), &grid, &taus)
        }
    }
}

/// Realised spot matrix at one `tau` with its factor split.
#[derive(Debug, Clone)]
pub struct SpotStage {
    pub raw: SpotRaw,
    pub k_hat: usize,
    pub sigma_tilde_c: DMatrix<f64>,
    pub sigma_tilde_u: DMatrix<f64>,
    /// `p x k_hat`, columns `sqrt(lambda_l) eta_l`.
    pub loadings: DMatrix<f64>,
}

pub fn spot_stage(panel: &FilteredPanel, cfg: &PipelineConfig, h: f64, tau: f64) -> Result<SpotStage> {
    let raw = spotpca::realized_spot_matrix(panel, &cfg.spot_spec(), h, tau)?;
    let p = raw.p();
    let k_hat = match cfg.factors {
        FactorMode::Fixed { k } => {
            if k > p {
                return Err(Error::InvalidConfig(format!("fixed factor count {k} exceeds p = {p}")));
            }
            k
        }
        FactorMode::EigenRatio { k_max } => {
            let k_max = k_max
                .unwrap_or_else(|| spotpca::default_k_max(p, raw.active_increments))
                .min(p.saturating_sub(1));
            if k_max == 0 {
                return Err(Error::InvalidConfig("eigenvalue-ratio search needs p >= 2".into()));
            }
            spotpca::estimate_factor_number(raw.eigvals.as_slice(), k_max)?
        }
    };
    let (sigma_tilde_c, sigma_tilde_u) = spotpca::spectral_split(&raw, k_hat)?;
    let mut loadings = DMatrix::zeros(p, k_hat);
    for l in 0..k_hat.min(raw.eigvecs.ncols()) {
        loadings.set_column(l, &(raw.eigvecs.column(l) * raw.eigvals[l].sqrt()));
    }
    Ok(SpotStage {
        raw,
        k_hat,
        sigma_tilde_c,
        sigma_tilde_u,
        loadings,
    })
}

/// Shrink the idiosyncratic part and assemble the final estimate.
pub fn finish_estimate(
    stage: &SpotStage,
    rule: ShrinkRule,
    threshold: &ThresholdChoice,
    with_precision: bool,
) -> Result<(SpotEstimate, Option<CpdCertificate>)> {
    let (shrunk, c_rho, cert) = match (rule, threshold) {
        (ShrinkRule::None, _) => (stage.sigma_tilde_u.clone(), 0.0, None),
        (_, ThresholdChoice::Fixed { c_rho }) => {
            let spec = ShrinkageSpec::correlation_scaled(rule, *c_rho);
            (shrink::shrink_matrix(&stage.sigma_tilde_u, &spec)?, *c_rho, None)
        }
        (_, ThresholdChoice::MinPd { grid }) => {
            let cert = shrink::min_cpd(&stage.sigma_tilde_u, rule, grid)?;
            (cert.apply(&stage.sigma_tilde_u, rule)?, cert.c_rho, Some(cert))
        }
    };
    let mut est = shrink::poet_estimate(stage.raw.tau, CommonPart::Loadings(&stage.loadings), &shrunk, c_rho)?;
    est.sigma_tilde_c = stage.sigma_tilde_c.clone();
    est.sigma_hat_x = &est.sigma_tilde_c + &est.sigma_hat_u;
    if with_precision {
        est.precision = Some(shrink::precision_matrix(&stage.loadings, &shrunk)?);
    }
    Ok((est, cert))
}

/// Design of one Monte-Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub ps: Vec<usize>,
    pub sigma_eps: Vec<f64>,
    /// `true` for synchronous sampling, `false` for the Poisson clock.
    pub modes: Vec<bool>,
    pub rules: Vec<ShrinkRule>,
    pub replications: usize,
    pub seed: u64,
    /// Replications whose cross-validated bandwidths are averaged and then
    /// reused by the remaining replications of the cell.
    pub cv_reps: usize,
    pub k: usize,
    pub horizon: f64,
    pub delta: f64,
    pub noise_scaling: NoiseScaling,
    pub loading_drivers: LoadingDrivers,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let base = SimConfig::new(100, 0);
        Self {
            ps: vec![100, 300, 500],
            sigma_eps: vec![0.05, 0.1, 0.2],
            modes: vec![true, false],
            rules: ShrinkRule::table_rules().to_vec(),
            replications: 100,
            seed: 20240601,
            cv_reps: 5,
            k: base.k,
            horizon: base.horizon,
            delta: base.delta,
            noise_scaling: NoiseScaling::StdDev,
            loading_drivers: LoadingDrivers::Independent,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.replications == 0 {
            return bad("replications must be at least 1");
        }
        if self.ps.is_empty() || self.sigma_eps.is_empty() || self.modes.is_empty() || self.rules.is_empty() {
            return bad("every experiment axis needs at least one value");
        }
        for rule in &self.rules {
            rule.validate()?;
        }
        self.pipeline.taus.resolve(self.horizon)?;
        for &p in &self.ps {
            self.sim_config(p, 0.0, true, 0).validate()?;
        }
        Ok(())
    }

    pub fn sim_config(&self, p: usize, sigma_eps: f64, synchronous: bool, replication: usize) -> SimConfig {
        let mut cfg = SimConfig::new(p, sim::replication_seed(self.seed, replication as u64));
        cfg.k = self.k;
        cfg.horizon = self.horizon;
        cfg.delta = self.delta;
        cfg.sigma_eps = sigma_eps;
        cfg.loading_drivers = self.loading_drivers;
        cfg.noise = sim::NoiseModel::Proportional {
            scaling: self.noise_scaling,
        };
        cfg.sampling = if synchronous {
            Sampling::synchronous()
        } else {
            Sampling::poisson_default()
        };
        cfg
    }
}

/// Errors of one replication: `errors[rule][tau]`, one `Result` per rule.
#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub errors: Vec<std::result::Result<Vec<CellErrors>, String>>,
    pub preavg_bandwidths: Vec<f64>,
    pub spot_bandwidth: f64,
    pub k_hat: Vec<usize>,
    pub c_rho: Vec<Vec<f64>>,
}

/// Simulate, filter, estimate and score one replication for every rule.
pub fn run_replication(
    sim_cfg: &SimConfig,
    pipeline: &PipelineConfig,
    rules: &[ShrinkRule],
) -> Result<ReplicationOutcome> {
    let gt = sim::simulate_ground_truth(sim_cfg)?;
    let ticks = sim::contaminate_and_sample(&gt, sim_cfg)?;
    let panel = filter_panel(&ticks, sim_cfg.horizon, pipeline)?;
    let h = select_spot_bandwidth(&panel, pipeline)?;
    let taus = pipeline.taus.resolve(sim_cfg.horizon)?;

    let mut errors: Vec<std::result::Result<Vec<CellErrors>, String>> =
        vec![Ok(Vec::with_capacity(taus.len())); rules.len()];
    let mut c_rho = vec![Vec::with_capacity(taus.len()); rules.len()];
    let mut k_hat = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let truth = sim::true_spot_volatility(&gt, tau)?;
        let stage = spot_stage(&panel, pipeline, h, tau)?;
        k_hat.push(stage.k_hat);
        for (r, rule) in rules.iter().enumerate() {
            let Ok(acc) = &mut errors[r] else { continue };
            let scored = finish_estimate(&stage, *rule, &pipeline.threshold, false).and_then(|(est, _)| {
                c_rho[r].push(est.c_rho_used);
                CellErrors::compute(&est.sigma_hat_u, &est.sigma_hat_x, &truth.sigma_u, &truth.sigma_x)
            });
            match scored {
                Ok(e) => acc.push(e),
                Err(e) => errors[r] = Err(format!("tau = {tau}: {e}")),
            }
        }
    }
    Ok(ReplicationOutcome {
        errors,
        preavg_bandwidths: panel.bandwidths.clone(),
        spot_bandwidth: h,
        k_hat,
        c_rho,
    })
}

/// Results of one `(p, sigma_eps, mode)` cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub p: usize,
    pub sigma_eps: f64,
    pub synchronous: bool,
    /// One entry per rule, in the experiment's rule order.
    pub reports: Vec<RuleResult>,
    /// Bandwidths used after the cross-validation phase.
    pub preavg_bandwidths: Vec<f64>,
    pub spot_bandwidth: f64,
    /// `k_hat[r][j]` per replication and tau.
    pub k_hat: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

fn mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
        .collect()
}

fn with_fixed_bandwidths(pipeline: &PipelineConfig, b: Vec<f64>, h: f64) -> PipelineConfig {
    let mut cfg = pipeline.clone();
    cfg.preavg_bandwidth = BandwidthMode::PerAsset { b };
    cfg.spot_bandwidth = SpotBandwidth::Fixed { h };
    cfg
}

pub fn run_cell(exp: &ExperimentConfig, p: usize, sigma_eps: f64, synchronous: bool) -> CellResult {
    let pipeline = &exp.pipeline;
    let needs_cv = matches!(pipeline.preavg_bandwidth, BandwidthMode::CrossValidated { .. })
        || matches!(pipeline.spot_bandwidth, SpotBandwidth::CrossValidated { .. });
    let cv_reps = if needs_cv {
        exp.cv_reps.clamp(1, exp.replications)
    } else {
        0
    };

    let run = |r: usize, cfg: &PipelineConfig| {
        run_replication(&exp.sim_config(p, sigma_eps, synchronous, r), cfg, &exp.rules)
    };
    let mut outcomes: Vec<Result<ReplicationOutcome>> =
        (0..cv_reps).into_par_iter().map(|r| run(r, pipeline)).collect();

    let cv_ok: Vec<&ReplicationOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let fixed = if cv_reps == 0 {
        Some(pipeline.clone())
    } else if cv_ok.is_empty() {
        None
    } else {
        let bs: Vec<Vec<f64>> = cv_ok.iter().map(|o| o.preavg_bandwidths.clone()).collect();
        let h = cv_ok.iter().map(|o| o.spot_bandwidth).sum::<f64>() / cv_ok.len() as f64;
        Some(with_fixed_bandwidths(pipeline, mean_columns(&bs), h))
    };

    match &fixed {
        Some(cfg) => outcomes.extend(
            (cv_reps..exp.replications)
                .into_par_iter()
                .map(|r| run(r, cfg))
                .collect::<Vec<_>>(),
        ),
        None => outcomes.extend(
            (cv_reps..exp.replications)
                .map(|_| Err(Error::InvalidConfig("every cross-validation replication failed".into()))),
        ),
    }

    let (preavg_bandwidths, spot_bandwidth) = match fixed.as_ref().map(|c| (&c.preavg_bandwidth, &c.spot_bandwidth)) {
        Some((BandwidthMode::PerAsset { b }, SpotBandwidth::Fixed { h })) => (b.clone(), *h),
        Some((BandwidthMode::Fixed { b }, SpotBandwidth::Fixed { h })) => (vec![*b; p], *h),
        _ => {
            let ok: Vec<&ReplicationOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
            let bs: Vec<Vec<f64>> = ok.iter().map(|o| o.preavg_bandwidths.clone()).collect();
            let h = ok.iter().map(|o| o.spot_bandwidth).sum::<f64>() / ok.len().max(1) as f64;
            (mean_columns(&bs), h)
        }
    };

    let taus = pipeline.taus.resolve(exp.horizon).unwrap_or_default();
    let reports = exp
        .rules
        .iter()
        .enumerate()
        .map(|(ri, rule)| {
            let mut cells = Vec::with_capacity(outcomes.len());
            for (r, o) in outcomes.iter().enumerate() {
                match o {
                    Ok(o) => match &o.errors[ri] {
                        Ok(e) => cells.push(e.clone()),
                        Err(msg) => return rule_failure(rule, format!("replication {r}: {msg}")),
                    },
                    Err(e) => return rule_failure(rule, format!("replication {r}: {e}")),
                }
            }
            match EvalReport::new(p, sigma_eps, rule.label().to_string(), synchronous, taus.clone(), cells) {
                Ok(report) => RuleResult {
                    rule: rule.label().to_string(),
                    report: Some(report),
                    error: None,
                },
                Err(e) => rule_failure(rule, e.to_string()),
            }
        })
        .collect();

    CellResult {
        p,
        sigma_eps,
        synchronous,
        reports,
        preavg_bandwidths,
        spot_bandwidth,
        k_hat: outcomes
            .iter()
            .map(|o| o.as_ref().map(|o| o.k_hat.clone()).unwrap_or_default())
            .collect(),
    }
}

fn rule_failure(rule: &ShrinkRule, error: String) -> RuleResult {
    RuleResult {
        rule: rule.label().to_string(),
        report: None,
        error: Some(error),
    }
}

/// Run every cell of the experiment, in `(mode, p, sigma_eps)` order.
pub fn reproduce_tables(exp: &ExperimentConfig) -> Result<Vec<CellResult>> {
    exp.validate()?;
    let mut out = Vec::new();
    for &sync in &exp.modes {
        for &p in &exp.ps {
            for &s in &exp.sigma_eps {
                out.push(run_cell(exp, p, s, sync));
            }
        }
    }
    Ok(out)
}

/// Table number and statistic, in publication order.
pub const TABLES: [(usize, Statistic, bool); 6] = [
    (1, Statistic::MsnU, true),
    (2, Statistic::MsnU, false),
    (3, Statistic::MsnX, true),
    (4, Statistic::MsnX, false),
    (5, Statistic::MrnX, true),
    (6, Statistic::MrnX, false),
];

/// CSV text of one table (`with_se` selects standard errors); `None` when
/// no cell matches the table's sampling mode.
pub fn table_csv(cells: &[CellResult], which: Statistic, synchronous: bool, with_se: bool) -> Option<String> {
    let rows: Vec<&CellResult> = cells.iter().filter(|c| c.synchronous == synchronous).collect();
    let first = rows.first()?;
    let mut out = String::from("p,sigma_eps");
    for r in &first.reports {
        out.push(',');
        out.push_str(&r.rule);
    }
    out.push('\n');
    for c in rows {
        out.push_str(&format!("{},{}", c.p, c.sigma_eps));
        for r in &c.reports {
            match &r.report {
                Some(rep) => {
                    let v = if with_se {
                        rep.std_error(which)
                    } else {
                        rep.value(which)
                    };
                    out.push_str(&format!(",{v:.6}"));
                }
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    Some(out)
}

/// Whether any rule in any cell failed.
pub fn has_missing(cells: &[CellResult]) -> bool {
    cells.iter().any(|c| c.reports.iter().any(|r| r.report.is_none()))
}
