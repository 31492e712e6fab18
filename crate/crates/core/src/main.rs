use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use spotvol::experiment::{
    self, ExperimentConfig, FactorMode, PipelineConfig, PseudoStep, SpotBandwidth, TauGrid, ThresholdChoice,
};
use spotvol::io::{self, TruthManifest};
use spotvol::metrics::{self, CellErrors, EvalReport, Statistic};
use spotvol::preavg::BandwidthMode;
use spotvol::shrink::{self, ShrinkRule};
use spotvol::sim::{self, ChiProfile, LoadingDrivers, NoiseModel, NoiseScaling, Sampling, SimConfig};
use spotvol::spotpca;
use spotvol::{Error, Kernel};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "spotvol",
    version,
    about = "Spot volatility matrix estimation from noisy high-frequency prices"
)]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate tick data and ground-truth spot volatility matrices.
    Simulate(SimulateArgs),
    /// Estimate spot volatility matrices from tick CSVs.
    Estimate(EstimateArgs),
    /// Score estimates against simulated ground truth.
    Evaluate(EvaluateArgs),
    /// Run the Monte-Carlo comparison of shrinkage rules.
    ReproduceTables(TablesArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    Sync,
    Async,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum NoiseKind {
    Proportional,
    Generalized,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScalingArg {
    StdDev,
    Variance,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ChiArg {
    Constant,
    UShape,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DriversArg {
    Independent,
    SharedPerAsset,
}

impl From<ScalingArg> for NoiseScaling {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::StdDev => NoiseScaling::StdDev,
            ScalingArg::Variance => NoiseScaling::Variance,
        }
    }
}

impl From<DriversArg> for LoadingDrivers {
    fn from(d: DriversArg) -> Self {
        match d {
            DriversArg::Independent => LoadingDrivers::Independent,
            DriversArg::SharedPerAsset => LoadingDrivers::SharedPerAsset,
        }
    }
}

#[derive(Args, Serialize, Clone)]
struct TauArgs {
    /// Explicit evaluation times (day fractions); overrides the uniform grid.
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// Uniform grid start as a fraction of the horizon.
    #[arg(long, default_value_t = 0.1)]
    tau_lower: f64,
    #[arg(long, default_value_t = 0.9)]
    tau_upper: f64,
    #[arg(long, default_value_t = 10)]
    tau_count: usize,
}

impl TauArgs {
    fn grid(&self) -> TauGrid {
        if self.taus.is_empty() {
            TauGrid::Uniform {
                lower: self.tau_lower,
                upper: self.tau_upper,
                count: self.tau_count,
            }
        } else {
            TauGrid::Explicit {
                taus: self.taus.clone(),
            }
        }
    }
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    sigma_eps: f64,
    /// Horizon in trading days.
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// Fine simulation steps per trading day.
    #[arg(long, default_value_t = 2340)]
    steps_per_day: usize,
    #[arg(long, value_enum, default_value_t = Mode::Sync)]
    sampling: Mode,
    /// Observe every n-th fine step in synchronous mode.
    #[arg(long, default_value_t = 1)]
    sync_step: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_low: f64,
    #[arg(long, default_value_t = 3.0)]
    lambda_high: f64,
    #[arg(long, value_enum, default_value_t = NoiseKind::Proportional)]
    noise: NoiseKind,
    #[arg(long, value_enum, default_value_t = ScalingArg::StdDev)]
    noise_scaling: ScalingArg,
    /// Noise decay exponents for the generalized model (one or p values).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    beta: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ChiArg::Constant)]
    chi: ChiArg,
    #[arg(long, default_value_t = 0.001)]
    chi_a: f64,
    #[arg(long, default_value_t = 0.004)]
    chi_b: f64,
    #[arg(long, value_enum, default_value_t = DriversArg::Independent)]
    loading_drivers: DriversArg,
    /// Idiosyncratic correlation decay; drawn from U(0, 0.5) when absent.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 3)]
    band: usize,
    #[command(flatten)]
    tau: TauArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct PipelineArgs {
    /// Pre-averaging kernel.
    #[arg(long, default_value = "epanechnikov")]
    filter_kernel: Kernel,
    /// Spot smoothing kernel.
    #[arg(long, default_value = "epanechnikov")]
    spot_kernel: Kernel,
    /// Sum Gaussian kernels exactly instead of truncating at 6 bandwidths.
    #[arg(long)]
    exact_kernels: bool,
    /// Pseudo-grid step; defaults to horizon / floor(n_min^(2/3)).
    #[arg(long)]
    delta0: Option<f64>,
    /// Fixed pre-averaging bandwidth; cross-validated per asset when absent.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    b_candidates: Vec<f64>,
    /// Fixed spot bandwidth; cross-validated when absent.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    h_candidates: Vec<f64>,
    /// Use this factor count at every tau instead of the eigenvalue ratio.
    #[arg(long)]
    fixed_k: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Fixed threshold constant; the minimal positive-definite one otherwise.
    #[arg(long)]
    c_rho: Option<f64>,
    #[command(flatten)]
    tau: TauArgs,
}

impl PipelineArgs {
    fn config(&self) -> PipelineConfig {
        let candidates = |v: &Vec<f64>| if v.is_empty() { None } else { Some(v.clone()) };
        PipelineConfig {
            filter_kernel: self.filter_kernel,
            spot_kernel: self.spot_kernel,
            exact_kernels: self.exact_kernels,
            pseudo_step: match self.delta0 {
                Some(delta0) => PseudoStep::Fixed { delta0 },
                None => PseudoStep::Auto,
            },
            preavg_bandwidth: match self.b {
                Some(b) => BandwidthMode::Fixed { b },
                None => BandwidthMode::CrossValidated {
                    candidates: candidates(&self.b_candidates),
                },
            },
            spot_bandwidth: match self.h {
                Some(h) => SpotBandwidth::Fixed { h },
                None => SpotBandwidth::CrossValidated {
                    candidates: candidates(&self.h_candidates),
                },
            },
            factors: match self.fixed_k {
                Some(k) => FactorMode::Fixed { k },
                None => FactorMode::EigenRatio { k_max: self.k_max },
            },
            taus: self.tau.grid(),
            threshold: match self.c_rho {
                Some(c_rho) => ThresholdChoice::Fixed { c_rho },
                None => ThresholdChoice::MinPd {
                    grid: shrink::default_cpd_grid(),
                },
            },
        }
    }
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    /// Tick CSV files or directories of them.
    #[arg(long, value_delimiter = ',', required = true)]
    ticks: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// none | soft | hard | scad[:a] | alasso[:eta]
    #[arg(long, default_value = "scad")]
    shrink: String,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Evaluate at tau outside [h, T - h].
    #[arg(long)]
    allow_boundary: bool,
    /// Write matrices as binary blobs instead of CSV.
    #[arg(long)]
    binary: bool,
    /// Also write the precision matrix.
    #[arg(long)]
    precision: bool,
    /// Rank assets by the variance of their estimated spot variance over tau.
    #[arg(long)]
    rank: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    /// Truth manifest written by `simulate`, or its directory.
    #[arg(long)]
    truth: PathBuf,
    /// Output directory of `estimate`.
    #[arg(long)]
    estimates: PathBuf,
    /// Write the report here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TablesArgs {
    #[arg(long, value_delimiter = ',', default_value = "100,300,500")]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    sigma_eps: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "sync,async")]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',', default_value = "none,scad,alasso,soft,hard")]
    rules: Vec<String>,
    #[arg(long, default_value_t = 100)]
    replications: usize,
    #[arg(long, default_value_t = 20240601)]
    seed: u64,
    /// Replications whose cross-validated bandwidths are averaged and reused.
    #[arg(long, default_value_t = 5)]
    cv_reps: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 2340)]
    steps_per_day: usize,
    #[arg(long, value_enum, default_value_t = ScalingArg::StdDev)]
    noise_scaling: ScalingArg,
    #[arg(long, value_enum, default_value_t = DriversArg::Independent)]
    loading_drivers: DriversArg,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Error plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<u8, Failure>;

fn manifest<A: Serialize>(command: &str, args: &A, resolved: Value) -> Result<Value, Failure> {
    let args = serde_json::to_value(args).map_err(Error::from)?;
    Ok(json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": spotvol::config::args_object(&flatten_json(&args)),
        "resolved": resolved,
    }))
}

/// Lift nested (flattened clap) objects to the top level.
fn flatten_json(v: &Value) -> Value {
    let mut out = serde_json::Map::new();
    fn walk(v: &Value, out: &mut serde_json::Map<String, Value>) {
        if let Some(map) = v.as_object() {
            for (k, v) in map {
                if v.is_object() {
                    walk(v, out);
                } else {
                    out.insert(k.clone(), v.clone());
                }
            }
        }
    }
    walk(v, &mut out);
    Value::Object(out)
}

fn configure_threads(requested: Option<usize>) {
    let env_cap = std::env::var("SPOTVOL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let n = match (requested, env_cap) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    if let Some(n) = n.filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    configure_threads(None);
    if args.steps_per_day == 0 {
        return Err(usage("--steps-per-day must be positive"));
    }
    let mut cfg = SimConfig::new(args.p, args.seed);
    cfg.k = args.k;
    cfg.sigma_eps = args.sigma_eps;
    cfg.horizon = args.horizon;
    cfg.delta = 1.0 / args.steps_per_day as f64;
    cfg.band = args.band;
    cfg.rho = args.rho;
    cfg.loading_drivers = args.loading_drivers.into();
    cfg.sampling = match args.sampling {
        Mode::Sync => Sampling::Synchronous { step: args.sync_step },
        Mode::Async => Sampling::PoissonClock {
            lambda_low: args.lambda_low,
            lambda_high: args.lambda_high,
            base_unit: 10.0 / sim::SECONDS_PER_DAY,
        },
    };
    cfg.noise = match args.noise {
        NoiseKind::Proportional => NoiseModel::Proportional {
            scaling: args.noise_scaling.into(),
        },
        NoiseKind::Generalized => NoiseModel::Generalized {
            beta: args.beta.clone(),
            chi: match args.chi {
                ChiArg::Constant => ChiProfile::Constant { level: args.chi_a },
                ChiArg::UShape => ChiProfile::UShape {
                    a: args.chi_a,
                    b: args.chi_b,
                },
            },
        },
    };
    cfg.validate()?;
    let taus = args.tau.grid().resolve(cfg.horizon)?;

    let gt = sim::simulate_ground_truth(&cfg)?;
    let ticks = sim::contaminate_and_sample(&gt, &cfg)?;
    io::write_tick_dir(&args.out.join("ticks"), &ticks)?;

    let truth_dir = args.out.join("truth");
    let mut truth = TruthManifest {
        p: cfg.p,
        k: cfg.k,
        horizon: cfg.horizon,
        seed: cfg.seed,
        tau_list: taus.clone(),
        sigma_x: Vec::new(),
        sigma_u: Vec::new(),
    };
    for (j, &tau) in taus.iter().enumerate() {
        let spot = sim::true_spot_volatility(&gt, tau)?;
        let (fx, fu) = io::truth_file_names(j);
        io::write_matrix_csv(&truth_dir.join(&fx), &spot.sigma_x)?;
        io::write_matrix_csv(&truth_dir.join(&fu), &spot.sigma_u)?;
        truth.sigma_x.push(fx);
        truth.sigma_u.push(fu);
    }
    io::write_json(&truth_dir.join("manifest.json"), &truth)?;
    let m = manifest(
        "simulate",
        args,
        json!({ "sim": cfg, "rho_used": gt.rho, "taus": taus }),
    )?;
    io::write_json(&args.out.join("manifest.json"), &m)?;
    println!(
        "simulated p = {}, {} ticks total, rho = {:.4}, output in {}",
        cfg.p,
        ticks.iter().map(|t| t.len()).sum::<usize>(),
        gt.rho,
        args.out.display()
    );
    Ok(0)
}

fn collect_tick_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(io::list_csv(p)?);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(usage(format!("tick input {} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(usage("no tick CSV files found"));
    }
    Ok(out)
}

#[derive(Serialize)]
struct TauSummary {
    tau: f64,
    dir: String,
    k_hat: Option<usize>,
    c_rho: Option<f64>,
    c_rho_capped: Option<bool>,
    kernel_mass: Option<f64>,
    in_bandwidth_range: Option<bool>,
    error: Option<String>,
}

fn write_matrix(dir: &Path, name: &str, m: &DMatrix<f64>, binary: bool, echo: &Value) -> Result<(), Failure> {
    if binary {
        io::write_blob(&dir.join(format!("{name}.bin")), m, echo)?;
    } else {
        io::write_matrix_csv(&dir.join(format!("{name}.csv")), m)?;
    }
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> CmdResult {
    configure_threads(args.threads);
    let rule: ShrinkRule = args.shrink.parse()?;
    let cfg = args.pipeline.config();
    let ticks = io::read_ticks(&collect_tick_paths(&args.ticks)?)?;
    if let Some(t) = ticks.iter().find(|t| t.end() > args.horizon) {
        return Err(usage(format!(
            "asset {} has ticks after the horizon {} (last at {}); pass --horizon",
            t.asset_id,
            args.horizon,
            t.end()
        )));
    }
    let taus = cfg.taus.resolve(args.horizon)?;
    let panel = experiment::filter_panel(&ticks, args.horizon, &cfg)?;
    let h = experiment::select_spot_bandwidth(&panel, &cfg)?;
    for &tau in &taus {
        if let Err(e) = spotpca::check_bandwidth_range(tau, h, args.horizon) {
            if !args.allow_boundary {
                return Err(usage(format!("{e}; pass --allow-boundary to estimate anyway")));
            }
            eprintln!("warning: {e}");
        }
    }

    let results: Vec<_> = taus
        .par_iter()
        .map(|&tau| {
            experiment::spot_stage(&panel, &cfg, h, tau).and_then(|stage| {
                experiment::finish_estimate(&stage, rule, &cfg.threshold, args.precision)
                    .map(|(est, cert)| (stage, est, cert))
            })
        })
        .collect();

    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    let mut summaries = Vec::with_capacity(taus.len());
    let mut failed = 0;
    let mut diag_series: Vec<Vec<f64>> = vec![Vec::new(); panel.p()];
    for (j, (tau, res)) in taus.iter().zip(results).enumerate() {
        let dir_name = format!("tau_{j:03}");
        let dir = args.out.join(&dir_name);
        match res {
            Ok((stage, est, cert)) => {
                let echo = json!({ "tau": tau, "rule": rule.to_string(), "h": h });
                std::fs::create_dir_all(&dir).map_err(Error::from)?;
                write_matrix(&dir, "sigma_hat_x", &est.sigma_hat_x, args.binary, &echo)?;
                write_matrix(&dir, "sigma_hat_u", &est.sigma_hat_u, args.binary, &echo)?;
                write_matrix(&dir, "loadings", &est.loadings, args.binary, &echo)?;
                if let Some(prec) = &est.precision {
                    write_matrix(&dir, "precision", prec, args.binary, &echo)?;
                }
                for (i, s) in diag_series.iter_mut().enumerate() {
                    s.push(est.sigma_hat_x[(i, i)]);
                }
                summaries.push(TauSummary {
                    tau: *tau,
                    dir: dir_name,
                    k_hat: Some(est.k_hat),
                    c_rho: Some(est.c_rho_used),
                    c_rho_capped: cert.map(|c| c.capped),
                    kernel_mass: Some(stage.raw.kernel_mass),
                    in_bandwidth_range: Some(stage.raw.in_bandwidth_range),
                    error: None,
                });
            }
            Err(e) => {
                failed += 1;
                eprintln!("tau = {tau}: {e}");
                summaries.push(TauSummary {
                    tau: *tau,
                    dir: dir_name,
                    k_hat: None,
                    c_rho: None,
                    c_rho_capped: None,
                    kernel_mass: None,
                    in_bandwidth_range: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    io::write_panel(&args.out.join("panel.csv"), &args.out.join("panel.json"), &panel)?;
    let summary = json!({
        "rule": rule.to_string(),
        "format": if args.binary { "binary" } else { "csv" },
        "asset_ids": panel.asset_ids,
        "preavg_bandwidths": panel.bandwidths,
        "spot_bandwidth": h,
        "delta0": panel.delta0,
        "degenerate_points": panel.degenerate_points,
        "taus": summaries,
    });
    io::write_json(&args.out.join("summary.json"), &summary)?;
    if args.rank {
        let order = metrics::rank_by_variance(&diag_series);
        let ids: Vec<usize> = order.iter().map(|&i| panel.asset_ids[i]).collect();
        let pick = |q: f64| metrics::quantile_pick(&order, q).map(|i| panel.asset_ids[i]);
        io::write_json(
            &args.out.join("ranking.json"),
            &json!({ "by_spot_variance": ids, "q05": pick(0.05), "q50": pick(0.5), "q95": pick(0.95) }),
        )?;
    }
    let m = manifest(
        "estimate",
        args,
        json!({ "pipeline": cfg, "rule": rule, "spot_bandwidth": h }),
    )?;
    io::write_json(&args.out.join("manifest.json"), &m)?;
    println!(
        "estimated {} of {} tau points (h = {h:.5}, delta0 = {:.5}), output in {}",
        taus.len() - failed,
        taus.len(),
        panel.delta0,
        args.out.display()
    );
    Ok(if failed > 0 { EXIT_PARTIAL } else { 0 })
}

fn read_estimate_matrix(dir: &Path, name: &str, binary: bool) -> Result<DMatrix<f64>, Failure> {
    Ok(if binary {
        io::read_blob(&dir.join(format!("{name}.bin")))?.0
    } else {
        io::read_matrix_csv(&dir.join(format!("{name}.csv")))?
    })
}

fn cmd_evaluate(args: &EvaluateArgs) -> CmdResult {
    let truth_path = if args.truth.is_dir() {
        args.truth.join("manifest.json")
    } else {
        args.truth.clone()
    };
    let truth_dir = truth_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let truth: TruthManifest = io::read_json(&truth_path)?;
    let summary: Value = io::read_json(&args.estimates.join("summary.json"))?;
    let binary = summary["format"] == "binary";
    let rule = summary["rule"].as_str().unwrap_or("unknown").to_string();
    let entries = summary["taus"].as_array().cloned().unwrap_or_default();

    let mut taus = Vec::new();
    let mut row = Vec::new();
    for e in entries {
        if !e["error"].is_null() {
            continue;
        }
        let Some(tau) = e["tau"].as_f64() else { continue };
        let Some(j) = truth.tau_list.iter().position(|t| (t - tau).abs() < 1e-9) else {
            eprintln!("tau = {tau} has no ground truth; skipped");
            continue;
        };
        let dir = args.estimates.join(e["dir"].as_str().unwrap_or_default());
        let hat_x = read_estimate_matrix(&dir, "sigma_hat_x", binary)?;
        let hat_u = read_estimate_matrix(&dir, "sigma_hat_u", binary)?;
        let sx = io::read_matrix_csv(&truth_dir.join(&truth.sigma_x[j]))?;
        let su = io::read_matrix_csv(&truth_dir.join(&truth.sigma_u[j]))?;
        if hat_x.shape() != sx.shape() {
            return Err(usage(format!(
                "estimate at tau = {tau} is {}x{}, truth is {}x{}",
                hat_x.nrows(),
                hat_x.ncols(),
                sx.nrows(),
                sx.ncols()
            )));
        }
        row.push(CellErrors::compute(&hat_u, &hat_x, &su, &sx)?);
        taus.push(tau);
    }
    if row.is_empty() {
        return Err(usage("no estimated tau matches the ground truth"));
    }
    let report = EvalReport::new(truth.p, f64::NAN, rule, true, taus, vec![row])?;
    for s in Statistic::ALL {
        println!("{} = {:.6}", s.label(), report.value(s));
    }
    if let Some(out) = &args.out {
        io::write_json(out, &report)?;
    }
    Ok(0)
}

fn cmd_tables(args: &TablesArgs) -> CmdResult {
    configure_threads(args.threads);
    if args.steps_per_day == 0 {
        return Err(usage("--steps-per-day must be positive"));
    }
    let rules = args
        .rules
        .iter()
        .map(|r| r.parse::<ShrinkRule>())
        .collect::<spotvol::Result<Vec<_>>>()?;
    let exp = ExperimentConfig {
        ps: args.p.clone(),
        sigma_eps: args.sigma_eps.clone(),
        modes: args.modes.iter().map(|m| *m == Mode::Sync).collect(),
        rules,
        replications: args.replications,
        seed: args.seed,
        cv_reps: args.cv_reps,
        k: args.k,
        horizon: args.horizon,
        delta: 1.0 / args.steps_per_day as f64,
        noise_scaling: args.noise_scaling.into(),
        loading_drivers: args.loading_drivers.into(),
        pipeline: args.pipeline.config(),
    };
    exp.validate()?;
    let cells = experiment::reproduce_tables(&exp)?;

    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    for (n, stat, sync) in experiment::TABLES {
        let Some(values) = experiment::table_csv(&cells, stat, sync, false) else {
            continue;
        };
        let se = experiment::table_csv(&cells, stat, sync, true).unwrap_or_default();
        std::fs::write(args.out.join(format!("table{n}.csv")), &values).map_err(Error::from)?;
        std::fs::write(args.out.join(format!("table{n}_se.csv")), &se).map_err(Error::from)?;
        let mode = if sync { "synchronous" } else { "asynchronous" };
        println!("Table {n}: {} ({mode})\n{values}", stat.label());
    }
    for c in &cells {
        for r in c.reports.iter().filter(|r| r.report.is_none()) {
            eprintln!(
                "NA: p = {}, sigma_eps = {}, {}, {}: {}",
                c.p,
                c.sigma_eps,
                if c.synchronous { "sync" } else { "async" },
                r.rule,
                r.error.as_deref().unwrap_or("")
            );
        }
    }
    io::write_json(&args.out.join("report.json"), &cells)?;
    let m = manifest("reproduce-tables", args, json!({ "experiment": exp }))?;
    io::write_json(&args.out.join("manifest.json"), &m)?;
    Ok(if experiment::has_missing(&cells) {
        EXIT_PARTIAL
    } else {
        0
    })
}

/// Pull `--config FILE` out of the arguments and splice the file's entries in
/// right after the subcommand, so later flags override them.
fn expand_config(raw: Vec<String>) -> Result<Vec<String>, Failure> {
    let mut rest = Vec::with_capacity(raw.len());
    let mut config: Option<PathBuf> = None;
    let mut it = raw.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let path = it.next().ok_or_else(|| usage("--config needs a file"))?;
            config = Some(PathBuf::from(path));
        } else if let Some(path) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(path));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let extra = spotvol::config::load(&path)?;
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, extra);
    Ok(rest)
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return ExitCode::from(f.code);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ReproduceTables(a) => cmd_tables(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
