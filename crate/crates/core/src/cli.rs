//! Command-line front end: simulate, fit, diagnose.
//!
//! Every command reads a TOML config, writes its outputs into a run directory
//! (created if needed) together with a manifest echoing the resolved settings,
//! and is fully determined by config + seed. The output directory can be
//! overridden with the `ODEMA_OUT` environment variable.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::averaging::{
    loss_ratio_diagnostic, DiagnosticGrid, OptimizerConfig, RiskObjective,
};
use crate::empirical::{
    build_design, destandardize, fit_submodel_suite, linear_suite, load_csv_with_columns,
    reconstruct_levels, residual_diagnostics, FitMetrics, SuiteFit, DEFAULT_AUX, DEFAULT_COLUMNS,
    DEFAULT_H, DEFAULT_MAIN, RESPONSE_COLUMN,
};
use crate::error::{Error, Result};
use crate::estimators::{enumerate_submodels, fit_with_submodels, SubmodelSpec};
use crate::simulation::{
    emit_tables, generate_dataset, run_report, unbiased_submodels, SimulationScenario,
};

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "ODEMA_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "odema",
    version,
    about = "Parameter estimation of linear ODE models by model averaging with optimal weights"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the synthetic Monte Carlo study and write bias/MSE tables.
    Simulate(SimulateArgs),
    /// Fit the averaging pipeline to a market-style CSV dataset.
    Fit(FitArgs),
    /// Check the large-sample loss-ratio behavior on synthetic data.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML scenario file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Override the scenario's base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for tables and plot data.
    #[arg(long, default_value = "odema-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input CSV with header `date,y0,...,y8`.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional TOML file with fit settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also fit the static linear averaging baseline and emit a comparison.
    #[arg(long)]
    pub compare_linear: bool,
    /// Output directory for the report and plot data.
    #[arg(long, default_value = "odema-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// TOML scenario file (synthetic data only: the diagnostic needs the
    /// ground-truth mean).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Sample sizes to scan.
    #[arg(long, value_delimiter = ',', default_values_t = vec![50usize, 100, 200, 400])]
    pub n_list: Vec<usize>,
    /// Replications per sample size.
    #[arg(long, default_value_t = 200)]
    pub replications: usize,
    /// Biased-mass floor of the feasible weight set.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Override the scenario's base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "odema-out")]
    pub out: PathBuf,
}

/// Fit settings loaded from the optional TOML config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub h: f64,
    /// Stride between design rows, in grid points.
    pub stride: usize,
    pub response: usize,
    pub main: Vec<usize>,
    pub aux: Vec<usize>,
    /// Column names expected in the CSV header, in variable order.
    pub columns: Vec<String>,
    /// Submodels as auxiliary index lists; empty list of lists means the
    /// bundled seven-model family.
    pub submodels: Vec<Vec<usize>>,
    /// Fit all 2^m auxiliary subsets instead of the listed family.
    pub enumerate_all: bool,
    pub rho: f64,
    pub c_bar: f64,
    pub grid_a: usize,
    pub grid_b: usize,
    pub grid_c: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let base = OptimizerConfig::default();
        Self {
            h: DEFAULT_H,
            stride: 1,
            response: RESPONSE_COLUMN,
            main: DEFAULT_MAIN.to_vec(),
            aux: DEFAULT_AUX.to_vec(),
            columns: DEFAULT_COLUMNS.iter().map(|s| s.to_string()).collect(),
            submodels: Vec::new(),
            enumerate_all: false,
            rho: base.rho,
            c_bar: base.c_bar,
            grid_a: base.grid_a,
            grid_b: base.grid_b,
            grid_c: base.grid_c,
        }
    }
}

impl FitConfig {
    fn optimizer(&self, unbiased_set: Vec<usize>, objective: RiskObjective) -> OptimizerConfig {
        OptimizerConfig {
            rho: self.rho,
            unbiased_set,
            c_bar: self.c_bar,
            grid_a: self.grid_a,
            grid_b: self.grid_b,
            grid_c: self.grid_c,
            ..OptimizerConfig::default()
        }
        .with_objective(objective)
    }

    fn specs(&self) -> Result<Vec<SubmodelSpec>> {
        let m = self.aux.len();
        if self.enumerate_all {
            return Ok(enumerate_submodels(m));
        }
        if self.submodels.is_empty() {
            return Ok(crate::empirical::table_specs());
        }
        self.submodels
            .iter()
            .map(|v| SubmodelSpec::new(v.clone(), m))
            .collect()
    }
}

impl OptimizerConfig {
    fn with_objective(mut self, objective: RiskObjective) -> Self {
        self.objective = objective;
        self
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve_out_dir(requested: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => requested.to_path_buf(),
    }
}

fn write_manifest<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a, T> {
        command: &'a str,
        version: &'a str,
        config: &'a T,
    }
    let manifest = Manifest { command, version: env!("CARGO_PKG_VERSION"), config };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::Diagnose(args) => cmd_diagnose(&args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut scenario: SimulationScenario = read_toml(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    let out = resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out)?;
    write_manifest(&out, "simulate", &scenario)?;
    let report = run_report(&scenario)?;
    let paths = emit_tables(&report, &out)?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// JSON report emitted by `fit`.
#[derive(Debug, Serialize)]
struct FitReport {
    n: usize,
    h: f64,
    models: Vec<ModelReport>,
    averaged: AveragedReport,
    residual_summary: ResidualSummary,
    linear_baseline: Option<AveragedReport>,
}

#[derive(Debug, Serialize)]
struct ModelReport {
    name: String,
    auxiliary_indices: Vec<usize>,
    weight: f64,
    metrics: FitMetrics,
}

#[derive(Debug, Serialize)]
struct AveragedReport {
    beta: Vec<f64>,
    gamma: Vec<f64>,
    metrics: FitMetrics,
}

#[derive(Debug, Serialize)]
struct ResidualSummary {
    mean: f64,
    sd: f64,
    skew: f64,
    qq_slope: f64,
}

fn averaged_report(suite: &SuiteFit) -> AveragedReport {
    AveragedReport {
        beta: suite.beta_f.iter().cloned().collect(),
        gamma: suite.gamma_f.iter().cloned().collect(),
        metrics: suite.averaged,
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let config: FitConfig = match &args.config {
        Some(path) => read_toml(path)?,
        None => FitConfig::default(),
    };
    if config.stride != 1 {
        return Err(Error::Config("only stride 1 is supported for fitting".into()));
    }
    let out = resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out)?;
    write_manifest(&out, "fit", &config)?;

    let dataset = load_csv_with_columns(&args.data, &config.columns)?;
    let (std_ds, stats) = crate::empirical::standardize(&dataset)?;
    let design = build_design(&std_ds, config.h, config.response, &config.main, &config.aux)?;
    let specs = config.specs()?;
    // Real data: the unbiased set defaults to the largest listed submodel.
    let full_idx = (0..specs.len())
        .max_by_key(|&i| specs[i].len())
        .into_iter()
        .collect::<Vec<_>>();
    let optimizer = config.optimizer(full_idx, RiskObjective::Coefficient);
    let suite = fit_submodel_suite(&design, &specs, &optimizer)?;

    let residuals = design.delta_y.clone() - &suite.fitted;
    let diag = residual_diagnostics(&residuals)?;

    let linear = if args.compare_linear {
        Some(linear_suite(
            &std_ds,
            config.h,
            config.response,
            &config.main,
            &config.aux,
            &specs,
            &optimizer,
        )?)
    } else {
        None
    };

    let report = FitReport {
        n: design.n(),
        h: config.h,
        models: specs
            .iter()
            .enumerate()
            .map(|(i, spec)| ModelReport {
                name: format!("M{}", i + 1),
                auxiliary_indices: spec.included().to_vec(),
                weight: suite.weights[i],
                metrics: suite.per_model[i],
            })
            .collect(),
        averaged: averaged_report(&suite),
        residual_summary: ResidualSummary {
            mean: diag.mean,
            sd: diag.sd,
            skew: diag.skew,
            qq_slope: diag.qq_slope(),
        },
        linear_baseline: linear.as_ref().map(averaged_report),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(out.join("report.json"), json)?;

    // Plot data: reconstructed levels on the original scale.
    let step = (config.h / 1.0).round() as usize;
    let level_col = std_ds.values.column(config.response).into_owned();
    let fitted_levels_std = reconstruct_levels(&level_col, &suite.fitted, step)?;
    let fitted_levels = destandardize(&fitted_levels_std, stats[config.response]);
    let mut w = csv::Writer::from_path(out.join("levels.csv"))?;
    w.write_record(["date", "observed", "fitted"])?;
    for i in 0..fitted_levels.len() {
        w.write_record([
            dataset.dates[i + step].format("%Y-%m-%d").to_string(),
            format!("{}", dataset.values[(i + step, config.response)]),
            format!("{}", fitted_levels[i]),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("differences.csv"))?;
    w.write_record(["date", "observed_delta", "fitted_delta", "residual"])?;
    for i in 0..design.n() {
        w.write_record([
            dataset.dates[i].format("%Y-%m-%d").to_string(),
            format!("{}", design.delta_y[i]),
            format!("{}", suite.fitted[i]),
            format!("{}", residuals[i]),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("residual_histogram.csv"))?;
    w.write_record(["bin_low", "bin_high", "count"])?;
    for b in 0..diag.counts.len() {
        w.write_record([
            format!("{}", diag.bin_edges[b]),
            format!("{}", diag.bin_edges[b + 1]),
            format!("{}", diag.counts[b]),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("residual_qq.csv"))?;
    w.write_record(["theoretical", "sample"])?;
    for (t, s) in &diag.qq {
        w.write_record([format!("{t}"), format!("{s}")])?;
    }
    w.flush()?;

    if let Some(linear) = &linear {
        let mut w = csv::Writer::from_path(out.join("model_comparison.csv"))?;
        w.write_record(["model", "standard_error", "mse", "mae", "r_squared"])?;
        for (label, m) in [("differential_average", &suite.averaged), ("linear_average", &linear.averaged)]
        {
            w.write_record([
                label.to_string(),
                format!("{}", m.standard_error),
                format!("{}", m.mse),
                format!("{}", m.mae),
                format!("{}", m.r_squared),
            ])?;
        }
        w.flush()?;
    }

    println!("wrote {}", out.join("report.json").display());
    Ok(())
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let mut scenario: SimulationScenario = read_toml(&args.scenario).map_err(|e| {
        Error::Config(format!(
            "diagnose needs a synthetic scenario file (ground-truth mean required): {e}"
        ))
    })?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    if args.replications == 0 {
        return Err(Error::Config("replications must be positive".into()));
    }
    let out = resolve_out_dir(&args.out);
    std::fs::create_dir_all(&out)?;
    #[derive(Serialize)]
    struct DiagnoseManifest<'a> {
        rho: f64,
        replications: usize,
        n_list: &'a [usize],
        scenario: &'a SimulationScenario,
    }
    write_manifest(
        &out,
        "diagnose",
        &DiagnoseManifest {
            rho: args.rho,
            replications: args.replications,
            n_list: &args.n_list,
            scenario: &scenario,
        },
    )?;

    let config = OptimizerConfig {
        rho: args.rho,
        unbiased_set: unbiased_submodels(&scenario),
        objective: RiskObjective::Prediction,
        ..OptimizerConfig::default()
    };
    let grid = DiagnosticGrid::default();
    let m = scenario.aux_indices.len();

    let mut w = csv::Writer::from_path(out.join("loss_ratio.csv"))?;
    w.write_record(["n", "replications", "median_ratio", "mean_achieved_loss", "mean_infimum_loss"])?;
    for &n in &args.n_list {
        let mut ratios = Vec::with_capacity(args.replications);
        let mut sum_achieved = 0.0;
        let mut sum_infimum = 0.0;
        for rep in 0..args.replications {
            let seed = scenario.seed.wrapping_add(rep as u64);
            let (design, mu) = generate_dataset(&scenario, n, seed)?;
            let fit = fit_with_submodels(&design, &enumerate_submodels(m))?;
            let d = loss_ratio_diagnostic(&fit, &mu, &config, &grid)?;
            ratios.push(d.ratio);
            sum_achieved += d.achieved_loss;
            sum_infimum += d.infimum_loss;
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = ratios.len() / 2;
        let median = if ratios.len() % 2 == 0 {
            (ratios[mid - 1] + ratios[mid]) / 2.0
        } else {
            ratios[mid]
        };
        let scale = 1.0 / args.replications as f64;
        w.write_record([
            format!("{n}"),
            format!("{}", args.replications),
            format!("{median}"),
            format!("{}", sum_achieved * scale),
            format!("{}", sum_infimum * scale),
        ])?;
    }
    w.flush()?;
    println!("wrote {}", out.join("loss_ratio.csv").display());
    Ok(())
}
