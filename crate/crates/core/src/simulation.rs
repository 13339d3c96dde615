//! Monte Carlo study of the averaging pipeline on synthetic dynamic data.
//!
//! Data come from a linear dynamic model dY0/dt = alpha' Y(t) observed through
//! step-h differences with additive noise. Each replication runs the full
//! discretize/fit/average pipeline and a static linear baseline, and the
//! harness aggregates bias and mean-square-error tables across sample sizes.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::averaging::{optimize_weight_params, OptimizerConfig};
use crate::error::{Error, Result};
use crate::estimators::{enumerate_submodels, fit_with_submodels, PartitionedDesign};

fn default_h() -> f64 {
    1.5
}

fn default_sigma() -> f64 {
    1.0
}

fn default_replications() -> usize {
    1000
}

fn default_main() -> Vec<usize> {
    vec![0, 1]
}

fn default_aux() -> Vec<usize> {
    vec![2, 3]
}

/// Generator settings for one synthetic study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationScenario {
    /// True coefficients of the dynamic model, one per covariate.
    pub alpha_true: Vec<f64>,
    /// Per-covariate normal mean.
    pub covariate_means: Vec<f64>,
    /// Per-covariate normal spread; standard deviation unless
    /// `spread_is_variance` is set.
    pub covariate_spreads: Vec<f64>,
    #[serde(default)]
    pub spread_is_variance: bool,
    /// Covariates forced into every submodel.
    #[serde(default = "default_main")]
    pub main_indices: Vec<usize>,
    /// Covariates subject to selection.
    #[serde(default = "default_aux")]
    pub aux_indices: Vec<usize>,
    /// Observation noise standard deviation.
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    /// Difference step length.
    #[serde(default = "default_h")]
    pub h: f64,
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub seed: u64,
}

impl SimulationScenario {
    /// First study: alpha = (0.1, 0.2, 0.3, 0.4), Y_j ~ N(j, s_j).
    pub fn scenario1() -> Self {
        Self {
            alpha_true: vec![0.1, 0.2, 0.3, 0.4],
            covariate_means: vec![1.0, 2.0, 3.0, 4.0],
            covariate_spreads: vec![0.2, 0.3, 0.4, 0.3],
            spread_is_variance: false,
            main_indices: default_main(),
            aux_indices: default_aux(),
            noise_sigma: 1.0,
            h: default_h(),
            sample_sizes: vec![200, 300],
            replications: default_replications(),
            seed: 0,
        }
    }

    /// Second study: alpha = (0.4, 0.5, 0.6, 0.7), shifted covariate laws.
    pub fn scenario2() -> Self {
        Self {
            alpha_true: vec![0.4, 0.5, 0.6, 0.7],
            covariate_means: vec![1.5, 2.5, 3.5, 4.5],
            covariate_spreads: vec![0.3, 0.4, 0.5, 0.6],
            ..Self::scenario1()
        }
    }

    pub fn dim(&self) -> usize {
        self.alpha_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Validation("scenario needs at least one covariate".into()));
        }
        if self.covariate_means.len() != d || self.covariate_spreads.len() != d {
            return Err(Error::Shape(format!(
                "alpha has {d} entries; means/spreads have {}/{}",
                self.covariate_means.len(),
                self.covariate_spreads.len()
            )));
        }
        if self.covariate_spreads.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("covariate spreads must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.h > 0.0) {
            return Err(Error::Validation("need noise sigma >= 0 and h > 0".into()));
        }
        let mut seen = vec![false; d];
        for &i in self.main_indices.iter().chain(&self.aux_indices) {
            if i >= d || seen[i] {
                return Err(Error::Validation(format!(
                    "main/auxiliary indices must partition 0..{d} without repeats"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) || self.main_indices.is_empty() {
            return Err(Error::Validation(
                "every covariate must be assigned a role and the main set must be nonempty".into(),
            ));
        }
        if self.replications == 0 {
            return Err(Error::Validation("replications must be positive".into()));
        }
        let min_n = 2 * d + 2;
        if let Some(&bad) = self.sample_sizes.iter().find(|&&n| n < min_n) {
            return Err(Error::InsufficientData { needed: min_n, got: bad });
        }
        Ok(())
    }

    fn spread_as_sd(&self, j: usize) -> f64 {
        let s = self.covariate_spreads[j];
        if self.spread_is_variance {
            s.sqrt()
        } else {
            s
        }
    }
}

/// One simulated draw: the regression design, the noiseless mean, and the raw
/// time-t covariates the static baseline regresses on.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub design: PartitionedDesign,
    pub mu: DVector<f64>,
    pub raw: DMatrix<f64>,
}

/// Draw one dataset: covariates are i.i.d. normal per half-grid point
/// (spacing h/2), each design row Simpson-combines three consecutive grid
/// rows, and the response is the scaled mean plus i.i.d. noise.
pub fn generate_full(scenario: &SimulationScenario, n: usize, seed: u64) -> Result<SimulatedData> {
    scenario.validate()?;
    let d = scenario.dim();
    if n < 2 * d + 2 {
        return Err(Error::InsufficientData { needed: 2 * d + 2, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = DMatrix::zeros(n + 2, d);
    for i in 0..n + 2 {
        for j in 0..d {
            let law = Normal::new(scenario.covariate_means[j], scenario.spread_as_sd(j))
                .map_err(|e| Error::Validation(e.to_string()))?;
            grid[(i, j)] = law.sample(&mut rng);
        }
    }
    let mut combined = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            combined[(i, j)] = grid[(i, j)] + 4.0 * grid[(i + 1, j)] + grid[(i + 2, j)];
        }
    }
    let alpha = DVector::from_column_slice(&scenario.alpha_true);
    let mu = &combined * alpha * (scenario.h / 6.0);
    let noise = Normal::new(0.0, 1.0).map_err(|e| Error::Validation(e.to_string()))?;
    let delta_y = if scenario.noise_sigma > 0.0 {
        &mu + DVector::from_fn(n, |_, _| scenario.noise_sigma * noise.sample(&mut rng))
    } else {
        mu.clone()
    };
    let x = combined.select_columns(scenario.main_indices.iter());
    let z = combined.select_columns(scenario.aux_indices.iter());
    let design = PartitionedDesign::new(delta_y, x, z, scenario.h)?;
    let order: Vec<usize> = scenario
        .main_indices
        .iter()
        .chain(&scenario.aux_indices)
        .copied()
        .collect();
    let raw = grid.rows(0, n).select_columns(order.iter());
    Ok(SimulatedData { design, mu, raw })
}

/// Public generator per the module contract.
pub fn generate_dataset(
    scenario: &SimulationScenario,
    n: usize,
    seed: u64,
) -> Result<(PartitionedDesign, DVector<f64>)> {
    let data = generate_full(scenario, n, seed)?;
    Ok((data.design, data.mu))
}

/// Fit quality of one pipeline on one replication.
#[derive(Debug, Clone, Copy)]
pub struct BaselineFit {
    /// In-sample mean squared residual.
    pub residual_mse: f64,
    /// Mean squared model error against the noiseless mean, when available.
    pub model_mse: Option<f64>,
}

/// Static baseline: regress the differences on the raw time-t covariates
/// (intercept plus mains forced in, auxiliaries selectable) and run the same
/// weight-selection machinery. No Simpson combination, no step scaling.
pub fn linear_baseline_fit(
    raw: &DMatrix<f64>,
    delta_y: &DVector<f64>,
    n_main: usize,
    mu: Option<&DVector<f64>>,
) -> Result<BaselineFit> {
    let n = raw.nrows();
    let d = raw.ncols();
    if delta_y.len() != n || n_main > d {
        return Err(Error::Shape(format!(
            "raw is {n} x {d}, delta_y has {} entries, {n_main} mains",
            delta_y.len()
        )));
    }
    let mut x = DMatrix::zeros(n, n_main + 1);
    x.column_mut(0).fill(1.0);
    for j in 0..n_main {
        x.set_column(j + 1, &raw.column(j));
    }
    let z = raw.columns(n_main, d - n_main).into_owned();
    // h = 6 makes the design's h/6 scale the identity, so coefficients act on
    // the raw covariates directly.
    let design = PartitionedDesign::new(delta_y.clone(), x, z, 6.0)?;
    let m = design.m();
    let fit = fit_with_submodels(&design, &enumerate_submodels(m))?;
    let (beta_f, gamma_f) = if m == 0 {
        (fit.beta_u.clone(), fit.gamma.clone())
    } else {
        let avg = optimize_weight_params(&fit, &OptimizerConfig::default())?;
        (avg.beta_f, avg.gamma_f)
    };
    let fitted = fit.fitted_mean(&beta_f, &gamma_f);
    let residual_mse = (delta_y - &fitted).norm_squared() / n as f64;
    let model_mse = mu.map(|mu| (&fitted - mu).norm_squared() / n as f64);
    Ok(BaselineFit { residual_mse, model_mse })
}

/// Aggregated results for one (scenario, n) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub n: usize,
    /// True coefficients in original covariate order.
    pub real_values: Vec<f64>,
    /// Mean estimate over replications, same order.
    pub mean_estimates: Vec<f64>,
    /// Mean estimate minus true value.
    pub deviations: Vec<f64>,
    /// Mean squared deviation over replications.
    pub param_mse: Vec<f64>,
    /// Differential pipeline: mean squared model error vs the noiseless mean.
    pub mse1: f64,
    /// Static linear baseline, same error measure.
    pub mse2: f64,
    pub replications: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulationReport {
    pub rows: Vec<ReportRow>,
}

/// Submodels (in `enumerate_submodels` order) whose included set covers the
/// support of the true auxiliary coefficients; these are the unbiased ones.
pub fn unbiased_submodels(scenario: &SimulationScenario) -> Vec<usize> {
    let m = scenario.aux_indices.len();
    let support: Vec<usize> = (0..m)
        .filter(|&j| scenario.alpha_true[scenario.aux_indices[j]] != 0.0)
        .collect();
    enumerate_submodels(m)
        .iter()
        .enumerate()
        .filter(|(_, spec)| support.iter().all(|s| spec.included().contains(s)))
        .map(|(i, _)| i)
        .collect()
}

/// Run `scenario.replications` replications at sample size `n`.
///
/// Replication r uses derived seed `seed + r`, so cells at different n share
/// draws and reports are reproducible bit for bit. A replication that fails
/// numerically is skipped and counted; more than 1% failures aborts the run.
pub fn run_monte_carlo(scenario: &SimulationScenario, n: usize) -> Result<ReportRow> {
    scenario.validate()?;
    let d = scenario.dim();
    let reps = scenario.replications;
    let config = OptimizerConfig {
        unbiased_set: unbiased_submodels(scenario),
        ..OptimizerConfig::default()
    };

    let mut sum = vec![0.0; d];
    let mut sum_sq_dev = vec![0.0; d];
    let mut sum_mse1 = 0.0;
    let mut sum_mse2 = 0.0;
    let mut failed = 0usize;
    let mut done = 0usize;
    for rep in 0..reps {
        let seed = scenario.seed.wrapping_add(rep as u64);
        let outcome = (|| -> Result<(Vec<f64>, f64, f64)> {
            let data = generate_full(scenario, n, seed)?;
            let m = scenario.aux_indices.len();
            let fit = fit_with_submodels(&data.design, &enumerate_submodels(m))?;
            let (beta_f, gamma_f) = if m == 0 {
                (fit.beta_u.clone(), fit.gamma.clone())
            } else {
                let avg = optimize_weight_params(&fit, &config)?;
                (avg.beta_f, avg.gamma_f)
            };
            let mut est = vec![0.0; d];
            for (pos, &idx) in scenario.main_indices.iter().enumerate() {
                est[idx] = beta_f[pos];
            }
            for (pos, &idx) in scenario.aux_indices.iter().enumerate() {
                est[idx] = gamma_f[pos];
            }
            let fitted = fit.fitted_mean(&beta_f, &gamma_f);
            let mse1 = (&fitted - &data.mu).norm_squared() / n as f64;
            let baseline = linear_baseline_fit(
                &data.raw,
                &data.design.delta_y,
                scenario.main_indices.len(),
                Some(&data.mu),
            )?;
            Ok((est, mse1, baseline.model_mse.unwrap()))
        })();
        match outcome {
            Ok((est, mse1, mse2)) => {
                for j in 0..d {
                    sum[j] += est[j];
                    let dev = est[j] - scenario.alpha_true[j];
                    sum_sq_dev[j] += dev * dev;
                }
                sum_mse1 += mse1;
                sum_mse2 += mse2;
                done += 1;
            }
            Err(_) => failed += 1,
        }
    }
    if failed * 100 > reps || done == 0 {
        return Err(Error::MonteCarloFailures { failed, total: reps });
    }
    let scale = 1.0 / done as f64;
    let mean_estimates: Vec<f64> = sum.iter().map(|s| s * scale).collect();
    Ok(ReportRow {
        n,
        real_values: scenario.alpha_true.clone(),
        deviations: mean_estimates
            .iter()
            .zip(&scenario.alpha_true)
            .map(|(m, t)| m - t)
            .collect(),
        mean_estimates,
        param_mse: sum_sq_dev.iter().map(|s| s * scale).collect(),
        mse1: sum_mse1 * scale,
        mse2: sum_mse2 * scale,
        replications: reps,
        failed,
    })
}

/// Run every sample size in the scenario.
pub fn run_report(scenario: &SimulationScenario) -> Result<SimulationReport> {
    let mut rows = Vec::with_capacity(scenario.sample_sizes.len());
    for &n in &scenario.sample_sizes {
        rows.push(run_monte_carlo(scenario, n)?);
    }
    Ok(SimulationReport { rows })
}

/// Write the report as CSV tables plus plot-data files; returns the paths.
///
/// Per sample size: `coefficients_n{n}.csv` with one row per coefficient
/// (real value, simulated value, deviation, MSE). Across sizes:
/// `comparison.csv` (n, MSE1, MSE2) and plot files for estimates and MSEs.
pub fn emit_tables(report: &SimulationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();

    for row in &report.rows {
        let path = dir.join(format!("coefficients_n{}.csv", row.n));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["coefficient", "real_value", "simulated_value", "deviation", "mse"])?;
        for j in 0..row.real_values.len() {
            w.write_record([
                format!("alpha{}", j + 1),
                format!("{}", row.real_values[j]),
                format!("{}", row.mean_estimates[j]),
                format!("{}", row.deviations[j]),
                format!("{}", row.param_mse[j]),
            ])?;
        }
        w.flush()?;
        paths.push(path);
    }

    let comparison = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&comparison)?;
    w.write_record(["n", "mse1", "mse2"])?;
    for row in &report.rows {
        w.write_record([
            format!("{}", row.n),
            format!("{}", row.mse1),
            format!("{}", row.mse2),
        ])?;
    }
    w.flush()?;
    paths.push(comparison);

    let estimates = dir.join("plot_estimates.csv");
    let mut w = csv::Writer::from_path(&estimates)?;
    let d = report.rows.first().map_or(0, |r| r.real_values.len());
    let mut header = vec!["n".to_string()];
    for j in 0..d {
        header.push(format!("alpha{}", j + 1));
    }
    w.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![format!("{}", row.n)];
        rec.extend(row.mean_estimates.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    paths.push(estimates);

    let mse_plot = dir.join("plot_mse_vs_n.csv");
    let mut w = csv::Writer::from_path(&mse_plot)?;
    let mut header = vec!["n".to_string()];
    for j in 0..d {
        header.push(format!("mse_alpha{}", j + 1));
    }
    w.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![format!("{}", row.n)];
        rec.extend(row.param_mse.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    paths.push(mse_plot);

    Ok(paths)
}
