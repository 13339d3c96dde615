//! Applied pipeline for monthly market time series.
//!
//! Ingests a nine-variable CSV, standardizes the columns, builds the step-2
//! difference design with the Simpson combination, fits a configured family of
//! submodels plus their average, and reports fit metrics, residual
//! diagnostics, and reconstructed levels.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::averaging::{optimize_weight_params, OptimizerConfig};
use crate::error::{Error, Result};
use crate::estimators::{fit_with_submodels, PartitionedDesign, PartitionedFit, SubmodelSpec};
use crate::ode_core::{discretize, TrajectoryGrid};

/// Expected data columns, in order: closing price, amplitude, total lots,
/// amount, DEA, price movement, DIFF, rising amplitude, 5-day average.
pub const DEFAULT_COLUMNS: [&str; 9] = ["y0", "y1", "y2", "y3", "y4", "y5", "y6", "y7", "y8"];

/// Response column index (closing price).
pub const RESPONSE_COLUMN: usize = 0;
/// Main regressor columns forced into every submodel.
pub const DEFAULT_MAIN: [usize; 3] = [1, 4, 6];
/// Auxiliary regressor columns subject to selection.
pub const DEFAULT_AUX: [usize; 5] = [2, 3, 5, 7, 8];
/// Default difference step in months.
pub const DEFAULT_H: f64 = 2.0;

/// Monthly nine-variable dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketDataset {
    pub dates: Vec<NaiveDate>,
    /// One row per date, one column per variable.
    pub values: DMatrix<f64>,
    pub columns: Vec<String>,
}

impl MarketDataset {
    pub fn rows(&self) -> usize {
        self.dates.len()
    }
}

/// Per-column location/scale recorded during standardization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    pub sd: f64,
}

/// Load a CSV with header `date,<columns...>` into a validated dataset.
pub fn load_csv(path: &std::path::Path) -> Result<MarketDataset> {
    let names: Vec<String> = DEFAULT_COLUMNS.iter().map(|s| s.to_string()).collect();
    load_csv_with_columns(path, &names)
}

/// As [`load_csv`] with a custom column-name mapping.
pub fn load_csv_with_columns(path: &std::path::Path, columns: &[String]) -> Result<MarketDataset> {
    if columns.is_empty() {
        return Err(Error::Validation("need at least one data column".into()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingestion {
            row: 0,
            column: name.to_string(),
            message: "column missing from header".into(),
        })
    };
    let date_idx = find("date")?;
    let col_idx: Vec<usize> = columns.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut dates = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let raw_date = record.get(date_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|e| Error::Ingestion {
            row,
            column: "date".into(),
            message: format!("unparsable date {raw_date:?}: {e}"),
        })?;
        if let Some(&prev) = dates.last() {
            if date <= prev {
                return Err(Error::Ingestion {
                    row,
                    column: "date".into(),
                    message: format!("dates must be strictly increasing; {date} follows {prev}"),
                });
            }
        }
        dates.push(date);
        for (j, &idx) in col_idx.iter().enumerate() {
            let cell = record.get(idx).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| Error::Ingestion {
                row,
                column: columns[j].clone(),
                message: format!("unparsable number {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Ingestion {
                    row,
                    column: columns[j].clone(),
                    message: "non-finite value".into(),
                });
            }
            data.push(value);
        }
    }
    if dates.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            column: "date".into(),
            message: "file has no data rows".into(),
        });
    }
    let values = DMatrix::from_row_slice(dates.len(), columns.len(), &data);
    Ok(MarketDataset { dates, values, columns: columns.to_vec() })
}

/// Center and scale every column to mean 0, sd 1 (sample sd, n - 1).
pub fn standardize(dataset: &MarketDataset) -> Result<(MarketDataset, Vec<ColumnStats>)> {
    let n = dataset.rows();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mut out = dataset.values.clone();
    let mut stats = Vec::with_capacity(out.ncols());
    for j in 0..out.ncols() {
        let col = dataset.values.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::ZeroVariance { column: dataset.columns[j].clone() });
        }
        for i in 0..n {
            out[(i, j)] = (dataset.values[(i, j)] - mean) / sd;
        }
        stats.push(ColumnStats { mean, sd });
    }
    Ok((
        MarketDataset { dates: dataset.dates.clone(), values: out, columns: dataset.columns.clone() },
        stats,
    ))
}

/// Invert [`standardize`] for one column.
pub fn destandardize(values: &DVector<f64>, stats: ColumnStats) -> DVector<f64> {
    values.map(|v| v * stats.sd + stats.mean)
}

/// Build the step-h partitioned design over the (standardized) dataset.
///
/// Monthly rows are treated as unit spacing, so h must be an even positive
/// integer; the response is the step-h difference of `response` and each
/// regressor row is the Simpson combination of the chosen columns.
pub fn build_design(
    dataset: &MarketDataset,
    h: f64,
    response: usize,
    main: &[usize],
    aux: &[usize],
) -> Result<PartitionedDesign> {
    let d = dataset.values.ncols();
    let mut seen = vec![false; d];
    for &c in main.iter().chain(aux).chain(std::iter::once(&response)) {
        if c >= d {
            return Err(Error::Shape(format!("column index {c} out of range for {d} columns")));
        }
        if c != response && seen[c] {
            return Err(Error::Validation(format!("column {c} assigned twice")));
        }
        seen[c] = true;
    }
    if main.is_empty() {
        return Err(Error::Validation("main column set must be nonempty".into()));
    }
    let times: Vec<f64> = (0..dataset.rows()).map(|i| i as f64).collect();
    let grid = TrajectoryGrid::new(times, dataset.values.clone())?;
    let design = discretize(&grid, response, h)?;
    let x = design.regressors.select_columns(main.iter());
    let z = design.regressors.select_columns(aux.iter());
    PartitionedDesign::new(design.delta_y, x, z, h)
}

/// The seven-submodel family fitted in the application, as index sets into
/// the default auxiliary universe (y2, y3, y5, y7, y8).
pub fn table_specs() -> Vec<SubmodelSpec> {
    let m = DEFAULT_AUX.len();
    [
        vec![0, 1, 2, 3, 4],
        vec![0, 1, 2, 3],
        vec![0, 1, 2],
        vec![],
        vec![0, 1],
        vec![0, 1, 3],
        vec![0, 1, 4],
    ]
    .into_iter()
    .map(|v| SubmodelSpec::new(v, m).expect("static specs are valid"))
    .collect()
}

/// Fit quality summary for one model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FitMetrics {
    /// sqrt(RSS / (n - p)) with p the effective regressor count.
    pub standard_error: f64,
    pub mse: f64,
    pub mae: f64,
    pub r_squared: f64,
}

/// Compare predictions to observations.
///
/// `p` is the effective number of regressors and may be fractional for
/// averaged models.
pub fn fit_metrics(predicted: &DVector<f64>, actual: &DVector<f64>, p: f64) -> Result<FitMetrics> {
    let n = actual.len();
    if predicted.len() != n || n < 2 {
        return Err(Error::Shape(format!(
            "need matching lengths >= 2, got {} and {n}",
            predicted.len()
        )));
    }
    if !(p >= 0.0) || p >= n as f64 {
        return Err(Error::Validation(format!("effective p = {p} must lie in [0, n)")));
    }
    let resid = actual - predicted;
    let rss = resid.norm_squared();
    let mean = actual.mean();
    let tss = actual.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    if tss <= 0.0 {
        return Err(Error::UndefinedR2);
    }
    Ok(FitMetrics {
        standard_error: (rss / (n as f64 - p)).sqrt(),
        mse: rss / n as f64,
        mae: resid.iter().map(|v| v.abs()).sum::<f64>() / n as f64,
        r_squared: 1.0 - rss / tss,
    })
}

/// One fitted suite: submodel fits, chosen weights, and per-model metrics.
#[derive(Debug, Clone)]
pub struct SuiteFit {
    pub fit: PartitionedFit,
    pub weights: Vec<f64>,
    pub per_model: Vec<FitMetrics>,
    pub averaged: FitMetrics,
    pub beta_f: DVector<f64>,
    pub gamma_f: DVector<f64>,
    /// Averaged in-sample fitted differences.
    pub fitted: DVector<f64>,
}

/// Fit every listed submodel, choose weights over that family, and compute
/// per-model and averaged fit metrics.
pub fn fit_submodel_suite(
    design: &PartitionedDesign,
    specs: &[SubmodelSpec],
    config: &OptimizerConfig,
) -> Result<SuiteFit> {
    let fit = fit_with_submodels(design, specs)?;
    let (weights, beta_f, gamma_f) = if specs.len() == 1 {
        let rec = &fit.submodels[0];
        (vec![1.0], rec.beta.clone(), rec.gamma.clone())
    } else {
        let avg = optimize_weight_params(&fit, config)?;
        let lambda = avg.weights.lambda().iter().cloned().collect();
        (lambda, avg.beta_f, avg.gamma_f)
    };
    let actual = fit.delta_y().clone();
    let mut per_model = Vec::with_capacity(specs.len());
    for rec in &fit.submodels {
        let predicted = fit.fitted_mean(&rec.beta, &rec.gamma);
        per_model.push(fit_metrics(&predicted, &actual, rec.q as f64)?);
    }
    let fitted = fit.fitted_mean(&beta_f, &gamma_f);
    let p_eff: f64 = weights
        .iter()
        .zip(&fit.submodels)
        .map(|(w, rec)| w * rec.q as f64)
        .sum();
    let averaged = fit_metrics(&fitted, &actual, p_eff)?;
    Ok(SuiteFit { fit, weights, per_model, averaged, beta_f, gamma_f, fitted })
}

/// Static linear counterpart on the same dataset: regress the step-h
/// differences on the raw time-t columns (intercept plus mains forced in),
/// with the same weight machinery over the analogous submodel family.
pub fn linear_suite(
    dataset: &MarketDataset,
    h: f64,
    response: usize,
    main: &[usize],
    aux: &[usize],
    specs: &[SubmodelSpec],
    config: &OptimizerConfig,
) -> Result<SuiteFit> {
    let times: Vec<f64> = (0..dataset.rows()).map(|i| i as f64).collect();
    let grid = TrajectoryGrid::new(times, dataset.values.clone())?;
    let combined = discretize(&grid, response, h)?;
    let n = combined.n();
    let values = dataset.values.rows(0, n);
    let mut x = DMatrix::zeros(n, main.len() + 1);
    x.column_mut(0).fill(1.0);
    for (j, &c) in main.iter().enumerate() {
        x.set_column(j + 1, &values.column(c));
    }
    let z = values.select_columns(aux.iter());
    // h = 6 neutralizes the design's h/6 scale for the static model.
    let design = PartitionedDesign::new(combined.delta_y, x, z, 6.0)?;
    fit_submodel_suite(&design, specs, config)
}

/// Histogram, normal QQ points, and moment summary of residuals.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ResidualDiagnostics {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// (theoretical standard-normal quantile, standardized sample quantile).
    pub qq: Vec<(f64, f64)>,
    pub mean: f64,
    pub sd: f64,
    pub skew: f64,
}

impl ResidualDiagnostics {
    /// Least-squares slope of sample on theoretical quantiles; near 1 for
    /// normal residuals.
    pub fn qq_slope(&self) -> f64 {
        let n = self.qq.len() as f64;
        let mx = self.qq.iter().map(|p| p.0).sum::<f64>() / n;
        let my = self.qq.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = self.qq.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = self.qq.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }
}

/// Diagnose residual normality: Sturges-rule histogram and a standard-normal
/// QQ plot of the standardized residuals.
pub fn residual_diagnostics(residuals: &DVector<f64>) -> Result<ResidualDiagnostics> {
    let n = residuals.len();
    if n < 10 {
        return Err(Error::DiagnosticUnavailable(format!(
            "need at least 10 residuals, got {n}"
        )));
    }
    let mean = residuals.mean();
    let var = residuals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::DiagnosticUnavailable("residuals have zero spread".into()));
    }
    let skew = residuals.iter().map(|v| ((v - mean) / sd).powi(3)).sum::<f64>() / n as f64;

    let bins = ((n as f64).log2().ceil() as usize + 1).max(1);
    let lo = residuals.min();
    let hi = residuals.max();
    let width = (hi - lo) / bins as f64;
    let mut bin_edges = Vec::with_capacity(bins + 1);
    for b in 0..=bins {
        bin_edges.push(lo + width * b as f64);
    }
    let mut counts = vec![0usize; bins];
    for &v in residuals.iter() {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }

    let mut sample: Vec<f64> = residuals.iter().map(|v| (v - mean) / sd).collect();
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let qq = sample
        .iter()
        .enumerate()
        .map(|(i, &s)| (normal.inverse_cdf((i as f64 + 0.5) / n as f64), s))
        .collect();

    Ok(ResidualDiagnostics { bin_edges, counts, qq, mean, sd, skew })
}

/// Reconstruct fitted levels: `y_hat[t + step] = y[t] + delta_hat[t]`.
///
/// `levels` is the observed level series (at least `step` longer than the
/// fitted differences); the result has one entry per fitted difference.
pub fn reconstruct_levels(
    levels: &DVector<f64>,
    fitted_delta: &DVector<f64>,
    step: usize,
) -> Result<DVector<f64>> {
    let n = fitted_delta.len();
    if step == 0 || levels.len() < n + step {
        return Err(Error::Shape(format!(
            "need {n} + {step} level rows, got {}",
            levels.len()
        )));
    }
    Ok(DVector::from_fn(n, |i, _| levels[i] + fitted_delta[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;
    use std::io::Write;

    fn write_csv(rows: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let mut header = String::from("date");
        for c in DEFAULT_COLUMNS {
            header.push(',');
            header.push_str(c);
        }
        writeln!(f, "{header}").unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    fn synth_rows(n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let date = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
                    + chrono::Duration::days(31 * i as i64);
                let cells: Vec<String> =
                    (0..9).map(|_| format!("{:.4}", rng.gen_range(-3.0..3.0))).collect();
                format!("{},{}", date.format("%Y-%m-%d"), cells.join(","))
            })
            .collect()
    }

    #[test]
    fn load_csv_round_trip() {
        let f = write_csv(&synth_rows(57, 1));
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.rows(), 57);
        assert_eq!(ds.values.ncols(), 9);
        assert!(ds.dates.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn load_csv_empty_file_rejected() {
        let f = write_csv(&[]);
        let err = load_csv(f.path()).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
    }

    #[test]
    fn load_csv_missing_column_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "date,y0,y1").unwrap();
        writeln!(f, "2020-01-01,1.0,2.0").unwrap();
        let err = load_csv(f.path()).unwrap_err();
        assert!(matches!(err, Error::Ingestion { column, .. } if column == "y2"));
    }

    #[test]
    fn load_csv_bad_cell_located() {
        let mut rows = synth_rows(3, 2);
        rows[1] = rows[1].replacen("-", "x-", 1);
        let f = write_csv(&rows);
        let err = load_csv(f.path()).unwrap_err();
        match err {
            Error::Ingestion { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_csv_shuffled_dates_rejected() {
        let mut rows = synth_rows(5, 3);
        rows.swap(1, 3);
        let f = write_csv(&rows);
        let err = load_csv(f.path()).unwrap_err();
        match err {
            Error::Ingestion { row, column, .. } => {
                assert_eq!(column, "date");
                // Rows become r0, r3, r2, ...; the first decrease is row 3.
                assert_eq!(row, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn standardize_moments_and_round_trip() {
        let f = write_csv(&synth_rows(40, 4));
        let ds = load_csv(f.path()).unwrap();
        let (std_ds, stats) = standardize(&ds).unwrap();
        for j in 0..9 {
            let col = std_ds.values.column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 39.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-9);
            let back = destandardize(&col.into_owned(), stats[j]);
            for i in 0..40 {
                assert_abs_diff_eq!(back[i], ds.values[(i, j)], epsilon = 1e-9);
            }
        }
        // Idempotence: standardizing a standardized dataset is a no-op.
        let (again, _) = standardize(&std_ds).unwrap();
        for (a, b) in again.values.iter().zip(std_ds.values.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let f = write_csv(&synth_rows(10, 5));
        let mut ds = load_csv(f.path()).unwrap();
        ds.values.column_mut(3).fill(7.5);
        let err = standardize(&ds).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { column } if column == "y3"));
    }

    #[test]
    fn build_design_row_count() {
        let f = write_csv(&synth_rows(57, 6));
        let ds = load_csv(f.path()).unwrap();
        let (std_ds, _) = standardize(&ds).unwrap();
        // 57 grid rows, s = 1 half-steps: triplets start at rows 0..=54.
        let design = build_design(&std_ds, 2.0, RESPONSE_COLUMN, &DEFAULT_MAIN, &DEFAULT_AUX).unwrap();
        assert_eq!(design.n(), 55);
        assert_eq!(design.k(), 3);
        assert_eq!(design.m(), 5);
    }

    #[test]
    fn build_design_role_swap() {
        let f = write_csv(&synth_rows(57, 6));
        let ds = load_csv(f.path()).unwrap();
        let design = build_design(&ds, 2.0, 0, &DEFAULT_AUX, &DEFAULT_MAIN).unwrap();
        assert_eq!(design.k(), 5);
        assert_eq!(design.m(), 3);
    }

    #[test]
    fn table_specs_shape() {
        let specs = table_specs();
        assert_eq!(specs.len(), 7);
        assert_eq!(specs[0].len(), 5);
        assert!(specs[3].is_empty());
    }

    #[test]
    fn fit_metrics_perfect_and_mean_only() {
        let actual = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let perfect = fit_metrics(&actual, &actual, 1.0).unwrap();
        assert_abs_diff_eq!(perfect.mse, 0.0);
        assert_abs_diff_eq!(perfect.mae, 0.0);
        assert_abs_diff_eq!(perfect.r_squared, 1.0);
        let mean_pred = DVector::from_element(4, actual.mean());
        let mean_only = fit_metrics(&mean_pred, &actual, 1.0).unwrap();
        assert_abs_diff_eq!(mean_only.r_squared, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_metrics_matches_raw_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let actual = DVector::from_fn(20, |_, _| rng.gen_range(-2.0..2.0));
        let predicted = DVector::from_fn(20, |_, _| rng.gen_range(-2.0..2.0));
        let m = fit_metrics(&predicted, &actual, 3.0).unwrap();
        let rss: f64 = (0..20).map(|i| (actual[i] - predicted[i]).powi(2)).sum();
        let mean = actual.sum() / 20.0;
        let tss: f64 = (0..20).map(|i| (actual[i] - mean).powi(2)).sum();
        assert_relative_eq!(m.mse, rss / 20.0, max_relative = 1e-12);
        assert_relative_eq!(m.standard_error, (rss / 17.0).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(m.r_squared, 1.0 - rss / tss, max_relative = 1e-12);
        let mae: f64 = (0..20).map(|i| (actual[i] - predicted[i]).abs()).sum::<f64>() / 20.0;
        assert_relative_eq!(m.mae, mae, max_relative = 1e-12);
    }

    #[test]
    fn fit_metrics_zero_tss_rejected() {
        let actual = DVector::from_element(5, 2.0);
        let predicted = DVector::from_element(5, 1.0);
        assert!(matches!(fit_metrics(&predicted, &actual, 1.0).unwrap_err(), Error::UndefinedR2));
    }

    #[test]
    fn suite_single_spec_unit_weight() {
        let f = write_csv(&synth_rows(57, 8));
        let ds = load_csv(f.path()).unwrap();
        let (std_ds, _) = standardize(&ds).unwrap();
        let design = build_design(&std_ds, 2.0, 0, &DEFAULT_MAIN, &DEFAULT_AUX).unwrap();
        let suite =
            fit_submodel_suite(&design, &[SubmodelSpec::full(5)], &OptimizerConfig::default())
                .unwrap();
        assert_eq!(suite.weights, vec![1.0]);
    }

    #[test]
    fn suite_near_best_mse() {
        let f = write_csv(&synth_rows(57, 9));
        let ds = load_csv(f.path()).unwrap();
        let (std_ds, _) = standardize(&ds).unwrap();
        let design = build_design(&std_ds, 2.0, 0, &DEFAULT_MAIN, &DEFAULT_AUX).unwrap();
        let suite = fit_submodel_suite(&design, &table_specs(), &OptimizerConfig::default()).unwrap();
        assert_abs_diff_eq!(suite.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        let best = suite.per_model.iter().map(|m| m.mse).fold(f64::INFINITY, f64::min);
        assert!(
            suite.averaged.mse <= 1.01 * best,
            "averaged {} vs best {best}",
            suite.averaged.mse
        );
    }

    #[test]
    fn residual_diagnostics_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let resid = DVector::from_fn(1000, |_, _| normal.sample(&mut rng));
        let diag = residual_diagnostics(&resid).unwrap();
        assert_eq!(diag.counts.iter().sum::<usize>(), 1000);
        assert_eq!(diag.counts.len() + 1, diag.bin_edges.len());
        let slope = diag.qq_slope();
        assert!((0.9..=1.1).contains(&slope), "slope {slope}");
        assert!(diag.skew.abs() < 0.2, "skew {}", diag.skew);
        assert!(diag.qq.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn residual_diagnostics_rejects_degenerate() {
        let short = DVector::from_element(5, 0.3);
        assert!(matches!(
            residual_diagnostics(&short).unwrap_err(),
            Error::DiagnosticUnavailable(_)
        ));
        let flat = DVector::from_element(50, 0.3);
        assert!(matches!(
            residual_diagnostics(&flat).unwrap_err(),
            Error::DiagnosticUnavailable(_)
        ));
    }

    #[test]
    fn reconstruct_levels_cases() {
        let levels = DVector::from_vec(vec![10.0, 11.0, 12.0, 13.0, 14.0]);
        // Zero differences: lagged copy.
        let zero = reconstruct_levels(&levels, &DVector::zeros(3), 2).unwrap();
        assert_eq!(zero, DVector::from_vec(vec![10.0, 11.0, 12.0]));
        // True differences: exact recovery of observed levels.
        let truth = DVector::from_fn(3, |i, _| levels[i + 2] - levels[i]);
        let rec = reconstruct_levels(&levels, &truth, 2).unwrap();
        assert_eq!(rec, DVector::from_vec(vec![12.0, 13.0, 14.0]));
        // Random case equals the elementwise add.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let delta = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let rec = reconstruct_levels(&levels, &delta, 2).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(rec[i], levels[i] + delta[i]);
        }
        // Misalignment rejected.
        assert!(reconstruct_levels(&levels, &DVector::zeros(4), 2).is_err());
    }
}
