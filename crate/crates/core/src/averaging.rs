//! Optimal weight choice over a family of submodels.
//!
//! Weights follow the unified family `lambda_i ∝ a^{q_i} (n - q_i)^b (sigma_i^2)^c`
//! over `(a, b, c)` in the box `D = {a > 0, b >= 0, -c_bar <= c <= 0}`. The
//! objective is an unbiased estimate of the squared-error risk of the averaged
//! main-coefficient estimator, minimized by a coarse grid search followed by a
//! bounded Nelder-Mead refinement.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::PartitionedFit;

/// Parameters of the unified weight family.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct WeightParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub c_bar: f64,
}

impl WeightParams {
    pub fn new(a: f64, b: f64, c: f64, c_bar: f64) -> Result<Self> {
        if !(a > 0.0) || !(b >= 0.0) || !(c_bar > 0.0) || !(-c_bar <= c && c <= 0.0) {
            return Err(Error::Validation(format!(
                "weight parameters outside D: a = {a}, b = {b}, c = {c}, c_bar = {c_bar}"
            )));
        }
        Ok(Self { a, b, c, c_bar })
    }
}

/// A point on the weight simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    lambda: DVector<f64>,
}

impl WeightVector {
    pub fn new(lambda: DVector<f64>) -> Result<Self> {
        if lambda.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation("weights must be nonnegative and finite".into()));
        }
        if (lambda.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::Validation(format!("weights must sum to 1, got {}", lambda.sum())));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// Which risk estimate the weight-parameter optimizer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiskObjective {
    /// Estimated squared-error risk of the averaged main coefficients.
    #[default]
    Coefficient,
    /// Estimated squared-error risk of the averaged fitted mean (Mallows
    /// style); the objective behind the large-sample loss-ratio analysis.
    Prediction,
}

/// Settings for the weight-parameter optimizer.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Biased-mass floor; 0 disables the D0 constraint.
    pub rho: f64,
    /// Indices (into the submodel record list) of unbiased submodels.
    pub unbiased_set: Vec<usize>,
    /// Domain bound for `c`.
    pub c_bar: f64,
    /// Coarse grid density over `log10 a` in `[-3, 3]`.
    pub grid_a: usize,
    /// Coarse grid density over `b` in `[0, 4]`.
    pub grid_b: usize,
    /// Coarse grid density over `c` in `[-c_bar, 0]`.
    pub grid_c: usize,
    /// Iteration cap for the Nelder-Mead refinement.
    pub refine_iters: usize,
    /// Simplex-spread tolerance for the refinement.
    pub refine_tol: f64,
    /// Risk estimate to minimize.
    pub objective: RiskObjective,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rho: 0.0,
            unbiased_set: Vec::new(),
            c_bar: 5.0,
            grid_a: 7,
            grid_b: 5,
            grid_c: 6,
            refine_iters: 200,
            refine_tol: 1e-8,
            objective: RiskObjective::Coefficient,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self, n_submodels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Validation(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.unbiased_set.iter().any(|&i| i >= n_submodels) {
            return Err(Error::Validation("unbiased set index out of range".into()));
        }
        if self.grid_a < 1 || self.grid_b < 1 || self.grid_c < 1 {
            return Err(Error::Validation("grid densities must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of the averaging step.
#[derive(Debug, Clone)]
pub struct AveragedFit {
    pub params: WeightParams,
    pub weights: WeightVector,
    pub beta_f: DVector<f64>,
    pub gamma_f: DVector<f64>,
    pub risk: f64,
}

/// Achieved-vs-infimum loss comparison for the consistency diagnostic.
#[derive(Debug, Clone)]
pub struct LossDiagnostic {
    pub n: usize,
    pub achieved_loss: f64,
    pub infimum_loss: f64,
    pub ratio: f64,
    /// Largest realized squared-error loss among single submodels.
    pub max_single_risk: f64,
}

/// Evaluate the unified weight family in log space and normalize.
pub fn compute_weights(
    params: &WeightParams,
    q: &[usize],
    n: usize,
    sigma2_vec: &[f64],
) -> Result<WeightVector> {
    if q.len() != sigma2_vec.len() || q.is_empty() {
        return Err(Error::Shape(format!(
            "q has {} entries, sigma2 has {}",
            q.len(),
            sigma2_vec.len()
        )));
    }
    for (i, &s2) in sigma2_vec.iter().enumerate() {
        if !(s2 > 0.0) {
            return Err(Error::NonpositiveVariance { index: i, value: s2 });
        }
    }
    if q.iter().any(|&qi| qi >= n) {
        return Err(Error::Validation("every q_i must be < n".into()));
    }
    let log_terms: Vec<f64> = q
        .iter()
        .zip(sigma2_vec)
        .map(|(&qi, &s2)| {
            qi as f64 * params.a.ln() + params.b * ((n - qi) as f64).ln() + params.c * s2.ln()
        })
        .collect();
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_terms.iter().map(|&t| (t - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    WeightVector::new(DVector::from_iterator(unnorm.len(), unnorm.iter().map(|&v| v / total)))
}

/// Derivative of each weight with respect to `theta_hat`.
///
/// The dependence runs through `sigma_i^2(theta) = sigma^2 + theta' W_i theta / n`,
/// giving `d lambda_i / d theta = (2c/n) lambda_i {(sigma_i^2)^-1 W_i
/// - sum_j lambda_j (sigma_j^2)^-1 W_j} theta`.
pub fn weight_jacobian(
    params: &WeightParams,
    weights: &WeightVector,
    theta_hat: &DVector<f64>,
    sigma2_vec: &[f64],
    w_list: &[DMatrix<f64>],
    n: usize,
) -> Result<Vec<DVector<f64>>> {
    let count = weights.len();
    if w_list.len() != count || sigma2_vec.len() != count {
        return Err(Error::Shape(format!(
            "expected {count} submodels, got {} W matrices and {} variances",
            w_list.len(),
            sigma2_vec.len()
        )));
    }
    let m = theta_hat.len();
    if w_list.iter().any(|w| w.nrows() != m || w.ncols() != m) {
        return Err(Error::Shape("W matrices must be m x m".into()));
    }
    let lambda = weights.lambda();
    let mut mixture = DMatrix::zeros(m, m);
    for (j, w) in w_list.iter().enumerate() {
        mixture += w * (lambda[j] / sigma2_vec[j]);
    }
    let factor = 2.0 * params.c / n as f64;
    let mut out = Vec::with_capacity(count);
    for (i, w) in w_list.iter().enumerate() {
        let bracket = w / sigma2_vec[i] - &mixture;
        out.push(bracket * theta_hat * (factor * lambda[i]));
    }
    Ok(out)
}

/// Degrees-of-freedom-adjusted residual variance used inside the risk estimate.
fn adjusted_sigma2(fit: &PartitionedFit) -> f64 {
    fit.sigma2 * fit.n as f64 / (fit.n - fit.k - fit.m) as f64
}

/// Unbiased estimate of the squared-error risk of the averaged estimator.
///
/// With `Pbar = sum_i lambda_i P_i` and `s2` the df-adjusted residual variance:
/// `R = s2 tr(X'X)^-1 - s2 tr(Q'Q) + ||Q (I - Pbar) theta||^2
///    + 2 s2 [tr(Q'Q Pbar) + sum_i (d lambda_i)' Q'Q P_i theta]`.
/// The derivative correction is the Stein term that accounts for the weights'
/// dependence on `theta_hat`.
pub fn risk_trace(fit: &PartitionedFit, params: &WeightParams) -> Result<f64> {
    let weights = compute_weights(params, &fit.q_vec(), fit.n, &fit.sigma2_vec())?;
    risk_trace_with_weights(fit, params, &weights)
}

fn risk_trace_with_weights(
    fit: &PartitionedFit,
    params: &WeightParams,
    weights: &WeightVector,
) -> Result<f64> {
    if fit.submodels.is_empty() {
        return Err(Error::Validation("risk estimate needs submodel records".into()));
    }
    let s2 = adjusted_sigma2(fit);
    let t1 = s2 * fit.xtx_inv.trace();
    if fit.m == 0 {
        return Ok(t1);
    }
    let qtq = fit.q_mat.transpose() * &fit.q_mat;
    let lambda = weights.lambda();
    let mut pbar = DMatrix::zeros(fit.m, fit.m);
    for (i, rec) in fit.submodels.iter().enumerate() {
        pbar += &rec.p * lambda[i];
    }
    let t2 = -s2 * qtq.trace();
    let shrunk = &fit.theta_hat - &pbar * &fit.theta_hat;
    let t3 = (&fit.q_mat * &shrunk).norm_squared();
    let w_list: Vec<DMatrix<f64>> = fit.submodels.iter().map(|r| r.w.clone()).collect();
    let jac = weight_jacobian(params, weights, &fit.theta_hat, &fit.sigma2_vec(), &w_list, fit.n)?;
    let mut stein = (&qtq * &pbar).trace();
    for (i, rec) in fit.submodels.iter().enumerate() {
        let p_theta = &rec.p * &fit.theta_hat;
        stein += (jac[i].transpose() * &qtq * p_theta)[(0, 0)];
    }
    Ok(t1 + t2 + t3 + 2.0 * s2 * stein)
}

/// Estimated risk of the averaged fitted mean, up to an additive constant
/// that does not depend on the weights.
///
/// The averaged mean is a shrinkage smoother of the response, so the
/// Mallows-style estimate is the residual sum of squares plus twice the
/// effective degrees of freedom `k + tr(Pbar) + sum_i (d lambda_i)' P_i theta`
/// times the df-adjusted residual variance.
pub fn prediction_risk(fit: &PartitionedFit, params: &WeightParams) -> Result<f64> {
    let weights = compute_weights(params, &fit.q_vec(), fit.n, &fit.sigma2_vec())?;
    prediction_risk_with_weights(fit, params, &weights)
}

fn prediction_risk_with_weights(
    fit: &PartitionedFit,
    params: &WeightParams,
    weights: &WeightVector,
) -> Result<f64> {
    if fit.submodels.is_empty() {
        return Err(Error::Validation("risk estimate needs submodel records".into()));
    }
    let s2 = adjusted_sigma2(fit);
    let (beta_f, gamma_f) = averaged_estimate(fit, weights)?;
    let rss = (fit.delta_y() - fit.fitted_mean(&beta_f, &gamma_f)).norm_squared();
    if fit.m == 0 {
        return Ok(rss + 2.0 * s2 * fit.k as f64);
    }
    let lambda = weights.lambda();
    let mut pbar = DMatrix::zeros(fit.m, fit.m);
    for (i, rec) in fit.submodels.iter().enumerate() {
        pbar += &rec.p * lambda[i];
    }
    let w_list: Vec<DMatrix<f64>> = fit.submodels.iter().map(|r| r.w.clone()).collect();
    let jac = weight_jacobian(params, weights, &fit.theta_hat, &fit.sigma2_vec(), &w_list, fit.n)?;
    let mut df = fit.k as f64 + pbar.trace();
    for (i, rec) in fit.submodels.iter().enumerate() {
        df += (jac[i].transpose() * (&rec.p * &fit.theta_hat))[(0, 0)];
    }
    Ok(rss + 2.0 * s2 * df)
}

/// Convex combination of submodel coefficients.
pub fn averaged_estimate(
    fit: &PartitionedFit,
    weights: &WeightVector,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if weights.len() != fit.submodels.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} submodels",
            weights.len(),
            fit.submodels.len()
        )));
    }
    let lambda = weights.lambda();
    let mut beta_f = DVector::zeros(fit.k);
    let mut gamma_f = DVector::zeros(fit.m);
    for (i, rec) in fit.submodels.iter().enumerate() {
        beta_f += &rec.beta * lambda[i];
        gamma_f += &rec.gamma * lambda[i];
    }
    Ok((beta_f, gamma_f))
}

/// Mass placed on the unbiased submodels.
fn unbiased_mass(weights: &WeightVector, unbiased: &[usize]) -> f64 {
    unbiased.iter().map(|&i| weights.lambda()[i]).sum()
}

fn is_feasible(mass: f64, rho: f64) -> bool {
    rho == 0.0 || mass <= 1.0 - rho + 1e-12
}

/// Grid points over the optimizer box, in deterministic order.
fn grid_points(config: &OptimizerConfig) -> Vec<(f64, f64, f64)> {
    let lin = |lo: f64, hi: f64, count: usize| -> Vec<f64> {
        if count == 1 {
            vec![(lo + hi) / 2.0]
        } else {
            (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
        }
    };
    let log_a = lin(-3.0, 3.0, config.grid_a);
    let bs = lin(0.0, 4.0, config.grid_b);
    let cs = lin(-config.c_bar, 0.0, config.grid_c);
    let mut pts = Vec::with_capacity(log_a.len() * bs.len() * cs.len());
    for &la in &log_a {
        for &b in &bs {
            for &c in &cs {
                pts.push((la, b, c));
            }
        }
    }
    pts
}

/// Minimize the risk estimate over `D` (coarse grid + bounded Nelder-Mead),
/// honoring the D0 constraint when `rho > 0`.
pub fn optimize_weight_params(fit: &PartitionedFit, config: &OptimizerConfig) -> Result<AveragedFit> {
    let n_sub = fit.submodels.len();
    config.validate(n_sub)?;
    let q = fit.q_vec();
    let s2 = fit.sigma2_vec();

    // Objective over (log10 a, b, c); infeasible candidates score infinity.
    let mut tightest_mass = f64::INFINITY;
    let eval = |pt: (f64, f64, f64), tightest: &mut f64| -> f64 {
        let params = match WeightParams::new(10f64.powf(pt.0), pt.1, pt.2, config.c_bar) {
            Ok(p) => p,
            Err(_) => return f64::INFINITY,
        };
        let weights = match compute_weights(&params, &q, fit.n, &s2) {
            Ok(w) => w,
            Err(_) => return f64::INFINITY,
        };
        let mass = unbiased_mass(&weights, &config.unbiased_set);
        if mass < *tightest {
            *tightest = mass;
        }
        if !is_feasible(mass, config.rho) {
            return f64::INFINITY;
        }
        let value = match config.objective {
            RiskObjective::Coefficient => risk_trace_with_weights(fit, &params, &weights),
            RiskObjective::Prediction => prediction_risk_with_weights(fit, &params, &weights),
        };
        value.unwrap_or(f64::INFINITY)
    };

    let mut best: Option<((f64, f64, f64), f64)> = None;
    for pt in grid_points(config) {
        let value = eval(pt, &mut tightest_mass);
        if !value.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bp, bv)) => {
                if value < *bv - 1e-15 {
                    true
                } else if value > *bv + 1e-15 {
                    false
                } else {
                    // Deterministic tie-break: smallest (|log a|, b, |c|).
                    (pt.0.abs(), pt.1, pt.2.abs()) < (bp.0.abs(), bp.1, bp.2.abs())
                }
            }
        };
        if better {
            best = Some((pt, value));
        }
    }
    let (start, start_value) = best.ok_or(Error::Infeasible {
        tightest: tightest_mass,
        allowed: 1.0 - config.rho,
    })?;

    let bounds = [(-3.0, 3.0), (0.0, 4.0), (-config.c_bar, 0.0)];
    let (refined, refined_value) = nelder_mead(
        |p| eval((p[0], p[1], p[2]), &mut tightest_mass),
        [start.0, start.1, start.2],
        &bounds,
        config.refine_iters,
        config.refine_tol,
    );
    let (pt, _) = if refined_value < start_value {
        ((refined[0], refined[1], refined[2]), refined_value)
    } else {
        (start, start_value)
    };

    let params = WeightParams::new(10f64.powf(pt.0), pt.1, pt.2, config.c_bar)?;
    let weights = compute_weights(&params, &q, fit.n, &s2)?;
    let risk = match config.objective {
        RiskObjective::Coefficient => risk_trace_with_weights(fit, &params, &weights)?,
        RiskObjective::Prediction => prediction_risk_with_weights(fit, &params, &weights)?,
    };
    let (beta_f, gamma_f) = averaged_estimate(fit, &weights)?;
    Ok(AveragedFit { params, weights, beta_f, gamma_f, risk })
}

/// Bounded Nelder-Mead over a 3-dimensional box. Points are clamped to the
/// box before evaluation; wholly deterministic.
fn nelder_mead<F>(
    mut f: F,
    start: [f64; 3],
    bounds: &[(f64, f64); 3],
    max_iters: usize,
    tol: f64,
) -> ([f64; 3], f64)
where
    F: FnMut([f64; 3]) -> f64,
{
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    let clamp = |p: [f64; 3]| -> [f64; 3] {
        let mut out = p;
        for i in 0..3 {
            out[i] = out[i].clamp(bounds[i].0, bounds[i].1);
        }
        out
    };

    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    let p0 = clamp(start);
    simplex.push((p0, f(p0)));
    for i in 0..3 {
        let span = bounds[i].1 - bounds[i].0;
        let mut p = p0;
        p[i] += if p[i] + 0.1 * span <= bounds[i].1 { 0.1 * span } else { -0.1 * span };
        let p = clamp(p);
        simplex.push((p, f(p)));
    }

    for _ in 0..max_iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let spread = (simplex[3].1 - simplex[0].1).abs();
        let size: f64 = (0..3)
            .map(|i| (simplex[3].0[i] - simplex[0].0[i]).abs())
            .fold(0.0, f64::max);
        if spread < tol && size < tol {
            break;
        }
        let mut centroid = [0.0; 3];
        for item in simplex.iter().take(3) {
            for i in 0..3 {
                centroid[i] += item.0[i] / 3.0;
            }
        }
        let worst = simplex[3];
        let reflect = clamp([
            centroid[0] + ALPHA * (centroid[0] - worst.0[0]),
            centroid[1] + ALPHA * (centroid[1] - worst.0[1]),
            centroid[2] + ALPHA * (centroid[2] - worst.0[2]),
        ]);
        let fr = f(reflect);
        if fr < simplex[0].1 {
            let expand = clamp([
                centroid[0] + GAMMA * (reflect[0] - centroid[0]),
                centroid[1] + GAMMA * (reflect[1] - centroid[1]),
                centroid[2] + GAMMA * (reflect[2] - centroid[2]),
            ]);
            let fe = f(expand);
            simplex[3] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflect, fr);
        } else {
            let contract = clamp([
                centroid[0] + RHO * (worst.0[0] - centroid[0]),
                centroid[1] + RHO * (worst.0[1] - centroid[1]),
                centroid[2] + RHO * (worst.0[2] - centroid[2]),
            ]);
            let fc = f(contract);
            if fc < worst.1 {
                simplex[3] = (contract, fc);
            } else {
                let best = simplex[0].0;
                for item in simplex.iter_mut().skip(1) {
                    let mut p = item.0;
                    for i in 0..3 {
                        p[i] = best[i] + SIGMA * (p[i] - best[i]);
                    }
                    let p = clamp(p);
                    *item = (p, f(p));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex[0]
}

/// Grid used when scanning the realized loss over `D0` in the diagnostic.
#[derive(Debug, Clone)]
pub struct DiagnosticGrid {
    pub grid_a: usize,
    pub grid_b: usize,
    pub grid_c: usize,
}

impl Default for DiagnosticGrid {
    fn default() -> Self {
        Self { grid_a: 9, grid_b: 5, grid_c: 7 }
    }
}

/// Compare the loss at the optimizer's choice with the grid infimum of the
/// loss over `D0`. Needs the true mean `mu`, so it only applies to synthetic
/// data. The achieved point is included in the scan, so `ratio >= 1`.
pub fn loss_ratio_diagnostic(
    fit: &PartitionedFit,
    mu: &DVector<f64>,
    config: &OptimizerConfig,
    grid: &DiagnosticGrid,
) -> Result<LossDiagnostic> {
    if mu.len() != fit.n {
        return Err(Error::DiagnosticUnavailable(format!(
            "ground-truth mean has {} entries for n = {}",
            mu.len(),
            fit.n
        )));
    }
    let averaged = optimize_weight_params(fit, config)?;
    let loss_of = |weights: &WeightVector| -> Result<f64> {
        let (beta_f, gamma_f) = averaged_estimate(fit, weights)?;
        Ok((fit.fitted_mean(&beta_f, &gamma_f) - mu).norm_squared())
    };
    let achieved_loss = loss_of(&averaged.weights)?;

    let q = fit.q_vec();
    let s2 = fit.sigma2_vec();
    let scan = OptimizerConfig {
        grid_a: grid.grid_a,
        grid_b: grid.grid_b,
        grid_c: grid.grid_c,
        ..config.clone()
    };
    let mut infimum = achieved_loss;
    for pt in grid_points(&scan) {
        let params = WeightParams::new(10f64.powf(pt.0), pt.1, pt.2, config.c_bar)?;
        let weights = match compute_weights(&params, &q, fit.n, &s2) {
            Ok(w) => w,
            Err(_) => continue,
        };
        if !is_feasible(unbiased_mass(&weights, &config.unbiased_set), config.rho) {
            continue;
        }
        let loss = loss_of(&weights)?;
        if loss < infimum {
            infimum = loss;
        }
    }

    let mut max_single_risk = 0.0f64;
    for rec in &fit.submodels {
        let loss = (fit.fitted_mean(&rec.beta, &rec.gamma) - mu).norm_squared();
        max_single_risk = max_single_risk.max(loss);
    }

    Ok(LossDiagnostic {
        n: fit.n,
        achieved_loss,
        infimum_loss: infimum,
        ratio: achieved_loss / infimum,
        max_single_risk,
    })
}
