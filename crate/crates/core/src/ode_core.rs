//! Linear ODE integration and discretization.
//!
//! Forward simulation uses classic fixed-step RK4. The regression design is
//! built from the Simpson-type combination the RK4 step induces for a linear
//! right-hand side: each design row combines the grid values at `t`, `t + h/2`
//! and `t + h` as `Y_t + 4*Y_{t+h/2} + Y_{t+h}`, scaled by `h/6`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default bound on |value| before an integration is declared divergent.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e12;
/// Default condition-number cap for the centered Gram matrix.
pub const DEFAULT_CONDITION_CAP: f64 = 1e10;

const SPACING_REL_TOL: f64 = 1e-9;

/// Uniformly sampled multivariate time series.
///
/// Rows of `values` align with `times`; columns are state/covariate components.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGrid {
    times: Vec<f64>,
    values: DMatrix<f64>,
}

impl TrajectoryGrid {
    /// Validates strictly increasing, uniformly spaced times and finite values.
    pub fn new(times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Validation("grid needs at least 2 time points".into()));
        }
        if values.nrows() != times.len() {
            return Err(Error::Shape(format!(
                "grid has {} times but {} value rows",
                times.len(),
                values.nrows()
            )));
        }
        let delta = times[1] - times[0];
        if !(delta > 0.0) {
            return Err(Error::Validation("times must be strictly increasing".into()));
        }
        for w in times.windows(2) {
            let d = w[1] - w[0];
            if !(d > 0.0) || (d - delta).abs() > SPACING_REL_TOL * delta.abs().max(1.0) {
                return Err(Error::Validation(format!(
                    "non-uniform spacing: expected {delta}, got {d}"
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("grid values must be finite".into()));
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Constant sampling interval.
    pub fn spacing(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// Number of time points.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of state components (columns).
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Linear system `dY/dt = A Y` with observation noise level `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSystem {
    a: DMatrix<f64>,
    sigma: f64,
}

impl OdeSystem {
    pub fn new(a: DMatrix<f64>, sigma: f64) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("coefficient matrix must be finite".into()));
        }
        if !(sigma >= 0.0) {
            return Err(Error::Validation(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { a, sigma })
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Regression triple built from the Simpson combination.
///
/// Row `i` of `regressors` is `Y_{t_i} + 4*Y_{t_i + h/2} + Y_{t_i + h}` and
/// `delta_y[i] = y_resp(t_i + h) - y_resp(t_i)`. `scale` is the constant `h/6`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedDesign {
    pub delta_y: DVector<f64>,
    pub regressors: DMatrix<f64>,
    pub h: f64,
    pub scale: f64,
}

impl DiscretizedDesign {
    pub fn n(&self) -> usize {
        self.delta_y.len()
    }

    pub fn dim(&self) -> usize {
        self.regressors.ncols()
    }
}

/// One classic RK4 step for `dy/dt = f(t, y)`.
pub fn rk4_step<F>(f: F, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step length must be > 0, got {h}")));
    }
    let check = |k: &DVector<f64>, stage: &'static str| -> Result<()> {
        if k.iter().any(|v| !v.is_finite()) {
            Err(Error::IntegrationOverflow { stage, t })
        } else {
            Ok(())
        }
    };
    let k1 = f(t, y);
    check(&k1, "k1")?;
    let k2 = f(t + h / 2.0, &(y + &k1 * (h / 2.0)));
    check(&k2, "k2")?;
    let k3 = f(t + h / 2.0, &(y + &k2 * (h / 2.0)));
    check(&k3, "k3")?;
    let k4 = f(t + h, &(y + &k3 * h));
    check(&k4, "k4")?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Integrate `dY/dt = A Y` from `y0` over `steps` steps of length `delta`.
pub fn rk4_integrate(
    system: &OdeSystem,
    y0: &DVector<f64>,
    t0: f64,
    delta: f64,
    steps: usize,
) -> Result<TrajectoryGrid> {
    rk4_integrate_bounded(system, y0, t0, delta, steps, DEFAULT_DIVERGENCE_BOUND)
}

/// As [`rk4_integrate`] with an explicit divergence bound.
pub fn rk4_integrate_bounded(
    system: &OdeSystem,
    y0: &DVector<f64>,
    t0: f64,
    delta: f64,
    steps: usize,
    bound: f64,
) -> Result<TrajectoryGrid> {
    let a = system.coefficients();
    if a.ncols() != y0.len() || a.nrows() != y0.len() {
        return Err(Error::Shape(format!(
            "A is {}x{} but y0 has dimension {}",
            a.nrows(),
            a.ncols(),
            y0.len()
        )));
    }
    if steps == 0 {
        return Err(Error::Validation("steps must be positive".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::Validation(format!("delta must be > 0, got {delta}")));
    }
    let f = |_t: f64, y: &DVector<f64>| a * y;
    let mut values = DMatrix::zeros(steps + 1, y0.len());
    let mut times = Vec::with_capacity(steps + 1);
    values.row_mut(0).copy_from(&y0.transpose());
    times.push(t0);
    let mut y = y0.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * delta;
        y = rk4_step(f, t, &y, delta)?;
        if y.iter().any(|v| v.abs() > bound) {
            return Err(Error::TruncatedTrajectory { last_valid: i, bound });
        }
        values.row_mut(i + 1).copy_from(&y.transpose());
        times.push(t0 + (i + 1) as f64 * delta);
    }
    TrajectoryGrid::new(times, values)
}

fn half_step_count(h: f64, delta: f64) -> Result<usize> {
    let s_raw = h / (2.0 * delta);
    let s = s_raw.round();
    if !(h > 0.0) || s < 1.0 || (s_raw - s).abs() > 1e-9 * s.max(1.0) {
        return Err(Error::StepAlignment { h, delta, s_raw });
    }
    Ok(s as usize)
}

/// Build the Simpson-combined regression design from a sampled grid.
///
/// Requires `s = h / (2*delta)` to be a positive integer so that `t + h/2`
/// and `t + h` both fall on the grid; no interpolation is performed.
/// Triplets advance one grid point per row (overlapping, stride 1).
pub fn discretize(grid: &TrajectoryGrid, response_index: usize, h: f64) -> Result<DiscretizedDesign> {
    discretize_with_stride(grid, response_index, h, 1)
}

/// As [`discretize`] with a configurable row stride (in grid points).
pub fn discretize_with_stride(
    grid: &TrajectoryGrid,
    response_index: usize,
    h: f64,
    stride: usize,
) -> Result<DiscretizedDesign> {
    if response_index >= grid.dim() {
        return Err(Error::Shape(format!(
            "response index {response_index} out of range for {} columns",
            grid.dim()
        )));
    }
    if stride == 0 {
        return Err(Error::Validation("stride must be positive".into()));
    }
    let s = half_step_count(h, grid.spacing())?;
    let t_len = grid.len();
    if t_len < 2 * s + 1 {
        return Err(Error::InsufficientData { needed: 2 * s + 1, got: t_len });
    }
    let n = (t_len - 2 * s - 1) / stride + 1;
    let d = grid.dim();
    let values = grid.values();
    let mut delta_y = DVector::zeros(n);
    let mut regressors = DMatrix::zeros(n, d);
    for row in 0..n {
        let i = row * stride;
        delta_y[row] = values[(i + 2 * s, response_index)] - values[(i, response_index)];
        for j in 0..d {
            regressors[(row, j)] =
                values[(i, j)] + 4.0 * values[(i + s, j)] + values[(i + 2 * s, j)];
        }
    }
    Ok(DiscretizedDesign { delta_y, regressors, h, scale: h / 6.0 })
}

/// Closed-form least-squares estimate of one coefficient row.
///
/// Minimizes the sum of squared errors of the combined-regressor model by the
/// centered normal equations, with the overall `6/h` factor.
pub fn closed_form_alpha(design: &DiscretizedDesign) -> Result<DVector<f64>> {
    closed_form_alpha_capped(design, DEFAULT_CONDITION_CAP)
}

/// As [`closed_form_alpha`] with an explicit condition-number cap.
pub fn closed_form_alpha_capped(design: &DiscretizedDesign, cap: f64) -> Result<DVector<f64>> {
    let n = design.n();
    let d = design.dim();
    if n < d + 1 {
        return Err(Error::InsufficientData { needed: d + 1, got: n });
    }
    let r = &design.regressors;
    let col_means = r.row_mean();
    let dy_mean = design.delta_y.mean();
    let mut centered = r.clone();
    for mut row in centered.row_iter_mut() {
        row -= &col_means;
    }
    let dy_centered = design.delta_y.add_scalar(-dy_mean);
    let gram = centered.transpose() * &centered;
    let cross = centered.transpose() * dy_centered;
    let inv = invert_spd(&gram, "centered Gram", cap)?;
    Ok(inv * cross * (6.0 / design.h))
}

/// Inverts a symmetric PSD matrix, rejecting it when the eigenvalue ratio
/// exceeds `cap`. Shared by the estimator modules.
pub(crate) fn invert_spd(m: &DMatrix<f64>, name: &'static str, cap: f64) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || max / min > cap {
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::RankDeficient { matrix: name, cond, cap });
    }
    let mut inv_vals = eig.eigenvalues.clone();
    inv_vals.iter_mut().for_each(|v| *v = 1.0 / *v);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn rk4_step_constant_solution() {
        let y = rk4_step(|_, _| scalar(0.0), 0.0, &scalar(5.0), 0.3).unwrap();
        assert_eq!(y[0], 5.0);
    }

    #[test]
    fn rk4_step_exponential_matches_taylor() {
        // Degree-4 Taylor polynomial of e^h at h = 0.1:
        // 1 + 0.1 + 0.005 + 0.1^3/6 + 0.1^4/24 = 1.1051708333...
        let y = rk4_step(|_, y| y.clone(), 0.0, &scalar(1.0), 0.1).unwrap();
        assert_abs_diff_eq!(y[0], 1.10517083333333333, epsilon = 1e-12);
    }

    #[test]
    fn rk4_step_exact_for_linear_time() {
        let y = rk4_step(|t, _| scalar(t), 0.0, &scalar(0.0), 1.0).unwrap();
        assert_abs_diff_eq!(y[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn rk4_step_reports_overflow_stage() {
        let err = rk4_step(|_, y| y * f64::INFINITY, 0.0, &scalar(1.0), 0.1).unwrap_err();
        match err {
            Error::IntegrationOverflow { stage, .. } => assert_eq!(stage, "k1"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn integrate_zero_matrix_is_constant() {
        let sys = OdeSystem::new(DMatrix::zeros(2, 2), 0.0).unwrap();
        let y0 = DVector::from_vec(vec![1.5, -2.0]);
        let grid = rk4_integrate(&sys, &y0, 0.0, 0.1, 5).unwrap();
        for row in grid.values().row_iter() {
            assert_eq!(row[0], 1.5);
            assert_eq!(row[1], -2.0);
        }
    }

    #[test]
    fn integrate_scalar_exponential() {
        let sys = OdeSystem::new(DMatrix::from_element(1, 1, 1.0), 0.0).unwrap();
        let grid = rk4_integrate(&sys, &scalar(1.0), 0.0, 0.1, 10).unwrap();
        let last = grid.values()[(10, 0)];
        assert_abs_diff_eq!(last, std::f64::consts::E, epsilon = 1e-5);
    }

    #[test]
    fn integrate_diagonal_decouples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.7, -0.3]));
        let sys = OdeSystem::new(a, 0.0).unwrap();
        let y0 = DVector::from_vec(vec![1.0, 2.0]);
        let grid = rk4_integrate(&sys, &y0, 0.0, 0.05, 20).unwrap();

        for (idx, rate) in [(0usize, 0.7), (1usize, -0.3)] {
            let sub = OdeSystem::new(DMatrix::from_element(1, 1, rate), 0.0).unwrap();
            let sub_grid = rk4_integrate(&sub, &scalar(y0[idx]), 0.0, 0.05, 20).unwrap();
            for i in 0..=20 {
                assert_abs_diff_eq!(grid.values()[(i, idx)], sub_grid.values()[(i, 0)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn integrate_divergence_truncates() {
        let sys = OdeSystem::new(DMatrix::from_element(1, 1, 100.0), 0.0).unwrap();
        let err = rk4_integrate_bounded(&sys, &scalar(1.0), 0.0, 1.0, 50, 1e6).unwrap_err();
        assert!(matches!(err, Error::TruncatedTrajectory { .. }));
    }

    #[test]
    fn rk4_order_of_convergence() {
        // Halving delta should cut the end-point error by ~16 (theoretical RK4 order).
        let sys = OdeSystem::new(DMatrix::from_element(1, 1, 1.0), 0.0).unwrap();
        let exact = std::f64::consts::E;
        let mut errors = Vec::new();
        for k in 0..4 {
            let steps = 10 * (1 << k);
            let delta = 1.0 / steps as f64;
            let grid = rk4_integrate(&sys, &scalar(1.0), 0.0, delta, steps).unwrap();
            errors.push((grid.values()[(steps, 0)] - exact).abs());
        }
        for w in errors.windows(2) {
            let factor = w[0] / w[1];
            assert!((12.0..=20.0).contains(&factor), "reduction factor {factor}");
        }
    }

    fn grid_from_rows(rows: &[Vec<f64>]) -> TrajectoryGrid {
        let n = rows.len();
        let d = rows[0].len();
        let values = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let times = (0..n).map(|i| i as f64).collect();
        TrajectoryGrid::new(times, values).unwrap()
    }

    #[test]
    fn discretize_constant_grid() {
        let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![3.0, -1.0]).collect();
        let grid = grid_from_rows(&rows);
        let design = discretize(&grid, 0, 2.0).unwrap();
        assert_eq!(design.n(), 4);
        assert_abs_diff_eq!(design.scale, 2.0 / 6.0);
        for i in 0..design.n() {
            assert_eq!(design.delta_y[i], 0.0);
            assert_eq!(design.regressors[(i, 0)], 18.0);
            assert_eq!(design.regressors[(i, 1)], -6.0);
        }
    }

    #[test]
    fn discretize_h2_unit_spacing_matches_index_arithmetic() {
        // h = 2 with delta = 1 gives s = 1: triplets (t, t+1, t+2).
        let rows: Vec<Vec<f64>> = vec![
            vec![0.3],
            vec![-1.2],
            vec![2.5],
            vec![0.9],
            vec![1.1],
            vec![-0.4],
        ];
        let grid = grid_from_rows(&rows);
        let design = discretize(&grid, 0, 2.0).unwrap();
        assert_eq!(design.n(), 4);
        for i in 0..4 {
            let expected = rows[i][0] + 4.0 * rows[i + 1][0] + rows[i + 2][0];
            assert_abs_diff_eq!(design.regressors[(i, 0)], expected, epsilon = 0.0);
            assert_abs_diff_eq!(design.delta_y[i], rows[i + 2][0] - rows[i][0], epsilon = 0.0);
        }
    }

    #[test]
    fn discretize_rejects_misaligned_step() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let grid = grid_from_rows(&rows);
        let err = discretize(&grid, 0, 3.0).unwrap_err();
        assert!(matches!(err, Error::StepAlignment { .. }));
    }

    #[test]
    fn discretize_rejects_short_grid() {
        let rows: Vec<Vec<f64>> = (0..2).map(|i| vec![i as f64]).collect();
        let grid = grid_from_rows(&rows);
        let err = discretize(&grid, 0, 2.0).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }));
    }

    #[test]
    fn discretize_is_linear_in_the_grid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows1: Vec<Vec<f64>> =
            (0..10).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let rows2: Vec<Vec<f64>> =
            (0..10).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let sum: Vec<Vec<f64>> = rows1
            .iter()
            .zip(&rows2)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let d1 = discretize(&grid_from_rows(&rows1), 1, 4.0).unwrap();
        let d2 = discretize(&grid_from_rows(&rows2), 1, 4.0).unwrap();
        let ds = discretize(&grid_from_rows(&sum), 1, 4.0).unwrap();
        assert_relative_eq!(ds.delta_y, &d1.delta_y + &d2.delta_y, epsilon = 1e-12);
        assert_relative_eq!(ds.regressors, &d1.regressors + &d2.regressors, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_alpha_zero_response() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()])
            .collect();
        let grid = grid_from_rows(&rows);
        let mut design = discretize(&grid, 0, 2.0).unwrap();
        design.delta_y.fill(0.0);
        let alpha = closed_form_alpha(&design).unwrap();
        for v in alpha.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn closed_form_alpha_recovers_noiseless_coefficients() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let alpha_true = DVector::from_vec(vec![0.4, -0.7, 1.2]);
        let rows: Vec<Vec<f64>> =
            (0..40).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let grid = grid_from_rows(&rows);
        let mut design = discretize(&grid, 0, 2.0).unwrap();
        // Regenerate the response from the regression identity itself.
        design.delta_y = &design.regressors * &alpha_true * design.scale;
        let alpha = closed_form_alpha(&design).unwrap();
        assert_relative_eq!(alpha, alpha_true, max_relative = 1e-8);
    }

    #[test]
    fn closed_form_alpha_scalar_matches_slope_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let grid = grid_from_rows(&rows);
        let mut design = discretize(&grid, 0, 2.0).unwrap();
        for v in design.delta_y.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let alpha = closed_form_alpha(&design).unwrap();

        // Textbook simple-regression slope on (regressor, delta_y), times 6/h.
        let n = design.n() as f64;
        let xbar = design.regressors.column(0).sum() / n;
        let ybar = design.delta_y.sum() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for i in 0..design.n() {
            let dx = design.regressors[(i, 0)] - xbar;
            sxy += dx * (design.delta_y[i] - ybar);
            sxx += dx * dx;
        }
        assert_relative_eq!(alpha[0], (6.0 / design.h) * sxy / sxx, max_relative = 1e-10);
    }

    #[test]
    fn closed_form_alpha_rejects_singular_gram() {
        // Two identical columns make the centered Gram singular.
        let rows: Vec<Vec<f64>> =
            (0..10).map(|i| vec![(i as f64).sin(), (i as f64).sin()]).collect();
        let grid = grid_from_rows(&rows);
        let design = discretize(&grid, 0, 2.0).unwrap();
        let err = closed_form_alpha(&design).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }
}
