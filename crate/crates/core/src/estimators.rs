//! Partitioned least-squares machinery.
//!
//! The design splits regressors into main columns `X` (always included) and
//! auxiliary columns `Z` (optional). This module computes the full-model
//! quantities (restricted/unrestricted coefficients, annihilator `M`, the
//! transformed coordinate `theta_hat`, `Q`) and per-submodel projections and
//! estimates used by the weight-averaging engine.
//!
//! All coefficient formulas carry the `6/h` factor so reported coefficients
//! are on the ODE scale; `theta_hat` lives on the `h/6` regression scale.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ode_core::{invert_spd, DEFAULT_CONDITION_CAP};

const EIGEN_FLOOR_REL: f64 = 1e-12;

/// Regression design partitioned into main (`x`) and auxiliary (`z`) blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDesign {
    pub delta_y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub h: f64,
}

impl PartitionedDesign {
    pub fn new(delta_y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>, h: f64) -> Result<Self> {
        let n = delta_y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::Shape(format!(
                "row mismatch: delta_y {} vs X {} vs Z {}",
                n,
                x.nrows(),
                z.nrows()
            )));
        }
        if !(h > 0.0) {
            return Err(Error::Validation(format!("h must be > 0, got {h}")));
        }
        if n <= x.ncols() + z.ncols() {
            return Err(Error::InsufficientData { needed: x.ncols() + z.ncols() + 1, got: n });
        }
        if delta_y.iter().chain(x.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("design entries must be finite".into()));
        }
        Ok(Self { delta_y, x, z, h })
    }

    pub fn n(&self) -> usize {
        self.delta_y.len()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.z.ncols()
    }
}

/// A subset of auxiliary-column indices defining one candidate submodel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubmodelSpec {
    included: Vec<usize>,
}

impl SubmodelSpec {
    /// Indices must be unique and `< m`; they are stored sorted.
    pub fn new(mut included: Vec<usize>, m: usize) -> Result<Self> {
        included.sort_unstable();
        if included.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("submodel indices must be unique".into()));
        }
        if included.iter().any(|&i| i >= m) {
            return Err(Error::Validation(format!(
                "submodel index out of range for m = {m}: {included:?}"
            )));
        }
        Ok(Self { included })
    }

    pub fn empty() -> Self {
        Self { included: Vec::new() }
    }

    pub fn full(m: usize) -> Self {
        Self { included: (0..m).collect() }
    }

    pub fn included(&self) -> &[usize] {
        &self.included
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    /// The m x |included| column-selection matrix (columns of the identity).
    pub fn selection_matrix(&self, m: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(m, self.included.len());
        for (col, &idx) in self.included.iter().enumerate() {
            s[(idx, col)] = 1.0;
        }
        s
    }
}

/// All 2^m auxiliary subsets, in binary counting order (empty first, full last).
pub fn enumerate_submodels(m: usize) -> Vec<SubmodelSpec> {
    (0u32..(1 << m))
        .map(|mask| SubmodelSpec {
            included: (0..m).filter(|&j| mask & (1 << j) != 0).collect(),
        })
        .collect()
}

/// Per-submodel quantities.
#[derive(Debug, Clone)]
pub struct SubmodelRecord {
    pub spec: SubmodelSpec,
    /// Projection onto the included auxiliary directions (theta coordinates).
    pub p: DMatrix<f64>,
    /// Residual projector `I_m - P`.
    pub w: DMatrix<f64>,
    /// Main coefficients of this submodel (ODE scale).
    pub beta: DVector<f64>,
    /// Auxiliary coefficients, excluded entries exactly zero (ODE scale).
    pub gamma: DVector<f64>,
    /// Mean squared residual of this submodel.
    pub sigma2: f64,
    /// Number of regression variables, `k + |included|`.
    pub q: usize,
}

/// Full-model quantities plus per-submodel records.
#[derive(Debug, Clone)]
pub struct PartitionedFit {
    pub beta_r: DVector<f64>,
    pub beta_u: DVector<f64>,
    pub gamma: DVector<f64>,
    pub theta_hat: DVector<f64>,
    pub sigma2: f64,
    /// Annihilator `M = I - X (X'X)^-1 X'`.
    pub m_mat: DMatrix<f64>,
    /// `Q = (X'X)^-1 X'Z (Z'MZ)^{-1/2}` (k x m).
    pub q_mat: DMatrix<f64>,
    /// Symmetric PSD square root of `Z'MZ`.
    pub zmz_half: DMatrix<f64>,
    /// Inverse of `zmz_half`.
    pub zmz_inv_half: DMatrix<f64>,
    /// `(X'X)^-1`.
    pub xtx_inv: DMatrix<f64>,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub h: f64,
    pub submodels: Vec<SubmodelRecord>,
    delta_y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl PartitionedFit {
    /// Residual variances of all submodels, in record order.
    pub fn sigma2_vec(&self) -> Vec<f64> {
        self.submodels.iter().map(|r| r.sigma2).collect()
    }

    /// Regressor counts of all submodels, in record order.
    pub fn q_vec(&self) -> Vec<usize> {
        self.submodels.iter().map(|r| r.q).collect()
    }

    /// Fitted mean of `delta_y` under given main/auxiliary coefficients
    /// (ODE scale), i.e. `(h/6)(X beta + Z gamma)`.
    pub fn fitted_mean(&self, beta: &DVector<f64>, gamma: &DVector<f64>) -> DVector<f64> {
        let s = self.h / 6.0;
        (&self.x * beta + &self.z * gamma) * s
    }

    pub fn delta_y(&self) -> &DVector<f64> {
        &self.delta_y
    }
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues below `1e-12 * max` are treated as rank deficiency.
pub fn spd_sqrt(m: &DMatrix<f64>, name: &'static str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if m.nrows() == 0 {
        return Ok((DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = EIGEN_FLOOR_REL * max;
    if !(max > 0.0) || eig.eigenvalues.iter().any(|&v| v < floor) {
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::RankDeficient {
            matrix: name,
            cond: if min > 0.0 { max / min } else { f64::INFINITY },
            cap: 1.0 / EIGEN_FLOOR_REL,
        });
    }
    let sqrt_vals = eig.eigenvalues.map(f64::sqrt);
    let inv_sqrt_vals = sqrt_vals.map(|v| 1.0 / v);
    let half = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    let inv_half =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt_vals) * eig.eigenvectors.transpose();
    Ok((half, inv_half))
}

/// Fit the full partitioned model; no submodel records are attached.
pub fn fit_full(design: &PartitionedDesign) -> Result<PartitionedFit> {
    let n = design.n();
    let k = design.k();
    let m = design.m();
    let h = design.h;
    let scale = 6.0 / h;

    let (xtx_inv, m_mat, beta_r) = if k > 0 {
        let xtx = design.x.transpose() * &design.x;
        let xtx_inv = invert_spd(&xtx, "X'X", DEFAULT_CONDITION_CAP)?;
        let hat = &design.x * &xtx_inv * design.x.transpose();
        let m_mat = DMatrix::identity(n, n) - hat;
        let beta_r = &xtx_inv * design.x.transpose() * &design.delta_y * scale;
        (xtx_inv, m_mat, beta_r)
    } else {
        (DMatrix::zeros(0, 0), DMatrix::identity(n, n), DVector::zeros(0))
    };

    if m == 0 {
        let resid = &design.delta_y - &design.x * &beta_r * (h / 6.0);
        let sigma2 = resid.norm_squared() / n as f64;
        return Ok(PartitionedFit {
            beta_u: beta_r.clone(),
            beta_r,
            gamma: DVector::zeros(0),
            theta_hat: DVector::zeros(0),
            sigma2,
            m_mat,
            q_mat: DMatrix::zeros(k, 0),
            zmz_half: DMatrix::zeros(0, 0),
            zmz_inv_half: DMatrix::zeros(0, 0),
            xtx_inv,
            n,
            k,
            m,
            h,
            submodels: Vec::new(),
            delta_y: design.delta_y.clone(),
            x: design.x.clone(),
            z: design.z.clone(),
        });
    }

    let mz = &m_mat * &design.z;
    let zmz = design.z.transpose() * &mz;
    // Reject ill-conditioned Z'MZ the same way as X'X before taking its root.
    invert_spd(&zmz, "Z'MZ", DEFAULT_CONDITION_CAP)?;
    let (zmz_half, zmz_inv_half) = spd_sqrt(&zmz, "Z'MZ")?;

    let zm_dy = mz.transpose() * &design.delta_y;
    let gamma = &zmz_inv_half * &zmz_inv_half * &zm_dy * scale;
    let theta_hat = &zmz_half * &gamma * (h / 6.0);

    let q_mat = if k > 0 {
        &xtx_inv * design.x.transpose() * &design.z * &zmz_inv_half
    } else {
        DMatrix::zeros(0, m)
    };
    let beta_u = if k > 0 {
        &beta_r - &q_mat * &theta_hat * scale
    } else {
        DVector::zeros(0)
    };

    let resid = &design.delta_y
        - &design.x * &beta_u * (h / 6.0)
        - &design.z * &gamma * (h / 6.0);
    let sigma2 = resid.norm_squared() / n as f64;

    Ok(PartitionedFit {
        beta_r,
        beta_u,
        gamma,
        theta_hat,
        sigma2,
        m_mat,
        q_mat,
        zmz_half,
        zmz_inv_half,
        xtx_inv,
        n,
        k,
        m,
        h,
        submodels: Vec::new(),
        delta_y: design.delta_y.clone(),
        x: design.x.clone(),
        z: design.z.clone(),
    })
}

/// Projection pair `(P_i, W_i)` for one auxiliary subset.
///
/// `P_i` projects, in the `theta` coordinates, onto the directions spanned by
/// the included auxiliaries: `P_i = G^{1/2} S_i (S_i' G S_i)^-1 S_i' G^{1/2}`
/// with `G = Z'MZ`. It is symmetric idempotent with rank `|included|`, and the
/// submodel estimates below reproduce a direct least-squares fit on
/// `[X, Z S_i]`. `W_i = I_m - P_i`.
pub fn submodel_projection(
    fit: &PartitionedFit,
    spec: &SubmodelSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = fit.m;
    if spec.included().iter().any(|&i| i >= m) {
        return Err(Error::Shape(format!("spec {:?} out of range for m = {m}", spec.included())));
    }
    if spec.is_empty() {
        return Ok((DMatrix::zeros(m, m), DMatrix::identity(m, m)));
    }
    let s = spec.selection_matrix(m);
    let g = &fit.zmz_half * &fit.zmz_half;
    let inner = s.transpose() * &g * &s;
    let inner_inv = invert_spd(&inner, "S'(Z'MZ)S", DEFAULT_CONDITION_CAP)
        .map_err(|_| Error::SubmodelCollinear { indices: spec.included().to_vec() })?;
    let half_s = &fit.zmz_half * &s;
    let p = &half_s * inner_inv * half_s.transpose();
    let w = DMatrix::identity(m, m) - &p;
    Ok((p, w))
}

/// Coefficients and residual variance of one submodel.
///
/// `beta_i = beta_r - (6/h) Q P_i theta_hat`; `gamma_i` is the restricted
/// solution padded with structural zeros for excluded auxiliaries; `sigma2_i`
/// is computed from the residuals directly.
pub fn submodel_estimates(
    fit: &PartitionedFit,
    spec: &SubmodelSpec,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let (p, _w) = submodel_projection(fit, spec)?;
    let scale = 6.0 / fit.h;
    let beta = if fit.k > 0 {
        &fit.beta_r - &fit.q_mat * &p * &fit.theta_hat * scale
    } else {
        DVector::zeros(0)
    };
    // Padded restricted solution: gamma_i = (6/h) S (S'GS)^-1 S' G^{1/2} theta_hat
    // = (6/h) G^{-1/2} P_i theta_hat, with excluded entries exactly zero.
    let mut gamma = DVector::zeros(fit.m);
    if !spec.is_empty() {
        let dense = &fit.zmz_inv_half * &p * &fit.theta_hat * scale;
        for &idx in spec.included() {
            gamma[idx] = dense[idx];
        }
    }
    let resid = &fit.delta_y
        - &fit.x * &beta * (fit.h / 6.0)
        - &fit.z * &gamma * (fit.h / 6.0);
    let sigma2 = resid.norm_squared() / fit.n as f64;
    Ok((beta, gamma, sigma2))
}

/// Fit the full model and attach records for every given submodel.
pub fn fit_with_submodels(
    design: &PartitionedDesign,
    specs: &[SubmodelSpec],
) -> Result<PartitionedFit> {
    let mut fit = fit_full(design)?;
    let mut records = Vec::with_capacity(specs.len());
    for spec in specs {
        let (p, w) = submodel_projection(&fit, spec)?;
        let (beta, gamma, sigma2) = submodel_estimates(&fit, spec)?;
        records.push(SubmodelRecord {
            spec: spec.clone(),
            p,
            w,
            beta,
            gamma,
            sigma2,
            q: fit.k + spec.len(),
        });
    }
    fit.submodels = records;
    Ok(fit)
}
