//! Parameter estimation for linear ODE models from noisy time series.
//!
//! The pipeline discretizes the ODE with a Runge-Kutta/Simpson scheme, fits a
//! partitioned linear regression with a main model and a family of auxiliary
//! submodels, and combines the submodel estimates by frequentist model
//! averaging with a data-driven optimal weight choice.

pub mod averaging;
pub mod cli;
pub mod empirical;
pub mod error;
pub mod estimators;
pub mod ode_core;
pub mod simulation;

pub use averaging::{
    averaged_estimate, compute_weights, loss_ratio_diagnostic, optimize_weight_params,
    prediction_risk, risk_trace, weight_jacobian, AveragedFit, DiagnosticGrid, LossDiagnostic,
    OptimizerConfig, RiskObjective, WeightParams, WeightVector,
};
pub use error::{Error, Result};
pub use estimators::{
    enumerate_submodels, fit_full, fit_with_submodels, PartitionedDesign, PartitionedFit,
    SubmodelRecord, SubmodelSpec,
};
pub use ode_core::{
    closed_form_alpha, discretize, discretize_with_stride, rk4_integrate, rk4_step,
    DiscretizedDesign, OdeSystem, TrajectoryGrid,
};
