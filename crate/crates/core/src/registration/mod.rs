//! 3D-2D edge registration: residuals, robust weights and the IRLS solver.

mod residuals;
mod sensor;
mod solver;
mod weights;

pub use residuals::{
    compute_jacobian, compute_residuals, evaluate_residuals_unchecked, compute_residuals_with_gradients, warp_model_gradients, Jacobian,
    ResidualEntry, ResidualVector, MIN_VALID_RESIDUALS,
};
pub use sensor::{fit_all, fit_sensor_model, FittedParams, SensorModel, SensorModelFit, MIN_FIT_SAMPLES};
pub use solver::{
    irls_solve, pyramid_register, robust_weights, write_diagnostics_csv, DegeneracyPolicy, IterationRecord,
    PyramidReport, SolveReport, SolverConfig,
};
pub use weights::{mad_sigma, tukey_lambda_weight, Freiburg, Scale, WeightFunction, DEFAULT_T_NU, DEFAULT_TUKEY_EPSILON};
