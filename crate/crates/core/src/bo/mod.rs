//! Bayesian optimization in the VAE latent space: Gaussian-process
//! surrogate, stable log expected improvement, four acquisition
//! optimizers (penalized normalized gradient ascent, plain ascent,
//! box-constrained L-BFGS, trust region) and the outer LSO loop.

mod acquisition;
mod gp;
mod lso;
mod turbo;

pub use acquisition::{
    lbfgs_restart_points, log_ei, log_ei_value, optimize_acq_ga, optimize_acq_lbfgs, AcqConfig,
    BoxOptResult, GaResult, GaStep, LOG_EI_CAP,
};
pub use gp::{fit_gp, GpError, GpState, Hyperparameters, Posterior, NOISE_FLOOR};
pub use lso::{lso_run, LsoError, LsoHistory, LsoParams, LsoRecord, Method};
pub use turbo::{
    turbo_propose, turbo_update, TrustRegionState, FAILURE_TOL, LENGTH_INIT, LENGTH_MAX,
    LENGTH_MIN, SUCCESS_TOL,
};
