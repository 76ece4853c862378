//! State estimation for outlier-contaminated systems.
//!
//! The crate implements moving horizon estimation (MHE) over a sliding
//! window of measurements, in two flavours: the classical negative
//! log-likelihood stage cost and a beta-divergence stage cost that
//! down-weights low-likelihood measurements. Around the estimator sit
//!
//! * [`models`] — a small zoo of linear and nonlinear system models with
//!   contamination mechanisms and a seeded trajectory simulator,
//! * [`filters`] — Kalman/EKF/UKF steps and the Riccati recursion used
//!   for arrival-cost covariances and as experiment baselines,
//! * [`solver`] — a self-contained damped Gauss-Newton / BFGS minimizer
//!   for the stacked window objective,
//! * [`mhe`] — window objective assembly, gradients and the receding
//!   horizon estimation loop,
//! * [`robustness`] — analytic influence functions, an
//!   epsilon-contamination oracle and the gross-error-sensitivity bound,
//! * [`bench`] — a seeded, reproducible Monte-Carlo experiment harness
//!   with CSV/JSON export.

pub mod bench;
pub mod filters;
pub mod linalg;
pub mod mhe;
pub mod models;
pub mod robustness;
pub mod solver;

pub use models::{
    ContaminationSpec, GaussianDensity, LinearGaussianModel, NonlinearModel, OutlierKind,
    SystemModel, Trajectory,
};
