//! Moving horizon estimation core.
//!
//! The window objective is
//!
//! ```text
//! J(x_{t-T..t}) = 0.5 ||x_{t-T} - anchor||^2_{P^{-1}}
//!               + sum_i { 0.5 ||x_i - F(x_{i-1})||^2_{Q^{-1}} + c_Q + h(y_i, x_i) }
//! ```
//!
//! with the measurement stage cost `h` either the Gaussian negative
//! log-likelihood (`Standard`) or the beta-divergence loss (`Beta`):
//!
//! ```text
//! h_beta(y, x) = -((beta+1)/(beta * sqrt((2pi)^{beta m} |R|^beta)))
//!                  * exp(-(beta/2) ||y - G(x)||^2_{R^{-1}})
//!                + (beta+1)^{-1/2} (2pi)^{-m beta / 2} |R|^{-beta/2}
//! ```
//!
//! Gaussian log-normalizer constants are kept in all stage costs so that
//! `Standard` and `Beta` objective values stay comparable and the
//! beta-to-zero limit can be checked at the level of minimizers.
//!
//! [`run_estimator`] implements the receding-horizon loop: for `t < T`
//! the horizon shrinks to `t` and the window is anchored at the initial
//! density; afterwards the anchor is the estimate made `T` steps ago with
//! a covariance propagated by the configured filter, linearized at the
//! estimator's own trace.

use nalgebra::{DMatrix, DVector};
use std::time::Instant;
use thiserror::Error;

use crate::filters::{ekf_covariance_step, kf_step, ukf_step, FilterError, FilterState, UkfParams};
use crate::linalg::{symmetrized, SpdFactor};
use crate::models::{GaussianDensity, ModelError, NonlinearModel, SystemModel};
use crate::solver::{minimize, SolveReport, SolveStatus, SolverConfig, SolverError};

#[derive(Debug, Clone, Error)]
pub enum MheError {
    #[error("beta = {0} outside the open interval (0, 1)")]
    BetaDomain(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("window conditioning failure: {0}")]
    Conditioning(String),
    #[error("estimate failed{}: solver stopped {status:?} after {iterations} iterations (gradient norm {gradient_norm:.3e})",
            step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    EstimateFailed {
        step: Option<usize>,
        status: SolveStatus,
        iterations: usize,
        gradient_norm: f64,
        /// Best-so-far window trajectory when the solver gave up.
        best: Vec<DVector<f64>>,
    },
}

/// Measurement stage-cost selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageCostKind {
    /// Negative Gaussian log-likelihood.
    Standard,
    /// Beta-divergence loss with `beta` in (0, 1).
    Beta(f64),
}

impl StageCostKind {
    pub fn validate(&self) -> Result<(), MheError> {
        if let StageCostKind::Beta(beta) = self {
            if !(*beta > 0.0 && *beta < 1.0) {
                return Err(MheError::BetaDomain(*beta));
            }
        }
        Ok(())
    }
}

/// Filter used to propagate the arrival-cost covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalFilter {
    Kf,
    Ekf,
    Ukf(UkfParams),
}

#[derive(Debug, Clone)]
pub struct MheConfig {
    pub horizon: usize,
    pub stage_cost: StageCostKind,
    pub solver: SolverConfig,
    pub arrival_filter: ArrivalFilter,
    pub warm_start: bool,
}

impl MheConfig {
    pub fn new(horizon: usize, stage_cost: StageCostKind) -> Result<Self, MheError> {
        if horizon == 0 {
            return Err(MheError::Dimension("horizon must be >= 1".into()));
        }
        stage_cost.validate()?;
        Ok(Self {
            horizon,
            stage_cost,
            solver: SolverConfig::default(),
            arrival_filter: ArrivalFilter::Ekf,
            warm_start: true,
        })
    }

    pub fn with_arrival_filter(mut self, filter: ArrivalFilter) -> Self {
        self.arrival_filter = filter;
        self
    }

    pub fn with_solver(mut self, solver: SolverConfig) -> Self {
        self.solver = solver;
        self
    }
}

/// Anchor estimate plus the measurements (and controls) of one MHE solve.
#[derive(Debug, Clone)]
pub struct HorizonWindow {
    pub anchor: GaussianDensity,
    /// `y_{t-T'+1} .. y_t`.
    pub measurements: Vec<DVector<f64>>,
    /// `u_{t-T'} .. u_{t-1}`, when the model takes controls.
    pub controls: Option<Vec<DVector<f64>>>,
    /// Absolute time index of the newest measurement.
    pub t: usize,
}

impl HorizonWindow {
    /// Number of measurements, i.e. the effective horizon `T'`.
    pub fn effective_horizon(&self) -> usize {
        self.measurements.len()
    }
}

/// Solver outcome for one window.
#[derive(Debug, Clone)]
pub struct MheSolution {
    /// `x_hat_{t|t}`: last state of the minimizing trajectory.
    pub estimate: DVector<f64>,
    /// Full smoothed window trajectory `x_{t-T'..t}`.
    pub smoothed: Vec<DVector<f64>>,
    pub report: SolveReport,
    /// Whether the accepted solve came from the cold-start retry.
    pub cold_restarted: bool,
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub wall_time_ms: f64,
    pub cold_restarted: bool,
}

/// Output of [`run_estimator`]: one entry per measurement consumed.
#[derive(Debug, Clone)]
pub struct EstimateTrace {
    pub estimates: Vec<DVector<f64>>,
    pub smoothed: Vec<Vec<DVector<f64>>>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// The last solved window and its minimizer, kept for robustness
    /// analyses over a finished run.
    pub final_window: Option<HorizonWindow>,
    pub final_solution: Option<Vec<DVector<f64>>>,
}

/// Optional epsilon-contamination of the measurement stage costs: each
/// `h(y_i, x_i)` becomes `(1 - eps) h(y_i, x_i) + eps h(z_i, x_i)`.
#[derive(Debug, Clone)]
pub(crate) struct Contamination {
    pub z: Vec<DVector<f64>>,
    pub epsilon: f64,
}

/// Prefactored window problem: Cholesky factors, log-determinant
/// constants and beta-loss coefficients are computed once per window.
pub(crate) struct WindowProblem<'a> {
    model: &'a SystemModel,
    window: &'a HorizonWindow,
    kind: StageCostKind,
    pub(crate) anchor_fac: SpdFactor,
    q_fac: SpdFactor,
    r_fac: SpdFactor,
    p_inv: DMatrix<f64>,
    q_inv: DMatrix<f64>,
    pub(crate) r_inv: DMatrix<f64>,
    /// `0.5 ln((2pi)^n |Q|)`.
    k_const: f64,
    /// `0.5 ln((2pi)^m |R|)`.
    h_const: f64,
    /// `(beta+1)/beta * ((2pi)^{beta m} |R|^beta)^{-1/2}`.
    beta_c1: f64,
    /// `(beta+1)^{-1/2} ((2pi)^{beta m} |R|^beta)^{-1/2}`.
    beta_c2: f64,
    /// Sum of the additive stage-cost constants over the window. The
    /// solver works on the shifted objective `J - constant_offset`, which
    /// keeps |f| near the data-misfit scale: the beta loss otherwise
    /// carries an O(1/beta) constant that wipes out the floating-point
    /// resolution of the descent test.
    constant_offset: f64,
    pub(crate) contamination: Option<Contamination>,
    n: usize,
}

impl<'a> WindowProblem<'a> {
    pub(crate) fn new(
        model: &'a SystemModel,
        window: &'a HorizonWindow,
        kind: StageCostKind,
    ) -> Result<Self, MheError> {
        kind.validate()?;
        let n = model.state_dim();
        let m = model.measurement_dim();
        if window.anchor.dim() != n {
            return Err(MheError::Dimension("anchor dimension != state dimension".into()));
        }
        for y in &window.measurements {
            if y.len() != m {
                return Err(MheError::Dimension("measurement length != m".into()));
            }
        }
        let anchor_fac = SpdFactor::new(window.anchor.covariance(), "anchor covariance")
            .map_err(|e| MheError::Conditioning(e.to_string()))?;
        let q_fac = SpdFactor::new(model.q(), "process noise covariance")
            .map_err(|e| MheError::Conditioning(e.to_string()))?;
        let r_fac = SpdFactor::new(model.r(), "measurement noise covariance")
            .map_err(|e| MheError::Conditioning(e.to_string()))?;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let k_const = 0.5 * (n as f64 * ln_2pi + q_fac.log_determinant());
        let h_const = 0.5 * (m as f64 * ln_2pi + r_fac.log_determinant());
        let (beta_c1, beta_c2) = match kind {
            StageCostKind::Standard => (0.0, 0.0),
            StageCostKind::Beta(beta) => {
                // exp(-(beta/2) ln((2pi)^m |R|)) computed in log space.
                let half_ln = 0.5 * beta * (m as f64 * ln_2pi + r_fac.log_determinant());
                let scale = (-half_ln).exp();
                (
                    (beta + 1.0) / beta * scale,
                    (beta + 1.0).powf(-0.5) * scale,
                )
            }
        };
        let h_min = match kind {
            StageCostKind::Standard => h_const,
            StageCostKind::Beta(_) => -beta_c1 + beta_c2,
        };
        let constant_offset = window.effective_horizon() as f64 * (k_const + h_min);
        let p_inv = anchor_fac.inverse();
        let q_inv = q_fac.inverse();
        let r_inv = r_fac.inverse();
        Ok(Self {
            model,
            window,
            kind,
            anchor_fac,
            q_fac,
            r_fac,
            p_inv,
            q_inv,
            r_inv,
            k_const,
            h_const,
            beta_c1,
            beta_c2,
            constant_offset,
            contamination: None,
            n,
        })
    }

    pub(crate) fn with_contamination(mut self, z: Vec<DVector<f64>>, epsilon: f64) -> Self {
        self.contamination = Some(Contamination { z, epsilon });
        self
    }

    pub(crate) fn horizon(&self) -> usize {
        self.window.effective_horizon()
    }

    pub(crate) fn dim(&self) -> usize {
        (self.horizon() + 1) * self.n
    }

    fn control(&self, i: usize) -> Option<&DVector<f64>> {
        self.window.controls.as_ref().map(|c| &c[i])
    }

    /// Measurement stage cost above its own minimum, given the squared
    /// Mahalanobis residual `q2 = ||y - G(x)||^2_{R^{-1}}`. The beta form
    /// uses `expm1` so that `c1 (1 - exp(-beta q2 / 2))` stays accurate
    /// when `beta q2` is tiny.
    fn h_shifted(&self, q2: f64) -> f64 {
        match self.kind {
            StageCostKind::Standard => 0.5 * q2,
            StageCostKind::Beta(beta) => -self.beta_c1 * (-0.5 * beta * q2).exp_m1(),
        }
    }

    /// Scalar weight on the Gauss-Newton residual term: the gradient of
    /// the stage cost is `-w(q2) * C^T R^{-1} (y - G(x))`.
    fn weight_of(&self, q2: f64) -> f64 {
        match self.kind {
            StageCostKind::Standard => 1.0,
            StageCostKind::Beta(beta) => self.beta_c1 * beta * (-0.5 * beta * q2).exp(),
        }
    }

    fn measurement_terms_shifted(&self, i: usize, x: &DVector<f64>) -> Result<f64, MheError> {
        let y = &self.window.measurements[i - 1];
        let g = self.model.measurement_mean(x)?;
        let q2 = self.r_fac.inv_quadratic_form(&(y - &g));
        match &self.contamination {
            None => Ok(self.h_shifted(q2)),
            Some(c) => {
                let q2z = self.r_fac.inv_quadratic_form(&(&c.z[i - 1] - &g));
                Ok((1.0 - c.epsilon) * self.h_shifted(q2) + c.epsilon * self.h_shifted(q2z))
            }
        }
    }

    /// Objective minus its additive constants; what the solver minimizes.
    pub(crate) fn objective_shifted(&self, candidate: &[DVector<f64>]) -> Result<f64, MheError> {
        self.check_candidate(candidate)?;
        let mut total =
            0.5 * self
                .anchor_fac
                .inv_quadratic_form(&(&candidate[0] - self.window.anchor.mean()));
        for i in 1..=self.horizon() {
            let pred = self.model.transition_mean(&candidate[i - 1], self.control(i - 1))?;
            let rk = &candidate[i] - pred;
            total += 0.5 * self.q_fac.inv_quadratic_form(&rk);
            total += self.measurement_terms_shifted(i, &candidate[i])?;
        }
        Ok(total)
    }

    /// Full window objective including the Gaussian log-normalizer
    /// constants, so values are comparable across stage-cost kinds.
    pub(crate) fn objective(&self, candidate: &[DVector<f64>]) -> Result<f64, MheError> {
        Ok(self.objective_shifted(candidate)? + self.constant_offset)
    }

    pub(crate) fn gradient(&self, candidate: &[DVector<f64>]) -> Result<DVector<f64>, MheError> {
        self.check_candidate(candidate)?;
        let n = self.n;
        let mut g = DVector::zeros(self.dim());
        let d0 = &candidate[0] - self.window.anchor.mean();
        g.rows_mut(0, n).copy_from(&self.anchor_fac.solve_vec(&d0));
        for i in 1..=self.horizon() {
            let u = self.control(i - 1);
            let pred = self.model.transition_mean(&candidate[i - 1], u)?;
            let a = self.model.transition_jacobian(&candidate[i - 1], u)?;
            let rk = self.q_fac.solve_vec(&(&candidate[i] - pred));
            {
                let mut gi = g.rows_mut(i * n, n);
                gi += &rk;
            }
            {
                let mut gim = g.rows_mut((i - 1) * n, n);
                gim -= a.transpose() * &rk;
            }

            let y = &self.window.measurements[i - 1];
            let gx = self.model.measurement_mean(&candidate[i])?;
            let c = self.model.measurement_jacobian(&candidate[i])?;
            let r_data = y - &gx;
            let q2 = self.r_fac.inv_quadratic_form(&r_data);
            let (w_data, z_term) = match &self.contamination {
                None => (self.weight_of(q2), None),
                Some(cz) => {
                    let rz = &cz.z[i - 1] - &gx;
                    let q2z = self.r_fac.inv_quadratic_form(&rz);
                    (
                        (1.0 - cz.epsilon) * self.weight_of(q2),
                        Some((cz.epsilon * self.weight_of(q2z), rz)),
                    )
                }
            };
            let mut pull = w_data * self.r_fac.solve_vec(&r_data);
            if let Some((wz, rz)) = z_term {
                pull += wz * self.r_fac.solve_vec(&rz);
            }
            let mut gi = g.rows_mut(i * n, n);
            gi -= c.transpose() * pull;
        }
        Ok(g)
    }

    /// Positive semi-definite Gauss-Newton normal matrix. For the beta
    /// stage cost the residual term is weighted by the same scalar as the
    /// gradient; the indefinite rank-one correction is left out.
    pub(crate) fn gauss_newton(&self, candidate: &[DVector<f64>]) -> Result<DMatrix<f64>, MheError> {
        self.check_candidate(candidate)?;
        let n = self.n;
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        h.view_mut((0, 0), (n, n)).copy_from(&self.p_inv);
        for i in 1..=self.horizon() {
            let u = self.control(i - 1);
            let a = self.model.transition_jacobian(&candidate[i - 1], u)?;
            let qa = &self.q_inv * &a;
            let atqa = a.transpose() * &qa;
            add_block(&mut h, i, i, n, &self.q_inv);
            add_block(&mut h, i - 1, i - 1, n, &atqa);
            sub_block(&mut h, i, i - 1, n, &qa);
            sub_block(&mut h, i - 1, i, n, &qa.transpose());

            let c = self.model.measurement_jacobian(&candidate[i])?;
            let ctrc = c.transpose() * &self.r_inv * &c;
            let w = self.measurement_gn_weight(i, &candidate[i])?;
            add_block(&mut h, i, i, n, &(ctrc * w));
        }
        Ok(symmetrized(&h))
    }

    fn measurement_gn_weight(&self, i: usize, x: &DVector<f64>) -> Result<f64, MheError> {
        let y = &self.window.measurements[i - 1];
        let gx = self.model.measurement_mean(x)?;
        let q2 = self.r_fac.inv_quadratic_form(&(y - &gx));
        Ok(match &self.contamination {
            None => self.weight_of(q2),
            Some(cz) => {
                let q2z = self.r_fac.inv_quadratic_form(&(&cz.z[i - 1] - &gx));
                (1.0 - cz.epsilon) * self.weight_of(q2) + cz.epsilon * self.weight_of(q2z)
            }
        })
    }

    fn check_candidate(&self, candidate: &[DVector<f64>]) -> Result<(), MheError> {
        if candidate.len() != self.horizon() + 1 {
            return Err(MheError::Dimension(format!(
                "candidate has {} states, window needs {}",
                candidate.len(),
                self.horizon() + 1
            )));
        }
        if candidate.iter().any(|x| x.len() != self.n) {
            return Err(MheError::Dimension("candidate state length != n".into()));
        }
        Ok(())
    }

    pub(crate) fn flatten(&self, candidate: &[DVector<f64>]) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        for (i, x) in candidate.iter().enumerate() {
            v.rows_mut(i * self.n, self.n).copy_from(x);
        }
        v
    }

    pub(crate) fn unflatten(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..=self.horizon())
            .map(|i| v.rows(i * self.n, self.n).into_owned())
            .collect()
    }
}

fn add_block(h: &mut DMatrix<f64>, bi: usize, bj: usize, n: usize, block: &DMatrix<f64>) {
    let mut view = h.view_mut((bi * n, bj * n), (n, n));
    view += block;
}

fn sub_block(h: &mut DMatrix<f64>, bi: usize, bj: usize, n: usize, block: &DMatrix<f64>) {
    let mut view = h.view_mut((bi * n, bj * n), (n, n));
    view -= block;
}

/// Beta-divergence measurement loss; see the module docs for the closed
/// form. `beta` must lie in the open interval (0, 1).
pub fn beta_loss(
    y: &DVector<f64>,
    x: &DVector<f64>,
    model: &SystemModel,
    beta: f64,
) -> Result<f64, MheError> {
    stage_cost_h(y, x, model, StageCostKind::Beta(beta))
}

/// Measurement stage cost of the given kind at a single state.
pub fn stage_cost_h(
    y: &DVector<f64>,
    x: &DVector<f64>,
    model: &SystemModel,
    kind: StageCostKind,
) -> Result<f64, MheError> {
    kind.validate()?;
    let m = model.measurement_dim();
    let r_fac = SpdFactor::new(model.r(), "measurement noise covariance")
        .map_err(|e| MheError::Conditioning(e.to_string()))?;
    let g = model.measurement_mean(x)?;
    let q2 = r_fac.inv_quadratic_form(&(y - &g));
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let ln_norm = m as f64 * ln_2pi + r_fac.log_determinant();
    Ok(match kind {
        StageCostKind::Standard => 0.5 * q2 + 0.5 * ln_norm,
        StageCostKind::Beta(beta) => {
            let scale = (-0.5 * beta * ln_norm).exp();
            -(beta + 1.0) / beta * scale * (-0.5 * beta * q2).exp()
                + (beta + 1.0).powf(-0.5) * scale
        }
    })
}

/// Full window objective for an explicit candidate trajectory.
pub fn objective(
    window: &HorizonWindow,
    candidate: &[DVector<f64>],
    model: &SystemModel,
    kind: StageCostKind,
) -> Result<f64, MheError> {
    WindowProblem::new(model, window, kind)?.objective(candidate)
}

/// Analytic gradient of [`objective`] over the stacked trajectory.
pub fn objective_gradient(
    window: &HorizonWindow,
    candidate: &[DVector<f64>],
    model: &SystemModel,
    kind: StageCostKind,
) -> Result<DVector<f64>, MheError> {
    WindowProblem::new(model, window, kind)?.gradient(candidate)
}

/// Cold-start guess: anchor mean replicated across the window.
fn cold_start(window: &HorizonWindow, n_states: usize) -> Vec<DVector<f64>> {
    vec![window.anchor.mean().clone(); n_states]
}

/// Solve one window. `initial` seeds the solver (warm start); on
/// non-convergence the solve is retried once from the cold start.
pub fn mhe_step(
    window: &HorizonWindow,
    model: &SystemModel,
    config: &MheConfig,
    initial: Option<&[DVector<f64>]>,
) -> Result<MheSolution, MheError> {
    let problem = WindowProblem::new(model, window, config.stage_cost)?;
    solve_window(&problem, config, initial)
}

pub(crate) fn solve_window(
    problem: &WindowProblem<'_>,
    config: &MheConfig,
    initial: Option<&[DVector<f64>]>,
) -> Result<MheSolution, MheError> {
    let guess = match initial {
        Some(states) => states.to_vec(),
        None => cold_start(problem.window, problem.horizon() + 1),
    };
    problem.check_candidate(&guess)?;

    let attempt = |start: &[DVector<f64>]| -> Result<(Vec<DVector<f64>>, SolveReport), MheError> {
        let x0 = problem.flatten(start);
        let f = |v: &DVector<f64>| {
            problem
                .objective_shifted(&problem.unflatten(v))
                .map_err(|e| e.to_string())
        };
        let grad = |v: &DVector<f64>| {
            problem
                .gradient(&problem.unflatten(v))
                .map_err(|e| e.to_string())
        };
        let hess = |v: &DVector<f64>| {
            problem
                .gauss_newton(&problem.unflatten(v))
                .map_err(|e| e.to_string())
        };
        let (x, mut report) = minimize(f, grad, Some(&hess), &x0, &config.solver)?;
        let x = polish_stationarity(problem, x, &mut report, config.solver.gradient_tolerance);
        // Reporting uses the unshifted objective values.
        report.final_objective += problem.constant_offset;
        for v in &mut report.objective_history {
            *v += problem.constant_offset;
        }
        Ok((problem.unflatten(&x), report))
    };

    let (solution, report) = attempt(&guess)?;
    if report.status == SolveStatus::Converged {
        return Ok(MheSolution {
            estimate: solution.last().expect("window is non-empty").clone(),
            smoothed: solution,
            report,
            cold_restarted: false,
        });
    }

    // Retry once from the cold start (unless that is what just failed).
    let cold = cold_start(problem.window, problem.horizon() + 1);
    if initial.is_some() && guess != cold {
        let (solution, report) = attempt(&cold)?;
        if report.status == SolveStatus::Converged {
            return Ok(MheSolution {
                estimate: solution.last().expect("window is non-empty").clone(),
                smoothed: solution,
                report,
                cold_restarted: true,
            });
        }
        return Err(MheError::EstimateFailed {
            step: None,
            status: report.status,
            iterations: report.iterations,
            gradient_norm: report.final_gradient_norm,
            best: solution,
        });
    }

    Err(MheError::EstimateFailed {
        step: None,
        status: report.status,
        iterations: report.iterations,
        gradient_norm: report.final_gradient_norm,
        best: solution,
    })
}

/// Undamped Newton refinement on the gradient after the descent phase.
///
/// The descent test of the solver is limited by the floating-point
/// resolution of the objective; the gradient is much better conditioned,
/// so a few Gauss-Newton steps accepted on gradient-norm decrease push
/// stationarity well past what the objective comparison can register.
fn polish_stationarity(
    problem: &WindowProblem<'_>,
    mut x: DVector<f64>,
    report: &mut SolveReport,
    gradient_tolerance: f64,
) -> DVector<f64> {
    let floor = gradient_tolerance.min(1e-11);
    let mut g = match problem.gradient(&problem.unflatten(&x)) {
        Ok(g) => g,
        Err(_) => return x,
    };
    for _ in 0..8 {
        if g.norm() <= floor {
            break;
        }
        let h = match problem.gauss_newton(&problem.unflatten(&x)) {
            Ok(h) => h,
            Err(_) => break,
        };
        let fac = match crate::linalg::SpdFactor::new(&h, "polish normal matrix") {
            Ok(fac) => fac,
            Err(_) => break,
        };
        let step = -fac.solve_vec(&g);
        if !step.iter().all(|v| v.is_finite()) || step.norm() > 1e-2 * (1.0 + x.norm()) {
            break;
        }
        let x_new = &x + &step;
        let g_new = match problem.gradient(&problem.unflatten(&x_new)) {
            Ok(g) => g,
            Err(_) => break,
        };
        if g_new.norm() < g.norm() {
            x = x_new;
            g = g_new;
        } else {
            break;
        }
    }
    report.final_gradient_norm = g.norm();
    if let Ok(f) = problem.objective_shifted(&problem.unflatten(&x)) {
        report.final_objective = f;
    }
    x
}

/// Run the moving horizon estimator over a measurement stream.
pub fn run_estimator(
    model: &SystemModel,
    measurements: &[DVector<f64>],
    controls: Option<&[DVector<f64>]>,
    config: &MheConfig,
) -> Result<EstimateTrace, MheError> {
    config.stage_cost.validate()?;
    if config.horizon == 0 {
        return Err(MheError::Dimension("horizon must be >= 1".into()));
    }
    if let Some(c) = controls {
        if c.len() < measurements.len() {
            return Err(MheError::Dimension(format!(
                "{} controls for {} measurements",
                c.len(),
                measurements.len()
            )));
        }
    }
    if matches!(config.arrival_filter, ArrivalFilter::Kf) && model.as_linear().is_none() {
        return Err(MheError::Dimension(
            "KF arrival filter requires a linear Gaussian model".into(),
        ));
    }
    // Nonlinear view of the model for EKF/UKF covariance propagation.
    let wrapped = match (&config.arrival_filter, model) {
        (ArrivalFilter::Kf, _) => None,
        (_, SystemModel::Linear(linear)) => Some(NonlinearModel::from_linear(linear)),
        (_, SystemModel::Nonlinear(nl)) => Some(nl.clone()),
    };

    let n_meas = measurements.len();
    let mut estimate_history = vec![model.initial().mean().clone()];
    let mut cov_history = vec![model.initial().covariance().clone()];
    let mut prev_smoothed: Option<Vec<DVector<f64>>> = None;

    let mut trace = EstimateTrace {
        estimates: Vec::with_capacity(n_meas),
        smoothed: Vec::with_capacity(n_meas),
        diagnostics: Vec::with_capacity(n_meas),
        final_window: None,
        final_solution: None,
    };

    for t in 1..=n_meas {
        let horizon = config.horizon.min(t);
        let anchor_idx = t - horizon;
        let anchor = GaussianDensity::new(
            estimate_history[anchor_idx].clone(),
            cov_history[anchor_idx].clone(),
        )
        .map_err(MheError::Model)?;
        let window = HorizonWindow {
            anchor,
            measurements: measurements[anchor_idx..t].to_vec(),
            controls: controls.map(|c| c[anchor_idx..t].to_vec()),
            t,
        };

        let guess = if config.warm_start {
            prev_smoothed.as_ref().map(|prev| {
                let mut g: Vec<DVector<f64>> = if t <= config.horizon {
                    prev.clone()
                } else {
                    prev[1..].to_vec()
                };
                let u = controls.map(|c| &c[t - 1]);
                let last = g.last().expect("previous window non-empty");
                let propagated = model
                    .transition_mean(last, u)
                    .unwrap_or_else(|_| last.clone());
                g.push(propagated);
                g
            })
        } else {
            None
        };

        let started = Instant::now();
        let solution = mhe_step(&window, model, config, guess.as_deref()).map_err(|e| match e {
            MheError::EstimateFailed {
                status,
                iterations,
                gradient_norm,
                best,
                ..
            } => MheError::EstimateFailed {
                step: Some(t),
                status,
                iterations,
                gradient_norm,
                best,
            },
            other => other,
        })?;
        let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;

        // Advance the arrival covariance with the configured filter,
        // linearized at the estimator's own previous estimate.
        let filter_state = FilterState::new(
            GaussianDensity::new(estimate_history[t - 1].clone(), cov_history[t - 1].clone())?,
            t - 1,
        );
        let u = controls.map(|c| &c[t - 1]);
        let next_cov = match (&config.arrival_filter, model.as_linear(), &wrapped) {
            (ArrivalFilter::Kf, Some(linear), _) => {
                kf_step(linear, &filter_state, &measurements[t - 1])?
            }
            (ArrivalFilter::Ekf, _, Some(nl)) => {
                ekf_covariance_step(nl, &filter_state, &measurements[t - 1], u)?
            }
            (ArrivalFilter::Ukf(params), _, Some(nl)) => {
                ukf_step(nl, &filter_state, &measurements[t - 1], params, u)?
            }
            _ => unreachable!("arrival filter / model combination validated above"),
        }
        .posterior
        .covariance()
        .clone();

        estimate_history.push(solution.estimate.clone());
        cov_history.push(next_cov);
        prev_smoothed = Some(solution.smoothed.clone());

        trace.estimates.push(solution.estimate.clone());
        trace.diagnostics.push(StepDiagnostics {
            iterations: solution.report.iterations,
            final_gradient_norm: solution.report.final_gradient_norm,
            wall_time_ms,
            cold_restarted: solution.cold_restarted,
        });
        if t == n_meas {
            trace.final_window = Some(window);
            trace.final_solution = Some(solution.smoothed.clone());
        }
        trace.smoothed.push(solution.smoothed);
    }

    Ok(trace)
}
