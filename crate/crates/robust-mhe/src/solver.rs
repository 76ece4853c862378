//! Smooth unconstrained minimizer for the stacked horizon objective.
//!
//! Levenberg-Marquardt-style damping around a Newton/Gauss-Newton model:
//! when the caller supplies a normal-matrix callable it is used directly,
//! otherwise a BFGS secant approximation stands in. Steps are accepted
//! only when the objective decreases, so the recorded objective history
//! is non-increasing by construction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::SpdFactor;

#[derive(Debug, Clone, Error)]
pub enum SolverError {
    #[error("objective or gradient non-finite at the initial point")]
    NonFiniteInput,
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-12,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 0.5,
        }
    }
}

impl SolverConfig {
    /// Tightened settings for oracle computations (finite-difference
    /// influence probes) where solution accuracy is amplified by `1/eps`.
    pub fn tight() -> Self {
        Self {
            max_iterations: 400,
            gradient_tolerance: 1e-12,
            step_tolerance: 1e-16,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub final_objective: f64,
    pub final_gradient_norm: f64,
    /// Objective at the start plus after every accepted step.
    pub objective_history: Vec<f64>,
}

/// Damping ceiling beyond which the iteration is declared stalled.
const MAX_DAMPING: f64 = 1e14;

/// Minimize `f` starting from `x0`.
///
/// `hess_approx`, when given, must return a symmetric positive
/// semi-definite model of the Hessian at the queried point (a
/// Gauss-Newton normal matrix); the damped system `(H + lambda I) d = -g`
/// is solved with the crate-wide jitter policy.
pub fn minimize<F, G>(
    f: F,
    grad: G,
    hess_approx: Option<&dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>, String>>,
    x0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<(DVector<f64>, SolveReport), SolverError>
where
    F: Fn(&DVector<f64>) -> Result<f64, String>,
    G: Fn(&DVector<f64>) -> Result<DVector<f64>, String>,
{
    let n = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x).map_err(SolverError::Evaluation)?;
    let mut g = grad(&x).map_err(SolverError::Evaluation)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteInput);
    }

    let mut history = vec![fx];
    let mut lambda = config.initial_damping;
    let mut bfgs = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;

    if g.norm() < config.gradient_tolerance {
        return Ok((
            x,
            SolveReport {
                status: SolveStatus::Converged,
                iterations: 0,
                final_objective: fx,
                final_gradient_norm: g.norm(),
                objective_history: history,
            },
        ));
    }

    let mut status = SolveStatus::MaxIterations;
    while iterations < config.max_iterations {
        iterations += 1;

        let h = match hess_approx {
            Some(h) => h(&x).map_err(SolverError::Evaluation)?,
            None => bfgs.clone(),
        };
        let damped = &h + DMatrix::identity(n, n) * lambda;
        let step = match SpdFactor::new(&damped, "damped normal matrix") {
            Ok(fac) => -fac.solve_vec(&g),
            Err(_) => {
                // Not PD even with jitter: raise damping and try again.
                lambda *= config.damping_increase;
                if lambda > MAX_DAMPING {
                    status = SolveStatus::Stalled;
                    break;
                }
                continue;
            }
        };

        let x_trial = &x + &step;
        let f_trial = f(&x_trial).map_err(SolverError::Evaluation)?;

        if f_trial.is_finite() && f_trial < fx {
            let g_trial = grad(&x_trial).map_err(SolverError::Evaluation)?;
            if g_trial.iter().any(|v| !v.is_finite()) {
                status = SolveStatus::Stalled;
                break;
            }
            if hess_approx.is_none() {
                bfgs_update(&mut bfgs, &step, &(&g_trial - &g));
            }
            x = x_trial;
            fx = f_trial;
            g = g_trial;
            history.push(fx);
            lambda = (lambda * config.damping_decrease).max(f64::MIN_POSITIVE);
            if g.norm() < config.gradient_tolerance || step.norm() < config.step_tolerance {
                status = SolveStatus::Converged;
                break;
            }
        } else {
            if step.norm() < config.step_tolerance {
                // No descent along a negligible step: the iterate is a
                // minimum to within floating-point resolution of f.
                status = SolveStatus::Converged;
                break;
            }
            lambda *= config.damping_increase;
            if lambda > MAX_DAMPING {
                status = SolveStatus::Stalled;
                break;
            }
        }
    }

    Ok((
        x,
        SolveReport {
            status,
            iterations,
            final_objective: fx,
            final_gradient_norm: g.norm(),
            objective_history: history,
        },
    ))
}

/// BFGS update of the Hessian approximation `b` with step `s` and
/// gradient difference `y`; skipped when curvature is not positive.
fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let sy = s.dot(y);
    if sy <= 1e-12 * s.norm() * y.norm() {
        return;
    }
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 0.0 {
        return;
    }
    *b += y * y.transpose() / sy - &bs * bs.transpose() / sbs;
}

/// Central-difference gradient with absolute step `step`, used as the
/// analytic-gradient oracle throughout the test suites.
pub fn finite_difference_gradient<F>(f: F, x: &DVector<f64>, step: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..n {
        xp[i] = x[i] + step;
        xm[i] = x[i] - step;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * step);
        xp[i] = x[i];
        xm[i] = x[i];
    }
    g
}

/// Central-difference Hessian of a gradient callable; columns are
/// symmetrized. Used for influence-function Hessians of nonlinear models
/// and as the independent check of analytic Hessians.
pub fn finite_difference_hessian_of_gradient<G>(
    grad: G,
    x: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>, String>
where
    G: Fn(&DVector<f64>) -> Result<DVector<f64>, String>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..n {
        let hi = step * x[i].abs().max(1.0);
        xp[i] = x[i] + hi;
        xm[i] = x[i] - hi;
        let gp = grad(&xp)?;
        let gm = grad(&xm)?;
        h.set_column(i, &((gp - gm) / (2.0 * hi)));
        xp[i] = x[i];
        xm[i] = x[i];
    }
    Ok(crate::linalg::symmetrized(&h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quadratic_bowl(c: &DVector<f64>) -> impl Fn(&DVector<f64>) -> Result<f64, String> + '_ {
        move |x| Ok((x - c).norm_squared())
    }

    fn quadratic_bowl_grad(c: &DVector<f64>) -> impl Fn(&DVector<f64>) -> Result<DVector<f64>, String> + '_ {
        move |x| Ok(2.0 * (x - c))
    }

    #[test]
    fn quadratic_bowl_exact() {
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x0 = DVector::zeros(3);
        let hess = |_: &DVector<f64>| Ok(DMatrix::identity(3, 3) * 2.0);
        let (x, report) = minimize(
            quadratic_bowl(&c),
            quadratic_bowl_grad(&c),
            Some(&hess),
            &x0,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(report.status, SolveStatus::Converged);
        assert!((x - &c).norm() < 1e-10);
    }

    #[test]
    fn quadratic_bowl_bfgs_path() {
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (x, report) = minimize(
            quadratic_bowl(&c),
            quadratic_bowl_grad(&c),
            None,
            &DVector::zeros(3),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(report.status, SolveStatus::Converged);
        assert!((x - &c).norm() < 1e-8);
    }

    #[test]
    fn scale_robustness() {
        // Multiplying f by 1e3 moves the argmin by < 1e-6.
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let f = |x: &DVector<f64>| Ok(1e3 * (x - &c).norm_squared());
        let g = |x: &DVector<f64>| Ok(2e3 * (x - &c));
        let (x, _) = minimize(f, g, None, &DVector::zeros(3), &SolverConfig::default()).unwrap();
        assert!((x - &c).norm() < 1e-6);
    }

    #[test]
    fn rosenbrock_converges() {
        let a = 1.0;
        let b = 100.0;
        let f = |x: &DVector<f64>| {
            Ok((a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2))
        };
        let g = |x: &DVector<f64>| {
            Ok(DVector::from_vec(vec![
                -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]),
                2.0 * b * (x[1] - x[0] * x[0]),
            ]))
        };
        let cfg = SolverConfig {
            max_iterations: 500,
            ..SolverConfig::default()
        };
        let (x, report) = minimize(f, g, None, &DVector::from_vec(vec![-1.2, 1.0]), &cfg).unwrap();
        assert_eq!(report.status, SolveStatus::Converged);
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "x = {x:?}");
    }

    #[test]
    fn already_optimal_returns_immediately() {
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let (x, report) = minimize(
            quadratic_bowl(&c),
            quadratic_bowl_grad(&c),
            None,
            &c.clone(),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.status, SolveStatus::Converged);
        assert_eq!(x, c);
    }

    #[test]
    fn non_finite_at_start_is_an_input_error() {
        let f = |_: &DVector<f64>| Ok(f64::NAN);
        let g = |_: &DVector<f64>| Ok(DVector::zeros(1));
        let err = minimize(f, g, None, &DVector::zeros(1), &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolverError::NonFiniteInput));
    }

    #[test]
    fn objective_history_is_non_increasing_and_deterministic() {
        let f = |x: &DVector<f64>| Ok((x[0] - 2.0).powi(4) + x[1].powi(2));
        let g = |x: &DVector<f64>| {
            Ok(DVector::from_vec(vec![4.0 * (x[0] - 2.0).powi(3), 2.0 * x[1]]))
        };
        let run = || {
            minimize(f, g, None, &DVector::from_vec(vec![-1.0, 3.0]), &SolverConfig::default())
                .unwrap()
        };
        let (x1, r1) = run();
        let (x2, r2) = run();
        assert_eq!(x1, x2);
        assert_eq!(r1.objective_history, r2.objective_history);
        for w in r1.objective_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let f = |x: &DVector<f64>| x.dot(x);
        let g = finite_difference_gradient(f, &DVector::from_vec(vec![1.0, 1.0]), 1e-6);
        assert_relative_eq!(g[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(g[1], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn fd_gradient_of_constant_is_zero() {
        let f = |_: &DVector<f64>| 42.0;
        let g = finite_difference_gradient(f, &DVector::from_vec(vec![3.0, -1.0]), 1e-4);
        assert!(g.norm() < 1e-9);
    }
}
