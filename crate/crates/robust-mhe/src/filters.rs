//! Kalman-type filters and the Riccati recursion.
//!
//! These serve two roles: experiment baselines (KF, UKF) and the
//! arrival-cost covariance propagation for the moving horizon estimator.
//! All innovation covariances are handled through a symmetric
//! positive-definite factorization with the crate-wide jitter policy;
//! no explicit inverses. Posterior covariances are symmetrized after
//! every update and the KF/EKF measurement update uses the Joseph form.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{symmetrized, SpdFactor};
use crate::models::{GaussianDensity, LinearGaussianModel, ModelError, NonlinearModel};

#[derive(Debug, Clone, Error)]
pub enum FilterError {
    #[error("numerical conditioning failure: {0}")]
    Conditioning(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid sigma-point scaling: n + lambda = {0} must be positive")]
    SigmaScaling(f64),
}

/// Posterior density with its time index.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub posterior: GaussianDensity,
    pub step: usize,
}

impl FilterState {
    pub fn new(posterior: GaussianDensity, step: usize) -> Self {
        Self { posterior, step }
    }

    /// Start a filter at the model's initial density.
    pub fn from_initial(initial: &GaussianDensity) -> Self {
        Self {
            posterior: initial.clone(),
            step: 0,
        }
    }
}

/// Sigma-point scaling parameters. Defaults are the conventional
/// Gaussian-optimal choices `alpha = 1e-3`, `beta_ut = 2`, `kappa = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta_ut: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta_ut: 2.0,
            kappa: 0.0,
        }
    }
}

impl UkfParams {
    /// Composite scaling `lambda = alpha^2 (n + kappa) - n`.
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }
}

/// One predict-then-update Kalman step.
pub fn kf_step(
    model: &LinearGaussianModel,
    prior: &FilterState,
    y: &DVector<f64>,
) -> Result<FilterState, FilterError> {
    if y.len() != model.measurement_dim() {
        return Err(FilterError::Dimension(format!(
            "measurement has length {}, expected {}",
            y.len(),
            model.measurement_dim()
        )));
    }
    let m_pred = &model.a * prior.posterior.mean();
    let p_pred = symmetrized(&(&model.a * prior.posterior.covariance() * model.a.transpose() + &model.q));
    let (mean, cov) = linear_update(&m_pred, &p_pred, &model.c, &model.r, y)?;
    Ok(FilterState::new(
        GaussianDensity::new(mean, cov).map_err(FilterError::from)?,
        prior.step + 1,
    ))
}

/// Measurement update shared by KF and EKF: Joseph-form covariance, gain
/// via an SPD solve on the innovation covariance.
fn linear_update(
    m_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), FilterError> {
    let s = symmetrized(&(c * p_pred * c.transpose() + r));
    let s_fac = SpdFactor::new(&s, "innovation covariance")
        .map_err(|e| FilterError::Conditioning(e.to_string()))?;
    // K = P C^T S^{-1}  computed as  (S^{-1} C P)^T
    let k = s_fac.solve_mat(&(c * p_pred)).transpose();
    let innovation = y - c * m_pred;
    let mean = m_pred + &k * innovation;
    let n = p_pred.nrows();
    let ikc = DMatrix::identity(n, n) - &k * c;
    let cov = symmetrized(&(&ikc * p_pred * ikc.transpose() + &k * r * k.transpose()));
    Ok((mean, cov))
}

/// One step of the matrix Riccati recursion,
/// `P <- Q + A P A^T - A P C^T (R + C P C^T)^{-1} C P A^T`, symmetrized.
pub fn riccati_step(
    model: &LinearGaussianModel,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, FilterError> {
    let p = symmetrized(p);
    let s = symmetrized(&(&model.c * &p * model.c.transpose() + &model.r));
    let s_fac = SpdFactor::new(&s, "R + C P C^T")
        .map_err(|e| FilterError::Conditioning(e.to_string()))?;
    let cpat = &model.c * &p * model.a.transpose();
    let apct = cpat.transpose();
    let next = &model.q + &model.a * &p * model.a.transpose() - &apct * s_fac.solve_mat(&cpat);
    Ok(symmetrized(&next))
}

/// Extended Kalman step: mean and covariance update linearized at the
/// current mean (transition) and at the predicted mean (measurement).
pub fn ekf_covariance_step(
    model: &NonlinearModel,
    state: &FilterState,
    y: &DVector<f64>,
    control: Option<&DVector<f64>>,
) -> Result<FilterState, FilterError> {
    let mean = state.posterior.mean();
    let a = model.transition_jacobian(mean, control)?;
    let m_pred = model.transition_mean(mean, control)?;
    let p_pred = symmetrized(&(&a * state.posterior.covariance() * a.transpose() + &model.q));
    let c = model.measurement_jacobian(&m_pred)?;
    let y_pred = model.measurement_mean(&m_pred)?;
    // Reuse the linear update on the innovation rewritten around y_pred:
    // y - h(m_pred) = (y + C m_pred - h(m_pred)) - C m_pred.
    let y_eff = y - y_pred + &c * &m_pred;
    let (mean, cov) = linear_update(&m_pred, &p_pred, &c, &model.r, &y_eff)?;
    Ok(FilterState::new(
        GaussianDensity::new(mean, cov).map_err(FilterError::from)?,
        state.step + 1,
    ))
}

/// Unscented Kalman step with `2n + 1` sigma points and additive noise.
pub fn ukf_step(
    model: &NonlinearModel,
    state: &FilterState,
    y: &DVector<f64>,
    params: &UkfParams,
    control: Option<&DVector<f64>>,
) -> Result<FilterState, FilterError> {
    let n = model.state_dim;
    let lambda = params.lambda(n);
    let scale = n as f64 + lambda;
    if scale <= 0.0 {
        return Err(FilterError::SigmaScaling(scale));
    }

    let (wm, wc) = ut_weights(n, lambda, params);

    // Predict.
    let sigma = sigma_points(state.posterior.mean(), state.posterior.covariance(), scale)?;
    let propagated: Vec<DVector<f64>> = sigma
        .iter()
        .map(|p| model.transition_mean(p, control))
        .collect::<Result<_, _>>()?;
    let m_pred = weighted_mean(&propagated, &wm);
    let mut p_pred = model.q.clone();
    for (i, p) in propagated.iter().enumerate() {
        let d = p - &m_pred;
        p_pred += wc[i] * &d * d.transpose();
    }
    let p_pred = symmetrized(&p_pred);

    // Update with sigma points regenerated around the predicted density.
    let sigma = sigma_points(&m_pred, &p_pred, scale)?;
    let observed: Vec<DVector<f64>> = sigma
        .iter()
        .map(|p| model.measurement_mean(p))
        .collect::<Result<_, _>>()?;
    let y_pred = weighted_mean(&observed, &wm);
    let mut s = model.r.clone();
    let mut pxy = DMatrix::zeros(n, model.measurement_dim);
    for (i, (p, obs)) in sigma.iter().zip(&observed).enumerate() {
        let dy = obs - &y_pred;
        let dx = p - &m_pred;
        s += wc[i] * &dy * dy.transpose();
        pxy += wc[i] * dx * dy.transpose();
    }
    let s = symmetrized(&s);
    let s_fac = SpdFactor::new(&s, "UKF innovation covariance")
        .map_err(|e| FilterError::Conditioning(e.to_string()))?;
    let k = s_fac.solve_mat(&pxy.transpose()).transpose();
    let mean = &m_pred + &k * (y - &y_pred);
    let cov = symmetrized(&(&p_pred - &k * &s * k.transpose()));

    Ok(FilterState::new(
        GaussianDensity::new(mean, cov).map_err(FilterError::from)?,
        state.step + 1,
    ))
}

fn ut_weights(n: usize, lambda: f64, params: &UkfParams) -> (Vec<f64>, Vec<f64>) {
    let scale = n as f64 + lambda;
    let mut wm = vec![1.0 / (2.0 * scale); 2 * n + 1];
    let mut wc = wm.clone();
    wm[0] = lambda / scale;
    wc[0] = lambda / scale + (1.0 - params.alpha * params.alpha + params.beta_ut);
    (wm, wc)
}

fn sigma_points(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    scale: f64,
) -> Result<Vec<DVector<f64>>, FilterError> {
    let n = mean.len();
    let fac = SpdFactor::new(&(cov * scale), "sigma-point covariance square root")
        .map_err(|e| FilterError::Conditioning(e.to_string()))?;
    let l = fac.factor_l();
    let mut pts = Vec::with_capacity(2 * n + 1);
    pts.push(mean.clone());
    for i in 0..n {
        let col = l.column(i);
        pts.push(mean + &col);
        pts.push(mean - &col);
    }
    Ok(pts)
}

fn weighted_mean(points: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let mut acc = DVector::zeros(points[0].len());
    for (p, &wi) in points.iter().zip(w) {
        acc += wi * p;
    }
    acc
}
