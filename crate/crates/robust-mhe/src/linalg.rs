//! Shared dense linear-algebra helpers.
//!
//! Every positive-definite solve in the crate goes through [`SpdFactor`],
//! which is a Cholesky factorization with a single `+1e-9 I` jitter retry.
//! Failures surface as [`ConditioningError`] instead of panics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Jitter added to the diagonal on the single Cholesky retry.
pub const CHOLESKY_JITTER: f64 = 1e-9;

#[derive(Debug, Clone, Error)]
#[error("matrix is not positive definite ({context})")]
pub struct ConditioningError {
    pub context: String,
}

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Factors once, then serves solves, inverse quadratic forms and
/// log-determinants without ever forming an explicit inverse.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    /// Factor `m`, retrying once with `+1e-9 I` on the diagonal.
    pub fn new(m: &DMatrix<f64>, context: &str) -> Result<Self, ConditioningError> {
        let sym = symmetrized(m);
        if let Some(chol) = Cholesky::new(sym.clone()) {
            return Ok(Self { chol });
        }
        let n = sym.nrows();
        let jittered = sym + DMatrix::identity(n, n) * CHOLESKY_JITTER;
        Cholesky::new(jittered)
            .map(|chol| Self { chol })
            .ok_or_else(|| ConditioningError {
                context: context.to_string(),
            })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `m^{-1} v`.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `m^{-1} b` column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Quadratic form `v^T m^{-1} v`.
    pub fn inv_quadratic_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.chol.solve(v))
    }

    /// `log |m|`.
    pub fn log_determinant(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Lower-triangular factor `L` with `m = L L^T`.
    pub fn factor_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Explicit inverse. Only used for analysis quantities (Frobenius
    /// norms of inverse Hessians), never inside estimation loops.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// `(m + m^T) / 2`.
pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrize in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let s = symmetrized(m);
    *m = s;
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = symmetrized(m).symmetric_eigenvalues();
    eig.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Symmetric square root with negative eigenvalues clamped to zero.
///
/// Used for sampling from possibly singular covariances (a zero matrix
/// is a legal noise covariance for noise-free simulation).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrized(m);
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| if v > 0.0 { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spd_factor_solves_and_logdet() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = SpdFactor::new(&m, "test").unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = f.solve_vec(&b);
        assert_relative_eq!((&m * &x - &b).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(f.log_determinant(), (11.0f64).ln(), epsilon = 1e-12);
        assert_relative_eq!(f.inv_quadratic_form(&b), b.dot(&x), epsilon = 1e-12);
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // Rank-deficient PSD matrix: plain Cholesky fails, jitter succeeds.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(SpdFactor::new(&m, "psd").is_ok());
    }

    #[test]
    fn indefinite_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(SpdFactor::new(&m, "indefinite").is_err());
    }

    #[test]
    fn psd_sqrt_of_zero_is_zero() {
        let z = DMatrix::zeros(3, 3);
        assert_eq!(psd_sqrt(&z), z);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&m);
        assert_relative_eq!((&s * &s - &m).norm(), 0.0, epsilon = 1e-12);
    }
}
