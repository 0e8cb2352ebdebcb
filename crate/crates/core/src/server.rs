//! Server-side mixture weights.
//!
//! Each step the server solves
//!
//! ```text
//!     min_w ||y - Yhat w||^2 + kappa ||w||^2    s.t.  1' w = eta
//! ```
//!
//! over signed weights (negative bets against an agent are allowed). The
//! unique solution comes from eliminating the multiplier of the KKT system
//! of the equivalent quadratic program with `A = 2 (Yhat' Yhat + kappa I)`
//! and `b = 2 (y' Yhat)'`:
//!
//! ```text
//!     w* = A^-1 (b - (1' A^-1 b - eta) / (1' A^-1 1) * 1).
//! ```
//!
//! [`qp_oracle`] solves the same KKT system as one generic linear solve
//! without the elimination; it exists so tests can cross-check the closed
//! form against an independent route.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ServerError {
    #[error("kappa must be > 0, got {0}")]
    BadKappa(f64),
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error("prediction matrix is {rows}x{cols} but target has length {target}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        target: usize,
    },
    #[error("ridge-regularized Gram matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("singular KKT system")]
    SingularKkt,
}

/// One weight-solve instance: agent predictions as columns, the revealed
/// target, and the (kappa, eta) server parameters.
#[derive(Debug, Clone)]
pub struct WeightProblem {
    /// `d_y x N` matrix whose column `i` is agent `i`'s prediction.
    pub y_hat: DMatrix<f64>,
    /// Target of length `d_y`.
    pub y: DVector<f64>,
    pub kappa: f64,
    pub eta: f64,
}

/// Solved mixture weights with their constraint total.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights {
    pub w: DVector<f64>,
    pub eta: f64,
}

impl WeightProblem {
    fn check(&self) -> Result<(), ServerError> {
        if self.kappa <= 0.0 || !self.kappa.is_finite() {
            return Err(ServerError::BadKappa(self.kappa));
        }
        if self.y_hat.iter().any(|v| !v.is_finite()) {
            return Err(ServerError::NonFinite("y_hat"));
        }
        if self.y.iter().any(|v| !v.is_finite()) || !self.eta.is_finite() {
            return Err(ServerError::NonFinite("y or eta"));
        }
        if self.y.len() != self.y_hat.nrows() {
            return Err(ServerError::ShapeMismatch {
                rows: self.y_hat.nrows(),
                cols: self.y_hat.ncols(),
                target: self.y.len(),
            });
        }
        Ok(())
    }

    fn gram(&self) -> (DMatrix<f64>, DVector<f64>) {
        let a = 2.0
            * (self.y_hat.transpose() * &self.y_hat
                + DMatrix::identity(self.y_hat.ncols(), self.y_hat.ncols()) * self.kappa);
        let b = 2.0 * self.y_hat.transpose() * &self.y;
        (a, b)
    }

    /// The objective `||y - Yhat w||^2 + kappa ||w||^2`.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let r = &self.y - &self.y_hat * w;
        r.norm_squared() + self.kappa * w.norm_squared()
    }
}

/// Closed-form optimal mixture weights via the eliminated KKT system.
///
/// `A` is positive definite for `kappa > 0`, so it is factorized once with
/// a Cholesky decomposition and applied to both right-hand sides; the
/// inverse is never formed.
pub fn solve_mixture_weights(p: &WeightProblem) -> Result<MixtureWeights, ServerError> {
    p.check()?;
    let n = p.y_hat.ncols();
    let (a, b) = p.gram();
    let chol = Cholesky::new(a).ok_or(ServerError::NotPositiveDefinite)?;
    let ones = DVector::from_element(n, 1.0);
    let a_inv_b = chol.solve(&b);
    let a_inv_1 = chol.solve(&ones);
    let lambda = (ones.dot(&a_inv_b) - p.eta) / ones.dot(&a_inv_1);
    let w = a_inv_b - a_inv_1 * lambda;
    Ok(MixtureWeights { w, eta: p.eta })
}

/// Independent oracle: solve the full `(N+1) x (N+1)` KKT system
/// `[[A, 1], [1', 0]] (w, lambda) = (b, eta)` by a generic LU solve.
pub fn qp_oracle(p: &WeightProblem) -> Result<MixtureWeights, ServerError> {
    p.check()?;
    let n = p.y_hat.ncols();
    let (a, b) = p.gram();
    let mut kkt = DMatrix::zeros(n + 1, n + 1);
    kkt.view_mut((0, 0), (n, n)).copy_from(&a);
    for i in 0..n {
        kkt[(i, n)] = 1.0;
        kkt[(n, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(n + 1);
    rhs.rows_mut(0, n).copy_from(&b);
    rhs[n] = p.eta;
    let sol = kkt.lu().solve(&rhs).ok_or(ServerError::SingularKkt)?;
    Ok(MixtureWeights {
        w: sol.rows(0, n).into_owned(),
        eta: p.eta,
    })
}
