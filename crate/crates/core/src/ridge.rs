//! Per-agent greedy decoder updates between synchronization times.
//!
//! Between games each agent refits its linear decoder against its own
//! one-step-ahead residuals over a trailing window, with exponential decay
//! `exp(-alpha (t-1-s))` on step `s`. Square roots of the weights are folded
//! into the design rows and targets so that an ordinary ridge solve
//! minimizes the exponentially weighted objective
//!
//! ```text
//!     sum_s exp(-alpha (t-1-s)) ||resid_s - Z_s beta||^2 + gamma ||beta||^2.
//! ```

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RidgeError {
    #[error("no completed steps available for the ridge window")]
    EmptyHistory,
    #[error("gamma must be > 0, got {0}")]
    BadGamma(f64),
    #[error("non-finite design entries (upstream latent blow-up?)")]
    NonFinite,
    #[error("history slices disagree: {0}")]
    Misaligned(String),
}

/// Weighted design rows and residual targets for one ridge solve.
///
/// Rows are grouped per window step (`d_y` rows each), ordered oldest to
/// newest; the most recent step carries weight 1.
#[derive(Debug, Clone)]
pub struct RidgeWindow {
    pub design: DMatrix<f64>,
    pub targets: DVector<f64>,
    /// Per-step decay weights before the square root, oldest first.
    pub weights: Vec<f64>,
}

/// Build the window for a decoder refit at step `t`.
///
/// Pair `s` (for `s` in `max(1, t - t_client) ..= t-1`) couples the latent
/// `latents[s]` that produced prediction `s` with the residual
/// `targets[s] - y_hat[s-1]`, under decay weight `exp(-alpha (t-1-s))`.
/// Slices hold history up to and including step `t-1`.
pub fn build_window(
    latents: &[DMatrix<f64>],
    y_hat: &[DVector<f64>],
    targets: &[DVector<f64>],
    t: usize,
    t_client: usize,
    alpha: f64,
) -> Result<RidgeWindow, RidgeError> {
    if t < 2 {
        return Err(RidgeError::EmptyHistory);
    }
    let need = t; // indices 0..t-1 must exist
    if latents.len() < need || y_hat.len() < need || targets.len() < need {
        return Err(RidgeError::Misaligned(format!(
            "step {} needs {} records, have z={} y_hat={} y={}",
            t,
            need,
            latents.len(),
            y_hat.len(),
            targets.len()
        )));
    }
    let start = t.saturating_sub(t_client).max(1);
    let steps = t - start;
    if steps == 0 {
        return Err(RidgeError::EmptyHistory);
    }
    let d_y = targets[start].len();
    let d_z = latents[start].ncols();
    let mut design = DMatrix::zeros(steps * d_y, d_z);
    let mut resid = DVector::zeros(steps * d_y);
    let mut weights = Vec::with_capacity(steps);
    for (row, s) in (start..t).enumerate() {
        let w = (-alpha * (t - 1 - s) as f64).exp();
        weights.push(w);
        let sw = w.sqrt();
        design
            .view_mut((row * d_y, 0), (d_y, d_z))
            .copy_from(&(&latents[s] * sw));
        let r = (&targets[s] - &y_hat[s - 1]) * sw;
        resid.rows_mut(row * d_y, d_y).copy_from(&r);
    }
    Ok(RidgeWindow {
        design,
        targets: resid,
        weights,
    })
}

/// Ridge solve `beta = (X'X + gamma I)^-1 X' ybar` via Cholesky.
///
/// `gamma > 0` keeps the system positive definite even for rank-deficient
/// designs. Non-finite design entries are rejected; they signal upstream
/// latent blow-up rather than a solvable system.
pub fn ridge_solve(window: &RidgeWindow, gamma: f64) -> Result<DVector<f64>, RidgeError> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(RidgeError::BadGamma(gamma));
    }
    if window.design.iter().any(|v| !v.is_finite()) || window.targets.iter().any(|v| !v.is_finite())
    {
        return Err(RidgeError::NonFinite);
    }
    let d_z = window.design.ncols();
    let gram = window.design.transpose() * &window.design + DMatrix::identity(d_z, d_z) * gamma;
    let rhs = window.design.transpose() * &window.targets;
    let chol = Cholesky::new(gram).ok_or(RidgeError::NonFinite)?;
    Ok(chol.solve(&rhs))
}

/// The exponentially weighted objective the solve minimizes; used by tests.
pub fn window_objective(window: &RidgeWindow, gamma: f64, beta: &DVector<f64>) -> f64 {
    let r = &window.targets - &window.design * beta;
    r.norm_squared() + gamma * beta.norm_squared()
}
