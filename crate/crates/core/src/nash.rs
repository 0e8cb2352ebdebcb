//! The synchronization game.
//!
//! Over a trailing window of `T` steps with recorded targets, server
//! weights, and latent states, the `N` agents' decoder updates form a
//! finite-horizon linear-quadratic game. Agent `i` minimizes
//!
//! ```text
//!     J_i = E sum_{t=0}^{T-1} exp(-alpha_i (T-1-t))
//!             [ ||y[t+1] - W_t' Yhat_{t+1}||^2 + gamma_i ||beta_i(t)||^2 ]
//! ```
//!
//! subject to the stacked dynamics `Yhat_{t+1} = Yhat_t + diag(Z_t) beta_t`.
//! The unique feedback Nash equilibrium is affine in the stacked state,
//! `beta_t = G(t) Yhat_t + H(t)`, with coefficients produced by a backward
//! recursion over per-agent value-function matrices `P_i`, `S_i` and the
//! per-step moment matrices assembled in [`crate::moments`].
//!
//! [`backward_pass`] runs the recursion, [`forward_rollout`] replays the
//! equilibrium on the recorded latents, and [`verify_foc`] /
//! [`value_consistency`] check the first-order conditions, unilateral
//! deviations, and the value-function ansatz on deterministic instances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::moments::{
    assemble_deterministic_moments, assemble_mc_moments, assemble_rfn_moments, MomentSet,
    MomentsError, RectGaussParams,
};
use crate::rng;
use crate::types::{block_diag_z, build_weight_block, Dims};

#[derive(Debug, Error)]
pub enum NashError {
    #[error("invertibility hypothesis violated at window step {t}")]
    NotInvertible { t: usize },
    #[error("window weights at step {t} sum to {sum}, expected eta = {eta}")]
    WeightSum { t: usize, sum: f64, eta: f64 },
    #[error("window is malformed: {0}")]
    Window(String),
    #[error(transparent)]
    Moments(#[from] MomentsError),
}

/// Recorded inputs of one synchronization game, in window-internal indices
/// `0..=T`. `targets[s]` is the target revealed at internal step `s`
/// (`targets[0]` seeds the rollout), `weights[s]` weighted the prediction
/// at internal step `s+1`, and `latents[s]` are the realized per-agent
/// latent blocks driving the transition from `s` to `s+1`.
#[derive(Debug, Clone)]
pub struct GameWindow {
    pub targets: Vec<DVector<f64>>,
    pub weights: Vec<DVector<f64>>,
    pub latents: Vec<Vec<DMatrix<f64>>>,
    pub eta: f64,
}

impl GameWindow {
    pub fn horizon(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self, dims: &Dims) -> Result<(), NashError> {
        let t = self.horizon();
        if t == 0 {
            return Err(NashError::Window("empty window".into()));
        }
        if self.targets.len() != t + 1 {
            return Err(NashError::Window(format!(
                "{} targets for horizon {t}, expected {}",
                self.targets.len(),
                t + 1
            )));
        }
        if self.latents.len() != t {
            return Err(NashError::Window(format!(
                "{} latent steps for horizon {t}",
                self.latents.len()
            )));
        }
        for (s, y) in self.targets.iter().enumerate() {
            if y.len() != dims.d_y {
                return Err(NashError::Window(format!(
                    "target {s} has length {}",
                    y.len()
                )));
            }
        }
        for (s, w) in self.weights.iter().enumerate() {
            if w.len() != dims.n_agents {
                return Err(NashError::Window(format!(
                    "weights {s} have length {}",
                    w.len()
                )));
            }
            let sum = w.sum();
            if (sum - self.eta).abs() > 1e-8 {
                return Err(NashError::WeightSum {
                    t: s,
                    sum,
                    eta: self.eta,
                });
            }
        }
        for (s, zs) in self.latents.iter().enumerate() {
            if zs.len() != dims.n_agents {
                return Err(NashError::Window(format!(
                    "step {s} has {} latents",
                    zs.len()
                )));
            }
            for (i, z) in zs.iter().enumerate() {
                if z.nrows() != dims.d_y || z.ncols() != dims.d_z {
                    return Err(NashError::Window(format!(
                        "latent ({s}, {i}) is {}x{}",
                        z.nrows(),
                        z.ncols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stacked initial state replicating the window's first target.
    pub fn target_init(&self, dims: &Dims) -> DVector<f64> {
        let mut y0 = DVector::zeros(dims.stacked_y());
        for i in 0..dims.n_agents {
            y0.rows_mut(i * dims.d_y, dims.d_y)
                .copy_from(&self.targets[0]);
        }
        y0
    }
}

/// A joint conditional draw `(step, sample) -> (Z_1, ..., Z_N)`.
pub type JointDraw<'a> = Box<dyn FnMut(usize, usize) -> Vec<DMatrix<f64>> + 'a>;

/// How per-step expectations are produced during the backward pass.
pub enum MomentPlan<'a> {
    /// Deterministic encoders: realized latents are the expectations.
    Deterministic,
    /// Rectified-Gaussian closed forms from per-step pre-activations,
    /// indexed `[step][agent]`.
    Rfn(&'a [Vec<RectGaussParams>]),
    /// Monte-Carlo: `draw(step, sample)` returns a fresh joint draw
    /// conditioned on the recorded history.
    MonteCarlo {
        n_samples: usize,
        draw: JointDraw<'a>,
    },
}

/// Output of the backward pass: feedback coefficients for each window step
/// and the per-agent value matrices, indexed `0..=T` (`P_i(T) = 0`).
#[derive(Debug, Clone)]
pub struct NashCoeffs {
    pub g: Vec<DMatrix<f64>>,
    pub h: Vec<DVector<f64>>,
    pub p: Vec<Vec<DMatrix<f64>>>,
    pub s: Vec<Vec<DVector<f64>>>,
}

/// Equilibrium trajectory from a forward rollout.
#[derive(Debug, Clone)]
pub struct NashSolution {
    pub coeffs: NashCoeffs,
    /// Stacked decoders `beta_t`, one per window step.
    pub beta: Vec<DVector<f64>>,
    /// Stacked predictions `Yhat_s` for `s = 0..=T`.
    pub y_hat: Vec<DVector<f64>>,
}

fn decay(alphas: &[f64], horizon: usize, t: usize) -> Vec<f64> {
    alphas
        .iter()
        .map(|a| (-a * (horizon - 1 - t) as f64).exp())
        .collect()
}

/// Scale block-row `i` (of height `block`) by `e[i]`.
fn scale_block_rows(m: &DMatrix<f64>, e: &[f64], block: usize) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, &s) in e.iter().enumerate() {
        out.rows_mut(i * block, block).apply(|v| *v *= s);
    }
    out
}

/// Backward recursion for `P_i`, `S_i`, `G`, `H` over the window.
///
/// At each step the matrix
/// `M(t) = e^{-alpha (T-1-t)} Gamma + A(t) + e^{-alpha (T-1-t)} Ahat(t)`
/// must be invertible (the theorem's hypothesis); a failed factorization
/// surfaces as [`NashError::NotInvertible`]. `M(t)` is not symmetric for
/// heterogeneous agents, so a partial-pivoting LU is used rather than a
/// symmetric factorization.
pub fn backward_pass(
    window: &GameWindow,
    dims: &Dims,
    alphas: &[f64],
    gammas: &[f64],
    plan: &mut MomentPlan,
) -> Result<NashCoeffs, NashError> {
    window.validate(dims)?;
    let t_end = window.horizon();
    let n = dims.n_agents;
    let d_z = dims.d_z;
    let ny = dims.stacked_y();
    let nz = dims.stacked_z();

    let mut p = vec![vec![DMatrix::zeros(ny, ny); n]; t_end + 1];
    let mut s = vec![vec![DVector::zeros(ny); n]; t_end + 1];
    let mut g = vec![DMatrix::zeros(nz, ny); t_end];
    let mut h = vec![DVector::zeros(nz); t_end];

    for t in (0..t_end).rev() {
        let w_vec = &window.weights[t];
        let (head, tail) = p.split_at_mut(t + 1);
        let p_now = &mut head[t];
        let p_next = &tail[0];
        let (s_head, s_tail) = s.split_at_mut(t + 1);
        let s_now = &mut s_head[t];
        let s_next = &s_tail[0];
        let set: MomentSet = match plan {
            MomentPlan::Deterministic => {
                assemble_deterministic_moments(&window.latents[t], p_next, s_next, w_vec, dims)?
            }
            MomentPlan::Rfn(pre) => {
                let step = pre
                    .get(t)
                    .ok_or_else(|| NashError::Window(format!("no pre-activations for step {t}")))?;
                assemble_rfn_moments(step, p_next, s_next, w_vec, dims)?
            }
            MomentPlan::MonteCarlo { n_samples, draw } => {
                assemble_mc_moments(|k| draw(t, k), *n_samples, p_next, s_next, w_vec, dims)?
            }
        };

        let e = decay(alphas, t_end, t);
        let w_block =
            build_weight_block(w_vec, dims).map_err(|err| NashError::Window(err.to_string()))?;
        let y_next = &window.targets[t + 1];

        // M(t) = A + rowscale(e, Gamma + Ahat).
        let mut gamma_ahat = set.a_hat.clone();
        for i in 0..n {
            for k in 0..d_z {
                gamma_ahat[(i * d_z + k, i * d_z + k)] += gammas[i];
            }
        }
        let m = &set.a + scale_block_rows(&gamma_ahat, &e, d_z);

        // Right-hand sides: M G = -(rowscale(e, D' W) W' + B),
        // M H = rowscale(e, D' W) y_next - C.
        let dt_w = scale_block_rows(&(set.d.transpose() * &w_block), &e, d_z);
        let rhs_g = &dt_w * w_block.transpose() + &set.b;
        let rhs_h = &dt_w * y_next - &set.c;

        let lu = m.lu();
        let g_t = lu
            .solve(&rhs_g)
            .map(|x| -x)
            .ok_or(NashError::NotInvertible { t })?;
        let h_t = lu.solve(&rhs_h).ok_or(NashError::NotInvertible { t })?;

        for i in 0..n {
            // bracket_i = D_i + e_i (Ahat + gamma_i ehat_i ehat_i').
            let mut bracket = set.a_hat.clone();
            for k in 0..d_z {
                bracket[(i * d_z + k, i * d_z + k)] += gammas[i];
            }
            bracket *= e[i];
            bracket += &set.d_i[i];

            // X_i = e_i W W' + P_i(t+1), shared by the P and S updates.
            let x_i = e[i] * (&w_block * w_block.transpose()) + &p_next[i];
            let xdg = &x_i * &set.d * &g_t;
            let mut p_t = g_t.transpose() * &bracket * &g_t;
            p_t += &xdg;
            p_t += xdg.transpose();
            p_t += &x_i;
            let p_t = (&p_t + p_t.transpose()) * 0.5;

            let v_i = -(e[i] * (&w_block * y_next)) + &s_next[i];
            let s_t = g_t.transpose() * &bracket * &h_t
                + &x_i * &set.d * &h_t
                + g_t.transpose() * set.d.transpose() * &v_i
                + v_i;

            p_now[i] = p_t;
            s_now[i] = s_t;
        }
        g[t] = g_t;
        h[t] = h_t;
    }

    Ok(NashCoeffs { g, h, p, s })
}

/// Replay the equilibrium feedback on the recorded latents from the given
/// stacked initial state, returning the decoder and prediction
/// trajectories. The final entries (`beta[T-1]`, `y_hat[T]`) are what the
/// online loop consumes as the synchronized correction.
pub fn forward_rollout(
    coeffs: &NashCoeffs,
    window: &GameWindow,
    init: &DVector<f64>,
) -> Result<NashSolution, NashError> {
    let t_end = window.horizon();
    let mut y_hat = Vec::with_capacity(t_end + 1);
    let mut beta = Vec::with_capacity(t_end);
    y_hat.push(init.clone());
    for t in 0..t_end {
        let b_t = &coeffs.g[t] * &y_hat[t] + &coeffs.h[t];
        let blk = block_diag_z(&window.latents[t]).map_err(|e| NashError::Window(e.to_string()))?;
        if blk.ncols() != b_t.len() || blk.nrows() != y_hat[t].len() {
            return Err(NashError::Window(format!(
                "rollout shape mismatch at step {t}: {}x{} vs state {} control {}",
                blk.nrows(),
                blk.ncols(),
                y_hat[t].len(),
                b_t.len()
            )));
        }
        let next = &y_hat[t] + blk * &b_t;
        y_hat.push(next);
        beta.push(b_t);
    }
    Ok(NashSolution {
        coeffs: coeffs.clone(),
        beta,
        y_hat,
    })
}

/// Realized cost of agent `agent` for a given stacked decoder trajectory,
/// evaluated on the window's recorded latents.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn realized_cost(
    window: &GameWindow,
    dims: &Dims,
    alphas: &[f64],
    gammas: &[f64],
    agent: usize,
    betas: &[DVector<f64>],
    init: &DVector<f64>,
) -> f64 {
    let t_end = window.horizon();
    let mut y = init.clone();
    let mut cost = 0.0;
    for t in 0..t_end {
        let blk = block_diag_z(&window.latents[t]).expect("validated window");
        y = &y + blk * &betas[t];
        let w_block = build_weight_block(&window.weights[t], dims).expect("validated window");
        let err = &window.targets[t + 1] - w_block.transpose() * &y;
        let b_i = betas[t].rows(agent * dims.d_z, dims.d_z);
        let e = (-alphas[agent] * (t_end - 1 - t) as f64).exp();
        cost += e * (err.norm_squared() + gammas[agent] * b_i.norm_squared());
    }
    cost
}

/// Roll the feedback strategies forward while `agent` adds `deltas[t]` to
/// its own decoder; all other agents keep responding through the feedback
/// law. Returns the stacked decoder trajectory.
#[allow(clippy::needless_range_loop)]
fn rollout_with_deviation(
    coeffs: &NashCoeffs,
    window: &GameWindow,
    dims: &Dims,
    agent: usize,
    deltas: &[DVector<f64>],
    init: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let t_end = window.horizon();
    let mut y = init.clone();
    let mut betas = Vec::with_capacity(t_end);
    for t in 0..t_end {
        let mut b_t = &coeffs.g[t] * &y + &coeffs.h[t];
        b_t.rows_mut(agent * dims.d_z, dims.d_z)
            .zip_apply(&deltas[t], |b, d| *b += d);
        let blk = block_diag_z(&window.latents[t]).expect("validated window");
        y = &y + blk * &b_t;
        betas.push(b_t);
    }
    betas
}

/// Verification report for one agent.
#[derive(Debug, Clone)]
pub struct FocReport {
    /// Max norm over window steps of the stationarity residual.
    pub max_residual: f64,
    /// Number of random unilateral deviations tested.
    pub deviations: usize,
    /// Min of `J_i(deviation) - J_i(equilibrium)` over those deviations.
    pub min_cost_gap: f64,
}

/// First-order-condition and unilateral-deviation check for one agent on a
/// deterministic instance (realized latents are the exact expectations).
///
/// The residual at step `t` is the gradient of the dynamic-programming
/// stage problem at the equilibrium,
///
/// ```text
///     e_i(t) [ gamma_i beta_i(t) - Z_i' E_i' W_t (y[t+1] - W_t' Yhat_{t+1}) ]
///     + Z_i' E_i' [ P_i(t+1) Yhat_{t+1} + S_i(t+1) ]
/// ```
///
/// evaluated along the rollout; it vanishes at the unique equilibrium.
#[allow(clippy::too_many_arguments)]
pub fn verify_foc(
    coeffs: &NashCoeffs,
    window: &GameWindow,
    dims: &Dims,
    alphas: &[f64],
    gammas: &[f64],
    agent: usize,
    n_deviations: usize,
    rng_in: &mut ChaCha8Rng,
) -> Result<FocReport, NashError> {
    window.validate(dims)?;
    let t_end = window.horizon();
    let init = window.target_init(dims);
    let sol = forward_rollout(coeffs, window, &init)?;
    let d_z = dims.d_z;
    let d_y = dims.d_y;

    let mut max_residual: f64 = 0.0;
    for t in 0..t_end {
        let e_i = (-alphas[agent] * (t_end - 1 - t) as f64).exp();
        let z_i = &window.latents[t][agent];
        let w_block = build_weight_block(&window.weights[t], dims)
            .map_err(|e| NashError::Window(e.to_string()))?;
        let y_next_state = &sol.y_hat[t + 1];
        let pred_err = &window.targets[t + 1] - w_block.transpose() * y_next_state;
        let w_i_block = w_block.rows(agent * d_y, d_y);
        let b_i = sol.beta[t].rows(agent * d_z, d_z).into_owned();
        let p_rows = coeffs.p[t + 1][agent].rows(agent * d_y, d_y);
        let s_rows = coeffs.s[t + 1][agent].rows(agent * d_y, d_y);
        let resid = e_i * (gammas[agent] * b_i - z_i.transpose() * (w_i_block * &pred_err))
            + z_i.transpose() * (p_rows * y_next_state + s_rows);
        max_residual = max_residual.max(resid.norm());
    }

    let base_cost = realized_cost(window, dims, alphas, gammas, agent, &sol.beta, &init);
    let mut min_cost_gap = f64::INFINITY;
    for _ in 0..n_deviations {
        let scale = 10f64.powf(rng_in.random_range(-3.0..0.5));
        let deltas: Vec<_> = (0..t_end)
            .map(|_| rng::normal_vector(rng_in, d_z, scale))
            .collect();
        let dev_betas = rollout_with_deviation(coeffs, window, dims, agent, &deltas, &init);
        let dev_cost = realized_cost(window, dims, alphas, gammas, agent, &dev_betas, &init);
        min_cost_gap = min_cost_gap.min(dev_cost - base_cost);
    }

    Ok(FocReport {
        max_residual,
        deviations: n_deviations,
        min_cost_gap,
    })
}

/// Offset-invariance report of the value-function ansatz.
#[derive(Debug, Clone)]
pub struct ValueReport {
    /// Max over `(agent, step)` of the spread of
    /// `cost-to-go(y) - (y' P y + 2 S' y)` across initial states.
    pub max_spread: f64,
}

/// The quadratic-plus-linear part of `V_i` differs from the realized
/// cost-to-go by a state-independent constant (the untracked scalar
/// offset). Checked by rolling the equilibrium feedback from several
/// random initial states at every window step.
#[allow(clippy::too_many_arguments)]
pub fn value_consistency(
    coeffs: &NashCoeffs,
    window: &GameWindow,
    dims: &Dims,
    alphas: &[f64],
    gammas: &[f64],
    n_inits: usize,
    rng_in: &mut ChaCha8Rng,
) -> Result<ValueReport, NashError> {
    window.validate(dims)?;
    let t_end = window.horizon();
    let ny = dims.stacked_y();
    let mut max_spread: f64 = 0.0;
    for agent in 0..dims.n_agents {
        for t0 in 0..=t_end {
            let mut offsets = Vec::with_capacity(n_inits);
            for _ in 0..n_inits {
                let y0 = rng::normal_vector(rng_in, ny, 1.0);
                let cost = cost_to_go(coeffs, window, dims, alphas, gammas, agent, t0, &y0);
                let quad = (y0.transpose() * &coeffs.p[t0][agent] * &y0)[(0, 0)]
                    + 2.0 * coeffs.s[t0][agent].dot(&y0);
                offsets.push(cost - quad);
            }
            let lo = offsets.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max_spread = max_spread.max(hi - lo);
        }
    }
    Ok(ValueReport { max_spread })
}

/// Cost-to-go of one agent from `(t0, y0)` under equilibrium feedback by
/// everyone, with the window's absolute decay indices.
#[allow(clippy::too_many_arguments)]
fn cost_to_go(
    coeffs: &NashCoeffs,
    window: &GameWindow,
    dims: &Dims,
    alphas: &[f64],
    gammas: &[f64],
    agent: usize,
    t0: usize,
    y0: &DVector<f64>,
) -> f64 {
    let t_end = window.horizon();
    let mut y = y0.clone();
    let mut cost = 0.0;
    for t in t0..t_end {
        let b_t = &coeffs.g[t] * &y + &coeffs.h[t];
        let blk = block_diag_z(&window.latents[t]).expect("validated window");
        y = &y + blk * &b_t;
        let w_block = build_weight_block(&window.weights[t], dims).expect("validated window");
        let err = &window.targets[t + 1] - w_block.transpose() * &y;
        let b_i = b_t.rows(agent * dims.d_z, dims.d_z);
        let e = (-alphas[agent] * (t_end - 1 - t) as f64).exp();
        cost += e * (err.norm_squared() + gammas[agent] * b_i.norm_squared());
    }
    cost
}
