//! Shared dimensional types and stacked-block constructions.
//!
//! Every stacked object is agent-major: agent 0's block comes first. All
//! matrices are dense `f64`; the problem sizes here are small (a handful of
//! agents, latent widths in the tens).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TypesError {
    #[error("dimension must be >= 1: {0}")]
    NonPositiveDim(&'static str),
    #[error("agent index {index} out of range for {n_agents} agents")]
    AgentIndex { index: usize, n_agents: usize },
    #[error("expected {expected} blocks, got {got}")]
    BlockCount { expected: usize, got: usize },
    #[error("block {index} has shape {rows}x{cols}, expected {want_rows}x{want_cols}")]
    BlockShape {
        index: usize,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("weight vector has length {got}, expected {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Problem dimensions: agent count and input/target/latent widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_agents: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
}

impl Dims {
    pub fn new(n_agents: usize, d_x: usize, d_y: usize, d_z: usize) -> Result<Self, TypesError> {
        if n_agents == 0 {
            return Err(TypesError::NonPositiveDim("n_agents"));
        }
        if d_x == 0 {
            return Err(TypesError::NonPositiveDim("d_x"));
        }
        if d_y == 0 {
            return Err(TypesError::NonPositiveDim("d_y"));
        }
        if d_z == 0 {
            return Err(TypesError::NonPositiveDim("d_z"));
        }
        Ok(Self {
            n_agents,
            d_x,
            d_y,
            d_z,
        })
    }

    /// Length of the stacked prediction vector.
    pub fn stacked_y(&self) -> usize {
        self.n_agents * self.d_y
    }

    /// Length of the stacked decoder vector.
    pub fn stacked_z(&self) -> usize {
        self.n_agents * self.d_z
    }
}

/// One observed time step: input `x_t` and target `y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

/// Concatenated agent predictions plus the per-agent latent blocks they
/// were produced from.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    pub y_hat: DVector<f64>,
    pub z_blocks: Vec<DMatrix<f64>>,
}

impl StackedState {
    pub fn new(
        y_hat: DVector<f64>,
        z_blocks: Vec<DMatrix<f64>>,
        dims: &Dims,
    ) -> Result<Self, TypesError> {
        if y_hat.len() != dims.stacked_y() {
            return Err(TypesError::BlockShape {
                index: 0,
                rows: y_hat.len(),
                cols: 1,
                want_rows: dims.stacked_y(),
                want_cols: 1,
            });
        }
        check_blocks(&z_blocks, dims.n_agents, dims.d_y, dims.d_z)?;
        Ok(Self { y_hat, z_blocks })
    }

    /// Agent `i`'s prediction block.
    pub fn agent_y(&self, i: usize, d_y: usize) -> DVector<f64> {
        self.y_hat.rows(i * d_y, d_y).into_owned()
    }
}

fn check_blocks(
    blocks: &[DMatrix<f64>],
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<(), TypesError> {
    if blocks.len() != n {
        return Err(TypesError::BlockCount {
            expected: n,
            got: blocks.len(),
        });
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.nrows() != rows || b.ncols() != cols {
            return Err(TypesError::BlockShape {
                index: i,
                rows: b.nrows(),
                cols: b.ncols(),
                want_rows: rows,
                want_cols: cols,
            });
        }
    }
    Ok(())
}

/// Which stacked space a selector addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorKind {
    /// Prediction space: `N d_y x d_y`.
    Output,
    /// Decoder space: `N d_z x d_z`.
    Latent,
}

/// Block selector for agent `i` (0-based): identity in block-row `i`,
/// zeros elsewhere.
pub fn build_selector(
    i: usize,
    kind: SelectorKind,
    dims: &Dims,
) -> Result<DMatrix<f64>, TypesError> {
    if i >= dims.n_agents {
        return Err(TypesError::AgentIndex {
            index: i,
            n_agents: dims.n_agents,
        });
    }
    let d = match kind {
        SelectorKind::Output => dims.d_y,
        SelectorKind::Latent => dims.d_z,
    };
    let mut m = DMatrix::zeros(dims.n_agents * d, d);
    for k in 0..d {
        m[(i * d + k, k)] = 1.0;
    }
    Ok(m)
}

/// Stacked weight block `[w^1 I_dy; ...; w^N I_dy]` of shape `N d_y x d_y`.
pub fn build_weight_block(w: &DVector<f64>, dims: &Dims) -> Result<DMatrix<f64>, TypesError> {
    if w.len() != dims.n_agents {
        return Err(TypesError::WeightLength {
            expected: dims.n_agents,
            got: w.len(),
        });
    }
    let d_y = dims.d_y;
    let mut m = DMatrix::zeros(dims.n_agents * d_y, d_y);
    for i in 0..dims.n_agents {
        for k in 0..d_y {
            m[(i * d_y + k, k)] = w[i];
        }
    }
    Ok(m)
}

/// Block-diagonal assembly of the per-agent latent blocks:
/// `diag[Z^1, ..., Z^N]` of shape `N d_y x N d_z`.
pub fn block_diag_z(z_blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>, TypesError> {
    if z_blocks.is_empty() {
        return Err(TypesError::BlockCount {
            expected: 1,
            got: 0,
        });
    }
    let d_y = z_blocks[0].nrows();
    let d_z = z_blocks[0].ncols();
    check_blocks(z_blocks, z_blocks.len(), d_y, d_z)?;
    let n = z_blocks.len();
    let mut m = DMatrix::zeros(n * d_y, n * d_z);
    for (i, b) in z_blocks.iter().enumerate() {
        m.view_mut((i * d_y, i * d_z), (d_y, d_z)).copy_from(b);
    }
    Ok(m)
}

/// Parameters of the synchronization game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    /// Game look-back horizon.
    pub horizon: usize,
    /// Per-agent exponential decay rates, all >= 0.
    pub alphas: Vec<f64>,
    /// Per-agent ridge weights, all > 0 (strict convexity of each cost).
    pub gammas: Vec<f64>,
    /// Synchronization period `tau`; the game runs when `t % tau == 0`.
    pub sync_period: usize,
    /// Monte-Carlo samples per expectation when no closed form exists.
    pub mc_samples: usize,
}

impl GameConfig {
    pub fn validate(&self, n_agents: usize) -> Result<(), TypesError> {
        if self.horizon == 0 {
            return Err(TypesError::Config("game horizon must be >= 1".into()));
        }
        if self.sync_period == 0 {
            return Err(TypesError::Config("sync period must be >= 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(TypesError::Config("mc_samples must be >= 1".into()));
        }
        if self.alphas.len() != n_agents || self.gammas.len() != n_agents {
            return Err(TypesError::Config(format!(
                "need {} alpha/gamma entries, got {}/{}",
                n_agents,
                self.alphas.len(),
                self.gammas.len()
            )));
        }
        if self.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(TypesError::Config("alphas must be finite and >= 0".into()));
        }
        if self.gammas.iter().any(|g| !g.is_finite() || *g <= 0.0) {
            return Err(TypesError::Config("gammas must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Server-side parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    /// Weight ridge penalty, > 0.
    pub kappa: f64,
    /// Total weight size: the solved weights satisfy `sum_i w_i = eta`.
    pub eta: f64,
    /// Client ridge look-back window.
    pub client_window: usize,
    /// Per-agent encoder noise scales.
    pub sigmas: Vec<f64>,
}

impl ServerConfig {
    pub fn validate(&self, n_agents: usize) -> Result<(), TypesError> {
        if self.kappa <= 0.0 || !self.kappa.is_finite() {
            return Err(TypesError::Config("kappa must be finite and > 0".into()));
        }
        if !self.eta.is_finite() {
            return Err(TypesError::Config("eta must be finite".into()));
        }
        if self.client_window == 0 {
            return Err(TypesError::Config("client window must be >= 1".into()));
        }
        if self.sigmas.len() != n_agents {
            return Err(TypesError::Config(format!(
                "need {} sigma entries, got {}",
                n_agents,
                self.sigmas.len()
            )));
        }
        if self.sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(TypesError::Config("sigmas must be finite and >= 0".into()));
        }
        Ok(())
    }
}
