//! Online mixture-of-experts prediction over a shared time series.
//!
//! `N` black-box agents each maintain a latent feature state and a linear
//! residual decoder. A server combines their predictions with signed mixture
//! weights solved in closed form each step, and agents are periodically
//! re-synchronized by solving a finite-horizon linear-quadratic game over
//! their decoders (a backward matrix recursion followed by a feedback
//! rollout).
//!
//! The crate is organized as:
//!
//! - [`types`]: shared dimensional types and stacked-block constructions
//! - [`server`]: equality-constrained ridge mixture weights plus a KKT oracle
//! - [`ridge`]: per-agent exponentially weighted ridge decoder updates
//! - [`encoders`]: deterministic, random-feature, and echo-state encoders
//! - [`moments`]: rectified-Gaussian moments and coefficient-matrix assembly
//! - [`nash`]: the synchronization game (backward pass, rollout, verification)
//! - [`datasets`]: synthetic generators and CSV benchmark loaders
//! - [`harness`]: the online loop, grid search, sweeps, and benchmarking

pub mod datasets;
pub mod encoders;
pub mod harness;
pub mod moments;
pub mod nash;
pub mod ridge;
pub mod rng;
pub mod server;
pub mod types;

pub use types::Dims;
