//! End-to-end online loop, hyperparameter grids, ablation sweeps, runtime
//! benchmarking, and result emission.
//!
//! One step of [`run_online`] is: (1) every agent refits its decoder on
//! its trailing residual window, encodes a fresh latent, and advances its
//! residual prediction; (2) the server solves the mixture weights from the
//! previous predictions and target; (3) on synchronization steps the game
//! is solved over the trailing window and the agents' decoders and base
//! predictions are overwritten with the equilibrium values (predictions
//! are then recomputed with fresh encoder noise); (4) the weighted
//! ensemble prediction is emitted and the target revealed.
//!
//! Everything is deterministic given the config and master seed: agent
//! construction, path noise, and Monte-Carlo moment sampling each draw
//! from dedicated derived streams.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{DataError, Dataset, DatasetSpec};
use crate::encoders::{build_encoder, Activation, DeterministicMap, EncoderKind, EncoderParams};
use crate::moments::RectGaussParams;
use crate::nash::{backward_pass, forward_rollout, GameWindow, MomentPlan, NashError};
use crate::ridge::{build_window, ridge_solve, RidgeError};
use crate::rng::{self, TAG_INIT, TAG_MC, TAG_PATH};
use crate::server::{solve_mixture_weights, ServerError, WeightProblem};
use crate::types::{Dims, GameConfig, ServerConfig, TypesError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Types(#[from] TypesError),
    #[error("at step {t}: {source}")]
    Ridge {
        t: usize,
        #[source]
        source: RidgeError,
    },
    #[error("at step {t}: {source}")]
    Server {
        t: usize,
        #[source]
        source: ServerError,
    },
    #[error("at step {t}: {source}")]
    Sync {
        t: usize,
        #[source]
        source: NashError,
    },
    #[error("at step {t}: encoder: {detail}")]
    Encoder { t: usize, detail: String },
    #[error("dataset too short: {0} records")]
    ShortSeries(usize),
    #[error("paired runs are misaligned: {0}")]
    Misaligned(String),
    #[error("config: {0}")]
    Config(String),
}

/// Prediction mode: with periodic game synchronization or purely greedy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Game,
    NoGame,
}

/// Encoder family used by every agent in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    Deterministic,
    Rfn,
    Esn,
}

/// Initial stacked state of the synchronization rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncInit {
    /// Replicate the observed target at the window start (the default).
    Target,
    /// Warm-start from the agents' recorded predictions at the window start.
    Agent,
}

/// Full description of one run. Unknown keys in config files are
/// rejected; every field has a default so files may be partial.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub n_agents: usize,
    pub d_z: usize,
    pub encoder: EncoderChoice,
    pub mode: Mode,
    pub seed: u64,
    /// Exponential decay rate (replicated per agent unless `alphas` set).
    pub alpha: f64,
    /// Decoder ridge weight (replicated unless `gammas` set).
    pub gamma: f64,
    /// Encoder noise scale (replicated unless `sigmas` set).
    pub sigma: f64,
    pub alphas: Option<Vec<f64>>,
    pub gammas: Option<Vec<f64>>,
    pub sigmas: Option<Vec<f64>>,
    pub kappa: f64,
    pub eta: f64,
    /// Client ridge look-back window.
    pub client_t: usize,
    /// Game look-back horizon.
    pub game_t: usize,
    /// Synchronization period.
    pub tau: usize,
    pub mc_samples: usize,
    pub spectral_radius: f64,
    pub sync_init: SyncInit,
    /// Seed of the fixed deterministic feature maps. Independent of the
    /// run seed: a pre-trained model does not change between reruns.
    pub model_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::named("periodic"),
            n_agents: 2,
            d_z: 3,
            encoder: EncoderChoice::Rfn,
            mode: Mode::Game,
            seed: 2024,
            alpha: 0.01,
            gamma: 1.0,
            sigma: 0.1,
            alphas: None,
            gammas: None,
            sigmas: None,
            kappa: 1.0,
            eta: 1.0,
            client_t: 5,
            game_t: 3,
            tau: 1,
            mc_samples: 100,
            spectral_radius: 0.9,
            sync_init: SyncInit::Target,
            model_seed: 7,
        }
    }
}

fn per_agent(n: usize, scalar: f64, over: &Option<Vec<f64>>) -> Vec<f64> {
    over.clone().unwrap_or_else(|| vec![scalar; n])
}

impl RunConfig {
    pub fn game_config(&self) -> GameConfig {
        GameConfig {
            horizon: self.game_t,
            alphas: per_agent(self.n_agents, self.alpha, &self.alphas),
            gammas: per_agent(self.n_agents, self.gamma, &self.gammas),
            sync_period: self.tau,
            mc_samples: self.mc_samples,
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            kappa: self.kappa,
            eta: self.eta,
            client_window: self.client_t,
            sigmas: per_agent(self.n_agents, self.sigma, &self.sigmas),
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        self.game_config()
            .validate(self.n_agents)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.server_config()
            .validate(self.n_agents)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.n_agents == 0 || self.d_z == 0 {
            return Err(HarnessError::Config("n_agents and d_z must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step phase timings; kept in memory for benchmarking but excluded
/// from the canonical JSONL so reruns are byte-identical.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTiming {
    pub agent_s: f64,
    pub server_s: f64,
    pub sync_s: f64,
}

/// One emitted prediction step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub y: Vec<f64>,
    /// Per-agent predictions for this step.
    pub agents: Vec<Vec<f64>>,
    /// Mixture weights applied to this step's predictions.
    pub w: Vec<f64>,
    pub prediction: Vec<f64>,
    /// Per-dimension squared error of the ensemble prediction.
    pub sq_err: Vec<f64>,
    pub synced: bool,
    #[serde(skip)]
    pub timing: StepTiming,
}

/// Aggregates of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub mse: f64,
    pub steps: usize,
    pub sync_count: usize,
    pub mean_sync_time_s: f64,
    pub total_runtime_s: f64,
    pub agent_time_s: f64,
    pub server_time_s: f64,
    pub sync_time_s: f64,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
}

struct AgentRuntime {
    params: EncoderParams,
    alpha: f64,
    gamma: f64,
    beta: DVector<f64>,
    /// Latent history; entry `s` produced the prediction at step `s`.
    z_hist: Vec<DMatrix<f64>>,
    /// Prediction history, overwritten at sync steps.
    yh_hist: Vec<DVector<f64>>,
    path_rng: ChaCha8Rng,
}

fn encoder_kind(choice: EncoderChoice) -> EncoderKind {
    match choice {
        EncoderChoice::Deterministic => EncoderKind::Deterministic(DeterministicMap::SeededTanh),
        EncoderChoice::Rfn => EncoderKind::Rfn,
        EncoderChoice::Esn => EncoderKind::Esn(Activation::HardSigmoid),
    }
}

/// Run the online loop on a dataset loaded from the config's spec.
pub fn run_online(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    let ds = cfg.dataset.load()?;
    run_online_on(cfg, &ds)
}

/// Run the online loop on an already-loaded dataset. Exposed so audits can
/// replay truncated copies of the same series.
pub fn run_online_on(cfg: &RunConfig, ds: &Dataset) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(HarnessError::ShortSeries(ds.len()));
    }
    let dims = Dims::new(cfg.n_agents, ds.d_x, ds.d_y, cfg.d_z)?;
    let game = cfg.game_config();
    let server = cfg.server_config();
    let kind = encoder_kind(cfg.encoder);

    let init_seed = match cfg.encoder {
        EncoderChoice::Deterministic => cfg.model_seed,
        _ => cfg.seed,
    };
    let mut agents: Vec<AgentRuntime> = (0..cfg.n_agents)
        .map(|i| {
            let mut init_rng = rng::stream(init_seed, &[TAG_INIT, i as u64]);
            let params = build_encoder(
                kind,
                dims.d_x,
                dims.d_y,
                dims.d_z,
                server.sigmas[i],
                cfg.spectral_radius,
                &mut init_rng,
            );
            AgentRuntime {
                params,
                alpha: game.alphas[i],
                gamma: game.gammas[i],
                beta: DVector::zeros(dims.d_z),
                z_hist: Vec::with_capacity(ds.len()),
                yh_hist: Vec::with_capacity(ds.len()),
                path_rng: rng::stream(cfg.seed, &[TAG_PATH, i as u64]),
            }
        })
        .collect();

    // Step 0 initializes state from the first observation: predictions
    // anchor at the observed target and the first latent is encoded.
    let xs: Vec<&DVector<f64>> = ds.records.iter().map(|r| &r.x).collect();
    let mut ys: Vec<DVector<f64>> = vec![ds.records[0].y.clone()];
    let mut ws: Vec<DVector<f64>> = Vec::with_capacity(ds.len());
    for agent in &mut agents {
        let z0 = agent
            .params
            .encode(
                xs[0],
                &DMatrix::zeros(dims.d_y, dims.d_z),
                &mut agent.path_rng,
            )
            .map_err(|e| HarnessError::Encoder {
                t: 0,
                detail: e.to_string(),
            })?;
        agent.z_hist.push(z0);
        agent.yh_hist.push(ds.records[0].y.clone());
    }

    let run_start = Instant::now();
    let mut steps: Vec<StepRecord> = Vec::with_capacity(ds.len() - 1);

    for t in 1..ds.len() {
        let mut timing = StepTiming::default();

        // Phase 1: decoder refit, fresh latent, residual update.
        let tic = Instant::now();
        for agent in agents.iter_mut() {
            if t >= 2 {
                let window = build_window(
                    &agent.z_hist,
                    &agent.yh_hist,
                    &ys,
                    t,
                    server.client_window,
                    agent.alpha,
                )
                .map_err(|source| HarnessError::Ridge { t, source })?;
                agent.beta = ridge_solve(&window, agent.gamma)
                    .map_err(|source| HarnessError::Ridge { t, source })?;
            }
            let z_t = agent
                .params
                .encode(xs[t], &agent.z_hist[t - 1], &mut agent.path_rng)
                .map_err(|e| HarnessError::Encoder {
                    t,
                    detail: e.to_string(),
                })?;
            let y_t = &agent.yh_hist[t - 1] + &z_t * &agent.beta;
            agent.z_hist.push(z_t);
            agent.yh_hist.push(y_t);
        }
        timing.agent_s = tic.elapsed().as_secs_f64();

        // Phase 2: mixture weights from the previous predictions/target.
        let tic = Instant::now();
        let mut y_hat_mat = DMatrix::zeros(dims.d_y, cfg.n_agents);
        for (i, agent) in agents.iter().enumerate() {
            y_hat_mat.set_column(i, &agent.yh_hist[t - 1]);
        }
        let problem = WeightProblem {
            y_hat: y_hat_mat,
            y: ys[t - 1].clone(),
            kappa: server.kappa,
            eta: server.eta,
        };
        let sol =
            solve_mixture_weights(&problem).map_err(|source| HarnessError::Server { t, source })?;
        ws.push(sol.w);
        timing.server_s = tic.elapsed().as_secs_f64();

        // Phase 3: game synchronization on the trailing window.
        let mut synced = false;
        if cfg.mode == Mode::Game && t % game.sync_period == 0 && t >= 2 {
            let tic = Instant::now();
            sync_step(cfg, &dims, &game, &mut agents, &xs, &ys, &ws, t)
                .map_err(|source| HarnessError::Sync { t, source })?;
            timing.sync_s = tic.elapsed().as_secs_f64();
            synced = true;
        }

        // Phase 4: ensemble prediction, then the target is revealed.
        let w_t = &ws[t - 1];
        let mut prediction = DVector::zeros(dims.d_y);
        for (i, agent) in agents.iter().enumerate() {
            prediction += w_t[i] * &agent.yh_hist[t];
        }
        let y_true = &ds.records[t].y;
        let sq_err: Vec<f64> = (0..dims.d_y)
            .map(|k| (prediction[k] - y_true[k]).powi(2))
            .collect();
        steps.push(StepRecord {
            t,
            y: y_true.iter().copied().collect(),
            agents: agents
                .iter()
                .map(|a| a.yh_hist[t].iter().copied().collect())
                .collect(),
            w: w_t.iter().copied().collect(),
            prediction: prediction.iter().copied().collect(),
            sq_err,
            synced,
            timing,
        });
        ys.push(y_true.clone());
    }

    let total_runtime_s = run_start.elapsed().as_secs_f64();
    let mse = steps
        .iter()
        .map(|s| s.sq_err.iter().sum::<f64>())
        .sum::<f64>()
        / steps.len() as f64;
    let sync_count = steps.iter().filter(|s| s.synced).count();
    let sync_time_s: f64 = steps.iter().map(|s| s.timing.sync_s).sum();
    let summary = RunSummary {
        mse,
        steps: steps.len(),
        sync_count,
        mean_sync_time_s: if sync_count > 0 {
            sync_time_s / sync_count as f64
        } else {
            0.0
        },
        total_runtime_s,
        agent_time_s: steps.iter().map(|s| s.timing.agent_s).sum(),
        server_time_s: steps.iter().map(|s| s.timing.server_s).sum(),
        sync_time_s,
        config: cfg.clone(),
    };
    Ok(RunOutput { steps, summary })
}

/// Solve the game over the trailing window ending at step `t-1` and
/// overwrite the agents' decoders and base predictions with the
/// equilibrium correction.
#[allow(clippy::too_many_arguments)]
fn sync_step(
    cfg: &RunConfig,
    dims: &Dims,
    game: &GameConfig,
    agents: &mut [AgentRuntime],
    xs: &[&DVector<f64>],
    ys: &[DVector<f64>],
    ws: &[DVector<f64>],
    t: usize,
) -> Result<(), NashError> {
    let tg = game.horizon.min(t - 1);
    // Window-internal stage h covers the transition to prediction index
    // t - tg + h; its latent is z_hist[t - tg + h], its weights were
    // computed one step earlier (ws index t - tg + h - 1), and its target
    // is ys[t - tg + h].
    let base = t - tg;
    let window = GameWindow {
        targets: (0..=tg).map(|h| ys[base - 1 + h].clone()).collect(),
        weights: (0..tg).map(|h| ws[base - 1 + h].clone()).collect(),
        latents: (0..tg)
            .map(|h| agents.iter().map(|a| a.z_hist[base + h].clone()).collect())
            .collect(),
        eta: cfg.eta,
    };

    let coeffs = match cfg.encoder {
        EncoderChoice::Deterministic => backward_pass(
            &window,
            dims,
            &game.alphas,
            &game.gammas,
            &mut MomentPlan::Deterministic,
        )?,
        EncoderChoice::Rfn => {
            let pre: Vec<Vec<RectGaussParams>> = (0..tg)
                .map(|h| {
                    agents
                        .iter()
                        .map(|a| RectGaussParams {
                            a: a.params
                                .pre_activation(xs[base + h])
                                .expect("validated dims"),
                            sigma: a.params.sigma,
                        })
                        .collect()
                })
                .collect();
            let coeffs = backward_pass(
                &window,
                dims,
                &game.alphas,
                &game.gammas,
                &mut MomentPlan::Rfn(&pre),
            )?;
            coeffs
        }
        EncoderChoice::Esn => {
            let seed = cfg.seed;
            let agents_ref = &*agents;
            let mut plan = MomentPlan::MonteCarlo {
                n_samples: game.mc_samples,
                draw: Box::new(move |h, k| {
                    agents_ref
                        .iter()
                        .enumerate()
                        .map(|(i, a)| {
                            let mut r = rng::stream(
                                seed,
                                &[TAG_MC, t as u64, h as u64, i as u64, k as u64],
                            );
                            a.params
                                .encode(xs[base + h], &a.z_hist[base + h - 1], &mut r)
                                .expect("validated dims")
                        })
                        .collect()
                }),
            };
            backward_pass(&window, dims, &game.alphas, &game.gammas, &mut plan)?
        }
    };

    let init = match cfg.sync_init {
        SyncInit::Target => window.target_init(dims),
        SyncInit::Agent => {
            let mut y0 = DVector::zeros(dims.stacked_y());
            for (i, a) in agents.iter().enumerate() {
                y0.rows_mut(i * dims.d_y, dims.d_y)
                    .copy_from(&a.yh_hist[base - 1]);
            }
            y0
        }
    };
    let sol = forward_rollout(&coeffs, &window, &init)?;
    let beta_sync = &sol.beta[tg - 1];
    let y_sync = &sol.y_hat[tg];

    for (i, agent) in agents.iter_mut().enumerate() {
        agent.beta = beta_sync.rows(i * dims.d_z, dims.d_z).into_owned();
        let base_y = y_sync.rows(i * dims.d_y, dims.d_y).into_owned();
        agent.yh_hist[t - 1] = base_y.clone();
        let z_t = agent
            .params
            .encode(xs[t], &agent.z_hist[t - 1], &mut agent.path_rng)
            .expect("validated dims");
        let corrected = &base_y + &z_t * &agent.beta;
        agent.z_hist[t] = z_t;
        agent.yh_hist[t] = corrected;
    }
    Ok(())
}

/// Canonical line-delimited JSON for step records (stable field order; no
/// timing fields, so identical runs serialize byte-identically).
pub fn steps_to_jsonl(steps: &[StepRecord]) -> String {
    let mut out = String::new();
    for s in steps {
        out.push_str(&serde_json::to_string(s).expect("step record serializes"));
        out.push('\n');
    }
    out
}

/// Parse records written by [`steps_to_jsonl`].
pub fn steps_from_jsonl(text: &str) -> Result<Vec<StepRecord>, HarnessError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| HarnessError::Misaligned(format!("bad JSONL: {e}")))
        })
        .collect()
}

/// One grid cell: the overridden axes plus per-seed outcomes.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub d_z: usize,
    pub client_t: usize,
    pub game_t: usize,
    pub tau: usize,
    pub results: Vec<SeedResult>,
    /// Mean MSE over seeds; absent if any seed failed.
    pub mean_mse: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mse: Option<f64>,
    pub error: Option<String>,
    pub runtime_total_s: f64,
    pub runtime_per_sync_s: f64,
}

/// Cartesian-product axes for [`grid_search`]; empty axes fall back to the
/// base config's value.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub alphas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub d_zs: Vec<usize>,
    pub client_ts: Vec<usize>,
    pub game_ts: Vec<usize>,
    pub taus: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Index of the best cell by mean MSE, if any cell fully succeeded.
    pub best: Option<usize>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Full Cartesian sweep over the axes, every cell averaged over `seeds`.
/// Individual cell failures are recorded, not fatal. Cells run in
/// parallel; results are deterministic regardless of scheduling.
pub fn grid_search(base: &RunConfig, axes: &GridAxes, seeds: &[u64]) -> GridResult {
    let mut cells: Vec<RunConfig> = Vec::new();
    for &alpha in &axis(&axes.alphas, base.alpha) {
        for &gamma in &axis(&axes.gammas, base.gamma) {
            for &sigma in &axis(&axes.sigmas, base.sigma) {
                for &d_z in &axis(&axes.d_zs, base.d_z) {
                    for &client_t in &axis(&axes.client_ts, base.client_t) {
                        for &game_t in &axis(&axes.game_ts, base.game_t) {
                            for &tau in &axis(&axes.taus, base.tau) {
                                let mut c = base.clone();
                                c.alpha = alpha;
                                c.gamma = gamma;
                                c.sigma = sigma;
                                c.d_z = d_z;
                                c.client_t = client_t;
                                c.game_t = game_t;
                                c.tau = tau;
                                cells.push(c);
                            }
                        }
                    }
                }
            }
        }
    }

    let evaluated: Vec<GridCell> = cells
        .par_iter()
        .map(|c| {
            let results: Vec<SeedResult> = seeds
                .iter()
                .map(|&seed| {
                    let mut cs = c.clone();
                    cs.seed = seed;
                    match run_online(&cs) {
                        Ok(out) => SeedResult {
                            seed,
                            mse: Some(out.summary.mse),
                            error: None,
                            runtime_total_s: out.summary.total_runtime_s,
                            runtime_per_sync_s: out.summary.mean_sync_time_s,
                        },
                        Err(e) => SeedResult {
                            seed,
                            mse: None,
                            error: Some(e.to_string()),
                            runtime_total_s: 0.0,
                            runtime_per_sync_s: 0.0,
                        },
                    }
                })
                .collect();
            let mean_mse = if results.iter().all(|r| r.mse.is_some_and(|m| m.is_finite())) {
                Some(results.iter().map(|r| r.mse.unwrap()).sum::<f64>() / results.len() as f64)
            } else {
                None
            };
            GridCell {
                alpha: c.alpha,
                gamma: c.gamma,
                sigma: c.sigma,
                d_z: c.d_z,
                client_t: c.client_t,
                game_t: c.game_t,
                tau: c.tau,
                results,
                mean_mse,
            }
        })
        .collect();

    let best = evaluated
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.mean_mse.map(|m| (i, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    GridResult {
        cells: evaluated,
        best,
    }
}

/// One row of a sweep table (long format, one row per value and seed).
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: f64,
    pub seed: u64,
    pub mse: Option<f64>,
    pub runtime_total_s: f64,
    pub runtime_per_sync_s: f64,
}

/// Per-value summary of a look-back sweep: min MSE across seeds, with
/// values excluded entirely when no seed reached MSE < 1.
#[derive(Debug, Clone, Serialize)]
pub struct LookbackSummary {
    pub game_t: usize,
    pub min_mse: Option<f64>,
    pub excluded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LookbackSweep {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<LookbackSummary>,
}

/// Sweep the game look-back horizon.
pub fn sweep_lookback(base: &RunConfig, values: &[usize], seeds: &[u64]) -> LookbackSweep {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &game_t in values {
        let mut best: Option<f64> = None;
        let mut any_stable = false;
        for &seed in seeds {
            let mut c = base.clone();
            c.game_t = game_t;
            c.seed = seed;
            c.mode = Mode::Game;
            let (mse, total, per_sync) = match run_online(&c) {
                Ok(out) => (
                    Some(out.summary.mse),
                    out.summary.total_runtime_s,
                    out.summary.mean_sync_time_s,
                ),
                Err(_) => (None, 0.0, 0.0),
            };
            if let Some(m) = mse {
                if m.is_finite() {
                    if m < 1.0 {
                        any_stable = true;
                    }
                    best = Some(best.map_or(m, |b: f64| b.min(m)));
                }
            }
            rows.push(SweepRow {
                axis: game_t as f64,
                seed,
                mse,
                runtime_total_s: total,
                runtime_per_sync_s: per_sync,
            });
        }
        summary.push(LookbackSummary {
            game_t,
            min_mse: if any_stable { best } else { None },
            excluded: !any_stable,
        });
    }
    LookbackSweep { rows, summary }
}

#[derive(Debug, Clone, Serialize)]
pub struct SyncFreqSummary {
    pub tau: usize,
    pub mean_mse: Option<f64>,
    pub sync_count: usize,
    pub total_sync_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SyncFreqSweep {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SyncFreqSummary>,
}

/// Sweep the synchronization period. `tau = 1` reproduces plain game mode
/// exactly (same seeds, same draws).
pub fn sweep_sync_frequency(base: &RunConfig, taus: &[usize], seeds: &[u64]) -> SyncFreqSweep {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &tau in taus {
        let mut mses = Vec::new();
        let mut sync_count = 0usize;
        let mut total_sync = 0.0;
        for &seed in seeds {
            let mut c = base.clone();
            c.tau = tau;
            c.seed = seed;
            c.mode = Mode::Game;
            match run_online(&c) {
                Ok(out) => {
                    mses.push(out.summary.mse);
                    sync_count = out.summary.sync_count;
                    total_sync += out.summary.sync_time_s;
                    rows.push(SweepRow {
                        axis: tau as f64,
                        seed,
                        mse: Some(out.summary.mse),
                        runtime_total_s: out.summary.total_runtime_s,
                        runtime_per_sync_s: out.summary.mean_sync_time_s,
                    });
                }
                Err(_) => rows.push(SweepRow {
                    axis: tau as f64,
                    seed,
                    mse: None,
                    runtime_total_s: 0.0,
                    runtime_per_sync_s: 0.0,
                }),
            }
        }
        summary.push(SyncFreqSummary {
            tau,
            mean_mse: if mses.is_empty() {
                None
            } else {
                Some(mses.iter().sum::<f64>() / mses.len() as f64)
            },
            sync_count,
            total_sync_time_s: total_sync,
        });
    }
    SyncFreqSweep { rows, summary }
}

/// Wall-time report with the first `warmup` steps excluded from the
/// per-step statistics.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub total_s: f64,
    pub measured_steps: usize,
    pub per_step_s: f64,
    pub agent_s: f64,
    pub server_s: f64,
    pub sync_s: f64,
    pub sync_count: usize,
    pub per_sync_s: f64,
    pub mse: f64,
}

pub fn bench_runtime(cfg: &RunConfig, warmup: usize) -> Result<BenchReport, HarnessError> {
    let out = run_online(cfg)?;
    let measured: Vec<&StepRecord> = out.steps.iter().skip(warmup).collect();
    let agent_s: f64 = measured.iter().map(|s| s.timing.agent_s).sum();
    let server_s: f64 = measured.iter().map(|s| s.timing.server_s).sum();
    let sync_s: f64 = measured.iter().map(|s| s.timing.sync_s).sum();
    let sync_count = measured.iter().filter(|s| s.synced).count();
    Ok(BenchReport {
        total_s: out.summary.total_runtime_s,
        measured_steps: measured.len(),
        per_step_s: if measured.is_empty() {
            0.0
        } else {
            (agent_s + server_s + sync_s) / measured.len() as f64
        },
        agent_s,
        server_s,
        sync_s,
        sync_count,
        per_sync_s: if sync_count > 0 {
            sync_s / sync_count as f64
        } else {
            0.0
        },
        mse: out.summary.mse,
    })
}

/// Per-step, per-dimension ratios of no-game to game squared errors.
#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub t: usize,
    /// `inf` encodes a zero game error against a nonzero no-game error.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioSeries {
    pub rows: Vec<RatioRow>,
    /// Fraction of (step, dimension) pairs where the game wins (> 1).
    pub frac_above_one: f64,
}

/// Ratio `(no_game_err)^2 / (game_err)^2` per step and dimension.
/// Both zero maps to 1; game exactly zero with no-game nonzero maps to
/// `+inf`.
pub fn compute_error_ratio(
    game: &[StepRecord],
    no_game: &[StepRecord],
) -> Result<RatioSeries, HarnessError> {
    if game.len() != no_game.len() {
        return Err(HarnessError::Misaligned(format!(
            "game has {} steps, no-game has {}",
            game.len(),
            no_game.len()
        )));
    }
    let mut rows = Vec::with_capacity(game.len());
    let mut above = 0usize;
    let mut total = 0usize;
    for (g, n) in game.iter().zip(no_game) {
        if g.t != n.t || g.sq_err.len() != n.sq_err.len() {
            return Err(HarnessError::Misaligned(format!(
                "step mismatch at t = {} vs {}",
                g.t, n.t
            )));
        }
        let ratios: Vec<f64> = g
            .sq_err
            .iter()
            .zip(&n.sq_err)
            .map(|(&ge, &ne)| {
                if ge == 0.0 && ne == 0.0 {
                    1.0
                } else if ge == 0.0 {
                    f64::INFINITY
                } else {
                    ne / ge
                }
            })
            .collect();
        for r in &ratios {
            total += 1;
            if *r > 1.0 {
                above += 1;
            }
        }
        rows.push(RatioRow { t: g.t, ratios });
    }
    Ok(RatioSeries {
        rows,
        frac_above_one: if total > 0 {
            above as f64 / total as f64
        } else {
            0.0
        },
    })
}

/// Sweep rows as CSV with the standard header.
pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,seed,mse,runtime_total_s,runtime_per_sync_s\n");
    for r in rows {
        let mse = r.mse.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.axis, r.seed, mse, r.runtime_total_s, r.runtime_per_sync_s
        ));
    }
    out
}

/// Grid cells as CSV, one row per cell and seed.
pub fn grid_to_csv(grid: &GridResult) -> String {
    let mut out = String::from(
        "alpha,gamma,sigma,d_z,client_t,game_t,tau,seed,mse,runtime_total_s,runtime_per_sync_s,error\n",
    );
    for c in &grid.cells {
        for r in &c.results {
            let mse = r.mse.map(|m| m.to_string()).unwrap_or_default();
            let err = r.error.clone().unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.alpha,
                c.gamma,
                c.sigma,
                c.d_z,
                c.client_t,
                c.game_t,
                c.tau,
                r.seed,
                mse,
                r.runtime_total_s,
                r.runtime_per_sync_s,
                err
            ));
        }
    }
    out
}

/// Ratio series as CSV; infinite ratios are written as `inf`.
pub fn ratios_to_csv(series: &RatioSeries) -> String {
    let dims = series.rows.first().map_or(0, |r| r.ratios.len());
    let mut header = String::from("t");
    for k in 0..dims {
        header.push_str(&format!(",ratio_{k}"));
    }
    header.push('\n');
    let mut out = header;
    for row in &series.rows {
        out.push_str(&row.t.to_string());
        for r in &row.ratios {
            if r.is_infinite() {
                out.push_str(",inf");
            } else {
                out.push_str(&format!(",{r}"));
            }
        }
        out.push('\n');
    }
    out
}
