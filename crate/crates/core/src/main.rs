//! Command-line front end: single runs, hyperparameter grids, ablation
//! sweeps, benchmarking, and error-ratio comparison of paired runs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nashmix::datasets::DatasetSpec;
use nashmix::harness::{
    bench_runtime, compute_error_ratio, grid_search, grid_to_csv, ratios_to_csv, run_online,
    steps_from_jsonl, steps_to_jsonl, sweep_lookback, sweep_rows_to_csv, sweep_sync_frequency,
    EncoderChoice, GridAxes, Mode, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "nashmix",
    about = "Online mixture-of-experts prediction with game-theoretic synchronization",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One online run; writes steps.jsonl and summary.json.
    Run(RunArgs),
    /// Cartesian hyperparameter sweep; writes grid.csv and grid.json.
    Grid(GridArgs),
    /// Game look-back sweep; writes lookback.csv and lookback.json.
    SweepLookback(SweepArgs),
    /// Synchronization-period sweep; writes sync_freq.csv and sync_freq.json.
    SweepSyncFreq(SweepArgs),
    /// Runtime benchmark with warm-up exclusion; writes bench.json.
    Bench(BenchArgs),
    /// Per-step squared-error ratios of a paired game/no-game run.
    Ratio(RatioArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset name: periodic|logistic|concept_drift|concept_drift_1d|boc|ett|brownian_sum.
    #[arg(long)]
    dataset: Option<String>,
    /// CSV path for file-backed datasets (boc, ett).
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// game | no_game.
    #[arg(long)]
    mode: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of agents.
    #[arg(long)]
    agents: Option<usize>,
    /// Encoder kind: deterministic | rfn | esn.
    #[arg(long)]
    encoder: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// JSON file with the grid axes (keys: alphas, gammas, sigmas, d_zs,
    /// client_ts, game_ts, taus); omitted axes keep the base value.
    #[arg(long)]
    axes: Option<PathBuf>,
    /// Seeds to average each cell over.
    #[arg(long, value_delimiter = ',', default_values_t = [2024u64, 2025, 2026])]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Swept values (game look-back lengths or sync periods).
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [2024u64, 2025, 2026])]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Warm-up steps excluded from per-step statistics.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
}

#[derive(Args)]
struct RatioArgs {
    /// steps.jsonl of the game run.
    #[arg(long)]
    game: PathBuf,
    /// steps.jsonl of the no-game run.
    #[arg(long)]
    no_game: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(name) = &args.dataset {
        let mut spec = DatasetSpec::named(name);
        // Keep file-backed parameters from the config when only the name
        // was repeated on the command line.
        if cfg.dataset.kind == *name {
            spec = cfg.dataset.clone();
        }
        cfg.dataset = spec;
    }
    if let Some(path) = &args.data_path {
        cfg.dataset.path = Some(path.display().to_string());
    }
    if let Some(mode) = &args.mode {
        cfg.mode = match mode.as_str() {
            "game" => Mode::Game,
            "no_game" => Mode::NoGame,
            other => bail!("unknown mode '{other}' (expected game|no_game)"),
        };
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(agents) = args.agents {
        cfg.n_agents = agents;
    }
    if let Some(encoder) = &args.encoder {
        cfg.encoder = match encoder.as_str() {
            "deterministic" => EncoderChoice::Deterministic,
            "rfn" => EncoderChoice::Rfn,
            "esn" => EncoderChoice::Esn,
            other => bail!("unknown encoder '{other}' (expected deterministic|rfn|esn)"),
        };
    }
    Ok(cfg)
}

fn write(out_dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let path = out_dir.join(name);
    fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run(args) => {
            let cfg = load_config(&args.common)?;
            let out = run_online(&cfg)?;
            let steps = write(&args.common.out, "steps.jsonl", &steps_to_jsonl(&out.steps))?;
            let summary = write(
                &args.common.out,
                "summary.json",
                &serde_json::to_string_pretty(&out.summary)?,
            )?;
            println!(
                "mse {:.6e}  steps {}  syncs {}  -> {}, {}",
                out.summary.mse,
                out.summary.steps,
                out.summary.sync_count,
                steps.display(),
                summary.display()
            );
        }
        Cmd::Grid(args) => {
            let cfg = load_config(&args.common)?;
            let axes: GridAxes = match &args.axes {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading axes {}", path.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing axes {}", path.display()))?
                }
                None => GridAxes::default(),
            };
            let grid = grid_search(&cfg, &axes, &args.seeds);
            write(&args.common.out, "grid.csv", &grid_to_csv(&grid))?;
            write(
                &args.common.out,
                "grid.json",
                &serde_json::to_string_pretty(&grid)?,
            )?;
            match grid.best {
                Some(i) => {
                    let c = &grid.cells[i];
                    println!(
                        "best cell: alpha={} gamma={} sigma={} d_z={} client_t={} game_t={} tau={} mean_mse={:.6e}",
                        c.alpha, c.gamma, c.sigma, c.d_z, c.client_t, c.game_t, c.tau,
                        c.mean_mse.unwrap()
                    );
                }
                None => println!("no cell finished successfully"),
            }
        }
        Cmd::SweepLookback(args) => {
            let cfg = load_config(&args.common)?;
            let sweep = sweep_lookback(&cfg, &args.values, &args.seeds);
            write(
                &args.common.out,
                "lookback.csv",
                &sweep_rows_to_csv(&sweep.rows),
            )?;
            write(
                &args.common.out,
                "lookback.json",
                &serde_json::to_string_pretty(&sweep)?,
            )?;
            for s in &sweep.summary {
                match (&s.min_mse, s.excluded) {
                    (Some(m), false) => println!("game_t {}: min mse {:.6e}", s.game_t, m),
                    _ => println!("game_t {}: excluded (no run reached mse < 1)", s.game_t),
                }
            }
        }
        Cmd::SweepSyncFreq(args) => {
            let cfg = load_config(&args.common)?;
            let sweep = sweep_sync_frequency(&cfg, &args.values, &args.seeds);
            write(
                &args.common.out,
                "sync_freq.csv",
                &sweep_rows_to_csv(&sweep.rows),
            )?;
            write(
                &args.common.out,
                "sync_freq.json",
                &serde_json::to_string_pretty(&sweep)?,
            )?;
            for s in &sweep.summary {
                println!(
                    "tau {}: mean mse {}  syncs {}  sync time {:.3}s",
                    s.tau,
                    s.mean_mse
                        .map(|m| format!("{m:.6e}"))
                        .unwrap_or_else(|| "-".into()),
                    s.sync_count,
                    s.total_sync_time_s
                );
            }
        }
        Cmd::Bench(args) => {
            let cfg = load_config(&args.common)?;
            let report = bench_runtime(&cfg, args.warmup)?;
            write(
                &args.common.out,
                "bench.json",
                &serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "total {:.3}s  per-step {:.3}ms  agent {:.3}s  server {:.3}s  sync {:.3}s ({} syncs, {:.3}ms each)",
                report.total_s,
                report.per_step_s * 1e3,
                report.agent_s,
                report.server_s,
                report.sync_s,
                report.sync_count,
                report.per_sync_s * 1e3,
            );
        }
        Cmd::Ratio(args) => {
            let game = steps_from_jsonl(
                &fs::read_to_string(&args.game)
                    .with_context(|| format!("reading {}", args.game.display()))?,
            )?;
            let no_game = steps_from_jsonl(
                &fs::read_to_string(&args.no_game)
                    .with_context(|| format!("reading {}", args.no_game.display()))?,
            )?;
            let series = compute_error_ratio(&game, &no_game)?;
            write(&args.out, "ratio.csv", &ratios_to_csv(&series))?;
            println!(
                "{} steps; fraction of (step, dim) ratios above 1: {:.3}",
                series.rows.len(),
                series.frac_above_one
            );
        }
    }
    Ok(())
}
