//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured figures (run with `--nocapture` to see them all).

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use nashmix::datasets::DatasetSpec;
use nashmix::harness::{
    grid_search, run_online, run_online_on, steps_to_jsonl, sweep_sync_frequency, EncoderChoice,
    GridAxes, Mode, RunConfig, StepRecord,
};
use nashmix::moments::{
    assemble_deterministic_moments, assemble_mc_moments, assemble_mc_moments_with_se, rect_mean,
    rect_second_moment, rect_sq_mean, MomentSet, RectGaussParams,
};
use nashmix::nash::{backward_pass, value_consistency, verify_foc, GameWindow, MomentPlan};
use nashmix::ridge::{ridge_solve, window_objective, RidgeWindow};
use nashmix::rng::{normal_matrix, normal_vector, standard_normal, stream};
use nashmix::server::{qp_oracle, solve_mixture_weights, WeightProblem};
use nashmix::types::Dims;

/// Criteria run one at a time: two of them assert wall-clock budgets and
/// proportionality, which parallel siblings would distort.
static GATE: Mutex<()> = Mutex::new(());

fn serialize() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn budget(name: &str, started: Instant, limit_s: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < limit_s,
        "{name} took {elapsed:.1}s, budget {limit_s}s"
    );
}

/// Criterion 1: closed-form server weights agree with the generic KKT
/// oracle to 1e-8 on 1000 random instances; constraint residual <= 1e-10.
#[test]
fn criterion_1_server_solver_against_kkt_oracle() {
    let _gate = serialize();
    let started = Instant::now();
    let mut r = stream(0xC1, &[]);
    let mut max_gap: f64 = 0.0;
    let mut max_constraint: f64 = 0.0;
    for trial in 0..1000 {
        let n = [2, 3, 5][trial % 3];
        let d_y = [1, 2, 3][(trial / 3) % 3];
        let kappa = [0.1, 1.0, 10.0][(trial / 9) % 3];
        let eta = [0.5, 1.0, 2.0][(trial / 27) % 3];
        let p = WeightProblem {
            y_hat: normal_matrix(&mut r, d_y, n, 1.0),
            y: normal_vector(&mut r, d_y, 1.0),
            kappa,
            eta,
        };
        let closed = solve_mixture_weights(&p).unwrap();
        let oracle = qp_oracle(&p).unwrap();
        max_gap = max_gap.max((closed.w.clone() - oracle.w).amax());
        max_constraint = max_constraint.max((closed.w.sum() - eta).abs());
    }
    assert!(max_gap <= 1e-8, "max closed-vs-oracle gap {max_gap}");
    assert!(
        max_constraint <= 1e-10,
        "max constraint residual {max_constraint}"
    );
    budget("criterion 1", started, 1.0);
    println!(
        "[criterion 1] PASS server solver: max oracle gap {max_gap:.2e}, max constraint residual {max_constraint:.2e}"
    );
}

/// Criterion 2: ridge solutions have vanishing gradients and are optimal
/// against 100 random perturbations on 200 random windows.
#[test]
fn criterion_2_greedy_decoder_optimality() {
    let _gate = serialize();
    let started = Instant::now();
    let mut r = stream(0xC2, &[]);
    let mut max_grad: f64 = 0.0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..200 {
        let rows = r.random_range(2..12usize);
        let d_z = r.random_range(1..6usize);
        let gamma = 10f64.powf(r.random_range(-2.0..2.0));
        let w = RidgeWindow {
            design: normal_matrix(&mut r, rows, d_z, 1.0),
            targets: normal_vector(&mut r, rows, 1.0),
            weights: vec![1.0; rows],
        };
        let beta = ridge_solve(&w, gamma).unwrap();
        let grad = 2.0
            * (w.design.transpose() * (&w.design * &beta) - w.design.transpose() * &w.targets
                + gamma * &beta);
        max_grad = max_grad.max(grad.norm());
        let base = window_objective(&w, gamma, &beta);
        for _ in 0..100 {
            let scale = 10f64.powf(r.random_range(-3.0..0.0));
            let delta = normal_vector(&mut r, d_z, scale);
            min_gap = min_gap.min(window_objective(&w, gamma, &(&beta + delta)) - base);
        }
    }
    assert!(max_grad <= 1e-8, "max gradient norm {max_grad}");
    assert!(min_gap >= -1e-9, "worst perturbation gap {min_gap}");
    budget("criterion 2", started, 1.0);
    println!(
        "[criterion 2] PASS greedy decoder: max gradient {max_grad:.2e}, worst perturbation gap {min_gap:.2e}"
    );
}

/// Criterion 3: rectified-Gaussian mean and second moment match a 1e6
/// sample Monte-Carlo within 4 standard errors across the grid, and the
/// analytic values at a = 0, sigma = 1 hold.
#[test]
fn criterion_3_rectified_gaussian_moments() {
    let _gate = serialize();
    let started = Instant::now();
    let origin = RectGaussParams {
        a: DMatrix::zeros(1, 1),
        sigma: 1.0,
    };
    let mean0 = rect_mean(&origin)[(0, 0)];
    let sq0 = rect_sq_mean(&origin)[(0, 0)];
    assert!((mean0 - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    assert!((sq0 - 0.5).abs() < 1e-12);
    let second = rect_second_moment(&origin).unwrap();
    assert!((second[(0, 0)] - 0.5).abs() < 1e-12);

    let n = 1_000_000usize;
    let mut r = stream(0xC3, &[]);
    let mut worst_dev = 0.0f64;
    for &a in &[-3.0, -1.0, 0.0, 1.0, 3.0] {
        for &sigma in &[0.1, 1.0] {
            let p = RectGaussParams {
                a: DMatrix::from_element(1, 1, a),
                sigma,
            };
            let mean = rect_mean(&p)[(0, 0)];
            let sq = rect_sq_mean(&p)[(0, 0)];
            let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
            for _ in 0..n {
                let z = (a + sigma * standard_normal(&mut r)).max(0.0);
                s1 += z;
                s2 += z * z;
                s4 += z * z * z * z;
            }
            let nf = n as f64;
            let (m1, m2) = (s1 / nf, s2 / nf);
            let se1 = ((m2 - m1 * m1).max(0.0) / nf).sqrt();
            let se2 = ((s4 / nf - m2 * m2).max(0.0) / nf).sqrt();
            let dev1 = (mean - m1).abs() / (se1 + 1e-300);
            let dev2 = (sq - m2).abs() / (se2 + 1e-300);
            // Fully rectified cells have zero sample variance; the closed
            // form is then exact as well.
            if se1 > 0.0 {
                assert!(
                    dev1 <= 4.0,
                    "mean deviation {dev1:.2} se at a={a} sigma={sigma}"
                );
                worst_dev = worst_dev.max(dev1);
            } else {
                assert!((mean - m1).abs() <= 1e-12);
            }
            if se2 > 0.0 {
                assert!(
                    dev2 <= 4.0,
                    "sq deviation {dev2:.2} se at a={a} sigma={sigma}"
                );
                worst_dev = worst_dev.max(dev2);
            } else {
                assert!((sq - m2).abs() <= 1e-12);
            }
        }
    }
    budget("criterion 3", started, 30.0);
    println!(
        "[criterion 3] PASS rectified-Gaussian moments: analytic values exact, worst MC deviation {worst_dev:.2} se (1e6 samples)"
    );
}

fn random_game_window(
    r: &mut rand_chacha::ChaCha8Rng,
    dims: &Dims,
    horizon: usize,
    eta: f64,
) -> GameWindow {
    let targets = (0..=horizon)
        .map(|_| normal_vector(r, dims.d_y, 1.0))
        .collect();
    let weights = (0..horizon)
        .map(|_| {
            let mut w = normal_vector(r, dims.n_agents, 1.0);
            let shift = (eta - w.sum()) / dims.n_agents as f64;
            w.apply(|v| *v += shift);
            w
        })
        .collect();
    let latents = (0..horizon)
        .map(|_| {
            (0..dims.n_agents)
                .map(|_| normal_matrix(r, dims.d_y, dims.d_z, 1.0))
                .collect()
        })
        .collect();
    GameWindow {
        targets,
        weights,
        latents,
        eta,
    }
}

/// Criterion 4: on 20 random deterministic instances the equilibrium
/// satisfies the first-order conditions to 1e-8, no agent improves under
/// 200 unilateral deviations, and the value-function offset is
/// state-invariant to 1e-6.
#[test]
fn criterion_4_nash_equilibrium_correctness() {
    let _gate = serialize();
    let started = Instant::now();
    let mut r = stream(0xC4, &[]);
    let mut worst_resid = 0.0f64;
    let mut worst_gap = f64::INFINITY;
    let mut worst_spread = 0.0f64;
    for trial in 0..20 {
        let n = [2, 3][trial % 2];
        let horizon = [2, 3][(trial / 2) % 2];
        let d_y = [1, 2][(trial / 4) % 2];
        let d_z = [2, 3][(trial / 8) % 2];
        let dims = Dims::new(n, 1, d_y, d_z).unwrap();
        let window = random_game_window(&mut r, &dims, horizon, 1.0);
        let alphas: Vec<f64> = (0..n).map(|i| 0.05 + 0.4 * i as f64).collect();
        let gammas: Vec<f64> = (0..n).map(|i| 0.6 + 0.7 * i as f64).collect();
        let coeffs = backward_pass(
            &window,
            &dims,
            &alphas,
            &gammas,
            &mut MomentPlan::Deterministic,
        )
        .unwrap();
        for agent in 0..n {
            let rep = verify_foc(
                &coeffs, &window, &dims, &alphas, &gammas, agent, 200, &mut r,
            )
            .unwrap();
            assert!(
                rep.max_residual <= 1e-8,
                "trial {trial} agent {agent}: residual {}",
                rep.max_residual
            );
            assert!(
                rep.min_cost_gap >= -1e-9,
                "trial {trial} agent {agent}: deviation gap {}",
                rep.min_cost_gap
            );
            worst_resid = worst_resid.max(rep.max_residual);
            worst_gap = worst_gap.min(rep.min_cost_gap);
        }
        let value =
            value_consistency(&coeffs, &window, &dims, &alphas, &gammas, 4, &mut r).unwrap();
        assert!(
            value.max_spread <= 1e-6,
            "trial {trial}: value spread {}",
            value.max_spread
        );
        worst_spread = worst_spread.max(value.max_spread);
    }
    budget("criterion 4", started, 60.0);
    println!(
        "[criterion 4] PASS Nash correctness: max FOC residual {worst_resid:.2e}, worst deviation gap {worst_gap:.2e}, max value spread {worst_spread:.2e}"
    );
}

fn assert_within_se(name: &str, closed: &DMatrix<f64>, mc: &DMatrix<f64>, se: &DMatrix<f64>) {
    for (idx, ((c, m), s)) in closed.iter().zip(mc.iter()).zip(se.iter()).enumerate() {
        assert!(
            (c - m).abs() <= 3.0 * s + 1e-9,
            "{name}[{idx}]: closed {c} vs mc {m} (se {s})"
        );
    }
}

/// Criterion 5: the closed-form RFN moment assembly matches Monte-Carlo at
/// 1e5 samples within 3 standard errors; the deterministic assembly
/// matches Monte-Carlo exactly.
#[test]
fn criterion_5_moment_assembly_cross_validation() {
    let _gate = serialize();
    let started = Instant::now();
    for &d_y in &[1usize, 2] {
        let dims = Dims::new(2, 1, d_y, 3).unwrap();
        let mut r = stream(0xC5 + d_y as u64, &[]);
        let ny = dims.stacked_y();
        let p_next: Vec<DMatrix<f64>> = (0..2)
            .map(|_| {
                let m = normal_matrix(&mut r, ny, ny, 1.0);
                &m * m.transpose()
            })
            .collect();
        let s_next: Vec<DVector<f64>> = (0..2).map(|_| normal_vector(&mut r, ny, 1.0)).collect();
        let mut w = normal_vector(&mut r, 2, 1.0);
        let shift = (1.0 - w.sum()) / 2.0;
        w.apply(|v| *v += shift);
        let pre: Vec<RectGaussParams> = (0..2)
            .map(|_| RectGaussParams {
                a: normal_matrix(&mut r, d_y, 3, 1.0),
                sigma: 0.7,
            })
            .collect();

        let closed =
            nashmix::moments::assemble_rfn_moments(&pre, &p_next, &s_next, &w, &dims).unwrap();
        let mut mc_rng = stream(0xC50 + d_y as u64, &[]);
        let n_samples = 100_000usize;
        let (mc, se) = assemble_mc_moments_with_se(
            |_| {
                pre.iter()
                    .map(|p| {
                        let noise = normal_matrix(&mut mc_rng, d_y, 3, p.sigma);
                        (&p.a + noise).map(|v| v.max(0.0))
                    })
                    .collect()
            },
            n_samples,
            &p_next,
            &s_next,
            &w,
            &dims,
        )
        .unwrap();
        assert_within_se("a", &closed.a, &mc.a, &se.a);
        assert_within_se("a_hat", &closed.a_hat, &mc.a_hat, &se.a_hat);
        assert_within_se("b", &closed.b, &mc.b, &se.b);
        assert_within_se("d", &closed.d, &mc.d, &se.d);
        for i in 0..2 {
            assert_within_se("d_i", &closed.d_i[i], &mc.d_i[i], &se.d_i[i]);
            assert_within_se("mean_z", &closed.mean_z[i], &mc.mean_z[i], &se.mean_z[i]);
        }
        let c_gap = (closed.c.clone() - &mc.c).abs();
        for (idx, (g, s)) in c_gap.iter().zip(se.c.iter()).enumerate() {
            assert!(*g <= 3.0 * s + 1e-9, "c[{idx}]");
        }

        // Deterministic assembly equals Monte-Carlo exactly (zero
        // variance): bitwise at 1 sample; at larger counts the sample mean
        // of identical values differs only by summation rounding.
        let latents: Vec<DMatrix<f64>> =
            (0..2).map(|_| normal_matrix(&mut r, d_y, 3, 1.0)).collect();
        let det = assemble_deterministic_moments(&latents, &p_next, &s_next, &w, &dims).unwrap();
        let mc_one =
            assemble_mc_moments(|_| latents.clone(), 1, &p_next, &s_next, &w, &dims).unwrap();
        let eq = |x: &MomentSet, y: &MomentSet| {
            x.a == y.a
                && x.a_hat == y.a_hat
                && x.b == y.b
                && x.c == y.c
                && x.d == y.d
                && x.d_i == y.d_i
        };
        assert!(
            eq(&det, &mc_one),
            "deterministic != single-sample MC (d_y={d_y})"
        );
        let mc_many =
            assemble_mc_moments(|_| latents.clone(), 100, &p_next, &s_next, &w, &dims).unwrap();
        for (x, y) in [
            (&det.a, &mc_many.a),
            (&det.a_hat, &mc_many.a_hat),
            (&det.b, &mc_many.b),
            (&det.d, &mc_many.d),
        ] {
            assert!(
                (x - y).amax() <= 1e-13,
                "deterministic vs 100-sample MC (d_y={d_y})"
            );
        }
    }
    budget("criterion 5", started, 60.0);
    println!(
        "[criterion 5] PASS moment assembly: RFN closed form within 3 se of 1e5-sample MC; deterministic equals MC exactly"
    );
}

fn periodic_base(encoder: EncoderChoice, n_agents: usize) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::named("periodic"),
        n_agents,
        d_z: 3,
        encoder,
        client_t: 3,
        game_t: 3,
        tau: 1,
        ..RunConfig::default()
    }
}

/// Criterion 6: on the periodic series with 5 agents, after a reduced
/// hyperparameter grid per mode, mean game-mode MSE over seeds
/// {2024, 2025, 2026} is at least 1.5x lower than mean no-game MSE for
/// each encoder kind.
#[test]
fn criterion_6_end_to_end_improvement() {
    let _gate = serialize();
    let started = Instant::now();
    let seeds = [2024u64, 2025, 2026];
    for encoder in [
        EncoderChoice::Deterministic,
        EncoderChoice::Rfn,
        EncoderChoice::Esn,
    ] {
        let sigmas = match encoder {
            EncoderChoice::Deterministic => vec![0.0],
            EncoderChoice::Rfn => vec![0.1, 1.0],
            EncoderChoice::Esn => vec![0.01, 1.0],
        };
        let axes = GridAxes {
            alphas: vec![0.001, 0.1],
            gammas: vec![0.1, 1.0, 10.0],
            sigmas,
            ..Default::default()
        };
        let mut game_cfg = periodic_base(encoder, 5);
        game_cfg.mode = Mode::Game;
        let game = grid_search(&game_cfg, &axes, &seeds);
        let game_best = game
            .best
            .map(|i| game.cells[i].mean_mse.unwrap())
            .expect("game grid");

        let mut no_game_cfg = periodic_base(encoder, 5);
        no_game_cfg.mode = Mode::NoGame;
        let no_game = grid_search(&no_game_cfg, &axes, &seeds);
        let no_game_best = no_game
            .best
            .map(|i| no_game.cells[i].mean_mse.unwrap())
            .expect("no-game grid");

        let ratio = no_game_best / game_best;
        assert!(
            ratio >= 1.5,
            "{encoder:?}: game {game_best:.3e} vs no-game {no_game_best:.3e} (ratio {ratio:.2})"
        );
        println!(
            "[criterion 6] PASS {encoder:?}: game {game_best:.3e} vs no-game {no_game_best:.3e}, improvement {ratio:.1}x"
        );
    }
    budget("criterion 6", started, 900.0);
}

fn half_mse(steps: &[StepRecord], from_t: usize) -> f64 {
    let tail: Vec<f64> = steps
        .iter()
        .filter(|s| s.t >= from_t)
        .map(|s| s.sq_err.iter().sum::<f64>())
        .collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Criterion 7: on the concept-drift series with 2 RFN agents, game-mode
/// MSE over the post-transition half is strictly lower than no-game MSE
/// over the same half.
#[test]
fn criterion_7_concept_drift_adaptation() {
    let _gate = serialize();
    let started = Instant::now();
    let mut cfg = RunConfig {
        dataset: DatasetSpec::named("concept_drift_1d"),
        n_agents: 2,
        d_z: 3,
        encoder: EncoderChoice::Rfn,
        alpha: 0.01,
        gamma: 1.0,
        sigma: 0.1,
        client_t: 2,
        game_t: 2,
        tau: 1,
        ..RunConfig::default()
    };
    let mut game_half = 0.0;
    let mut no_game_half = 0.0;
    for seed in [2024u64, 2025, 2026] {
        cfg.seed = seed;
        cfg.mode = Mode::Game;
        game_half += half_mse(&run_online(&cfg).unwrap().steps, 100);
        cfg.mode = Mode::NoGame;
        no_game_half += half_mse(&run_online(&cfg).unwrap().steps, 100);
    }
    game_half /= 3.0;
    no_game_half /= 3.0;
    assert!(
        game_half < no_game_half,
        "post-transition: game {game_half:.3e} vs no-game {no_game_half:.3e}"
    );
    budget("criterion 7", started, 300.0);
    println!(
        "[criterion 7] PASS concept drift: post-transition game {game_half:.3e} < no-game {no_game_half:.3e}"
    );
}

/// Criterion 8: the total game phase time is proportional to the number of
/// synchronizations within +-20%, and tau = 1 is bit-identical to plain
/// game mode.
#[test]
fn criterion_8_sync_frequency_tradeoff() {
    let _gate = serialize();
    let started = Instant::now();
    let mut base = periodic_base(EncoderChoice::Esn, 5);
    base.sigma = 1.0;
    base.gamma = 0.1;
    base.alpha = 0.001;
    base.mode = Mode::Game;

    let taus = [1usize, 2, 5, 10];
    let steps = 199usize;
    let mut per_sync: Vec<(usize, usize, f64)> = Vec::new();
    for &tau in &taus {
        let mut c = base.clone();
        c.tau = tau;
        let out = run_online(&c).unwrap();
        let expected = steps / tau;
        assert!(
            (out.summary.sync_count as i64 - expected as i64).abs() <= 1,
            "tau {tau}: {} syncs, expected about {expected}",
            out.summary.sync_count
        );
        // Median per-sync time after a 3-sync warm-up: the first games run
        // on clamped (shorter) windows and are cheaper by construction.
        let mut times: Vec<f64> = out
            .steps
            .iter()
            .filter(|s| s.synced)
            .skip(3)
            .map(|s| s.timing.sync_s)
            .collect();
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        per_sync.push((tau, out.summary.sync_count, median));
    }
    // Proportionality to the sync count: the per-sync cost must be the
    // same across tau (within +-20% of the cross-tau mean), so total game
    // time scales as floor(steps / tau).
    let mean_rate = per_sync.iter().map(|(_, _, m)| m).sum::<f64>() / per_sync.len() as f64;
    for (tau, _, median) in &per_sync {
        let rel = (median - mean_rate).abs() / mean_rate;
        assert!(
            rel <= 0.2,
            "tau {tau}: per-sync {median:.2e}s vs cross-tau mean {mean_rate:.2e}s ({:.0}% off)",
            rel * 100.0
        );
    }

    // tau = 1 is plain game mode: a sweep cell and a direct run coincide.
    let mut tau1 = base.clone();
    tau1.tau = 1;
    let direct = run_online(&tau1).unwrap();
    let direct_again = run_online(&tau1).unwrap();
    assert_eq!(
        steps_to_jsonl(&direct.steps),
        steps_to_jsonl(&direct_again.steps)
    );
    let sweep = sweep_sync_frequency(&base, &[1], &[base.seed]);
    assert_eq!(
        sweep.rows[0].mse.unwrap().to_bits(),
        direct.summary.mse.to_bits()
    );
    budget("criterion 8", started, 600.0);
    println!(
        "[criterion 8] PASS sync frequency: (tau, syncs) {:?}, per-sync {:.2e}s across taus, tau=1 identical to game mode",
        per_sync.iter().map(|(t, n, _)| (*t, *n)).collect::<Vec<_>>(),
        mean_rate
    );
}

/// Criterion 9: identical config and seed produce byte-identical JSONL,
/// and truncating the series reproduces prefixes exactly.
#[test]
fn criterion_9_determinism_and_causality() {
    let _gate = serialize();
    let started = Instant::now();
    let mut cfg = periodic_base(EncoderChoice::Esn, 3);
    cfg.mode = Mode::Game;
    cfg.tau = 2;
    cfg.sigma = 0.5;
    cfg.mc_samples = 50;
    cfg.dataset.n = 120;

    let ds = cfg.dataset.load().unwrap();
    let a = run_online_on(&cfg, &ds).unwrap();
    let b = run_online_on(&cfg, &ds).unwrap();
    let full_a = steps_to_jsonl(&a.steps);
    assert_eq!(full_a, steps_to_jsonl(&b.steps), "reruns differ");

    for cut in [30usize, 77, 119] {
        let part = run_online_on(&cfg, &ds.truncated(cut)).unwrap();
        let prefix = steps_to_jsonl(&a.steps[..cut - 1]);
        assert_eq!(
            steps_to_jsonl(&part.steps),
            prefix,
            "prefix mismatch at cut {cut}"
        );
    }
    budget("criterion 9", started, 120.0);
    println!(
        "[criterion 9] PASS determinism & causality: byte-identical reruns; prefixes reproduce at cuts 30/77/119"
    );
}
