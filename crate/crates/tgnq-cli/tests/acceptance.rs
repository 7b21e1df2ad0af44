//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line with the measured values. The replication experiments are
//! scaled-down surrogates of the reference tables (reduced replicate
//! counts with widened tolerance bands); run times are reported per
//! criterion.

mod common;

use std::io::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgnq::estimator::EstimatorOptions;
use tgnq::metrics::{alignment_maps, clustering_errors};
use tgnq::model::{check_loss, total_loss, Membership, ModelKind, QuantileGrid};
use tgnq::selection::{LambdaRule, SelectionConfig};
use tgnq::sim::{
    gen_memberships, run_replications, ExperimentConfig, NetworkConfig, ParamFunctions,
    ReplicateOutcome, ReplicateStore, Scenario, ScenarioConfig,
};
use tgnq::solver::{solve_qr, QrProblem, SolverOptions};

fn report(line: &str) {
    // Bypass libtest capture so the per-criterion lines always land in the
    // test output.
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").ok();
}

fn check(criterion: &str, passed: bool, details: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    report(&format!("ACCEPTANCE {criterion}: {status} | {details}"));
    assert!(passed, "{criterion} failed: {details}");
}

fn agg(store: &ReplicateStore, metric: &str, tau: Option<f64>) -> f64 {
    store
        .aggregates
        .iter()
        .find(|r| {
            r.metric == metric
                && match (tau, r.tau) {
                    (None, None) => true,
                    (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                    _ => false,
                }
        })
        .unwrap_or_else(|| panic!("aggregate {metric} at {tau:?} missing"))
        .value
}

fn agg_cell(store: &ReplicateStore, metric: &str, g: usize, h: usize) -> f64 {
    store
        .aggregates
        .iter()
        .find(|r| r.metric == metric && r.g == Some(g) && r.h == Some(h))
        .unwrap_or_else(|| panic!("aggregate {metric} at ({g}, {h}) missing"))
        .value
}

#[test]
fn criterion_1_solver_matches_lp_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_001);
    let taus = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let opts = SolverOptions::default();
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let m = rng.random_range(5..=40);
        let q = rng.random_range(1..=5).min(m);
        let mut design = Array2::zeros((m, q));
        for r in 0..m {
            for c in 0..q {
                design[[r, c]] = if c == 0 {
                    1.0
                } else {
                    rng.random_range(-2.0..2.0)
                };
            }
        }
        let response: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = taus[trial % taus.len()];
        let problem = QrProblem::new(design.clone(), response.clone(), tau).unwrap();
        let sol = solve_qr(&problem, &opts);
        let oracle = common::lp_check_loss_minimum(&design, &response, tau);
        let gap = (sol.objective - oracle).abs();
        worst = worst.max(gap);
        assert!(
            gap <= 1e-6,
            "trial {trial}: solver {} vs oracle {} (gap {gap:.3e})",
            sol.objective,
            oracle
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "criterion-1 (solver LP-oracle equivalence)",
        worst <= 1e-6 && elapsed < 10.0,
        &format!("200 instances, worst objective gap {worst:.2e}, runtime {elapsed:.2}s (< 10s)"),
    );
}

fn scenario_experiment(
    scenario: Scenario,
    g0: usize,
    h0: usize,
    n: usize,
    communities: usize,
    t_len: usize,
    taus: Vec<f64>,
    b: usize,
    seed: u64,
) -> ExperimentConfig {
    let scenario_cfg = ScenarioConfig::new(scenario, g0, h0, t_len, seed);
    let network = NetworkConfig::sbm(n, communities, seed);
    let mut config = ExperimentConfig::new(scenario_cfg, network, g0, h0, b, seed);
    config.taus = taus;
    config
}

#[test]
fn criterion_2_scenario1_reference_band() {
    let start = Instant::now();
    let mut config = scenario_experiment(
        Scenario::S1Additive,
        2,
        2,
        100,
        5,
        200,
        vec![0.1, 0.3, 0.5, 0.7, 0.9],
        50,
        22_001,
    );
    config.refine = true;
    let store = run_replications(&config).unwrap();
    let rmse_theta = agg(&store, "rmse_theta", Some(0.5));
    let rho1 = agg(&store, "rho1_chi", None);
    let rho2 = agg(&store, "rho2_chi", None);
    let failed = store.n_failed;
    let elapsed = start.elapsed().as_secs_f64();
    let passed = (0.022..=0.042).contains(&rmse_theta)
        && rho1 <= 0.01
        && rho2 <= 0.01
        && failed == 0;
    check(
        "criterion-2 (Scenario 1 band, N=100 T=200 B=50)",
        passed,
        &format!(
            "RMSE_theta(0.5) = {rmse_theta:.4} in [0.022, 0.042], rho1 = {:.4} <= 0.01, rho2 = {:.4} <= 0.01, failed = {failed}, runtime {elapsed:.0}s",
            rho1, rho2
        ),
    );
}

#[test]
fn criterion_3_scenario2_reference_band() {
    let start = Instant::now();
    let mut config = scenario_experiment(
        Scenario::S2Multiplicative,
        3,
        3,
        200,
        10,
        400,
        vec![0.1, 0.3, 0.5, 0.7, 0.9],
        25,
        23_001,
    );
    config.refine = true;
    config.estimator.n_inits = 2;
    let store = run_replications(&config).unwrap();
    let rmse_theta = agg(&store, "rmse_theta", Some(0.5));
    let rho1 = agg(&store, "rho1_chi", None);
    let rho2 = agg(&store, "rho2_chi", None);
    let failed = store.n_failed;
    let elapsed = start.elapsed().as_secs_f64();
    let passed = (0.026..=0.048).contains(&rmse_theta)
        && rho1 <= 0.01
        && rho2 <= 0.01
        && failed == 0;
    check(
        "criterion-3 (Scenario 2 band, N=200 T=400 B=25)",
        passed,
        &format!(
            "RMSE_theta(0.5) = {rmse_theta:.4} in [0.026, 0.048], rho1 = {:.4} <= 0.01, rho2 = {:.4} <= 0.01, failed = {failed}, runtime {elapsed:.0}s",
            rho1, rho2
        ),
    );
}

#[test]
fn criterion_4_qic_consistency() {
    let start = Instant::now();
    let mut config = scenario_experiment(
        Scenario::S1Additive,
        3,
        3,
        200,
        10,
        400,
        vec![0.1, 0.3, 0.5, 0.7, 0.9],
        25,
        24_001,
    );
    config.refine = false;
    config.selection = Some(SelectionConfig {
        g_range: (2, 4),
        h_range: (2, 4),
        lambda: LambdaRule::PaperDefault,
    });
    config.estimator.n_inits = 2;
    config.estimator.r_max = 5;
    let store = run_replications(&config).unwrap();
    let msr33 = agg_cell(&store, "msr", 3, 3);
    let failed = store.n_failed;
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "criterion-4 (QIC selection, N=200 T=400 grid 2..4 B=25)",
        msr33 >= 0.85 && failed == 0,
        &format!("MSR(3,3) = {msr33:.3} >= 0.85, failed = {failed}, runtime {elapsed:.0}s"),
    );
}

#[test]
fn criterion_5_coverage() {
    let start = Instant::now();
    let mut config = scenario_experiment(
        Scenario::S1Additive,
        2,
        2,
        200,
        10,
        200,
        vec![0.5],
        100,
        25_001,
    );
    config.refine = true;
    config.infer = true;
    let store = run_replications(&config).unwrap();
    // Per-group empirical coverage of the true autoregressive effects.
    let mut counts = vec![(0usize, 0usize); 2];
    for outcome in &store.records {
        if let ReplicateOutcome::Success(rec) = outcome {
            if let Some(inf) = &rec.inference {
                for &(family, g0, _sec, k, covered) in &inf.coverage {
                    if family == 1 && k == 0 {
                        counts[g0].0 += covered as usize;
                        counts[g0].1 += 1;
                    }
                }
            }
        }
    }
    let rates: Vec<f64> = counts
        .iter()
        .map(|&(hit, total)| hit as f64 / total.max(1) as f64)
        .collect();
    let failed = store.n_failed;
    let elapsed = start.elapsed().as_secs_f64();
    let passed = rates.iter().all(|r| (0.90..=0.99).contains(r)) && failed == 0;
    check(
        "criterion-5 (95% CI coverage of nu, N=200 T=200 B=100)",
        passed,
        &format!(
            "coverage per group = [{:.3}, {:.3}] each in [0.90, 0.99], failed = {failed}, runtime {elapsed:.0}s",
            rates[0], rates[1]
        ),
    );
}

#[test]
fn criterion_6_misspecification_ordering() {
    let start = Instant::now();
    let taus = vec![0.1, 0.3, 0.5, 0.7, 0.9];
    let mut stores = Vec::new();
    for kind in [
        ModelKind::General,
        ModelKind::Additive,
        ModelKind::Multiplicative,
    ] {
        let mut config = scenario_experiment(
            Scenario::S1Additive,
            2,
            2,
            100,
            5,
            200,
            taus.clone(),
            20,
            26_001,
        );
        config.refine = true;
        config.kind = kind;
        stores.push(run_replications(&config).unwrap());
    }
    let mut passed = true;
    let mut details = String::new();
    for &tau in &taus {
        let general = agg(&stores[0], "rmse_theta", Some(tau));
        let additive = agg(&stores[1], "rmse_theta", Some(tau));
        let mult = agg(&stores[2], "rmse_theta", Some(tau));
        let ok = mult > additive && additive <= general + 1e-12;
        passed &= ok;
        details.push_str(&format!(
            "tau {tau}: mult {mult:.4} > add {additive:.4} <= gen {general:.4} [{}]; ",
            if ok { "ok" } else { "violated" }
        ));
    }
    let failed: usize = stores.iter().map(|s| s.n_failed).sum();
    passed &= failed == 0;
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "criterion-6 (misspecification ordering, N=100 T=200 B=20)",
        passed,
        &format!("{details}failed = {failed}, runtime {elapsed:.0}s"),
    );
}

#[test]
fn criterion_7_property_suites() {
    let start = Instant::now();
    let mut problems: Vec<String> = Vec::new();

    // Loss-trace monotonicity across 50 seeded fits.
    {
        let fns = ParamFunctions::scenario(Scenario::S1Additive, 2, 2).unwrap();
        for seed in 0..50u64 {
            let net = NetworkConfig::sbm(30, 2, 70_000 + seed).generate().unwrap();
            let g = gen_memberships(30, &[0.5, 0.5], 71_000 + seed).unwrap();
            let h = gen_memberships(30, &[0.4, 0.6], 72_000 + seed).unwrap();
            let panel =
                tgnq::sim::gen_panel(&net, &g, &h, &fns, 50, 100, 73_000 + seed).unwrap();
            let grid = QuantileGrid::new(vec![0.3, 0.7]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(74_000 + seed);
            let init = Membership::new(
                (0..30).map(|_| rng.random_range(0..2)).collect(),
                (0..30).map(|_| rng.random_range(0..2)).collect(),
                2,
                2,
            )
            .unwrap();
            let mut opts = EstimatorOptions::new(2, 2);
            opts.seed = seed;
            let fit = tgnq::estimator::vanilla_fit(&panel, &net, &grid, &opts, &init).unwrap();
            for w in fit.loss_trace.windows(2) {
                if w[1] > w[0] + 1e-10 {
                    problems.push(format!("trace increased at seed {seed}: {:?}", fit.loss_trace));
                }
            }

            // Label-permutation invariance of the loss and the metrics.
            if seed < 5 {
                let permuted_mem = Membership::new(
                    fit.membership.row_labels().iter().map(|&g| 1 - g).collect(),
                    fit.membership.col_labels().iter().map(|&h| 1 - h).collect(),
                    2,
                    2,
                )
                .unwrap();
                let permuted_params = fit.params.permuted(&[1, 0], &[1, 0]);
                let a = total_loss(&panel, &net, &fit.params, &fit.membership, &grid).unwrap();
                let b = total_loss(&panel, &net, &permuted_params, &permuted_mem, &grid).unwrap();
                if (a - b).abs() > 1e-12 {
                    problems.push(format!("loss not relabeling-invariant at seed {seed}"));
                }
                let truth = Membership::new(g.clone(), h.clone(), 2, 2).unwrap();
                let e1 = clustering_errors(&fit.membership, &truth).unwrap();
                let e2 = clustering_errors(&permuted_mem, &truth).unwrap();
                if e1 != e2 {
                    problems.push(format!("metrics not relabeling-invariant at seed {seed}"));
                }
            }
        }
    }

    // Check-loss symmetry identity.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(75_000);
        for _ in 0..2_000 {
            let u: f64 = rng.random_range(-5.0..5.0);
            let tau: f64 = rng.random_range(0.01..0.99);
            let lhs = check_loss(u, tau).unwrap();
            let rhs = check_loss(-u, 1.0 - tau).unwrap();
            if (lhs - rhs).abs() > 1e-12 {
                problems.push(format!("check-loss symmetry violated at u={u}, tau={tau}"));
                break;
            }
        }
    }

    // DGP monotonicity in U: 1000 histories x 11 grid points, zero
    // violations allowed.
    {
        let mut violations = 0usize;
        for scenario in [Scenario::S1Additive, Scenario::S2Multiplicative] {
            let fns = ParamFunctions::scenario(scenario, 3, 3).unwrap();
            let net = NetworkConfig::sbm(40, 4, 76_000).generate().unwrap();
            let g = gen_memberships(40, &[0.3, 0.3, 0.4], 76_001).unwrap();
            let h = gen_memberships(40, &[0.3, 0.3, 0.4], 76_002).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(76_003);
            for _ in 0..500 {
                let y_prev: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..2.0)).collect();
                let x_row: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..2.0)).collect();
                let i = rng.random_range(0..40);
                let mut prev = f64::NEG_INFINITY;
                for step in 0..=10 {
                    let u = step as f64 / 10.0;
                    let v = fns.conditional_value(&net, &g, &h, &y_prev, &x_row, i, u);
                    if v < prev - 1e-12 {
                        violations += 1;
                    }
                    prev = v;
                }
            }
        }
        if violations > 0 {
            problems.push(format!("{violations} DGP monotonicity violations"));
        }
    }

    // Sigma_X equals the naive reference on a small instance (checked to
    // 1e-10 inside the library's unit suite as well; re-run here compactly).
    {
        let fns = ParamFunctions::scenario(Scenario::S1Additive, 2, 2).unwrap();
        let net = NetworkConfig::sbm(20, 2, 77_000).generate().unwrap();
        let g = gen_memberships(20, &[0.5, 0.5], 77_001).unwrap();
        let h = gen_memberships(20, &[0.4, 0.6], 77_002).unwrap();
        let panel = tgnq::sim::gen_panel(&net, &g, &h, &fns, 30, 100, 77_003).unwrap();
        let mem = Membership::new(g, h, 2, 2).unwrap();
        let grid = QuantileGrid::new(vec![0.5]).unwrap();
        let params = fns.parameter_set(&grid);
        let general = tgnq::model::ParameterSet::general(
            params.theta_array().clone(),
            params.nu_array().clone(),
            params.gamma_array().clone(),
        )
        .unwrap();
        let sigma =
            tgnq::inference::estimate_sigma_x(&panel, &net, &mem, &general, &grid, false).unwrap();
        // Naive triple loop.
        let block = 2 + 1 + 2;
        let q = 2 * block;
        let mut expected = vec![0.0f64; q * q];
        for t in 1..=30 {
            let mut g_t = vec![0.0f64; q];
            for i in 0..20 {
                let pred = tgnq::model::node_quantile_prediction(
                    &panel, &net, &general, &mem, i, t, 0,
                )
                .unwrap();
                let eps = panel.y(i, t) - pred;
                let psi = 0.5 - if eps < 0.0 { 1.0 } else { 0.0 };
                let gi = mem.row_label(i);
                let w = net.weight(i);
                let mut x_it = vec![0.0f64; q];
                for &j in net.out_neighbors(i) {
                    x_it[gi * block + mem.col_label(j)] += w * panel.y(j, t - 1);
                }
                x_it[gi * block + 2] = panel.y(i, t - 1);
                for l in 0..2 {
                    x_it[gi * block + 3 + l] = panel.x(i, t, l);
                }
                for (slot, &v) in x_it.iter().enumerate() {
                    g_t[slot] += psi * v / (20f64).sqrt();
                }
            }
            for a in 0..q {
                for b in 0..q {
                    expected[a * q + b] += g_t[a] * g_t[b] / 30.0;
                }
            }
        }
        let mut worst: f64 = 0.0;
        for a in 0..q {
            for b in 0..q {
                worst = worst.max((sigma[0][(a, b)] - expected[a * q + b]).abs());
            }
        }
        if worst > 1e-10 {
            problems.push(format!("sigma_x naive-reference gap {worst:.2e}"));
        }
    }

    // Alignment and clustering metrics against brute-force tallies.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(78_000);
        for _ in 0..50 {
            let n = 12;
            let est_g: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let true_g: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let est = Membership::new(est_g.clone(), est_g.clone(), 3, 3).unwrap();
            let truth = Membership::new(true_g.clone(), true_g.clone(), 2, 2).unwrap();
            let maps = alignment_maps(&est, &truth).unwrap();
            let mut expected_err = 0usize;
            for gg in 0..3 {
                let mut counts = [0usize; 2];
                for i in 0..n {
                    if est_g[i] == gg {
                        counts[true_g[i]] += 1;
                    }
                }
                let best = if counts[1] > counts[0] { 1 } else { 0 };
                if maps.chi1[gg] != best {
                    problems.push("alignment map mismatch".to_string());
                }
                expected_err += counts[1 - best];
            }
            let (rho1, _) = clustering_errors(&est, &truth).unwrap();
            if (rho1 - expected_err as f64 / n as f64).abs() > 1e-12 {
                problems.push("clustering error mismatch".to_string());
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    check(
        "criterion-7 (property suites)",
        problems.is_empty(),
        &format!(
            "monotone traces, relabeling invariance, check-loss symmetry, DGP monotonicity, sigma_x reference, metric tallies; issues: {:?}, runtime {elapsed:.0}s",
            problems
        ),
    );
}

#[test]
fn criterion_8_cli_determinism() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_tgnq");
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();

    let sim_cfg = base.join("sim.json");
    std::fs::write(
        &sim_cfg,
        r#"{
  "scenario": "s1_additive",
  "network": {"kind": "sbm", "n": 30, "communities": 2},
  "g0": 2, "h0": 2,
  "t_len": 30, "burn_in": 100,
  "taus": [0.5],
  "seed": 404
}"#,
    )
    .unwrap();
    let run = |args: &[&str]| {
        let output = std::process::Command::new(bin)
            .args(args)
            .output()
            .expect("binary runs");
        assert!(
            output.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&output.stderr)
        );
    };
    let sim1 = base.join("sim1");
    let sim2 = base.join("sim2");
    run(&["simulate", "--config", sim_cfg.to_str().unwrap(), "--out", sim1.to_str().unwrap()]);
    run(&["simulate", "--config", sim_cfg.to_str().unwrap(), "--out", sim2.to_str().unwrap()]);
    let mut identical = true;
    for file in ["panel.csv", "covariates.csv", "edges.csv", "truth.json", "manifest.json"] {
        let a = std::fs::read(sim1.join(file)).unwrap();
        let b = std::fs::read(sim2.join(file)).unwrap();
        identical &= a == b;
    }

    let rep_cfg = base.join("rep.json");
    std::fs::write(
        &rep_cfg,
        r#"{
  "scenario": "s1_additive",
  "network": {"kind": "sbm", "n": 30, "communities": 2},
  "g0": 2, "h0": 2,
  "t_len": 30, "burn_in": 100,
  "taus": [0.5],
  "fit_g": 2, "fit_h": 2,
  "refine": true,
  "n_replicates": 2,
  "master_seed": 405,
  "estimator": {"n_inits": 2, "r_max": 1}
}"#,
    )
    .unwrap();
    let rep1 = base.join("rep1");
    let rep2 = base.join("rep2");
    run(&[
        "replicate",
        "--config",
        rep_cfg.to_str().unwrap(),
        "--out",
        rep1.to_str().unwrap(),
        "--workers",
        "1",
    ]);
    run(&[
        "replicate",
        "--config",
        rep_cfg.to_str().unwrap(),
        "--out",
        rep2.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    identical &= std::fs::read(rep1.join("metrics.csv")).unwrap()
        == std::fs::read(rep2.join("metrics.csv")).unwrap();
    for idx in 0..2 {
        let name = format!("replicates/rep_{idx:04}.json");
        identical &= std::fs::read(rep1.join(&name)).unwrap()
            == std::fs::read(rep2.join(&name)).unwrap();
    }

    // Fit twice from the simulated data.
    let fit_cfg = base.join("fit.json");
    std::fs::write(
        &fit_cfg,
        format!(
            r#"{{
  "panel": "{}",
  "edges": "{}",
  "g": 2, "h": 2,
  "taus": [0.5],
  "refine": true,
  "estimator": {{"n_inits": 2, "r_max": 1}},
  "seed": 406
}}"#,
            sim1.join("panel.csv").display(),
            sim1.join("edges.csv").display()
        ),
    )
    .unwrap();
    let fit1 = base.join("fit1");
    let fit2 = base.join("fit2");
    run(&["fit", "--config", fit_cfg.to_str().unwrap(), "--out", fit1.to_str().unwrap()]);
    run(&[
        "fit",
        "--config",
        fit_cfg.to_str().unwrap(),
        "--out",
        fit2.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    identical &= std::fs::read(fit1.join("fit.json")).unwrap()
        == std::fs::read(fit2.join("fit.json")).unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    check(
        "criterion-8 (byte-identical reruns, worker-count independence)",
        identical,
        &format!("simulate x2, replicate workers 1 vs 2, fit x2 all byte-identical, runtime {elapsed:.0}s"),
    );
}
