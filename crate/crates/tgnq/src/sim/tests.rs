use approx::assert_abs_diff_eq;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelKind;

#[test]
fn sbm_mean_degree_matches_binomial_expectation() {
    let n = 100;
    let c = 5;
    let net = gen_sbm(&NetworkConfig::sbm(n, c, 42)).unwrap();
    // Independent arithmetic: uniform communities make any ordered pair
    // share one with probability 1/C.
    let p_within = 6.0 * (n as f64).ln() / n as f64;
    let p_across = 2.0 * (n as f64).ln() / n as f64;
    let p_same = 1.0 / c as f64;
    let expected = (n - 1) as f64 * (p_same * p_within + (1.0 - p_same) * p_across);
    let per_edge_var = {
        let mean = p_same * p_within + (1.0 - p_same) * p_across;
        let second = p_same * p_within + (1.0 - p_same) * p_across;
        second - mean * mean
    };
    // Mean over N nearly independent out-degrees.
    let sd_mean = ((n - 1) as f64 * per_edge_var / n as f64).sqrt();
    let observed = net.mean_out_degree();
    assert!(
        (observed - expected).abs() <= 3.5 * sd_mean,
        "mean out-degree {observed} vs expected {expected} (sd {sd_mean})"
    );
}

#[test]
fn sbm_is_seeded_and_rejects_tiny_networks() {
    let a = gen_sbm(&NetworkConfig::sbm(40, 4, 7)).unwrap();
    let b = gen_sbm(&NetworkConfig::sbm(40, 4, 7)).unwrap();
    for i in 0..40 {
        assert_eq!(a.out_neighbors(i), b.out_neighbors(i));
        assert!(!a.has_edge(i, i));
    }
    let c = gen_sbm(&NetworkConfig::sbm(40, 4, 8)).unwrap();
    assert!((0..40).any(|i| a.out_neighbors(i) != c.out_neighbors(i)));
    // N in [10, 16] makes the within-community probability exceed one.
    assert!(matches!(
        gen_sbm(&NetworkConfig::sbm(12, 2, 1)),
        Err(SimError::InvalidProbability { .. })
    ));
    assert!(matches!(
        gen_sbm(&NetworkConfig::sbm(5, 2, 1)),
        Err(SimError::TooSmall { .. })
    ));
}

#[test]
fn powerlaw_degrees_have_floor_four_and_heavy_tail() {
    let net = gen_powerlaw(&NetworkConfig::power_law(2000, 11)).unwrap();
    let degrees: Vec<usize> = (0..2000).map(|j| net.in_degree(j)).collect();
    assert!(degrees.iter().all(|&d| d >= 4));

    // Rank regression oracle on the pre-scaling degrees d / 4: the slope of
    // log rank on log degree estimates 1 - exponent.
    let mut dtilde: Vec<f64> = degrees.iter().map(|&d| d as f64 / 4.0).collect();
    dtilde.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (rank, &d) in dtilde.iter().enumerate() {
        if d >= 2.0 {
            xs.push(d.ln());
            ys.push(((rank + 1) as f64).ln());
        }
    }
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let exponent = 1.0 - slope;
    assert!(
        (exponent - 2.5).abs() <= 0.3,
        "estimated tail exponent {exponent}"
    );

    let again = gen_powerlaw(&NetworkConfig::power_law(2000, 11)).unwrap();
    assert_eq!(net.n_edges(), again.n_edges());
}

#[test]
fn membership_blocks_round_and_shuffle() {
    let labels = gen_memberships(10, &[0.5, 0.5], 3).unwrap();
    let mut sizes = vec![0; 2];
    for &l in &labels {
        sizes[l] += 1;
    }
    assert_eq!(sizes, vec![5, 5]);

    let labels = gen_memberships(100, &[0.4, 0.6], 5).unwrap();
    let mut sizes = vec![0; 2];
    for &l in &labels {
        sizes[l] += 1;
    }
    assert_eq!(sizes, vec![40, 60]);

    let labels = gen_memberships(10, &[0.3, 0.3, 0.4], 7).unwrap();
    let mut sizes = vec![0; 3];
    for &l in &labels {
        sizes[l] += 1;
    }
    assert_eq!(sizes, vec![3, 3, 4]);

    assert!(gen_memberships(10, &[0.5, 0.6], 1).is_err());
    assert!(gen_memberships(3, &[0.05, 0.95], 1).is_err());
}

#[test]
fn param_functions_reproduce_tabulated_truth() {
    let s2 = ParamFunctions::scenario(Scenario::S2Multiplicative, 3, 3).unwrap();
    assert_abs_diff_eq!(s2.alpha(0, 0.5), 1.000, epsilon = 1e-15);
    assert_abs_diff_eq!(s2.alpha(1, 0.5), 1.251, epsilon = 1e-15);
    assert_abs_diff_eq!(s2.alpha(2, 0.5), 1.385, epsilon = 1e-15);
    assert_abs_diff_eq!(s2.beta(0, 0.5), 0.082, epsilon = 1e-15);
    assert_abs_diff_eq!(s2.beta(1, 0.5), 0.431, epsilon = 1e-15);
    assert_abs_diff_eq!(s2.beta(2, 0.5), 0.646, epsilon = 1e-15);
    assert_abs_diff_eq!(s2.alpha(1, 0.9), 1.290, epsilon = 1e-15);
    assert_abs_diff_eq!(s2.alpha(2, 0.9), 1.401, epsilon = 1e-15);

    let s1 = ParamFunctions::scenario(Scenario::S1Additive, 3, 3).unwrap();
    assert_abs_diff_eq!(s1.beta(1, 0.1), 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(s1.beta(1, 0.9), 0.0, epsilon = 1e-15);
    assert_eq!(s1.kind(), ModelKind::Additive);
    // theta composes per scenario.
    assert_abs_diff_eq!(s1.theta(1, 0, 0.5), 0.131 + 0.483, epsilon = 1e-15);
    assert_abs_diff_eq!(s2.theta(1, 0, 0.5), 1.251 * 0.082, epsilon = 1e-15);
}

#[test]
fn param_functions_interpolate_linearly_with_flat_tails() {
    let s1 = ParamFunctions::scenario(Scenario::S1Additive, 2, 2).unwrap();
    // Midpoint between tabulated quantiles 0.1 and 0.3.
    let mid = s1.nu(0, 0.2);
    assert_abs_diff_eq!(mid, (0.007 + 0.031) / 2.0, epsilon = 1e-15);
    // Flat beyond the tabulated range.
    assert_abs_diff_eq!(s1.nu(0, 0.01), 0.007, epsilon = 1e-15);
    assert_abs_diff_eq!(s1.nu(0, 0.99), 0.157, epsilon = 1e-15);
    // The structured parameter set evaluated on the default grid matches
    // the table exactly at its points.
    let grid = crate::model::QuantileGrid::default_five();
    let params = s1.parameter_set(&grid);
    assert_abs_diff_eq!(params.nu(2, 1), 0.100, epsilon = 1e-15);
    assert_abs_diff_eq!(params.gamma(4, 0, 1), 0.167, epsilon = 1e-15);
}

#[test]
fn zero_parameter_functions_generate_zero_panels() {
    let taus = vec![0.1, 0.5, 0.9];
    let zero = ParamFunctions::custom(
        ModelKind::Additive,
        taus,
        vec![vec![0.0; 3]; 2],
        vec![vec![0.0; 3]; 2],
        vec![vec![vec![0.0; 3]; 2]; 2],
        vec![vec![0.0; 3]; 2],
    )
    .unwrap();
    let net = gen_sbm(&NetworkConfig::sbm(20, 2, 9)).unwrap();
    let g = gen_memberships(20, &[0.5, 0.5], 1).unwrap();
    let h = gen_memberships(20, &[0.5, 0.5], 2).unwrap();
    let panel = gen_panel(&net, &g, &h, &zero, 10, 50, 3).unwrap();
    for i in 0..20 {
        for t in 0..=10 {
            assert_eq!(panel.y(i, t), 0.0);
        }
    }
}

#[test]
fn panel_generation_is_seeded_and_stationary() {
    let net = gen_sbm(&NetworkConfig::sbm(40, 4, 21)).unwrap();
    let g = gen_memberships(40, &[0.5, 0.5], 22).unwrap();
    let h = gen_memberships(40, &[0.4, 0.6], 23).unwrap();
    let fns = ParamFunctions::scenario(Scenario::S1Additive, 2, 2).unwrap();
    let a = gen_panel(&net, &g, &h, &fns, 120, 200, 5).unwrap();
    let b = gen_panel(&net, &g, &h, &fns, 120, 200, 5).unwrap();
    for i in 0..40 {
        for t in 0..=120 {
            assert_eq!(a.y(i, t), b.y(i, t));
        }
    }
    // Stationarity smoke test: the halves of the kept stretch have close
    // mean cross-sectional norms.
    let norm = |t: usize| -> f64 {
        (0..40).map(|i| a.y(i, t).powi(2)).sum::<f64>().sqrt()
    };
    let first: Vec<f64> = (1..=60).map(norm).collect();
    let second: Vec<f64> = (61..=120).map(norm).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    let (m1, m2) = (mean(&first), mean(&second));
    let se = ((var(&first, m1) + var(&second, m2)) / 60.0).sqrt();
    assert!(
        (m1 - m2).abs() < 5.0 * se,
        "halves differ: {m1} vs {m2} (se {se})"
    );
}

#[test]
fn dgp_right_side_is_monotone_in_u() {
    let net = gen_sbm(&NetworkConfig::sbm(30, 3, 31)).unwrap();
    let g = gen_memberships(30, &[0.3, 0.3, 0.4], 32).unwrap();
    let h = gen_memberships(30, &[0.3, 0.3, 0.4], 33).unwrap();
    for scenario in [Scenario::S1Additive, Scenario::S2Multiplicative] {
        let fns = ParamFunctions::scenario(scenario, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..100 {
            let y_prev: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..2.0)).collect();
            let x_row: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..2.0)).collect();
            let i = rng.random_range(0..30);
            let mut prev = f64::NEG_INFINITY;
            for step in 0..=10 {
                let u = step as f64 / 10.0;
                let v = fns.conditional_value(&net, &g, &h, &y_prev, &x_row, i, u);
                assert!(v >= prev - 1e-12, "not monotone at u = {u}");
                prev = v;
            }
        }
    }
}

#[test]
fn explosive_parameters_are_reported_as_divergence() {
    let taus = vec![0.5];
    let explosive = ParamFunctions::custom(
        ModelKind::Additive,
        taus,
        vec![vec![0.8]; 2],
        vec![vec![0.9]; 2],
        vec![vec![vec![0.5]; 2]; 2],
        vec![vec![0.8]; 2],
    )
    .unwrap();
    let net = gen_sbm(&NetworkConfig::sbm(20, 2, 41)).unwrap();
    let g = gen_memberships(20, &[0.5, 0.5], 42).unwrap();
    let h = gen_memberships(20, &[0.5, 0.5], 43).unwrap();
    let err = gen_panel(&net, &g, &h, &explosive, 50, 200, 44);
    match err {
        Err(SimError::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn replication_store_has_complete_records() {
    let scenario = ScenarioConfig::new(Scenario::S1Additive, 2, 2, 30, 0);
    let network = NetworkConfig::sbm(20, 2, 0);
    let mut config = ExperimentConfig::new(scenario, network, 2, 2, 1, 99);
    config.taus = vec![0.5];
    config.refine = false;
    config.estimator.n_inits = 2;
    config.estimator.r_max = 2;
    let store = run_replications(&config).unwrap();
    assert_eq!(store.records.len(), 1);
    assert_eq!(store.n_failed, 0);
    match &store.records[0] {
        ReplicateOutcome::Success(rec) => {
            assert_eq!(rec.errors.theta.len(), 1);
            assert!(rec.loss.is_finite());
        }
        other => panic!("unexpected outcome {other:?}"),
    }
    assert!(store.aggregates.iter().any(|r| r.metric == "rmse_theta"));
}

#[test]
fn replication_is_worker_count_independent() {
    let scenario = ScenarioConfig::new(Scenario::S1Additive, 2, 2, 25, 0);
    let network = NetworkConfig::sbm(20, 2, 0);
    let mut config = ExperimentConfig::new(scenario, network, 2, 2, 2, 123);
    config.taus = vec![0.5];
    config.refine = false;
    config.estimator.n_inits = 2;
    config.estimator.r_max = 1;

    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| run_replications(&config).unwrap())
    };
    let one = run_with(1);
    let two = run_with(2);
    assert_eq!(one.aggregates.len(), two.aggregates.len());
    for (a, b) in one.aggregates.iter().zip(two.aggregates.iter()) {
        assert_eq!(a.metric, b.metric);
        assert_eq!(a.value.to_bits(), b.value.to_bits(), "metric {}", a.metric);
    }
}
