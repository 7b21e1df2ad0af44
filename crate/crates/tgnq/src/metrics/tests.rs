use approx::assert_abs_diff_eq;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{Membership, ParameterSet};

fn mem(g: Vec<usize>, h: Vec<usize>, ng: usize, nh: usize) -> Membership {
    Membership::new(g, h, ng, nh).unwrap()
}

#[test]
fn alignment_identity_and_swap() {
    let truth = mem(vec![0, 0, 1, 1], vec![1, 1, 0, 0], 2, 2);
    let maps = alignment_maps(&truth, &truth).unwrap();
    assert_eq!(maps.chi1, vec![0, 1]);
    assert_eq!(maps.chi2, vec![0, 1]);

    let swapped = mem(vec![1, 1, 0, 0], vec![0, 0, 1, 1], 2, 2);
    let maps = alignment_maps(&swapped, &truth).unwrap();
    assert_eq!(maps.chi1, vec![1, 0]);
    assert_eq!(maps.chi2, vec![1, 0]);
}

#[test]
fn alignment_matches_brute_force_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = 12;
        let est: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let est_mem = mem(est.clone(), est.clone(), 3, 3);
        let truth_mem = mem(truth.clone(), truth.clone(), 2, 2);
        let maps = alignment_maps(&est_mem, &truth_mem).unwrap();
        for g in 0..3 {
            let counts: Vec<usize> = (0..2)
                .map(|t| (0..n).filter(|&i| est[i] == g && truth[i] == t).count())
                .collect();
            let best = if counts[1] > counts[0] { 1 } else { 0 };
            assert_eq!(maps.chi1[g], best);
        }
    }
}

#[test]
fn empty_estimated_group_maps_to_first_label() {
    // Group 2 is never used.
    let est = mem(vec![0, 0, 1, 1], vec![0, 1, 0, 1], 3, 2);
    let truth = mem(vec![0, 0, 1, 1], vec![0, 1, 0, 1], 2, 2);
    let maps = alignment_maps(&est, &truth).unwrap();
    assert_eq!(maps.chi1[2], 0);
}

#[test]
fn clustering_error_examples() {
    let truth = mem(vec![0; 5], vec![0; 5], 1, 1);
    assert_eq!(clustering_errors(&truth, &truth).unwrap(), (0.0, 0.0));

    // One of ten rows lands in a group mapped elsewhere.
    let truth = mem(vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1], vec![0; 10], 2, 1);
    let est = mem(vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1], vec![0; 10], 2, 1);
    let (rho1, _) = clustering_errors(&est, &truth).unwrap();
    assert_abs_diff_eq!(rho1, 0.1, epsilon = 1e-12);
}

#[test]
fn clustering_error_invariant_under_estimated_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 30;
    let truth_g: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let est_g: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let truth = mem(truth_g.clone(), truth_g, 3, 3);
    let est = mem(est_g.clone(), est_g.clone(), 3, 3);
    let base = clustering_errors(&est, &truth).unwrap();
    // Apply the cycle 0 -> 1 -> 2 -> 0 to the estimated labels.
    let relabeled: Vec<usize> = est_g.iter().map(|&g| (g + 1) % 3).collect();
    let est2 = mem(relabeled.clone(), relabeled, 3, 3);
    let permuted = clustering_errors(&est2, &truth).unwrap();
    assert_eq!(base, permuted);
    let bp = clustering_errors_best_permutation(&est, &truth).unwrap();
    let bp2 = clustering_errors_best_permutation(&est2, &truth).unwrap();
    assert_eq!(bp, bp2);
}

#[test]
fn param_error_examples() {
    let truth = ParameterSet::general(
        Array3::from_elem((1, 1, 1), 0.4),
        Array2::from_elem((1, 1), 0.2),
        Array3::zeros((1, 1, 0)),
    )
    .unwrap();
    let maps = AlignmentMaps {
        chi1: vec![0],
        chi2: vec![0],
    };
    let exact = param_errors(&truth, &truth, &maps).unwrap();
    assert_eq!(exact.theta, vec![0.0]);
    assert_eq!(exact.nu, vec![0.0]);

    let est = ParameterSet::general(
        Array3::from_elem((1, 1, 1), 0.41),
        Array2::from_elem((1, 1), 0.2),
        Array3::zeros((1, 1, 0)),
    )
    .unwrap();
    let off = param_errors(&est, &truth, &maps).unwrap();
    assert_abs_diff_eq!(off.theta[0], 0.01, epsilon = 1e-12);
    let rmse = rmse_params(&[off.clone(), off]);
    assert_abs_diff_eq!(rmse.theta[0], 0.01, epsilon = 1e-12);
}

#[test]
fn rmse_all_node_level_example() {
    // Ten nodes; node 0 sits in a group whose nu is off by 0.1.
    let n = 10;
    let truth_params = ParameterSet::general(
        Array3::zeros((1, 2, 1)),
        Array2::from_shape_fn((1, 2), |(_, g)| if g == 0 { 0.1 } else { 0.3 }),
        Array3::zeros((1, 2, 0)),
    )
    .unwrap();
    let est_params = ParameterSet::general(
        Array3::zeros((1, 2, 1)),
        Array2::from_shape_fn((1, 2), |(_, g)| if g == 0 { 0.2 } else { 0.3 }),
        Array3::zeros((1, 2, 0)),
    )
    .unwrap();
    let mut g = vec![1; n];
    g[0] = 0;
    let truth_mem = mem(g.clone(), vec![0; n], 2, 1);
    let est_mem = mem(g, vec![0; n], 2, 1);
    let errors = rmse_all_errors(&est_params, &est_mem, &truth_params, &truth_mem).unwrap();
    assert_abs_diff_eq!(errors.nu[0], 0.01, epsilon = 1e-12);
    let zero = rmse_all_errors(&truth_params, &truth_mem, &truth_params, &truth_mem).unwrap();
    assert_eq!(zero.nu[0], 0.0);
    assert_eq!(zero.theta[0], 0.0);
}

#[test]
fn coverage_error_examples() {
    // All intervals cover in all runs.
    let all = vec![vec![true; 40]];
    assert_abs_diff_eq!(coverage_error(&all, 0.95), 0.05, epsilon = 1e-12);
    // Exact 95% coverage.
    let mut flags = vec![true; 19];
    flags.push(false);
    assert_abs_diff_eq!(coverage_error(&[flags], 0.95), 0.0, epsilon = 1e-12);
}

#[test]
fn coverage_error_binomial_sanity() {
    // Independent oracle: exact Binomial(100, 0.95) arithmetic for the
    // distribution of |coverage - 0.95|.
    let b = 100usize;
    let p = 0.95f64;
    let mut pmf = vec![0.0f64; b + 1];
    for (x, value) in pmf.iter_mut().enumerate() {
        let mut log = 0.0;
        for i in 0..x {
            log += ((b - i) as f64).ln() - ((i + 1) as f64).ln();
        }
        log += x as f64 * p.ln() + (b - x) as f64 * (1.0 - p).ln();
        *value = log.exp();
    }
    let exact_mean: f64 = pmf
        .iter()
        .enumerate()
        .map(|(x, &prob)| prob * (x as f64 / b as f64 - p).abs())
        .sum();
    // The reference magnitude for B = 100 at the 95% level.
    assert!(
        (0.012..=0.022).contains(&exact_mean),
        "exact mean deviation {exact_mean}"
    );

    // Simulated coverage flags reproduce the oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sims = 3000;
    let mut sum = 0.0;
    for _ in 0..sims {
        let flags: Vec<bool> = (0..b).map(|_| rng.random_range(0.0..1.0) < p).collect();
        sum += coverage_error(&[flags], p);
    }
    let emp_mean = sum / sims as f64;
    assert_abs_diff_eq!(emp_mean, exact_mean, epsilon = 0.002);
}

#[test]
fn model_selection_rate_examples() {
    let all33 = vec![(3, 3); 7];
    assert_eq!(model_selection_rate(&all33, 3, 3), 1.0);
    assert_eq!(model_selection_rate(&all33, 2, 2), 0.0);
    // Rates over a grid sum to at most one.
    let mixed = vec![(2, 2), (3, 3), (3, 3), (2, 3)];
    let total: f64 = [(2, 2), (2, 3), (3, 2), (3, 3)]
        .iter()
        .map(|&(g, h)| model_selection_rate(&mixed, g, h))
        .sum();
    assert!(total <= 1.0 + 1e-12);
}
