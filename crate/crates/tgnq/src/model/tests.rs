use super::*;
use approx::assert_abs_diff_eq;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_panel(n: usize, t_len: usize, p: usize, seed: u64) -> PanelData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = Array2::from_shape_fn((n, t_len + 1), |_| rng.random_range(-2.0..2.0));
    let x = Array3::from_shape_fn((n, t_len, p), |_| rng.random_range(-1.0..1.0));
    PanelData::new(y, x).unwrap()
}

fn random_params(k: usize, g: usize, h: usize, p: usize, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = Array3::from_shape_fn((k, g, h), |_| rng.random_range(-0.5..0.5));
    let nu = Array2::from_shape_fn((k, g), |_| rng.random_range(-0.5..0.5));
    let gamma = Array3::from_shape_fn((k, g, p), |_| rng.random_range(-0.5..0.5));
    ParameterSet::general(theta, nu, gamma).unwrap()
}

/// Dense-weight reference for the quantile prediction, kept deliberately
/// independent of the index structures in `Network`.
fn naive_prediction(
    data: &PanelData,
    adjacency: &[Vec<u8>],
    params: &ParameterSet,
    mem: &Membership,
    i: usize,
    t: usize,
    k: usize,
) -> f64 {
    let n = adjacency.len();
    let deg: usize = adjacency[i].iter().map(|&v| v as usize).sum();
    let mut acc = 0.0;
    for j in 0..n {
        if adjacency[i][j] != 0 {
            let w = 1.0 / deg as f64;
            acc += params.theta(k, mem.row_label(i), mem.col_label(j)) * w * data.y(j, t - 1);
        }
    }
    acc += params.nu(k, mem.row_label(i)) * data.y(i, t - 1);
    for l in 0..data.n_covariates() {
        acc += params.gamma(k, mem.row_label(i), l) * data.x(i, t, l);
    }
    acc
}

#[test]
fn check_loss_examples() {
    assert_abs_diff_eq!(check_loss(0.0, 0.5).unwrap(), 0.0);
    assert_abs_diff_eq!(check_loss(-1.0, 0.1).unwrap(), 0.9, epsilon = 1e-15);
    assert_abs_diff_eq!(check_loss(2.0, 0.9).unwrap(), 1.8, epsilon = 1e-15);
}

#[test]
fn check_loss_rejects_bad_inputs() {
    assert!(check_loss(f64::NAN, 0.5).is_err());
    assert!(check_loss(f64::INFINITY, 0.5).is_err());
    assert!(check_loss(1.0, 0.0).is_err());
    assert!(check_loss(1.0, 1.0).is_err());
}

#[test]
fn check_loss_symmetry_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let u: f64 = rng.random_range(-10.0..10.0);
        let tau: f64 = rng.random_range(0.01..0.99);
        let lhs = check_loss(u, tau).unwrap();
        let rhs = check_loss(-u, 1.0 - tau).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        assert!(lhs >= 0.0);
        assert_eq!(lhs == 0.0, u == 0.0);
    }
}

#[test]
fn prediction_zero_map() {
    let data = small_panel(4, 5, 2, 1);
    let net = Network::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
    let params = ParameterSet::zeros(3, 2, 2, 2);
    let mem = Membership::new(vec![0, 1, 0, 1], vec![1, 0, 1, 0], 2, 2).unwrap();
    for i in 0..4 {
        for t in 1..=5 {
            for k in 0..3 {
                let v = node_quantile_prediction(&data, &net, &params, &mem, i, t, k).unwrap();
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn prediction_isolated_node_pure_ar() {
    // Node 0 has no out-edges; only the autoregressive term survives.
    let mut y = Array2::zeros((2, 3));
    y[[0, 0]] = 2.0;
    let x = Array3::zeros((2, 2, 0));
    let data = PanelData::new(y, x).unwrap();
    let net = Network::from_edges(2, &[(1, 0)]).unwrap();
    let mut params = ParameterSet::zeros(1, 1, 1, 0);
    params.nu_mut()[[0, 0]] = 0.5;
    let mem = Membership::new(vec![0, 0], vec![0, 0], 1, 1).unwrap();
    let v = node_quantile_prediction(&data, &net, &params, &mem, 0, 1, 0).unwrap();
    assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
}

#[test]
fn prediction_matches_naive_on_line_graph() {
    // 3-node line graph 0 -> 1 -> 2 plus hand-set coefficients.
    let data = small_panel(3, 4, 2, 11);
    let adjacency = vec![vec![0, 1, 0], vec![0, 0, 1], vec![0, 0, 0]];
    let net = Network::from_adjacency(&adjacency).unwrap();
    let params = random_params(2, 2, 2, 2, 13);
    let mem = Membership::new(vec![0, 1, 1], vec![1, 0, 1], 2, 2).unwrap();
    for i in 0..3 {
        for t in 1..=4 {
            for k in 0..2 {
                let lhs = node_quantile_prediction(&data, &net, &params, &mem, i, t, k).unwrap();
                let rhs = naive_prediction(&data, &adjacency, &params, &mem, i, t, k);
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-14);
            }
        }
    }
}

#[test]
fn prediction_rejects_out_of_range() {
    let data = small_panel(3, 4, 1, 3);
    let net = Network::from_edges(3, &[(0, 1)]).unwrap();
    let params = ParameterSet::zeros(1, 1, 1, 1);
    let mem = Membership::new(vec![0; 3], vec![0; 3], 1, 1).unwrap();
    assert!(node_quantile_prediction(&data, &net, &params, &mem, 3, 1, 0).is_err());
    assert!(node_quantile_prediction(&data, &net, &params, &mem, 0, 0, 0).is_err());
    assert!(node_quantile_prediction(&data, &net, &params, &mem, 0, 5, 0).is_err());
    assert!(node_quantile_prediction(&data, &net, &params, &mem, 0, 1, 1).is_err());
}

#[test]
fn total_loss_zero_residuals() {
    // Responses built exactly from the model at a single quantile.
    let n = 5;
    let t_len = 6;
    let net = Network::from_edges(n, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 3), (0, 3)]).unwrap();
    let params = random_params(1, 2, 2, 0, 17);
    let mem = Membership::new(vec![0, 1, 0, 1, 0], vec![1, 0, 0, 1, 1], 2, 2).unwrap();
    let mut y = Array2::zeros((n, t_len + 1));
    for i in 0..n {
        y[[i, 0]] = 0.3 + i as f64 * 0.1;
    }
    for t in 1..=t_len {
        for i in 0..n {
            let w = net.weight(i);
            let mut pred = params.nu(0, mem.row_label(i)) * y[[i, t - 1]];
            for &j in net.out_neighbors(i) {
                pred += params.theta(0, mem.row_label(i), mem.col_label(j)) * w * y[[j, t - 1]];
            }
            y[[i, t]] = pred;
        }
    }
    let data = PanelData::new(y, Array3::zeros((n, t_len, 0))).unwrap();
    let grid = QuantileGrid::new(vec![0.5]).unwrap();
    let loss = total_loss(&data, &net, &params, &mem, &grid).unwrap();
    assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
}

#[test]
fn total_loss_matches_brute_force() {
    let data = small_panel(6, 7, 2, 23);
    let adjacency: Vec<Vec<u8>> = {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        (0..6)
            .map(|i| {
                (0..6)
                    .map(|j| if i != j && rng.random_range(0.0..1.0) < 0.5 { 1 } else { 0 })
                    .collect()
            })
            .collect()
    };
    let net = Network::from_adjacency(&adjacency).unwrap();
    let params = random_params(3, 2, 3, 2, 31);
    let mem = Membership::new(vec![0, 1, 0, 1, 1, 0], vec![2, 0, 1, 2, 0, 1], 2, 3).unwrap();
    let grid = QuantileGrid::new(vec![0.2, 0.5, 0.8]).unwrap();

    let mut brute = 0.0;
    for k in 0..3 {
        for i in 0..6 {
            for t in 1..=7 {
                let pred = naive_prediction(&data, &adjacency, &params, &mem, i, t, k);
                brute += check_loss(data.y(i, t) - pred, grid.tau(k)).unwrap();
            }
        }
    }
    brute /= (6 * 7 * 3) as f64;
    let fast = total_loss(&data, &net, &params, &mem, &grid).unwrap();
    assert_abs_diff_eq!(fast, brute, epsilon = 1e-12);
}

#[test]
fn total_loss_relabeling_invariance() {
    let data = small_panel(6, 5, 1, 41);
    let net = Network::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]).unwrap();
    let params = random_params(2, 3, 2, 1, 43);
    let mem = Membership::new(vec![0, 1, 2, 0, 1, 2], vec![1, 0, 1, 0, 1, 0], 3, 2).unwrap();
    let grid = QuantileGrid::new(vec![0.3, 0.7]).unwrap();
    let base = total_loss(&data, &net, &params, &mem, &grid).unwrap();

    // Swap row labels 0 <-> 2 and column labels 0 <-> 1 jointly with the
    // matching slices of the parameter set.
    let row_perm = vec![2, 1, 0];
    let col_perm = vec![1, 0];
    let permuted_params = params.permuted(&row_perm, &col_perm);
    let relabel_row = |g: usize| row_perm.iter().position(|&o| o == g).unwrap();
    let relabel_col = |h: usize| col_perm.iter().position(|&o| o == h).unwrap();
    let mem2 = Membership::new(
        mem.row_labels().iter().map(|&g| relabel_row(g)).collect(),
        mem.col_labels().iter().map(|&h| relabel_col(h)).collect(),
        3,
        2,
    )
    .unwrap();
    let permuted = total_loss(&data, &net, &permuted_params, &mem2, &grid).unwrap();
    assert_abs_diff_eq!(base, permuted, epsilon = 1e-12);
}

#[test]
fn total_loss_structured_representation_consistency() {
    let data = small_panel(5, 6, 1, 53);
    let net = Network::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 4)]).unwrap();
    let mem = Membership::new(vec![0, 1, 0, 1, 0], vec![0, 1, 1, 0, 1], 2, 2).unwrap();
    let grid = QuantileGrid::new(vec![0.25, 0.75]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let alpha = Array2::from_shape_fn((2, 2), |_| rng.random_range(-0.4..0.4));
    let beta = Array2::from_shape_fn((2, 2), |_| rng.random_range(-0.4..0.4));
    let nu = Array2::from_shape_fn((2, 2), |_| rng.random_range(-0.3..0.3));
    let gamma = Array3::from_shape_fn((2, 2, 1), |_| rng.random_range(-0.3..0.3));

    for kind in [ModelKind::Additive, ModelKind::Multiplicative] {
        let structured = ParameterSet::structured(
            kind,
            alpha.clone(),
            beta.clone(),
            nu.clone(),
            gamma.clone(),
        )
        .unwrap();
        let general = ParameterSet::general(
            structured.theta_array().clone(),
            nu.clone(),
            gamma.clone(),
        )
        .unwrap();
        let a = total_loss(&data, &net, &structured, &mem, &grid).unwrap();
        let b = total_loss(&data, &net, &general, &mem, &grid).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
    }
}

#[test]
fn network_structures_are_consistent() {
    let edges = [(0, 1), (0, 2), (1, 2), (2, 0), (3, 2), (0, 1)];
    let net = Network::from_edges(4, &edges).unwrap();
    assert_eq!(net.out_neighbors(0), &[1, 2]);
    assert_eq!(net.out_degree(0), 2);
    assert_abs_diff_eq!(net.weight(0), 0.5);
    assert_eq!(net.followers(2), &[0, 1, 3]);
    assert_eq!(net.in_degree(2), 3);
    assert_eq!(net.weight(3), 1.0);
    // F_2^2 = union of out-neighborhoods of followers {0, 1, 3}.
    assert_eq!(net.second_order(2), &[1, 2]);
    assert!(Network::from_edges(3, &[(1, 1)]).is_err());
    assert!(Network::from_edges(3, &[(0, 3)]).is_err());
    // Row-normalized rows sum to one.
    for i in 0..4 {
        let sum: f64 = net.out_neighbors(i).iter().map(|_| net.weight(i)).sum();
        if net.out_degree(i) > 0 {
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        } else {
            assert_eq!(sum, 0.0);
        }
    }
}

#[test]
fn quantile_grid_validation() {
    assert!(QuantileGrid::new(vec![]).is_err());
    assert!(QuantileGrid::new(vec![0.5, 0.5]).is_err());
    assert!(QuantileGrid::new(vec![0.7, 0.3]).is_err());
    assert!(QuantileGrid::new(vec![0.0, 0.5]).is_err());
    let grid = QuantileGrid::default_five();
    assert_eq!(grid.len(), 5);
    assert_eq!(grid.median_index(), 2);
}

#[test]
fn panel_data_validation() {
    assert!(PanelData::new(Array2::zeros((1, 5)), Array3::zeros((1, 4, 0))).is_err());
    assert!(PanelData::new(Array2::zeros((3, 2)), Array3::zeros((3, 1, 0))).is_err());
    assert!(PanelData::new(Array2::zeros((3, 5)), Array3::zeros((2, 4, 0))).is_err());
    let mut y = Array2::zeros((3, 5));
    y[[0, 0]] = f64::NAN;
    assert!(PanelData::new(y, Array3::zeros((3, 4, 0))).is_err());
}

#[test]
fn membership_validation() {
    assert!(Membership::new(vec![0, 2], vec![0, 0], 2, 1).is_err());
    assert!(Membership::new(vec![0, 1], vec![0, 1], 2, 2).is_ok());
    let mem = Membership::new(vec![0, 1, 1], vec![0, 0, 1], 2, 2).unwrap();
    assert_eq!(mem.row_group(1), vec![1, 2]);
    assert_eq!(mem.col_group_sizes(), vec![2, 1]);
}

#[test]
fn structured_params_must_match_theta() {
    let alpha = Array2::from_elem((1, 2), 0.5);
    let beta = Array2::from_elem((1, 2), 0.25);
    let set = ParameterSet::structured(
        ModelKind::Multiplicative,
        alpha,
        beta,
        Array2::zeros((1, 2)),
        Array3::zeros((1, 2, 0)),
    )
    .unwrap();
    assert_abs_diff_eq!(set.theta(0, 0, 0), 0.125, epsilon = 1e-15);
}
