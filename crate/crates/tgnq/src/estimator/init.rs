//! Data-driven starting memberships.
//!
//! Rows: a preliminary median quantile regression per node on (pooled
//! network lag, own lag, covariates) followed by k-means on the
//! standardized coefficient vectors. Columns: k-means on a per-node
//! cross-moment slope between the node's weighted lag and its followers'
//! responses. One extra start draws labels uniformly at random.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Membership, Network, PanelData};
use crate::rng::derive_seed;
use crate::solver::{solve_qr, QrProblem, SolverOptions};

/// Per-node preliminary coefficients at the median quantile.
fn preliminary_coefficients(data: &PanelData, net: &Network) -> Array2<f64> {
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let p = data.n_covariates();
    let q = 2 + p;
    let opts = SolverOptions {
        tol: 1e-6,
        ..SolverOptions::default()
    };
    let mut coefs = Array2::zeros((n, q));
    for i in 0..n {
        let w = net.weight(i);
        let yi = data.y_row(i);
        let xi = data.x_row(i);
        let mut design = Array2::zeros((t_len, q));
        let mut response = Vec::with_capacity(t_len);
        for tt in 0..t_len {
            let mut pooled = 0.0;
            for &j in net.out_neighbors(i) {
                pooled += w * data.y_row(j)[tt];
            }
            design[[tt, 0]] = pooled;
            design[[tt, 1]] = yi[tt];
            for l in 0..p {
                design[[tt, 2 + l]] = xi[tt * p + l];
            }
            response.push(yi[tt + 1]);
        }
        let problem = QrProblem::new(design, response, 0.5).expect("validated panel");
        let sol = solve_qr(&problem, &opts);
        for c in 0..q {
            coefs[[i, c]] = sol.coef[c];
        }
    }
    coefs
}

/// Follower-averaged lag cross-moment: how strongly node `j`'s weighted lag
/// tracks its followers' next responses. Zero for followerless nodes.
fn column_features(data: &PanelData, net: &Network) -> Vec<f64> {
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let mut feats = vec![0.0; n];
    for j in 0..n {
        let yj = data.y_row(j);
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in net.followers(j) {
            let w = net.weight(i);
            let yi = data.y_row(i);
            for tt in 0..t_len {
                let z = w * yj[tt];
                num += z * yi[tt + 1];
                den += z * z;
            }
        }
        feats[j] = if den > 0.0 { num / den } else { 0.0 };
    }
    feats
}

fn standardize_columns(mut feats: Array2<f64>) -> Array2<f64> {
    let (n, q) = feats.dim();
    for c in 0..q {
        let mean: f64 = (0..n).map(|r| feats[[r, c]]).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|r| (feats[[r, c]] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            for r in 0..n {
                feats[[r, c]] = (feats[[r, c]] - mean) / sd;
            }
        }
    }
    feats
}

/// Seeded k-means++ with a fixed sweep budget; empty clusters steal the
/// point farthest from its centroid.
fn kmeans(feats: &Array2<f64>, n_clusters: usize, seed: u64) -> Vec<usize> {
    let (n, q) = feats.dim();
    let k = n_clusters.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: usize, c: &[f64]| -> f64 {
        (0..q).map(|j| (feats[[a, j]] - c[j]).powi(2)).sum()
    };

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push((0..q).map(|j| feats[[first, j]]).collect());
    while centers.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|a| {
                centers
                    .iter()
                    .map(|c| dist2(a, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (a, &w) in weights.iter().enumerate() {
                if u < w {
                    chosen = a;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push((0..q).map(|j| feats[[pick, j]]).collect());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for a in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(a, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[a] != best {
                labels[a] = best;
                changed = true;
            }
        }
        // Recompute centers; rescue empty clusters.
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; q]; k];
        for a in 0..n {
            counts[labels[a]] += 1;
            for j in 0..q {
                sums[labels[a]][j] += feats[[a, j]];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(a, &centers[labels[a]])
                            .partial_cmp(&dist2(b, &centers[labels[b]]))
                            .unwrap()
                    })
                    .unwrap();
                labels[far] = c;
                counts[c] = 1;
                for j in 0..q {
                    sums[c][j] = feats[[far, j]];
                }
                changed = true;
            }
        }
        for c in 0..k {
            for j in 0..q {
                centers[c][j] = sums[c][j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn random_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    // Every group gets at least one member.
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    for target in 0..k {
        while counts[target] == 0 {
            let pick = rng.random_range(0..n);
            if counts[labels[pick]] > 1 {
                counts[labels[pick]] -= 1;
                labels[pick] = target;
                counts[target] += 1;
            }
        }
    }
    labels
}

/// Starting memberships: `n_starts - 1` k-means starts on distinct RNG
/// streams, then one purely random start.
pub(crate) fn initial_memberships(
    data: &PanelData,
    net: &Network,
    n_row_groups: usize,
    n_col_groups: usize,
    n_starts: usize,
    seed: u64,
) -> Vec<Membership> {
    let n = data.n_nodes();
    let n_starts = n_starts.max(1);
    let mut out = Vec::with_capacity(n_starts);
    if n_starts > 1 {
        let row_feats = standardize_columns(preliminary_coefficients(data, net));
        let col_raw = column_features(data, net);
        let col_feats =
            standardize_columns(Array2::from_shape_fn((n, 1), |(i, _)| col_raw[i]));
        for s in 0..n_starts - 1 {
            let g = kmeans(&row_feats, n_row_groups, derive_seed(seed, &[1, s as u64]));
            let h = kmeans(&col_feats, n_col_groups, derive_seed(seed, &[2, s as u64]));
            out.push(
                Membership::new(g, h, n_row_groups, n_col_groups).expect("kmeans labels in range"),
            );
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let g = random_labels(n, n_row_groups, &mut rng);
    let h = random_labels(n, n_col_groups, &mut rng);
    out.push(Membership::new(g, h, n_row_groups, n_col_groups).expect("random labels in range"));
    out
}
