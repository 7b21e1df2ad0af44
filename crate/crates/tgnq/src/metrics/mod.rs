//! Evaluation metrics: majority-vote label alignment, clustering errors,
//! RMSE families, confidence-interval coverage error, and the model
//! selection rate.

use thiserror::Error;

use crate::model::{Membership, ParameterSet};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Majority-vote maps from estimated groups into true groups. An empty
/// estimated group maps to true label 0; argmax ties break toward the
/// smallest true label.
#[derive(Debug, Clone)]
pub struct AlignmentMaps {
    pub chi1: Vec<usize>,
    pub chi2: Vec<usize>,
}

fn majority_map(
    est_labels: &[usize],
    true_labels: &[usize],
    n_est: usize,
    n_true: usize,
) -> Vec<usize> {
    let mut counts = vec![vec![0usize; n_true]; n_est];
    for (&e, &t) in est_labels.iter().zip(true_labels) {
        counts[e][t] += 1;
    }
    counts
        .iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_count = 0usize;
            for (t, &c) in row.iter().enumerate() {
                if c > best_count {
                    best_count = c;
                    best = t;
                }
            }
            best
        })
        .collect()
}

/// Build the chi maps from estimated and true memberships.
pub fn alignment_maps(est: &Membership, truth: &Membership) -> Result<AlignmentMaps, MetricsError> {
    if est.n_nodes() != truth.n_nodes() {
        return Err(MetricsError::Shape {
            context: "membership lengths",
            expected: truth.n_nodes(),
            got: est.n_nodes(),
        });
    }
    Ok(AlignmentMaps {
        chi1: majority_map(
            est.row_labels(),
            truth.row_labels(),
            est.n_row_groups(),
            truth.n_row_groups(),
        ),
        chi2: majority_map(
            est.col_labels(),
            truth.col_labels(),
            est.n_col_groups(),
            truth.n_col_groups(),
        ),
    })
}

/// Clustering errors through the chi maps: the fraction of nodes whose true
/// label differs from the majority-vote image of their estimated group.
pub fn clustering_errors(est: &Membership, truth: &Membership) -> Result<(f64, f64), MetricsError> {
    let maps = alignment_maps(est, truth)?;
    let n = est.n_nodes() as f64;
    let rho1 = est
        .row_labels()
        .iter()
        .zip(truth.row_labels())
        .filter(|&(&e, &t)| maps.chi1[e] != t)
        .count() as f64
        / n;
    let rho2 = est
        .col_labels()
        .iter()
        .zip(truth.col_labels())
        .filter(|&(&e, &t)| maps.chi2[e] != t)
        .count() as f64
        / n;
    Ok((rho1, rho2))
}

/// Clustering errors under the best label permutation; only defined when
/// the group counts match, falling back to the chi-map error otherwise.
pub fn clustering_errors_best_permutation(
    est: &Membership,
    truth: &Membership,
) -> Result<(f64, f64), MetricsError> {
    let (chi1_err, chi2_err) = clustering_errors(est, truth)?;
    let best = |est_labels: &[usize],
                true_labels: &[usize],
                k_est: usize,
                k_true: usize|
     -> Option<f64> {
        if k_est != k_true || k_est > 8 {
            return None;
        }
        let n = est_labels.len();
        let mut counts = vec![vec![0usize; k_true]; k_est];
        for (&e, &t) in est_labels.iter().zip(true_labels) {
            counts[e][t] += 1;
        }
        let mut perm: Vec<usize> = (0..k_est).collect();
        let mut best_match = 0usize;
        permute(&mut perm, 0, &mut |p: &[usize]| {
            let matched: usize = (0..k_est).map(|e| counts[e][p[e]]).sum();
            if matched > best_match {
                best_match = matched;
            }
        });
        Some(1.0 - best_match as f64 / n as f64)
    };
    let rho1 = best(
        est.row_labels(),
        truth.row_labels(),
        est.n_row_groups(),
        truth.n_row_groups(),
    )
    .unwrap_or(chi1_err);
    let rho2 = best(
        est.col_labels(),
        truth.col_labels(),
        est.n_col_groups(),
        truth.n_col_groups(),
    )
    .unwrap_or(chi2_err);
    Ok((rho1, rho2))
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// Per-quantile Euclidean norms of aligned parameter errors for one
/// replicate; averaged over replicates they become the RMSE families.
#[derive(Debug, Clone)]
pub struct ParamErrors {
    pub theta: Vec<f64>,
    pub nu: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Label-aligned parameter error norms for one fitted replicate.
pub fn param_errors(
    est: &ParameterSet,
    truth: &ParameterSet,
    maps: &AlignmentMaps,
) -> Result<ParamErrors, MetricsError> {
    if est.n_quantiles() != truth.n_quantiles() {
        return Err(MetricsError::Shape {
            context: "quantile counts",
            expected: truth.n_quantiles(),
            got: est.n_quantiles(),
        });
    }
    if est.n_covariates() != truth.n_covariates() {
        return Err(MetricsError::Shape {
            context: "covariate counts",
            expected: truth.n_covariates(),
            got: est.n_covariates(),
        });
    }
    let k_len = est.n_quantiles();
    let n_g = est.n_row_groups();
    let n_h = est.n_col_groups();
    let p = est.n_covariates();
    let mut theta = Vec::with_capacity(k_len);
    let mut nu = Vec::with_capacity(k_len);
    let mut gamma = Vec::with_capacity(k_len);
    for k in 0..k_len {
        let mut st = 0.0;
        let mut sn = 0.0;
        let mut sg = 0.0;
        for g in 0..n_g {
            let g0 = maps.chi1[g];
            sn += (est.nu(k, g) - truth.nu(k, g0)).powi(2);
            for l in 0..p {
                sg += (est.gamma(k, g, l) - truth.gamma(k, g0, l)).powi(2);
            }
            for h in 0..n_h {
                let h0 = maps.chi2[h];
                st += (est.theta(k, g, h) - truth.theta(k, g0, h0)).powi(2);
            }
        }
        theta.push(st.sqrt());
        nu.push(sn.sqrt());
        gamma.push(sg.sqrt());
    }
    Ok(ParamErrors { theta, nu, gamma })
}

/// RMSE over replicates: the per-quantile mean of the error norms.
pub fn rmse_params(per_replicate: &[ParamErrors]) -> ParamErrors {
    let b = per_replicate.len().max(1) as f64;
    let k_len = per_replicate.first().map(|e| e.theta.len()).unwrap_or(0);
    let mean = |pick: &dyn Fn(&ParamErrors) -> &Vec<f64>| -> Vec<f64> {
        (0..k_len)
            .map(|k| per_replicate.iter().map(|e| pick(e)[k]).sum::<f64>() / b)
            .collect()
    };
    ParamErrors {
        theta: mean(&|e| &e.theta),
        nu: mean(&|e| &e.nu),
        gamma: mean(&|e| &e.gamma),
    }
}

/// Node-level absolute-error averages for one replicate: theta over all
/// ordered node pairs, nu and gamma over nodes. Works under misspecified
/// group counts because the comparison goes through the assigned labels.
pub fn rmse_all_errors(
    est_params: &ParameterSet,
    est_mem: &Membership,
    true_params: &ParameterSet,
    true_mem: &Membership,
) -> Result<ParamErrors, MetricsError> {
    if est_mem.n_nodes() != true_mem.n_nodes() {
        return Err(MetricsError::Shape {
            context: "membership lengths",
            expected: true_mem.n_nodes(),
            got: est_mem.n_nodes(),
        });
    }
    let n = est_mem.n_nodes();
    let k_len = est_params.n_quantiles();
    let p = est_params.n_covariates();
    let mut theta = Vec::with_capacity(k_len);
    let mut nu = Vec::with_capacity(k_len);
    let mut gamma = Vec::with_capacity(k_len);
    for k in 0..k_len {
        let mut st = 0.0;
        for i in 0..n {
            for j in 0..n {
                st += (est_params.theta(k, est_mem.row_label(i), est_mem.col_label(j))
                    - true_params.theta(k, true_mem.row_label(i), true_mem.col_label(j)))
                .abs();
            }
        }
        theta.push(st / (n * n) as f64);
        let mut sn = 0.0;
        let mut sg = 0.0;
        for i in 0..n {
            sn += (est_params.nu(k, est_mem.row_label(i))
                - true_params.nu(k, true_mem.row_label(i)))
            .abs();
            let mut norm2 = 0.0;
            for l in 0..p {
                norm2 += (est_params.gamma(k, est_mem.row_label(i), l)
                    - true_params.gamma(k, true_mem.row_label(i), l))
                .powi(2);
            }
            sg += norm2.sqrt();
        }
        nu.push(sn / n as f64);
        gamma.push(sg / n as f64);
    }
    Ok(ParamErrors { theta, nu, gamma })
}

/// Mean absolute deviation of empirical coverage from the nominal level;
/// `covered[g]` holds the per-replicate coverage flags of family member `g`.
pub fn coverage_error(covered: &[Vec<bool>], level: f64) -> f64 {
    if covered.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for flags in covered {
        let b = flags.len().max(1) as f64;
        let rate = flags.iter().filter(|&&c| c).count() as f64 / b;
        acc += (rate - level).abs();
    }
    acc / covered.len() as f64
}

/// Fraction of replicates selecting exactly (g, h).
pub fn model_selection_rate(selected: &[(usize, usize)], g: usize, h: usize) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    selected
        .iter()
        .filter(|&&(sg, sh)| sg == g && sh == h)
        .count() as f64
        / selected.len() as f64
}

#[cfg(test)]
mod tests;
