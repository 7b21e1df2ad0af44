//! Group-number selection over a (G, H) grid by the quantile information
//! criterion `QIC = log(loss) + lambda G (H + p + 1)`.
//!
//! Grid cells are fitted wave by wave in increasing G + H; every solved
//! cell seeds its right and upper neighbors by splitting the worst-fitting
//! group, which both cuts the grid cost and stabilizes the selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::estimator::{enhanced_fit_with_starts, EstimatorOptions};
use crate::model::{
    node_quantile_prediction, rho, FitResult, Membership, ModelError, Network, PanelData,
    QuantileGrid,
};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss must be nonnegative, got {loss}")]
    NegativeLoss { loss: f64 },
    #[error("selection needs a connected network (mean out-degree is zero)")]
    DisconnectedNetwork,
    #[error("invalid range: {0}")]
    InvalidRange(&'static str),
    #[error("every grid cell failed to fit")]
    AllCellsFailed,
}

/// Penalty weight: either the reference rule or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    /// `N^(1/10) log(T) / (T * 10 * min(nbar, 10))`.
    PaperDefault,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    /// Inclusive G range.
    pub g_range: (usize, usize),
    /// Inclusive H range.
    pub h_range: (usize, usize),
    pub lambda: LambdaRule,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.g_range.0 == 0 || self.h_range.0 == 0 {
            return Err(SelectionError::InvalidRange("lower bounds must be >= 1"));
        }
        if self.g_range.0 > self.g_range.1 || self.h_range.0 > self.h_range.1 {
            return Err(SelectionError::InvalidRange("empty range"));
        }
        Ok(())
    }
}

/// `QIC = log(loss) + lambda G (H + p + 1)`. A perfect fit (`loss == 0`)
/// reports negative infinity so the caller can surface the degeneracy
/// instead of crashing; negative losses are rejected.
pub fn qic(loss: f64, g: usize, h: usize, p: usize, lambda: f64) -> Result<f64, SelectionError> {
    if loss < 0.0 || !loss.is_finite() {
        return Err(SelectionError::NegativeLoss { loss });
    }
    if loss == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(loss.ln() + lambda * (g * (h + p + 1)) as f64)
}

/// The reference tuning rule `N^(1/10) log(T) / (T * 10 * min(nbar, 10))`.
pub fn default_lambda(n: usize, t_len: usize, mean_out_degree: f64) -> Result<f64, SelectionError> {
    if mean_out_degree <= 0.0 {
        return Err(SelectionError::DisconnectedNetwork);
    }
    Ok((n as f64).powf(0.1) * (t_len as f64).ln()
        / (t_len as f64 * 10.0 * mean_out_degree.min(10.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    /// Loss hit exactly zero; QIC is reported as negative infinity.
    DegenerateFit,
    Failed,
}

#[derive(Debug, Clone)]
pub struct QicCell {
    pub g: usize,
    pub h: usize,
    pub loss: f64,
    pub qic: f64,
    pub status: CellStatus,
    pub message: Option<String>,
}

#[derive(Debug)]
pub struct SelectionOutcome {
    pub g: usize,
    pub h: usize,
    pub lambda: f64,
    pub table: Vec<QicCell>,
    /// Fits of every solved cell, keyed by (G, H).
    pub fits: BTreeMap<(usize, usize), FitResult>,
}

/// Per-node loss sums used for splitting the worst-fitting group.
fn node_losses(
    data: &PanelData,
    net: &Network,
    fit: &FitResult,
    grid: &QuantileGrid,
) -> Result<Vec<f64>, ModelError> {
    let n = data.n_nodes();
    let mut losses = vec![0.0; n];
    for k in 0..grid.len() {
        let tau = grid.tau(k);
        for (i, loss) in losses.iter_mut().enumerate() {
            for t in 1..=data.n_periods() {
                let pred =
                    node_quantile_prediction(data, net, &fit.params, &fit.membership, i, t, k)?;
                *loss += rho(data.y(i, t) - pred, tau);
            }
        }
    }
    Ok(losses)
}

/// Warm start for a larger grid cell: relabel the source fit's memberships
/// and split the worst-fitting group (by average member loss) in two, the
/// worse half taking the new label.
fn split_start(
    fit: &FitResult,
    node_loss: &[f64],
    new_g: usize,
    new_h: usize,
) -> Option<Membership> {
    let old_g = fit.membership.n_row_groups();
    let old_h = fit.membership.n_col_groups();
    let mut g_labels = fit.membership.row_labels().to_vec();
    let mut h_labels = fit.membership.col_labels().to_vec();
    if new_g < old_g || new_h < old_h {
        return None;
    }
    if new_g > old_g {
        split_labels(&mut g_labels, old_g, node_loss);
    }
    if new_h > old_h {
        split_labels(&mut h_labels, old_h, node_loss);
    }
    Membership::new(g_labels, h_labels, new_g, new_h).ok()
}

fn split_labels(labels: &mut [usize], old_count: usize, node_loss: &[f64]) {
    // Worst group = largest average member loss (size >= 2 required).
    let mut sums = vec![0.0f64; old_count];
    let mut counts = vec![0usize; old_count];
    for (i, &l) in labels.iter().enumerate() {
        sums[l] += node_loss[i];
        counts[l] += 1;
    }
    let worst = (0..old_count)
        .filter(|&l| counts[l] >= 2)
        .max_by(|&a, &b| {
            let ma = sums[a] / counts[a] as f64;
            let mb = sums[b] / counts[b] as f64;
            ma.partial_cmp(&mb).unwrap()
        });
    let Some(worst) = worst else { return };
    let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == worst).collect();
    members.sort_by(|&a, &b| node_loss[a].partial_cmp(&node_loss[b]).unwrap());
    // The lossier half moves into the newly opened label.
    for &i in members.iter().skip(members.len() / 2) {
        labels[i] = old_count;
    }
}

/// Fit the whole grid and pick the QIC argmin; ties break toward smaller G,
/// then smaller H. Failed cells are excluded from the argmin and surfaced
/// in the table.
pub fn select_group_numbers(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    config: &SelectionConfig,
    base_opts: &EstimatorOptions,
) -> Result<SelectionOutcome, SelectionError> {
    config.validate()?;
    let lambda = match config.lambda {
        LambdaRule::PaperDefault => default_lambda(
            data.n_nodes(),
            data.n_periods(),
            net.mean_out_degree(),
        )?,
        LambdaRule::Fixed(v) => v,
    };

    let (g_lo, g_hi) = config.g_range;
    let (h_lo, h_hi) = config.h_range;
    let mut fits: BTreeMap<(usize, usize), FitResult> = BTreeMap::new();
    let mut losses: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut table: Vec<QicCell> = Vec::new();

    let depth_lo = g_lo + h_lo;
    let depth_hi = g_hi + h_hi;
    for depth in depth_lo..=depth_hi {
        let wave: Vec<(usize, usize)> = (g_lo..=g_hi)
            .flat_map(|g| (h_lo..=h_hi).map(move |h| (g, h)))
            .filter(|&(g, h)| g + h == depth)
            .collect();
        let results: Vec<((usize, usize), Result<FitResult, String>)> = wave
            .par_iter()
            .map(|&(g, h)| {
                let mut opts = base_opts.clone();
                opts.n_row_groups = g;
                opts.n_col_groups = h;
                opts.seed = derive_seed(base_opts.seed, &[g as u64, h as u64]);
                // Warm starts from the already-solved left and lower
                // neighbors, when available.
                let mut starts: Vec<Membership> = Vec::new();
                for source in [(g.wrapping_sub(1), h), (g, h.wrapping_sub(1))] {
                    if let (Some(fit), Some(nl)) = (fits.get(&source), losses.get(&source)) {
                        if let Some(start) = split_start(fit, nl, g, h) {
                            starts.push(start);
                        }
                    }
                }
                let fit = if starts.is_empty() {
                    enhanced_fit_with_starts(data, net, grid, &opts, None)
                } else {
                    enhanced_fit_with_starts(data, net, grid, &opts, Some(&starts))
                };
                ((g, h), fit.map_err(|e| e.to_string()))
            })
            .collect();
        for ((g, h), result) in results {
            match result {
                Ok(fit) => {
                    let qic_value = qic(fit.loss, g, h, data.n_covariates(), lambda)?;
                    let status = if fit.loss == 0.0 {
                        CellStatus::DegenerateFit
                    } else {
                        CellStatus::Ok
                    };
                    table.push(QicCell {
                        g,
                        h,
                        loss: fit.loss,
                        qic: qic_value,
                        status,
                        message: None,
                    });
                    let nl = node_losses(data, net, &fit, grid)?;
                    losses.insert((g, h), nl);
                    fits.insert((g, h), fit);
                }
                Err(message) => {
                    table.push(QicCell {
                        g,
                        h,
                        loss: f64::NAN,
                        qic: f64::NAN,
                        status: CellStatus::Failed,
                        message: Some(message),
                    });
                }
            }
        }
    }
    table.sort_by_key(|c| (c.g, c.h));

    let mut best: Option<(usize, usize, f64)> = None;
    for cell in &table {
        if cell.status == CellStatus::Failed {
            continue;
        }
        let better = match best {
            None => true,
            // Strict improvement, ties toward smaller G then H (the table
            // is already in that order).
            Some((_, _, q)) => cell.qic < q,
        };
        if better {
            best = Some((cell.g, cell.h, cell.qic));
        }
    }
    let (g, h, _) = best.ok_or(SelectionError::AllCellsFailed)?;
    Ok(SelectionOutcome {
        g,
        h,
        lambda,
        table,
        fits,
    })
}
