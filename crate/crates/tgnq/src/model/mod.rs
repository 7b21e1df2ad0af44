//! Domain types and the check-loss primitives shared by every stage of the
//! pipeline: panel data, network structure, quantile grids, memberships,
//! grouped parameter sets, and the multi-quantile loss.

mod network;
mod panel;
mod params;

pub use network::Network;
pub use panel::{PanelData, QuantileGrid};
pub use params::{FitDiagnostics, FitResult, Membership, ModelKind, ParameterSet};

use thiserror::Error;

/// Errors raised by domain-type construction and evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("quantile {tau} outside the open interval (0, 1)")]
    InvalidQuantile { tau: f64 },
    #[error("quantile grid must be strictly increasing")]
    UnsortedQuantiles,
    #[error("{context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("panel needs at least {min} {what}, got {got}")]
    TooSmall {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("membership label {label} out of range for {group_count} groups")]
    LabelOutOfRange { label: usize, group_count: usize },
    #[error("edge ({src}, {dst}) out of range for {n} nodes")]
    EdgeOutOfRange { src: usize, dst: usize, n: usize },
    #[error("self-loop on node {node} is not allowed")]
    SelfLoop { node: usize },
    #[error("index out of range: {context}")]
    IndexOutOfRange { context: &'static str },
    #[error("structured parameters disagree with derived theta (kind {kind:?})")]
    InconsistentStructured { kind: ModelKind },
}

/// Check loss `rho_tau(u) = u (tau - 1{u < 0})`.
///
/// Nonnegative, zero exactly at `u = 0`, and the building block of every
/// objective in this crate.
pub fn check_loss(u: f64, tau: f64) -> Result<f64, ModelError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ModelError::InvalidQuantile { tau });
    }
    if !u.is_finite() {
        return Err(ModelError::NonFinite {
            context: "check_loss residual",
        });
    }
    Ok(rho(u, tau))
}

/// Unchecked check loss for hot loops; inputs are validated at construction.
#[inline(always)]
pub(crate) fn rho(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Conditional-quantile prediction for node `i` at time `t` (1-based in `t`)
/// and quantile index `k`:
/// `sum_{j in N_i} theta[g_i, h_j] w_ij Y_{j,t-1} + nu[g_i] Y_{i,t-1} + x_it' gamma[g_i]`.
pub fn node_quantile_prediction(
    data: &PanelData,
    net: &Network,
    params: &ParameterSet,
    mem: &Membership,
    i: usize,
    t: usize,
    k: usize,
) -> Result<f64, ModelError> {
    if i >= data.n_nodes() {
        return Err(ModelError::IndexOutOfRange { context: "node" });
    }
    if t < 1 || t > data.n_periods() {
        return Err(ModelError::IndexOutOfRange { context: "time" });
    }
    if k >= params.n_quantiles() {
        return Err(ModelError::IndexOutOfRange {
            context: "quantile index",
        });
    }
    if mem.n_nodes() != data.n_nodes() || net.n_nodes() != data.n_nodes() {
        return Err(ModelError::DimensionMismatch {
            context: "prediction inputs",
            expected: data.n_nodes(),
            got: mem.n_nodes().min(net.n_nodes()),
        });
    }
    mem.check_compatible(params)?;
    let g = mem.row_label(i);
    let mut acc = 0.0;
    let w = net.weight(i);
    for &j in net.out_neighbors(i) {
        acc += params.theta(k, g, mem.col_label(j)) * w * data.y(j, t - 1);
    }
    acc += params.nu(k, g) * data.y(i, t - 1);
    for l in 0..data.n_covariates() {
        acc += params.gamma(k, g, l) * data.x(i, t, l);
    }
    Ok(acc)
}

/// Multi-quantile loss of Eq.-style form
/// `(NTK)^-1 sum_k sum_i sum_t rho_{tau_k}(Y_it - Q_it(tau_k))`.
pub fn total_loss(
    data: &PanelData,
    net: &Network,
    params: &ParameterSet,
    mem: &Membership,
    grid: &QuantileGrid,
) -> Result<f64, ModelError> {
    if grid.len() != params.n_quantiles() {
        return Err(ModelError::DimensionMismatch {
            context: "quantile grid vs parameters",
            expected: params.n_quantiles(),
            got: grid.len(),
        });
    }
    let (n, t_len) = (data.n_nodes(), data.n_periods());
    let mut sum = 0.0;
    for k in 0..grid.len() {
        let tau = grid.tau(k);
        for i in 0..n {
            for t in 1..=t_len {
                let pred = node_quantile_prediction(data, net, params, mem, i, t, k)?;
                sum += rho(data.y(i, t) - pred, tau);
            }
        }
    }
    Ok(sum / (n as f64 * t_len as f64 * grid.len() as f64))
}

#[cfg(test)]
mod tests;
