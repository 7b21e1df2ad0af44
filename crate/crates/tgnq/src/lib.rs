//! Two-way grouped network quantile (TGNQ) autoregression.
//!
//! Each node of a directed network carries two latent memberships: a row
//! ("receiving") group and a column ("influencing") group. The conditional
//! quantile of node `i` at time `t` is
//!
//! ```text
//! Q_it(tau) = sum_j theta[g_i, h_j](tau) w_ij Y_{j,t-1}
//!           + nu[g_i](tau) Y_{i,t-1} + x_it' gamma[g_i](tau)
//! ```
//!
//! with row-normalized weights `w_ij = a_ij / n_i`. The crate estimates the
//! memberships and the group-level coefficients jointly over a set of
//! quantiles by coordinate descent ([`estimator`]), selects the group numbers
//! by an information criterion ([`selection`]), refines memberships before
//! inference ([`refinement`]), computes sandwich standard errors
//! ([`inference`]), and ships a seeded Monte-Carlo harness ([`sim`],
//! [`metrics`]).

pub mod estimator;
pub(crate) mod rng;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod refinement;
pub mod selection;
pub mod sim;
pub mod solver;

pub use model::{
    check_loss, node_quantile_prediction, total_loss, FitDiagnostics, FitResult, Membership,
    ModelError, ModelKind, Network, PanelData, ParameterSet, QuantileGrid,
};
