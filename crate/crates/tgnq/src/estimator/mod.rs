//! Coordinate-descent estimation of the TGNQ model.
//!
//! The vanilla algorithm alternates three steps until the loss stalls:
//! Step I refits the group-level coefficients by exact quantile regressions
//! (per row group and quantile for the general kind, joint designs for the
//! structured kinds), Step II reassigns each row label to its per-node
//! argmin, and Step III sweeps the column labels by cyclic coordinate
//! descent under the mixed old/new objective.
//!
//! The enhanced algorithm wraps the vanilla descent with an active-set
//! escape: follower-side joint label proposals are drawn per node, sampled
//! into candidate column membership vectors, and accepted whenever a
//! restarted descent improves the incumbent.

mod ce;
mod design;
mod enhanced;
mod init;
mod proposals;
mod state;
mod structured;

pub use design::{build_group_design, GroupDesign};
pub use proposals::ProposalTable;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    FitDiagnostics, FitResult, Membership, ModelError, ModelKind, Network, PanelData,
    ParameterSet, QuantileGrid,
};
use crate::rng::derive_seed;
use crate::solver::SolverOptions;

use state::FitState;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("row group {group} has no members")]
    EmptyRowGroup { group: usize },
    #[error("{context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("operation requires kind {expected:?}, options carry {got:?}")]
    KindMismatch { expected: &'static str, got: ModelKind },
    #[error("invalid option: {0}")]
    InvalidOption(&'static str),
}

/// Tuning knobs of the descent and the enhanced escape.
#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub n_row_groups: usize,
    pub n_col_groups: usize,
    pub kind: ModelKind,
    /// Outer iteration cap of the vanilla descent.
    pub max_outer_iters: usize,
    /// Proposal-round cap of the enhanced algorithm.
    pub r_max: usize,
    /// Consecutive failed improvement attempts before fresh proposals.
    pub fail_streak: usize,
    /// Largest active-neighbor set enumerated exactly; larger sets go to
    /// the cross-entropy search.
    pub enum_threshold: usize,
    /// Number of starting memberships; the last start is purely random,
    /// the rest come from the preliminary-regression k-means.
    pub n_inits: usize,
    /// Step-III pass cap per outer iteration.
    pub col_rounds: usize,
    pub seed: u64,
    pub solver: SolverOptions,
    /// Stop when the absolute loss improvement falls below this.
    pub abs_tol: f64,
    /// Or when the relative improvement does.
    pub rel_tol: f64,
}

impl EstimatorOptions {
    pub fn new(n_row_groups: usize, n_col_groups: usize) -> Self {
        Self {
            n_row_groups,
            n_col_groups,
            kind: ModelKind::General,
            max_outer_iters: 40,
            r_max: 10,
            fail_streak: 10,
            enum_threshold: 8,
            n_inits: 3,
            col_rounds: 10,
            seed: 0,
            solver: SolverOptions::default(),
            abs_tol: 1e-9,
            rel_tol: 1e-7,
        }
    }

    fn validate(&self) -> Result<(), EstimatorError> {
        if self.n_row_groups == 0 || self.n_col_groups == 0 {
            return Err(EstimatorError::InvalidOption("group counts must be >= 1"));
        }
        if self.fail_streak == 0 {
            return Err(EstimatorError::InvalidOption("fail_streak must be >= 1"));
        }
        if self.n_inits == 0 {
            return Err(EstimatorError::InvalidOption("n_inits must be >= 1"));
        }
        if self.max_outer_iters == 0 {
            return Err(EstimatorError::InvalidOption(
                "max_outer_iters must be >= 1",
            ));
        }
        Ok(())
    }
}

/// One full outer iteration: Step I, Step II, Step III. Returns the loss.
fn run_iteration(state: &mut FitState, opts: &EstimatorOptions, first: bool) -> f64 {
    state.step1(opts, first);
    state.step2_rows();
    state.step3_cols(opts.col_rounds);
    state.total_loss()
}

/// Reassign the worst-loss node into each empty group; groups that cannot
/// be repaired are dropped for the remainder of the fit.
fn repair_empty_groups(state: &mut FitState) -> bool {
    let mut touched = false;
    loop {
        let row_sizes = state.row_group_sizes();
        let empty_row = (0..state.n_row_groups)
            .find(|&g| row_sizes[g] == 0 && !state.dropped_rows[g]);
        if let Some(g) = empty_row {
            let donor = (0..state.data.n_nodes())
                .filter(|&i| row_sizes[state.g[i]] > 1)
                .max_by(|&a, &b| {
                    state
                        .node_loss_sum(a)
                        .partial_cmp(&state.node_loss_sum(b))
                        .unwrap()
                });
            match donor {
                Some(i) => {
                    state.move_row(i, g);
                    touched = true;
                }
                None => {
                    state.dropped_rows[g] = true;
                    state.diagnostics.dropped_row_groups.push(g);
                }
            }
            continue;
        }
        let col_sizes = state.col_group_sizes();
        let empty_col = (0..state.n_col_groups)
            .find(|&h| col_sizes[h] == 0 && !state.dropped_cols[h]);
        if let Some(h) = empty_col {
            let donor = (0..state.data.n_nodes())
                .filter(|&j| col_sizes[state.h[j]] > 1)
                .max_by(|&a, &b| {
                    state
                        .node_loss_sum(a)
                        .partial_cmp(&state.node_loss_sum(b))
                        .unwrap()
                });
            match donor {
                Some(j) => {
                    state.move_col(j, h);
                    touched = true;
                }
                None => {
                    state.dropped_cols[h] = true;
                    state.diagnostics.dropped_col_groups.push(h);
                }
            }
            continue;
        }
        break;
    }
    touched
}

fn drop_empty_groups(state: &mut FitState) {
    let row_sizes = state.row_group_sizes();
    for g in 0..state.n_row_groups {
        if row_sizes[g] == 0 && !state.dropped_rows[g] {
            state.dropped_rows[g] = true;
            state.diagnostics.dropped_row_groups.push(g);
        }
    }
    let col_sizes = state.col_group_sizes();
    for h in 0..state.n_col_groups {
        if col_sizes[h] == 0 && !state.dropped_cols[h] {
            state.dropped_cols[h] = true;
            state.diagnostics.dropped_col_groups.push(h);
        }
    }
}

/// Vanilla descent on an existing state. The loss trace is non-increasing
/// by construction: Step I keeps the better of old and new coefficients per
/// block, Steps II/III are per-coordinate argmins, and the empty-group
/// repair is rolled back (and the group dropped) whenever it fails to pay
/// for itself within the iteration.
fn run_descent(state: &mut FitState, opts: &EstimatorOptions) -> (Vec<f64>, bool) {
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for iter in 0..opts.max_outer_iters {
        let pre_loss = trace.last().copied().unwrap_or_else(|| state.total_loss());
        let row_sizes = state.row_group_sizes();
        let col_sizes = state.col_group_sizes();
        let has_empty = (0..state.n_row_groups)
            .any(|g| row_sizes[g] == 0 && !state.dropped_rows[g])
            || (0..state.n_col_groups).any(|h| col_sizes[h] == 0 && !state.dropped_cols[h]);
        let loss = if has_empty {
            let snap = state.snapshot();
            repair_empty_groups(state);
            let candidate = run_iteration(state, opts, iter == 0);
            if candidate <= pre_loss + 1e-12 * (1.0 + pre_loss.abs()) {
                candidate
            } else {
                state.restore(&snap);
                drop_empty_groups(state);
                run_iteration(state, opts, iter == 0)
            }
        } else {
            run_iteration(state, opts, iter == 0)
        };
        trace.push(loss);
        if iter > 0 {
            let improvement = pre_loss - loss;
            if improvement < opts.abs_tol || improvement < opts.rel_tol * pre_loss.abs() {
                converged = true;
                break;
            }
        }
    }
    (trace, converged)
}

fn result_from_state(
    state: &FitState,
    trace: Vec<f64>,
    converged: bool,
    seed: u64,
) -> FitResult {
    let iterations = trace.len();
    FitResult {
        params: state.params.clone(),
        membership: state.membership(),
        loss: trace.last().copied().unwrap_or(f64::INFINITY),
        loss_trace: trace,
        iterations,
        converged,
        seed,
        diagnostics: state.diagnostics.clone(),
    }
}

/// Relabel groups into the reporting order: row groups ascending in the
/// median-quantile autoregressive effect, column groups ascending in the
/// median-quantile column-average network effect.
pub fn canonicalize(fit: &mut FitResult, grid: &QuantileGrid) {
    let k_med = grid.median_index();
    let n_g = fit.params.n_row_groups();
    let n_h = fit.params.n_col_groups();
    let mut row_perm: Vec<usize> = (0..n_g).collect();
    row_perm.sort_by(|&a, &b| {
        fit.params
            .nu(k_med, a)
            .partial_cmp(&fit.params.nu(k_med, b))
            .unwrap()
            .then(a.cmp(&b))
    });
    let col_mean = |h: usize| -> f64 {
        (0..n_g).map(|g| fit.params.theta(k_med, g, h)).sum::<f64>() / n_g as f64
    };
    let mut col_perm: Vec<usize> = (0..n_h).collect();
    col_perm.sort_by(|&a, &b| col_mean(a).partial_cmp(&col_mean(b)).unwrap().then(a.cmp(&b)));
    if row_perm.iter().enumerate().all(|(n, &o)| n == o)
        && col_perm.iter().enumerate().all(|(n, &o)| n == o)
    {
        return;
    }
    let mut row_new = vec![0usize; n_g];
    for (new, &old) in row_perm.iter().enumerate() {
        row_new[old] = new;
    }
    let mut col_new = vec![0usize; n_h];
    for (new, &old) in col_perm.iter().enumerate() {
        col_new[old] = new;
    }
    fit.params = fit.params.permuted(&row_perm, &col_perm);
    let g = fit
        .membership
        .row_labels()
        .iter()
        .map(|&l| row_new[l])
        .collect();
    let h = fit
        .membership
        .col_labels()
        .iter()
        .map(|&l| col_new[l])
        .collect();
    fit.membership = Membership::new(g, h, n_g, n_h).expect("permuted labels stay in range");
    for v in &mut fit.diagnostics.dropped_row_groups {
        *v = row_new[*v];
    }
    for v in &mut fit.diagnostics.dropped_col_groups {
        *v = col_new[*v];
    }
}

fn check_inputs(
    data: &PanelData,
    net: &Network,
    opts: &EstimatorOptions,
) -> Result<(), EstimatorError> {
    opts.validate()?;
    if net.n_nodes() != data.n_nodes() {
        return Err(EstimatorError::Shape {
            context: "network nodes vs panel nodes",
            expected: data.n_nodes(),
            got: net.n_nodes(),
        });
    }
    Ok(())
}

fn check_init(
    data: &PanelData,
    opts: &EstimatorOptions,
    init: &Membership,
) -> Result<(), EstimatorError> {
    if init.n_nodes() != data.n_nodes() {
        return Err(EstimatorError::Shape {
            context: "initial membership length",
            expected: data.n_nodes(),
            got: init.n_nodes(),
        });
    }
    if init.n_row_groups() != opts.n_row_groups || init.n_col_groups() != opts.n_col_groups {
        return Err(EstimatorError::Shape {
            context: "initial membership group counts",
            expected: opts.n_row_groups * opts.n_col_groups,
            got: init.n_row_groups() * init.n_col_groups(),
        });
    }
    Ok(())
}

/// Algorithm-1 descent from one starting membership.
pub fn vanilla_fit(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
    init: &Membership,
) -> Result<FitResult, EstimatorError> {
    check_inputs(data, net, opts)?;
    check_init(data, opts, init)?;
    let mut state = FitState::new(data, net, grid, init);
    let (trace, converged) = run_descent(&mut state, opts);
    let mut fit = result_from_state(&state, trace, converged, opts.seed);
    canonicalize(&mut fit, grid);
    Ok(fit)
}

/// Structured-kind descent; same outer loop with the factorized Step I.
pub fn fit_structured(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
    init: &Membership,
) -> Result<FitResult, EstimatorError> {
    if opts.kind == ModelKind::General {
        return Err(EstimatorError::KindMismatch {
            expected: "Additive or Multiplicative",
            got: opts.kind,
        });
    }
    vanilla_fit(data, net, grid, opts, init)
}

/// Multi-start vanilla descent: data-driven k-means starts plus one random
/// start, best final loss wins.
pub fn fit_multi(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
) -> Result<FitResult, EstimatorError> {
    check_inputs(data, net, opts)?;
    let starts = init::initial_memberships(
        data,
        net,
        opts.n_row_groups,
        opts.n_col_groups,
        opts.n_inits,
        opts.seed,
    );
    fit_over_starts(data, net, grid, opts, &starts)
}

pub(crate) fn fit_over_starts(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
    starts: &[Membership],
) -> Result<FitResult, EstimatorError> {
    let mut best: Option<FitResult> = None;
    let mut state = FitState::new(data, net, grid, &starts[0]);
    for (idx, start) in starts.iter().enumerate() {
        check_init(data, opts, start)?;
        if idx > 0 {
            state.reset_from_membership(start);
        }
        let (trace, converged) = run_descent(&mut state, opts);
        let fit = result_from_state(&state, trace, converged, opts.seed);
        if best.as_ref().map(|b| fit.loss < b.loss).unwrap_or(true) {
            best = Some(fit);
        }
    }
    let mut fit = best.expect("at least one start");
    canonicalize(&mut fit, grid);
    Ok(fit)
}

/// Algorithm 2: multi-start vanilla initialization plus the active-set
/// escape for the column memberships.
pub fn enhanced_fit(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
) -> Result<FitResult, EstimatorError> {
    check_inputs(data, net, opts)?;
    enhanced::run(data, net, grid, opts)
}

/// Algorithm 2 from externally supplied starting memberships (used by the
/// selection grid's warm-start chain); `None` falls back to the default
/// initialization scheme.
pub fn enhanced_fit_with_starts(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
    starts: Option<&[Membership]>,
) -> Result<FitResult, EstimatorError> {
    check_inputs(data, net, opts)?;
    match starts {
        Some(s) if !s.is_empty() => enhanced::run_from_starts(data, net, grid, opts, s),
        _ => enhanced::run(data, net, grid, opts),
    }
}

/// One Step-I pass at fixed memberships (also the oracle estimator and the
/// post-refinement refit).
pub fn update_params(
    data: &PanelData,
    net: &Network,
    mem: &Membership,
    grid: &QuantileGrid,
    kind: ModelKind,
    solver: &SolverOptions,
) -> Result<(ParameterSet, FitDiagnostics), EstimatorError> {
    let sizes = mem.row_group_sizes();
    if let Some(g) = (0..mem.n_row_groups()).find(|&g| sizes[g] == 0) {
        return Err(EstimatorError::EmptyRowGroup { group: g });
    }
    if net.n_nodes() != data.n_nodes() || mem.n_nodes() != data.n_nodes() {
        return Err(EstimatorError::Shape {
            context: "update_params inputs",
            expected: data.n_nodes(),
            got: net.n_nodes().min(mem.n_nodes()),
        });
    }
    let mut state = FitState::new(data, net, grid, mem);
    let opts_like = EstimatorOptions {
        kind,
        solver: *solver,
        ..EstimatorOptions::new(mem.n_row_groups(), mem.n_col_groups())
    };
    state.step1(&opts_like, true);
    Ok((state.params.clone(), state.diagnostics.clone()))
}

/// Step II as a standalone operation.
pub fn update_row_memberships(
    data: &PanelData,
    net: &Network,
    params: &ParameterSet,
    mem: &Membership,
    grid: &QuantileGrid,
) -> Result<Membership, EstimatorError> {
    let mut state = FitState::new(data, net, grid, mem);
    state.install_params(params)?;
    state.step2_rows();
    Ok(state.membership())
}

/// Step III as a standalone operation, up to `rounds` full passes.
pub fn update_col_memberships(
    data: &PanelData,
    net: &Network,
    params: &ParameterSet,
    mem: &Membership,
    grid: &QuantileGrid,
    rounds: usize,
) -> Result<Membership, EstimatorError> {
    let mut state = FitState::new(data, net, grid, mem);
    state.install_params(params)?;
    state.step3_cols(rounds);
    Ok(state.membership())
}

/// Joint follower-side label proposals for the given active node set.
pub fn propose_col_memberships(
    data: &PanelData,
    net: &Network,
    params: &ParameterSet,
    mem: &Membership,
    active: &[usize],
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
) -> Result<ProposalTable, EstimatorError> {
    let mut state = FitState::new(data, net, grid, mem);
    state.install_params(params)?;
    let mut mask = vec![false; data.n_nodes()];
    for &j in active {
        if j >= mask.len() {
            return Err(EstimatorError::Shape {
                context: "active set node id",
                expected: mask.len(),
                got: j,
            });
        }
        mask[j] = true;
    }
    Ok(proposals::propose(
        &state,
        &mask,
        opts.enum_threshold,
        derive_seed(opts.seed, &[0x9906]),
        0,
    ))
}

/// Seeded stream used by the enhanced algorithm's random draws.
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag]))
}
