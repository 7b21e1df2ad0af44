//! Seeded Monte-Carlo replication: generate, fit, refine, infer, evaluate.
//!
//! Every replicate derives its own RNG streams from the master seed and an
//! index, so results are independent of the worker count and bitwise
//! reproducible. Failed replicates are recorded and excluded from the
//! aggregates.

use rayon::prelude::*;

use crate::estimator::{enhanced_fit, EstimatorOptions};
use crate::inference::{infer, InferenceOptions};
use crate::metrics::{
    alignment_maps, clustering_errors, clustering_errors_best_permutation, coverage_error,
    model_selection_rate, param_errors, rmse_all_errors, rmse_params, ParamErrors,
};
use crate::model::{Membership, ModelKind, QuantileGrid};
use crate::refinement::{refine, RefinedFit, RefinementOptions};
use crate::rng::derive_seed;
use crate::selection::{select_group_numbers, SelectionConfig};

use super::{gen_memberships, gen_panel, NetworkConfig, ParamFunctions, ScenarioConfig, SimError};

/// Full experiment description for `run_replications`.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub network: NetworkConfig,
    pub taus: Vec<f64>,
    /// Working group counts for the fit (may differ from the truth).
    pub fit_g: usize,
    pub fit_h: usize,
    pub kind: ModelKind,
    pub estimator: EstimatorOptions,
    pub refine: bool,
    pub infer: bool,
    pub hac: bool,
    /// When set, each replicate runs the QIC grid instead of a single fit.
    pub selection: Option<SelectionConfig>,
    pub n_replicates: usize,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn new(
        scenario: ScenarioConfig,
        network: NetworkConfig,
        fit_g: usize,
        fit_h: usize,
        n_replicates: usize,
        master_seed: u64,
    ) -> Self {
        let mut estimator = EstimatorOptions::new(fit_g, fit_h);
        estimator.seed = master_seed;
        Self {
            scenario,
            network,
            taus: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            fit_g,
            fit_h,
            kind: ModelKind::General,
            estimator,
            refine: true,
            infer: false,
            hac: false,
            selection: None,
            n_replicates,
            master_seed,
        }
    }
}

/// Coverage flags keyed by true labels. Family: 0 = theta (secondary index
/// is the true column group), 1 = nu, 2 = gamma (secondary = covariate).
#[derive(Debug, Clone)]
pub struct InferenceSummary {
    pub coverage: Vec<(u8, usize, usize, usize, bool)>,
}

#[derive(Debug, Clone)]
pub struct CellSummary {
    pub g: usize,
    pub h: usize,
    pub loss: f64,
    pub failed: bool,
    /// Node-level error norms per quantile for this cell's fit.
    pub errors_all: Option<ParamErrors>,
}

#[derive(Debug, Clone)]
pub struct SelectionSummary {
    pub selected_g: usize,
    pub selected_h: usize,
    pub cells: Vec<CellSummary>,
}

#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub loss: f64,
    pub converged: bool,
    pub iterations: usize,
    pub rho1_chi: f64,
    pub rho2_chi: f64,
    pub rho1_perm: f64,
    pub rho2_perm: f64,
    /// Aligned error norms per quantile (post-refinement when enabled).
    pub errors: ParamErrors,
    /// Node-level absolute-error averages per quantile.
    pub errors_all: ParamErrors,
    pub changed_rows: usize,
    pub changed_cols: usize,
    pub inference: Option<InferenceSummary>,
    pub selection: Option<SelectionSummary>,
}

#[derive(Debug, Clone)]
pub enum ReplicateOutcome {
    Success(Box<ReplicateRecord>),
    Failure {
        index: usize,
        seed: u64,
        message: String,
    },
}

/// One aggregate metric value in long form.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub metric: String,
    pub tau: Option<f64>,
    pub g: Option<usize>,
    pub h: Option<usize>,
    pub value: f64,
}

#[derive(Debug)]
pub struct ReplicateStore {
    pub records: Vec<ReplicateOutcome>,
    pub aggregates: Vec<AggregateRow>,
    pub n_failed: usize,
}

/// True structured parameters and memberships for one replicate.
fn generate_truth(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<
    (
        crate::model::Network,
        Membership,
        ParamFunctions,
        crate::model::PanelData,
    ),
    SimError,
> {
    config.scenario.validate()?;
    let mut net_cfg = config.network.clone();
    net_cfg.seed = derive_seed(seed, &[1]);
    let net = net_cfg.generate()?;
    let g0 = gen_memberships(
        net.n_nodes(),
        &config.scenario.row_ratios,
        derive_seed(seed, &[2]),
    )?;
    let h0 = gen_memberships(
        net.n_nodes(),
        &config.scenario.col_ratios,
        derive_seed(seed, &[3]),
    )?;
    let truth_mem = Membership::new(g0, h0, config.scenario.g0, config.scenario.h0)
        .map_err(SimError::Model)?;
    let fns = ParamFunctions::scenario(
        config.scenario.scenario,
        config.scenario.g0,
        config.scenario.h0,
    )?;
    let panel = gen_panel(
        &net,
        truth_mem.row_labels(),
        truth_mem.col_labels(),
        &fns,
        config.scenario.t_len,
        config.scenario.burn_in,
        derive_seed(seed, &[4]),
    )?;
    Ok((net, truth_mem, fns, panel))
}

/// Representative estimated label per true group: the estimated group with
/// the largest overlap.
fn representatives(est: &[usize], truth: &[usize], n_est: usize, n_true: usize) -> Vec<usize> {
    let mut counts = vec![vec![0usize; n_est]; n_true];
    for (&e, &t) in est.iter().zip(truth) {
        counts[t][e] += 1;
    }
    counts
        .iter()
        .map(|row| {
            let mut best = 0;
            let mut best_count = 0;
            for (e, &c) in row.iter().enumerate() {
                if c > best_count {
                    best_count = c;
                    best = e;
                }
            }
            best
        })
        .collect()
}

fn run_one(config: &ExperimentConfig, index: usize) -> Result<ReplicateRecord, SimError> {
    let seed = derive_seed(config.master_seed, &[0x5eed, index as u64]);
    let (net, truth_mem, fns, panel) = generate_truth(config, seed)?;
    let grid = QuantileGrid::new(config.taus.clone()).map_err(SimError::Model)?;
    let truth_params = fns.parameter_set(&grid);

    let mut est_opts = config.estimator.clone();
    est_opts.kind = config.kind;
    est_opts.n_row_groups = config.fit_g;
    est_opts.n_col_groups = config.fit_h;
    est_opts.seed = derive_seed(seed, &[5]);

    let mut selection_summary = None;
    let fit = if let Some(sel_cfg) = &config.selection {
        let outcome = select_group_numbers(&panel, &net, &grid, sel_cfg, &est_opts)
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        let mut cells = Vec::new();
        for cell in &outcome.table {
            let errors_all = outcome.fits.get(&(cell.g, cell.h)).map(|fit| {
                rmse_all_errors(&fit.params, &fit.membership, &truth_params, &truth_mem)
                    .expect("dimensions agree by construction")
            });
            cells.push(CellSummary {
                g: cell.g,
                h: cell.h,
                loss: cell.loss,
                failed: errors_all.is_none(),
                errors_all,
            });
        }
        let selected = outcome
            .fits
            .get(&(outcome.g, outcome.h))
            .expect("selected cell has a fit")
            .clone();
        selection_summary = Some(SelectionSummary {
            selected_g: outcome.g,
            selected_h: outcome.h,
            cells,
        });
        selected
    } else {
        enhanced_fit(&panel, &net, &grid, &est_opts)?
    };

    let (final_mem, final_params, changed_rows, changed_cols, refined) = if config.refine {
        let ref_opts = RefinementOptions {
            seed: derive_seed(seed, &[6]),
            solver: est_opts.solver,
            enum_threshold: est_opts.enum_threshold,
            ..RefinementOptions::default()
        };
        let refined = refine(&panel, &net, &fit, &grid, &ref_opts)
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        (
            refined.membership.clone(),
            refined.params.clone(),
            refined.report.changed_rows.len(),
            refined.report.changed_cols.len(),
            Some(refined),
        )
    } else {
        (fit.membership.clone(), fit.params.clone(), 0, 0, None)
    };

    let maps = alignment_maps(&final_mem, &truth_mem)
        .map_err(|e| SimError::Invalid(e.to_string()))?;
    let (rho1_chi, rho2_chi) = clustering_errors(&final_mem, &truth_mem)
        .map_err(|e| SimError::Invalid(e.to_string()))?;
    let (rho1_perm, rho2_perm) = clustering_errors_best_permutation(&final_mem, &truth_mem)
        .map_err(|e| SimError::Invalid(e.to_string()))?;
    let errors = param_errors(&final_params, &truth_params, &maps)
        .map_err(|e| SimError::Invalid(e.to_string()))?;
    let errors_all = rmse_all_errors(&final_params, &final_mem, &truth_params, &truth_mem)
        .map_err(|e| SimError::Invalid(e.to_string()))?;

    let inference = if config.infer {
        if !config.refine {
            return Err(SimError::Invalid(
                "inference requires refinement to be enabled".into(),
            ));
        }
        let refined: &RefinedFit = refined.as_ref().expect("refined when refine is set");
        let (_cov, cis) = infer(
            &panel,
            &net,
            refined,
            &grid,
            &InferenceOptions {
                hac: config.hac,
                level: 0.95,
            },
        )
        .map_err(|e| SimError::Invalid(e.to_string()))?;
        // Coverage of the true parameters through representative labels.
        let row_rep = representatives(
            final_mem.row_labels(),
            truth_mem.row_labels(),
            final_mem.n_row_groups(),
            truth_mem.n_row_groups(),
        );
        let col_rep = representatives(
            final_mem.col_labels(),
            truth_mem.col_labels(),
            final_mem.n_col_groups(),
            truth_mem.n_col_groups(),
        );
        let n_h = final_mem.n_col_groups();
        let p = panel.n_covariates();
        let block = n_h + 1 + p;
        let mut coverage = Vec::new();
        for k in 0..grid.len() {
            let entry = |g_est: usize, c: usize| {
                &cis.entries[k * final_mem.n_row_groups() * block + g_est * block + c]
            };
            for (g0, &g_est) in row_rep.iter().enumerate() {
                for (h0, &h_est) in col_rep.iter().enumerate() {
                    let e = entry(g_est, h_est);
                    let truth = truth_params.theta(k, g0, h0);
                    coverage.push((0u8, g0, h0, k, e.lower <= truth && truth <= e.upper));
                }
                let e = entry(g_est, n_h);
                let truth = truth_params.nu(k, g0);
                coverage.push((1u8, g0, 0, k, e.lower <= truth && truth <= e.upper));
                for l in 0..p {
                    let e = entry(g_est, n_h + 1 + l);
                    let truth = truth_params.gamma(k, g0, l);
                    coverage.push((2u8, g0, l, k, e.lower <= truth && truth <= e.upper));
                }
            }
        }
        Some(InferenceSummary { coverage })
    } else {
        None
    };

    Ok(ReplicateRecord {
        index,
        seed,
        loss: fit.loss,
        converged: fit.converged,
        iterations: fit.iterations,
        rho1_chi,
        rho2_chi,
        rho1_perm,
        rho2_perm,
        errors,
        errors_all,
        changed_rows,
        changed_cols,
        inference,
        selection: selection_summary,
    })
}

/// Run every replicate in parallel (deterministically, independent of the
/// worker count) and aggregate in index order.
pub fn run_replications(config: &ExperimentConfig) -> Result<ReplicateStore, SimError> {
    if config.n_replicates == 0 {
        return Err(SimError::TooSmall {
            what: "replicates",
            min: 1,
            got: 0,
        });
    }
    let mut records: Vec<(usize, ReplicateOutcome)> = (0..config.n_replicates)
        .into_par_iter()
        .map(|b| {
            let outcome = match run_one(config, b) {
                Ok(record) => ReplicateOutcome::Success(Box::new(record)),
                Err(err) => ReplicateOutcome::Failure {
                    index: b,
                    seed: derive_seed(config.master_seed, &[0x5eed, b as u64]),
                    message: err.to_string(),
                },
            };
            (b, outcome)
        })
        .collect();
    records.sort_by_key(|&(b, _)| b);
    let records: Vec<ReplicateOutcome> = records.into_iter().map(|(_, r)| r).collect();
    let store = aggregate(config, records);
    Ok(store)
}

fn aggregate(config: &ExperimentConfig, records: Vec<ReplicateOutcome>) -> ReplicateStore {
    let successes: Vec<&ReplicateRecord> = records
        .iter()
        .filter_map(|r| match r {
            ReplicateOutcome::Success(rec) => Some(rec.as_ref()),
            ReplicateOutcome::Failure { .. } => None,
        })
        .collect();
    let n_failed = records.len() - successes.len();
    let mut rows: Vec<AggregateRow> = Vec::new();
    let push = |rows: &mut Vec<AggregateRow>,
                metric: &str,
                tau: Option<f64>,
                g: Option<usize>,
                h: Option<usize>,
                value: f64| {
        rows.push(AggregateRow {
            metric: metric.to_string(),
            tau,
            g,
            h,
            value,
        });
    };
    push(
        &mut rows,
        "n_replicates",
        None,
        None,
        None,
        records.len() as f64,
    );
    push(&mut rows, "n_failed", None, None, None, n_failed as f64);
    if successes.is_empty() {
        return ReplicateStore {
            records,
            aggregates: rows,
            n_failed,
        };
    }
    let b = successes.len() as f64;
    let mean = |pick: &dyn Fn(&ReplicateRecord) -> f64| -> f64 {
        successes.iter().map(|r| pick(r)).sum::<f64>() / b
    };
    push(&mut rows, "mean_loss", None, None, None, mean(&|r| r.loss));
    push(&mut rows, "rho1_chi", None, None, None, mean(&|r| r.rho1_chi));
    push(&mut rows, "rho2_chi", None, None, None, mean(&|r| r.rho2_chi));
    push(&mut rows, "rho1_perm", None, None, None, mean(&|r| r.rho1_perm));
    push(&mut rows, "rho2_perm", None, None, None, mean(&|r| r.rho2_perm));

    let per_rep: Vec<ParamErrors> = successes.iter().map(|r| r.errors.clone()).collect();
    let rmse = rmse_params(&per_rep);
    let per_rep_all: Vec<ParamErrors> = successes.iter().map(|r| r.errors_all.clone()).collect();
    let rmse_all = rmse_params(&per_rep_all);
    for (k, &tau) in config.taus.iter().enumerate() {
        if k < rmse.theta.len() {
            push(&mut rows, "rmse_theta", Some(tau), None, None, rmse.theta[k]);
            push(&mut rows, "rmse_nu", Some(tau), None, None, rmse.nu[k]);
            push(&mut rows, "rmse_gamma", Some(tau), None, None, rmse.gamma[k]);
            push(
                &mut rows,
                "rmse_all_theta",
                Some(tau),
                None,
                None,
                rmse_all.theta[k],
            );
            push(&mut rows, "rmse_all_nu", Some(tau), None, None, rmse_all.nu[k]);
            push(
                &mut rows,
                "rmse_all_gamma",
                Some(tau),
                None,
                None,
                rmse_all.gamma[k],
            );
        }
    }

    // Coverage errors per family and quantile.
    if successes.iter().any(|r| r.inference.is_some()) {
        for (k, &tau) in config.taus.iter().enumerate() {
            for (family, name) in [(0u8, "ae_cp_theta"), (1, "ae_cp_nu"), (2, "ae_cp_gamma")] {
                let mut keyed: std::collections::BTreeMap<(usize, usize), Vec<bool>> =
                    std::collections::BTreeMap::new();
                for rec in &successes {
                    if let Some(inf) = &rec.inference {
                        for &(fam, g0, sec, kk, covered) in &inf.coverage {
                            if fam == family && kk == k {
                                keyed.entry((g0, sec)).or_default().push(covered);
                            }
                        }
                    }
                }
                if !keyed.is_empty() {
                    let flags: Vec<Vec<bool>> = keyed.into_values().collect();
                    push(
                        &mut rows,
                        name,
                        Some(tau),
                        None,
                        None,
                        coverage_error(&flags, 0.95),
                    );
                }
            }
        }
    }

    // Selection aggregates: MSR per cell plus mean node-level errors.
    if successes.iter().any(|r| r.selection.is_some()) {
        let selected: Vec<(usize, usize)> = successes
            .iter()
            .filter_map(|r| r.selection.as_ref().map(|s| (s.selected_g, s.selected_h)))
            .collect();
        let mut cells: Vec<(usize, usize)> = successes
            .iter()
            .flat_map(|r| {
                r.selection
                    .iter()
                    .flat_map(|s| s.cells.iter().map(|c| (c.g, c.h)))
            })
            .collect();
        cells.sort_unstable();
        cells.dedup();
        for (g, h) in cells {
            push(
                &mut rows,
                "msr",
                None,
                Some(g),
                Some(h),
                model_selection_rate(&selected, g, h),
            );
            let cell_errors: Vec<ParamErrors> = successes
                .iter()
                .filter_map(|r| {
                    r.selection.as_ref().and_then(|s| {
                        s.cells
                            .iter()
                            .find(|c| c.g == g && c.h == h)
                            .and_then(|c| c.errors_all.clone())
                    })
                })
                .collect();
            if !cell_errors.is_empty() {
                let cell_rmse = rmse_params(&cell_errors);
                let k_len = cell_rmse.theta.len().max(1) as f64;
                push(
                    &mut rows,
                    "rmse_all_theta_mean",
                    None,
                    Some(g),
                    Some(h),
                    cell_rmse.theta.iter().sum::<f64>() / k_len,
                );
                push(
                    &mut rows,
                    "rmse_all_nu_mean",
                    None,
                    Some(g),
                    Some(h),
                    cell_rmse.nu.iter().sum::<f64>() / k_len,
                );
                push(
                    &mut rows,
                    "rmse_all_gamma_mean",
                    None,
                    Some(g),
                    Some(h),
                    cell_rmse.gamma.iter().sum::<f64>() / k_len,
                );
            }
        }
    }

    ReplicateStore {
        records,
        aggregates: rows,
        n_failed,
    }
}
