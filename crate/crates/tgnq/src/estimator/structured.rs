//! Step-I variants for the additive and multiplicative network effects.
//!
//! Additive kind: `theta[g][h] = alpha[g] + beta[h]` turns Step I into one
//! joint quantile regression per quantile across all row groups, with the
//! per-group full lag sum carrying `alpha` and the shared column-group
//! aggregates carrying `beta`. One `beta` column is dropped in the solve
//! (the factor pair is only identified up to a level shift) and the level
//! convention is restored afterwards: the column group attaining the
//! minimal `beta` at the median quantile is pinned to zero at every
//! quantile.
//!
//! Multiplicative kind: `theta[g][h] = alpha[g] * beta[h]` alternates two
//! linear quantile fits, `alpha` given `beta` (separable per row group) and
//! `beta` given `alpha` (joint), twice per outer iteration. The scale
//! convention `alpha[first group] = 1` is enforced after each Step I.

use ndarray::Array2;

use crate::model::ModelKind;
use crate::solver::{qr_objective, solve_qr, QrProblem, QrStatus, SolverOptions};

use super::state::FitState;

/// Factor pair currently stored in the state, or a zero pair when the
/// parameters are still the all-zero initialization.
fn current_factors(state: &FitState) -> (Array2<f64>, Array2<f64>) {
    let k_len = state.grid.len();
    match (state.params.alpha_array(), state.params.beta_array()) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => (
            Array2::zeros((k_len, state.n_row_groups)),
            Array2::zeros((k_len, state.n_col_groups)),
        ),
    }
}

pub(crate) fn step1_additive(state: &mut FitState, solver: &SolverOptions) {
    let n = state.data.n_nodes();
    let t_len = state.data.n_periods();
    let p = state.data.n_covariates();
    let k_len = state.grid.len();
    let n_g = state.n_row_groups;
    let n_h = state.n_col_groups;

    // Identification in the solve: drop one beta column (the last live one).
    let drop_h = (0..n_h)
        .rev()
        .find(|&h| !state.dropped_cols[h])
        .unwrap_or(n_h - 1);
    let beta_cols: Vec<usize> = (0..n_h).filter(|&h| h != drop_h).collect();
    let q = n_g + beta_cols.len() + n_g + n_g * p;
    let m = n * t_len;

    let mut design = Array2::zeros((m, q));
    let mut response = Vec::with_capacity(m);
    let nu_off = n_g + beta_cols.len();
    let gamma_off = nu_off + n_g;
    let mut row = 0;
    for i in 0..n {
        let g = state.g[i];
        let yi = state.data.y_row(i);
        let xi = state.data.x_row(i);
        let pooled = state.pooled_lag_slice(i);
        for tt in 0..t_len {
            design[[row, g]] = pooled[tt];
            for (slot, &h) in beta_cols.iter().enumerate() {
                design[[row, n_g + slot]] = state.agg_slice(i, h)[tt];
            }
            design[[row, nu_off + g]] = yi[tt];
            for l in 0..p {
                design[[row, gamma_off + g * p + l]] = xi[tt * p + l];
            }
            response.push(yi[tt + 1]);
            row += 1;
        }
    }

    let (alpha_prev, beta_prev) = current_factors(state);
    let mut alpha = Array2::zeros((k_len, n_g));
    let mut beta = Array2::zeros((k_len, n_h));
    for k in 0..k_len {
        let problem = QrProblem::new(design.clone(), response.clone(), state.grid.tau(k))
            .expect("validated state");
        let sol = solve_qr(&problem, solver);
        if sol.status == QrStatus::Degenerate {
            state.diagnostics.degenerate_solves += 1;
        }
        // Previous iterate mapped into the dropped-column convention.
        let shift = beta_prev[[k, drop_h]];
        let mut prev = vec![0.0; q];
        for g in 0..n_g {
            prev[g] = alpha_prev[[k, g]] + shift;
            prev[nu_off + g] = state.params.nu(k, g);
            for l in 0..p {
                prev[gamma_off + g * p + l] = state.params.gamma(k, g, l);
            }
        }
        for (slot, &h) in beta_cols.iter().enumerate() {
            prev[n_g + slot] = beta_prev[[k, h]] - shift;
        }
        let keep_new = sol.objective <= qr_objective(&problem, &prev);
        let coef = if keep_new { &sol.coef } else { &prev };
        for g in 0..n_g {
            alpha[[k, g]] = coef[g];
            state.params.nu_mut()[[k, g]] = coef[nu_off + g];
            for l in 0..p {
                state.params.gamma_mut()[[k, g, l]] = coef[gamma_off + g * p + l];
            }
        }
        for (slot, &h) in beta_cols.iter().enumerate() {
            beta[[k, h]] = coef[n_g + slot];
        }
        beta[[k, drop_h]] = 0.0;
    }

    // Level convention: the column group with the smallest beta at the
    // median quantile is pinned to zero at every quantile.
    let k_med = state.grid.median_index();
    let mut h_star = drop_h;
    let mut best = f64::INFINITY;
    for h in 0..n_h {
        if state.dropped_cols[h] {
            continue;
        }
        if beta[[k_med, h]] < best {
            best = beta[[k_med, h]];
            h_star = h;
        }
    }
    for k in 0..k_len {
        let c = beta[[k, h_star]];
        for h in 0..n_h {
            beta[[k, h]] -= c;
        }
        for g in 0..n_g {
            alpha[[k, g]] += c;
        }
    }

    write_theta_from_factors(state, &alpha, &beta, ModelKind::Additive);
    state.rebuild_resid();
}

pub(crate) fn step1_multiplicative(
    state: &mut FitState,
    solver: &SolverOptions,
    first_iteration: bool,
) {
    let k_len = state.grid.len();
    let n_g = state.n_row_groups;
    let n_h = state.n_col_groups;

    if first_iteration || state.params.alpha_array().is_none() {
        // Seed the factors from one unconstrained Step I.
        state.step1_general(solver);
        let mut alpha = Array2::from_elem((k_len, n_g), 1.0);
        let mut beta = Array2::zeros((k_len, n_h));
        let live: Vec<usize> = (0..n_g).filter(|&g| !state.dropped_rows[g]).collect();
        for k in 0..k_len {
            for h in 0..n_h {
                let mean = live
                    .iter()
                    .map(|&g| state.params.theta(k, g, h))
                    .sum::<f64>()
                    / live.len().max(1) as f64;
                beta[[k, h]] = mean;
            }
            for g in 0..n_g {
                alpha[[k, g]] = 1.0;
            }
        }
        write_theta_from_factors(state, &alpha, &beta, ModelKind::Multiplicative);
        state.rebuild_resid();
    }

    for _ in 0..2 {
        alpha_step(state, solver);
        beta_step(state, solver);
    }

    // Scale convention: alpha of the first live row group equals one.
    let (mut alpha, mut beta) = current_factors(state);
    let g_star = (0..n_g).find(|&g| !state.dropped_rows[g]).unwrap_or(0);
    for k in 0..k_len {
        let c = alpha[[k, g_star]];
        if c.abs() > 1e-10 {
            for g in 0..n_g {
                alpha[[k, g]] /= c;
            }
            for h in 0..n_h {
                beta[[k, h]] *= c;
            }
        } else {
            state.diagnostics.frozen_beta_updates += 1;
        }
    }
    write_theta_from_factors(state, &alpha, &beta, ModelKind::Multiplicative);
    state.rebuild_resid();
}

/// `alpha` (plus `nu`, `gamma`) given `beta`: separable per (g, k).
fn alpha_step(state: &mut FitState, solver: &SolverOptions) {
    let t_len = state.data.n_periods();
    let p = state.data.n_covariates();
    let k_len = state.grid.len();
    let n_h = state.n_col_groups;
    let (mut alpha, beta) = current_factors(state);

    for g in 0..state.n_row_groups {
        if state.dropped_rows[g] {
            continue;
        }
        let members = state.row_group_members(g);
        if members.is_empty() {
            continue;
        }
        let m = members.len() * t_len;
        for k in 0..k_len {
            let mut design = Array2::zeros((m, 2 + p));
            let mut response = Vec::with_capacity(m);
            let mut row = 0;
            for &i in &members {
                let yi = state.data.y_row(i);
                let xi = state.data.x_row(i);
                for tt in 0..t_len {
                    let mut u = 0.0;
                    for h in 0..n_h {
                        u += beta[[k, h]] * state.agg_slice(i, h)[tt];
                    }
                    design[[row, 0]] = u;
                    design[[row, 1]] = yi[tt];
                    for l in 0..p {
                        design[[row, 2 + l]] = xi[tt * p + l];
                    }
                    response.push(yi[tt + 1]);
                    row += 1;
                }
            }
            let problem =
                QrProblem::new(design, response, state.grid.tau(k)).expect("validated state");
            let sol = solve_qr(&problem, solver);
            if sol.status == QrStatus::Degenerate {
                state.diagnostics.degenerate_solves += 1;
            }
            let mut prev = vec![0.0; 2 + p];
            prev[0] = alpha[[k, g]];
            prev[1] = state.params.nu(k, g);
            for l in 0..p {
                prev[2 + l] = state.params.gamma(k, g, l);
            }
            let keep_new = sol.objective <= qr_objective(&problem, &prev);
            let coef = if keep_new { &sol.coef } else { &prev };
            alpha[[k, g]] = coef[0];
            state.params.nu_mut()[[k, g]] = coef[1];
            for l in 0..p {
                state.params.gamma_mut()[[k, g, l]] = coef[2 + l];
            }
        }
    }
    write_theta_from_factors(state, &alpha, &beta, ModelKind::Multiplicative);
    state.rebuild_resid();
}

/// `beta` (plus `nu`, `gamma`) given `alpha`: one joint fit per quantile.
/// A beta column that vanishes (only observed through zero alphas) is
/// frozen at its previous value and flagged.
fn beta_step(state: &mut FitState, solver: &SolverOptions) {
    let n = state.data.n_nodes();
    let t_len = state.data.n_periods();
    let p = state.data.n_covariates();
    let k_len = state.grid.len();
    let n_g = state.n_row_groups;
    let n_h = state.n_col_groups;
    let (alpha, mut beta) = current_factors(state);

    let m = n * t_len;
    let nu_off = n_h;
    let gamma_off = n_h + n_g;
    let q = n_h + n_g + n_g * p;
    for k in 0..k_len {
        let mut design = Array2::zeros((m, q));
        let mut response = Vec::with_capacity(m);
        let mut row = 0;
        for i in 0..n {
            let g = state.g[i];
            let a = alpha[[k, g]];
            let yi = state.data.y_row(i);
            let xi = state.data.x_row(i);
            for tt in 0..t_len {
                for h in 0..n_h {
                    design[[row, h]] = a * state.agg_slice(i, h)[tt];
                }
                design[[row, nu_off + g]] = yi[tt];
                for l in 0..p {
                    design[[row, gamma_off + g * p + l]] = xi[tt * p + l];
                }
                response.push(yi[tt + 1]);
                row += 1;
            }
        }
        // Columns that vanish keep their previous beta.
        let mut frozen = vec![false; n_h];
        for h in 0..n_h {
            let norm: f64 = (0..m).map(|r| design[[r, h]].abs()).sum();
            if norm == 0.0 {
                frozen[h] = true;
                state.diagnostics.frozen_beta_updates += 1;
            }
        }
        let problem =
            QrProblem::new(design, response, state.grid.tau(k)).expect("validated state");
        let sol = solve_qr(&problem, solver);
        if sol.status == QrStatus::Degenerate && frozen.iter().all(|&f| !f) {
            state.diagnostics.degenerate_solves += 1;
        }
        let mut prev = vec![0.0; q];
        for h in 0..n_h {
            prev[h] = beta[[k, h]];
        }
        for g in 0..n_g {
            prev[nu_off + g] = state.params.nu(k, g);
            for l in 0..p {
                prev[gamma_off + g * p + l] = state.params.gamma(k, g, l);
            }
        }
        let keep_new = sol.objective <= qr_objective(&problem, &prev);
        let coef = if keep_new { &sol.coef } else { &prev };
        for h in 0..n_h {
            if !frozen[h] {
                beta[[k, h]] = coef[h];
            }
        }
        for g in 0..n_g {
            state.params.nu_mut()[[k, g]] = coef[nu_off + g];
            for l in 0..p {
                state.params.gamma_mut()[[k, g, l]] = coef[gamma_off + g * p + l];
            }
        }
    }
    write_theta_from_factors(state, &alpha, &beta, ModelKind::Multiplicative);
    state.rebuild_resid();
}

fn write_theta_from_factors(
    state: &mut FitState,
    alpha: &Array2<f64>,
    beta: &Array2<f64>,
    kind: ModelKind,
) {
    let k_len = state.grid.len();
    for k in 0..k_len {
        for g in 0..state.n_row_groups {
            for h in 0..state.n_col_groups {
                let v = match kind {
                    ModelKind::Additive => alpha[[k, g]] + beta[[k, h]],
                    ModelKind::Multiplicative => alpha[[k, g]] * beta[[k, h]],
                    ModelKind::General => unreachable!("structured step"),
                };
                state.params.theta_mut()[[k, g, h]] = v;
            }
        }
    }
    state.params.set_factors(alpha.clone(), beta.clone());
    state.params.set_kind(kind);
}
