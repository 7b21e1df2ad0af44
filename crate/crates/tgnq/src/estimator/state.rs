//! Mutable descent state: memberships, parameters, and the cached
//! aggregates that make the membership updates incremental.
//!
//! Two caches carry the whole algorithm:
//! - `agg[i][h][t-1] = sum_{j in N_i, h_j = h} w_ij Y_{j,t-1}`, the
//!   column-group lag aggregates (depend on the column memberships only);
//! - `resid[i][k][t-1] = Y_it - Q_it(tau_k)`, the residuals under the
//!   current parameters and memberships.
//!
//! Changing one column label touches only the followers of that node, so a
//! full Step-III pass costs `O(H K T sum_j d_j)` instead of a loss
//! re-evaluation per candidate.

use crate::model::{
    rho, FitDiagnostics, Membership, ModelKind, Network, PanelData, ParameterSet, QuantileGrid,
};
use crate::solver::{solve_qr, qr_objective, QrProblem, QrStatus, SolverOptions};
use ndarray::Array2;

use super::structured;
use super::EstimatorOptions;

pub(crate) struct FitState<'a> {
    pub data: &'a PanelData,
    pub net: &'a Network,
    pub grid: &'a QuantileGrid,
    pub g: Vec<usize>,
    pub h: Vec<usize>,
    pub n_row_groups: usize,
    pub n_col_groups: usize,
    pub params: ParameterSet,
    /// (N, H, T) row-major.
    agg: Vec<f64>,
    /// (N, K, T) row-major.
    resid: Vec<f64>,
    /// (N, T): full weighted lag sum, membership-independent.
    pooled_lag: Vec<f64>,
    pub dropped_rows: Vec<bool>,
    pub dropped_cols: Vec<bool>,
    pub diagnostics: FitDiagnostics,
}

impl<'a> FitState<'a> {
    pub fn new(
        data: &'a PanelData,
        net: &'a Network,
        grid: &'a QuantileGrid,
        mem: &Membership,
    ) -> Self {
        let n = data.n_nodes();
        let t_len = data.n_periods();
        let k_len = grid.len();
        let n_row_groups = mem.n_row_groups();
        let n_col_groups = mem.n_col_groups();
        let params = ParameterSet::zeros(k_len, n_row_groups, n_col_groups, data.n_covariates());
        let mut pooled_lag = vec![0.0; n * t_len];
        for i in 0..n {
            let w = net.weight(i);
            for &j in net.out_neighbors(i) {
                let yj = data.y_row(j);
                for tt in 0..t_len {
                    pooled_lag[i * t_len + tt] += w * yj[tt];
                }
            }
        }
        let mut state = Self {
            data,
            net,
            grid,
            g: mem.row_labels().to_vec(),
            h: mem.col_labels().to_vec(),
            n_row_groups,
            n_col_groups,
            params,
            agg: vec![0.0; n * n_col_groups * t_len],
            resid: vec![0.0; n * k_len * t_len],
            pooled_lag,
            dropped_rows: vec![false; n_row_groups],
            dropped_cols: vec![false; n_col_groups],
            diagnostics: FitDiagnostics::default(),
        };
        state.rebuild_agg();
        state.rebuild_resid();
        state
    }

    #[inline(always)]
    pub fn agg_slice(&self, i: usize, h: usize) -> &[f64] {
        let t_len = self.data.n_periods();
        let base = (i * self.n_col_groups + h) * t_len;
        &self.agg[base..base + t_len]
    }

    #[inline(always)]
    pub fn resid_slice(&self, i: usize, k: usize) -> &[f64] {
        let t_len = self.data.n_periods();
        let base = (i * self.grid.len() + k) * t_len;
        &self.resid[base..base + t_len]
    }

    #[inline(always)]
    pub fn pooled_lag_slice(&self, i: usize) -> &[f64] {
        let t_len = self.data.n_periods();
        &self.pooled_lag[i * t_len..(i + 1) * t_len]
    }

    pub fn rebuild_agg(&mut self) {
        let t_len = self.data.n_periods();
        self.agg.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.data.n_nodes() {
            let w = self.net.weight(i);
            for &j in self.net.out_neighbors(i) {
                let hj = self.h[j];
                let yj = self.data.y_row(j);
                let base = (i * self.n_col_groups + hj) * t_len;
                for tt in 0..t_len {
                    self.agg[base + tt] += w * yj[tt];
                }
            }
        }
    }

    /// Residuals for one node under its current row group.
    fn refresh_node_resid(&mut self, i: usize) {
        let t_len = self.data.n_periods();
        let k_len = self.grid.len();
        let p = self.data.n_covariates();
        let g = self.g[i];
        let yi = self.data.y_row(i);
        let xi = self.data.x_row(i);
        for k in 0..k_len {
            let agg_base = (i * self.n_col_groups) * t_len;
            let resid_base = (i * k_len + k) * t_len;
            for tt in 0..t_len {
                let mut pred = self.params.nu(k, g) * yi[tt];
                for h in 0..self.n_col_groups {
                    pred += self.params.theta(k, g, h) * self.agg[agg_base + h * t_len + tt];
                }
                for l in 0..p {
                    pred += self.params.gamma(k, g, l) * xi[tt * p + l];
                }
                self.resid[resid_base + tt] = yi[tt + 1] - pred;
            }
        }
    }

    pub fn rebuild_resid(&mut self) {
        for i in 0..self.data.n_nodes() {
            self.refresh_node_resid(i);
        }
    }

    /// Normalized multi-quantile loss from the residual cache.
    pub fn total_loss(&self) -> f64 {
        let t_len = self.data.n_periods();
        let k_len = self.grid.len();
        let n = self.data.n_nodes();
        let mut sum = 0.0;
        for i in 0..n {
            for k in 0..k_len {
                let tau = self.grid.tau(k);
                for &r in self.resid_slice(i, k) {
                    sum += rho(r, tau);
                }
            }
        }
        sum / (n as f64 * t_len as f64 * k_len as f64)
    }

    /// Unnormalized per-node loss, summed over quantiles and time.
    pub fn node_loss_sum(&self, i: usize) -> f64 {
        let mut sum = 0.0;
        for k in 0..self.grid.len() {
            let tau = self.grid.tau(k);
            for &r in self.resid_slice(i, k) {
                sum += rho(r, tau);
            }
        }
        sum
    }

    pub fn membership(&self) -> Membership {
        Membership::new(
            self.g.clone(),
            self.h.clone(),
            self.n_row_groups,
            self.n_col_groups,
        )
        .expect("state labels are valid")
    }

    pub fn row_group_members(&self, g: usize) -> Vec<usize> {
        (0..self.g.len()).filter(|&i| self.g[i] == g).collect()
    }

    /// Stacked Step-I design for one row group: rows are (t, member) pairs,
    /// columns are the H column-group aggregates, the own lag, and the
    /// covariates.
    pub fn stacked_design(&self, members: &[usize]) -> (Array2<f64>, Vec<f64>) {
        let t_len = self.data.n_periods();
        let p = self.data.n_covariates();
        let q = self.n_col_groups + 1 + p;
        let m = members.len() * t_len;
        let mut design = Array2::zeros((m, q));
        let mut response = Vec::with_capacity(m);
        let mut row = 0;
        for &i in members {
            let yi = self.data.y_row(i);
            let xi = self.data.x_row(i);
            for tt in 0..t_len {
                for h in 0..self.n_col_groups {
                    design[[row, h]] = self.agg_slice(i, h)[tt];
                }
                design[[row, self.n_col_groups]] = yi[tt];
                for l in 0..p {
                    design[[row, self.n_col_groups + 1 + l]] = xi[tt * p + l];
                }
                response.push(yi[tt + 1]);
                row += 1;
            }
        }
        (design, response)
    }

    /// Step I for the general kind: exact per-(g, k) quantile regressions.
    /// When previous coefficients are available the better of old and new is
    /// kept per block, so the loss never moves up on solver wobble.
    pub fn step1_general(&mut self, solver: &SolverOptions) {
        let k_len = self.grid.len();
        let p = self.data.n_covariates();
        let q = self.n_col_groups + 1 + p;
        for g in 0..self.n_row_groups {
            if self.dropped_rows[g] {
                continue;
            }
            let members = self.row_group_members(g);
            if members.is_empty() {
                continue;
            }
            let (design, response) = self.stacked_design(&members);
            for k in 0..k_len {
                let problem = QrProblem::new(design.clone(), response.clone(), self.grid.tau(k))
                    .expect("validated state");
                let sol = solve_qr(&problem, solver);
                if sol.status == QrStatus::Degenerate {
                    self.diagnostics.degenerate_solves += 1;
                }
                let mut prev = vec![0.0; q];
                for h in 0..self.n_col_groups {
                    prev[h] = self.params.theta(k, g, h);
                }
                prev[self.n_col_groups] = self.params.nu(k, g);
                for l in 0..p {
                    prev[self.n_col_groups + 1 + l] = self.params.gamma(k, g, l);
                }
                let keep_new = sol.objective <= qr_objective(&problem, &prev);
                let coef = if keep_new { &sol.coef } else { &prev };
                for h in 0..self.n_col_groups {
                    self.params.theta_mut()[[k, g, h]] = coef[h];
                }
                self.params.nu_mut()[[k, g]] = coef[self.n_col_groups];
                for l in 0..p {
                    self.params.gamma_mut()[[k, g, l]] = coef[self.n_col_groups + 1 + l];
                }
            }
        }
        self.params.set_kind(ModelKind::General);
        self.rebuild_resid();
    }

    pub fn step1(&mut self, opts: &EstimatorOptions, first_iteration: bool) {
        match opts.kind {
            ModelKind::General => self.step1_general(&opts.solver),
            ModelKind::Additive => structured::step1_additive(self, &opts.solver),
            ModelKind::Multiplicative => {
                structured::step1_multiplicative(self, &opts.solver, first_iteration)
            }
        }
    }

    /// Per-node candidate loss if node `i` were moved to row group `g`.
    fn row_candidate_loss(&self, i: usize, g: usize) -> f64 {
        let t_len = self.data.n_periods();
        let k_len = self.grid.len();
        let p = self.data.n_covariates();
        let yi = self.data.y_row(i);
        let xi = self.data.x_row(i);
        let mut sum = 0.0;
        for k in 0..k_len {
            let tau = self.grid.tau(k);
            let agg_base = (i * self.n_col_groups) * t_len;
            for tt in 0..t_len {
                let mut pred = self.params.nu(k, g) * yi[tt];
                for h in 0..self.n_col_groups {
                    pred += self.params.theta(k, g, h) * self.agg[agg_base + h * t_len + tt];
                }
                for l in 0..p {
                    pred += self.params.gamma(k, g, l) * xi[tt * p + l];
                }
                sum += rho(yi[tt + 1] - pred, tau);
            }
        }
        sum
    }

    /// Step II: independent per-node argmin over row groups, ties toward the
    /// smallest label. Returns the number of changed nodes.
    pub fn step2_rows(&mut self) -> usize {
        let n = self.data.n_nodes();
        let mut changed = 0;
        for i in 0..n {
            let mut best_g = usize::MAX;
            let mut best = f64::INFINITY;
            for g in 0..self.n_row_groups {
                if self.dropped_rows[g] {
                    continue;
                }
                let loss = self.row_candidate_loss(i, g);
                if loss < best {
                    best = loss;
                    best_g = g;
                }
            }
            if best_g != usize::MAX && best_g != self.g[i] {
                self.g[i] = best_g;
                self.refresh_node_resid(i);
                changed += 1;
            }
        }
        changed
    }

    /// Change in the followers' loss if node `j` switched to column group
    /// `h_new`, evaluated from the residual cache.
    fn col_candidate_delta(&self, j: usize, h_new: usize) -> f64 {
        let h_old = self.h[j];
        if h_new == h_old {
            return 0.0;
        }
        let t_len = self.data.n_periods();
        let k_len = self.grid.len();
        let yj = self.data.y_row(j);
        let mut delta = 0.0;
        for &i in self.net.followers(j) {
            let w = self.net.weight(i);
            let gi = self.g[i];
            for k in 0..k_len {
                let tau = self.grid.tau(k);
                let shift = (self.params.theta(k, gi, h_new) - self.params.theta(k, gi, h_old)) * w;
                let resid = self.resid_slice(i, k);
                for tt in 0..t_len {
                    let r_new = resid[tt] - shift * yj[tt];
                    delta += rho(r_new, tau) - rho(resid[tt], tau);
                }
            }
        }
        delta
    }

    pub(crate) fn commit_col_change(&mut self, j: usize, h_new: usize) {
        let h_old = self.h[j];
        let t_len = self.data.n_periods();
        let k_len = self.grid.len();
        let yj_vals: Vec<f64> = self.data.y_row(j)[..t_len].to_vec();
        self.h[j] = h_new;
        let followers: Vec<usize> = self.net.followers(j).to_vec();
        for &i in &followers {
            let w = self.net.weight(i);
            let gi = self.g[i];
            let old_base = (i * self.n_col_groups + h_old) * t_len;
            let new_base = (i * self.n_col_groups + h_new) * t_len;
            for tt in 0..t_len {
                let v = w * yj_vals[tt];
                self.agg[old_base + tt] -= v;
                self.agg[new_base + tt] += v;
            }
            for k in 0..k_len {
                let shift = (self.params.theta(k, gi, h_new) - self.params.theta(k, gi, h_old)) * w;
                let base = (i * k_len + k) * t_len;
                for tt in 0..t_len {
                    self.resid[base + tt] -= shift * yj_vals[tt];
                }
            }
        }
    }

    /// Step III: cyclic coordinate descent over column labels with the
    /// mixed old/new objective; a node keeps its label if no strict
    /// improvement exists (so followerless nodes never move). Returns the
    /// number of changed labels across all passes.
    pub fn step3_cols(&mut self, rounds: usize) -> usize {
        let n = self.data.n_nodes();
        let mut total_changed = 0;
        for _round in 0..rounds {
            let mut changed = 0;
            for j in 0..n {
                if self.net.in_degree(j) == 0 {
                    continue;
                }
                let mut best_h = self.h[j];
                let mut best_delta = 0.0;
                for h in 0..self.n_col_groups {
                    if self.dropped_cols[h] || h == self.h[j] {
                        continue;
                    }
                    let delta = self.col_candidate_delta(j, h);
                    if delta < best_delta {
                        best_delta = delta;
                        best_h = h;
                    }
                }
                if best_h != self.h[j] {
                    self.commit_col_change(j, best_h);
                    changed += 1;
                }
            }
            total_changed += changed;
            if changed == 0 {
                break;
            }
        }
        total_changed
    }

    pub fn row_group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_row_groups];
        for &g in &self.g {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn col_group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_col_groups];
        for &h in &self.h {
            sizes[h] += 1;
        }
        sizes
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            g: self.g.clone(),
            h: self.h.clone(),
            params: self.params.clone(),
            agg: self.agg.clone(),
            resid: self.resid.clone(),
            dropped_rows: self.dropped_rows.clone(),
            dropped_cols: self.dropped_cols.clone(),
        }
    }

    pub fn restore(&mut self, snap: &StateSnapshot) {
        self.g.clone_from(&snap.g);
        self.h.clone_from(&snap.h);
        self.params = snap.params.clone();
        self.agg.clone_from(&snap.agg);
        self.resid.clone_from(&snap.resid);
        self.dropped_rows.clone_from(&snap.dropped_rows);
        self.dropped_cols.clone_from(&snap.dropped_cols);
    }

    /// Reset memberships (and optionally parameters) without reallocating.
    pub fn reset(&mut self, g: &[usize], h: &[usize], params: Option<&ParameterSet>) {
        self.g.copy_from_slice(g);
        self.h.copy_from_slice(h);
        if let Some(p) = params {
            self.params = p.clone();
        }
        self.dropped_rows.iter_mut().for_each(|v| *v = false);
        self.dropped_cols.iter_mut().for_each(|v| *v = false);
        self.diagnostics = FitDiagnostics::default();
        self.rebuild_agg();
        self.rebuild_resid();
    }

    /// Fresh start from a membership with all-zero parameters.
    pub fn reset_from_membership(&mut self, mem: &Membership) {
        let zeros = ParameterSet::zeros(
            self.grid.len(),
            self.n_row_groups,
            self.n_col_groups,
            self.data.n_covariates(),
        );
        self.reset(mem.row_labels(), mem.col_labels(), Some(&zeros));
    }

    /// Install externally supplied parameters (dimension-checked).
    pub fn install_params(
        &mut self,
        params: &ParameterSet,
    ) -> Result<(), super::EstimatorError> {
        if params.n_quantiles() != self.grid.len()
            || params.n_row_groups() != self.n_row_groups
            || params.n_col_groups() != self.n_col_groups
            || params.n_covariates() != self.data.n_covariates()
        {
            return Err(super::EstimatorError::Shape {
                context: "parameter dimensions vs state",
                expected: self.grid.len() * self.n_row_groups * self.n_col_groups,
                got: params.n_quantiles() * params.n_row_groups() * params.n_col_groups(),
            });
        }
        self.params = params.clone();
        self.rebuild_resid();
        Ok(())
    }

    pub fn move_row(&mut self, i: usize, g: usize) {
        self.g[i] = g;
        self.refresh_node_resid(i);
    }

    pub fn move_col(&mut self, j: usize, h: usize) {
        self.commit_col_change(j, h);
    }
}

pub(crate) struct StateSnapshot {
    g: Vec<usize>,
    h: Vec<usize>,
    params: ParameterSet,
    agg: Vec<f64>,
    resid: Vec<f64>,
    dropped_rows: Vec<bool>,
    dropped_cols: Vec<bool>,
}
