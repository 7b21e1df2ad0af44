//! Post-estimation membership refinement, the prerequisite for inference.
//!
//! Rows: each node's loss is profiled over the network labels of its
//! neighborhood for every candidate row group, and the node switches only
//! when the profiled optimum beats its current loss by a relative margin of
//! `1 / sqrt(T)` (strict inequality).
//!
//! Columns: each node's candidate label is scored by the loss summed over
//! its followers, profiled over the second-order neighborhood labels, with
//! the same threshold protocol. The search over label vectors is exact for
//! small sets and greedy coordinate descent with random restarts otherwise.
//! Column passes run sequentially in node order because committed changes
//! feed the later profiles. A final Step-I pass refits the parameters on
//! the refined memberships.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::estimator::{update_params, EstimatorError};
use crate::model::{
    rho, total_loss, FitResult, Membership, ModelError, Network, PanelData, ParameterSet,
    QuantileGrid,
};
use crate::rng::derive_seed;
use crate::solver::SolverOptions;

#[derive(Debug, Error)]
pub enum RefinementError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("refinement requires a converged fit")]
    NotConverged,
}

#[derive(Debug, Clone)]
pub struct RefinementOptions {
    /// Largest neighborhood enumerated exactly; larger ones use greedy
    /// coordinate descent with random restarts.
    pub enum_threshold: usize,
    /// Restarts of the greedy search (the first start is the incumbent).
    pub restarts: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for RefinementOptions {
    fn default() -> Self {
        Self {
            enum_threshold: 8,
            restarts: 5,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipChange {
    pub node: usize,
    pub old_label: usize,
    pub new_label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RefinementReport {
    pub changed_rows: Vec<MembershipChange>,
    pub changed_cols: Vec<MembershipChange>,
    /// Followerless nodes whose column label has no loss influence.
    pub unidentifiable_cols: Vec<usize>,
    /// The relative improvement threshold `1 / sqrt(T)`.
    pub threshold: f64,
}

/// Refined memberships with the post-refinement parameter refit.
#[derive(Debug, Clone)]
pub struct RefinedFit {
    pub membership: Membership,
    pub params: ParameterSet,
    pub loss: f64,
    pub report: RefinementReport,
}

/// The switch rule shared by both protocols: move only when the current
/// loss beats the profiled optimum by strictly more than the relative
/// margin.
#[inline]
pub(crate) fn protocol_switch(current: f64, profiled_best: f64, threshold_factor: f64) -> bool {
    current - profiled_best > threshold_factor * profiled_best
}

/// Per-node averaged multi-quantile check loss under explicit local
/// memberships: `(KT)^-1 sum_k sum_t rho_{tau_k}(...)` where `local_h[idx]`
/// is the column label of the idx-th out-neighbor of `i`.
pub fn node_loss(
    data: &PanelData,
    net: &Network,
    params: &ParameterSet,
    grid: &QuantileGrid,
    i: usize,
    g: usize,
    local_h: &[usize],
) -> Result<f64, ModelError> {
    let neighbors = net.out_neighbors(i);
    if local_h.len() != neighbors.len() {
        return Err(ModelError::DimensionMismatch {
            context: "local column labels",
            expected: neighbors.len(),
            got: local_h.len(),
        });
    }
    let t_len = data.n_periods();
    let k_len = grid.len();
    let p = data.n_covariates();
    let w = net.weight(i);
    let mut sum = 0.0;
    for k in 0..k_len {
        let tau = grid.tau(k);
        for t in 1..=t_len {
            let mut pred = params.nu(k, g) * data.y(i, t - 1);
            for (idx, &j) in neighbors.iter().enumerate() {
                pred += params.theta(k, g, local_h[idx]) * w * data.y(j, t - 1);
            }
            for l in 0..p {
                pred += params.gamma(k, g, l) * data.x(i, t, l);
            }
            sum += rho(data.y(i, t) - pred, tau);
        }
    }
    Ok(sum / (k_len as f64 * t_len as f64))
}

/// Scratch for scanning one node's loss over its neighborhood labels.
/// Residual base excludes the whole network term; contributions are
/// maintained incrementally per label move.
struct NodeScan {
    /// (K, T) residual with no network contribution.
    base: Vec<f64>,
    /// (K, T) current network contribution.
    contrib: Vec<f64>,
    /// per neighbor: (T) weighted lag.
    wy: Vec<f64>,
    /// (K, H) effect lookup for the fixed row group.
    theta: Vec<f64>,
    labels: Vec<usize>,
    taus: Vec<f64>,
    t_len: usize,
    n_h: usize,
}

impl NodeScan {
    fn new(
        data: &PanelData,
        net: &Network,
        params: &ParameterSet,
        grid: &QuantileGrid,
        i: usize,
        g: usize,
        labels: &[usize],
    ) -> Self {
        let t_len = data.n_periods();
        let k_len = grid.len();
        let p = data.n_covariates();
        let n_h = params.n_col_groups();
        let neighbors = net.out_neighbors(i);
        let w = net.weight(i);
        let mut base = vec![0.0; k_len * t_len];
        for k in 0..k_len {
            for t in 1..=t_len {
                let mut pred = params.nu(k, g) * data.y(i, t - 1);
                for l in 0..p {
                    pred += params.gamma(k, g, l) * data.x(i, t, l);
                }
                base[k * t_len + t - 1] = data.y(i, t) - pred;
            }
        }
        let mut wy = vec![0.0; neighbors.len() * t_len];
        for (idx, &j) in neighbors.iter().enumerate() {
            for tt in 0..t_len {
                wy[idx * t_len + tt] = w * data.y(j, tt);
            }
        }
        let mut theta = vec![0.0; k_len * n_h];
        for k in 0..k_len {
            for h in 0..n_h {
                theta[k * n_h + h] = params.theta(k, g, h);
            }
        }
        let mut scan = Self {
            base,
            contrib: vec![0.0; k_len * t_len],
            wy,
            theta,
            labels: labels.to_vec(),
            taus: grid.taus().to_vec(),
            t_len,
            n_h,
        };
        scan.rebuild_contrib();
        scan
    }

    fn rebuild_contrib(&mut self) {
        self.contrib.iter_mut().for_each(|v| *v = 0.0);
        let k_len = self.taus.len();
        for idx in 0..self.labels.len() {
            let h = self.labels[idx];
            for k in 0..k_len {
                let theta = self.theta[k * self.n_h + h];
                let row = &mut self.contrib[k * self.t_len..(k + 1) * self.t_len];
                let wyd = &self.wy[idx * self.t_len..(idx + 1) * self.t_len];
                for tt in 0..self.t_len {
                    row[tt] += theta * wyd[tt];
                }
            }
        }
    }

    /// Unnormalized loss of the current assignment.
    fn loss(&self) -> f64 {
        let mut sum = 0.0;
        for (k, &tau) in self.taus.iter().enumerate() {
            let b = &self.base[k * self.t_len..(k + 1) * self.t_len];
            let c = &self.contrib[k * self.t_len..(k + 1) * self.t_len];
            for tt in 0..self.t_len {
                sum += rho(b[tt] - c[tt], tau);
            }
        }
        sum
    }

    /// Loss if neighbor `idx` moved to label `h`.
    fn loss_with(&self, idx: usize, h: usize) -> f64 {
        let old = self.labels[idx];
        if old == h {
            return self.loss();
        }
        let mut sum = 0.0;
        for (k, &tau) in self.taus.iter().enumerate() {
            let delta = self.theta[k * self.n_h + h] - self.theta[k * self.n_h + old];
            let b = &self.base[k * self.t_len..(k + 1) * self.t_len];
            let c = &self.contrib[k * self.t_len..(k + 1) * self.t_len];
            let wyd = &self.wy[idx * self.t_len..(idx + 1) * self.t_len];
            for tt in 0..self.t_len {
                sum += rho(b[tt] - c[tt] - delta * wyd[tt], tau);
            }
        }
        sum
    }

    fn set_label(&mut self, idx: usize, h: usize) {
        let old = self.labels[idx];
        if old == h {
            return;
        }
        let k_len = self.taus.len();
        for k in 0..k_len {
            let delta = self.theta[k * self.n_h + h] - self.theta[k * self.n_h + old];
            if delta != 0.0 {
                let row = &mut self.contrib[k * self.t_len..(k + 1) * self.t_len];
                let wyd = &self.wy[idx * self.t_len..(idx + 1) * self.t_len];
                for tt in 0..self.t_len {
                    row[tt] += delta * wyd[tt];
                }
            }
        }
        self.labels[idx] = h;
    }

    fn set_all(&mut self, labels: &[usize]) {
        self.labels.copy_from_slice(labels);
        self.rebuild_contrib();
    }

    /// Minimize over all label assignments: exact odometer enumeration for
    /// small neighborhoods, greedy sweeps with restarts otherwise.
    fn minimize(&mut self, opts: &RefinementOptions, rng: &mut ChaCha8Rng) -> f64 {
        let len = self.labels.len();
        if len == 0 {
            return self.loss();
        }
        let count = (self.n_h as u64).checked_pow(len as u32);
        if len <= opts.enum_threshold && count.map(|c| c <= 1 << 18).unwrap_or(false) {
            return self.enumerate();
        }
        let mut best = f64::INFINITY;
        let incumbent = self.labels.clone();
        for restart in 0..opts.restarts.max(1) {
            if restart == 0 {
                self.set_all(&incumbent);
            } else {
                let labels: Vec<usize> =
                    (0..len).map(|_| rng.random_range(0..self.n_h)).collect();
                self.set_all(&labels);
            }
            let mut cur = self.loss();
            for _pass in 0..10 {
                let mut moved = false;
                for idx in 0..len {
                    let mut best_h = self.labels[idx];
                    let mut best_loss = cur;
                    for h in 0..self.n_h {
                        if h == self.labels[idx] {
                            continue;
                        }
                        let cand = self.loss_with(idx, h);
                        if cand < best_loss {
                            best_loss = cand;
                            best_h = h;
                        }
                    }
                    if best_h != self.labels[idx] {
                        self.set_label(idx, best_h);
                        cur = best_loss;
                        moved = true;
                    }
                }
                if !moved {
                    break;
                }
            }
            best = best.min(cur);
        }
        best
    }

    fn enumerate(&mut self) -> f64 {
        let len = self.labels.len();
        let zeros = vec![0usize; len];
        self.set_all(&zeros);
        let mut digits = zeros;
        let mut best = self.loss();
        loop {
            let mut d = 0;
            loop {
                if d == len {
                    return best;
                }
                let next = (digits[d] + 1) % self.n_h;
                self.set_label(d, next);
                digits[d] = next;
                if next != 0 {
                    break;
                }
                d += 1;
            }
            let loss = self.loss();
            if loss < best {
                best = loss;
            }
        }
    }
}

/// Row refinement: switch node `i` to the profiled argmin row group when
/// the current loss exceeds the profiled optimum by more than the relative
/// `1 / sqrt(T)` margin.
pub fn refine_rows(
    data: &PanelData,
    net: &Network,
    params: &ParameterSet,
    mem: &Membership,
    grid: &QuantileGrid,
    opts: &RefinementOptions,
) -> Result<(Membership, Vec<MembershipChange>), RefinementError> {
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let norm = 1.0 / (grid.len() as f64 * t_len as f64);
    let threshold_factor = 1.0 / (t_len as f64).sqrt();
    let n_g = mem.n_row_groups();

    let decisions: Vec<Option<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let local: Vec<usize> = net
                .out_neighbors(i)
                .iter()
                .map(|&j| mem.col_label(j))
                .collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0x40b5, i as u64]));
            let current = NodeScan::new(data, net, params, grid, i, mem.row_label(i), &local)
                .loss()
                * norm;
            // The incumbent group wins profiled ties.
            let mut best_g = mem.row_label(i);
            let mut best = {
                let mut scan = NodeScan::new(data, net, params, grid, i, best_g, &local);
                scan.minimize(opts, &mut rng) * norm
            };
            for g in 0..n_g {
                if g == mem.row_label(i) {
                    continue;
                }
                let mut scan = NodeScan::new(data, net, params, grid, i, g, &local);
                let profiled = scan.minimize(opts, &mut rng) * norm;
                if profiled < best - 1e-15 * (1.0 + best.abs()) {
                    best = profiled;
                    best_g = g;
                }
            }
            if best_g != mem.row_label(i) && protocol_switch(current, best, threshold_factor) {
                Some(best_g)
            } else {
                None
            }
        })
        .collect();

    let mut g_new = mem.row_labels().to_vec();
    let mut changes = Vec::new();
    for (i, decision) in decisions.iter().enumerate() {
        if let Some(g) = decision {
            changes.push(MembershipChange {
                node: i,
                old_label: g_new[i],
                new_label: *g,
            });
            g_new[i] = *g;
        }
    }
    let refined = Membership::new(
        g_new,
        mem.col_labels().to_vec(),
        mem.n_row_groups(),
        mem.n_col_groups(),
    )?;
    Ok((refined, changes))
}

/// Scratch for the follower-sum loss of one column node.
struct FollowerScan {
    /// One scan per follower, sharing the profiled label coordinates.
    scans: Vec<NodeScan>,
    /// scans[s].labels[idx] is profiled iff coord_of[s][idx] is Some(slot).
    coord_of: Vec<Vec<Option<usize>>>,
    /// Current per-follower losses.
    losses: Vec<f64>,
    /// Current profiled labels per slot.
    slots: Vec<usize>,
    n_h: usize,
}

impl FollowerScan {
    #[allow(clippy::too_many_arguments)]
    fn new(
        data: &PanelData,
        net: &Network,
        params: &ParameterSet,
        mem_g: &[usize],
        mem_h: &[usize],
        grid: &QuantileGrid,
        j: usize,
        profiled: &[usize],
    ) -> Self {
        let followers = net.followers(j);
        let slot_of = |l: usize| profiled.iter().position(|&x| x == l);
        let mut scans = Vec::with_capacity(followers.len());
        let mut coord_of = Vec::with_capacity(followers.len());
        for &i in followers {
            let local: Vec<usize> = net
                .out_neighbors(i)
                .iter()
                .map(|&l| mem_h[l])
                .collect();
            let coords: Vec<Option<usize>> = net
                .out_neighbors(i)
                .iter()
                .map(|&l| slot_of(l))
                .collect();
            scans.push(NodeScan::new(
                data, net, params, grid, i, mem_g[i], &local,
            ));
            coord_of.push(coords);
        }
        let losses: Vec<f64> = scans.iter().map(NodeScan::loss).collect();
        let slots: Vec<usize> = profiled.iter().map(|&l| mem_h[l]).collect();
        Self {
            scans,
            coord_of,
            losses,
            slots,
            n_h: params.n_col_groups(),
        }
    }

    fn total(&self) -> f64 {
        self.losses.iter().sum()
    }

    fn set_slot(&mut self, slot: usize, h: usize) {
        if self.slots[slot] == h {
            return;
        }
        self.slots[slot] = h;
        for (s, scan) in self.scans.iter_mut().enumerate() {
            let mut touched = false;
            for (idx, coord) in self.coord_of[s].iter().enumerate() {
                if *coord == Some(slot) {
                    scan.set_label(idx, h);
                    touched = true;
                }
            }
            if touched {
                self.losses[s] = scan.loss();
            }
        }
    }

    fn loss_if(&self, slot: usize, h: usize) -> f64 {
        if self.slots[slot] == h {
            return self.total();
        }
        let mut total = 0.0;
        for (s, scan) in self.scans.iter().enumerate() {
            let touched: Vec<usize> = self.coord_of[s]
                .iter()
                .enumerate()
                .filter_map(|(idx, c)| (*c == Some(slot)).then_some(idx))
                .collect();
            if touched.is_empty() {
                total += self.losses[s];
            } else if touched.len() == 1 {
                total += scan.loss_with(touched[0], h);
            } else {
                // A follower can hold the profiled node several times only
                // through duplicate edges, which the network forbids.
                unreachable!("out-neighbor lists are deduplicated");
            }
        }
        total
    }

    fn set_all(&mut self, labels: &[usize]) {
        for (slot, &h) in labels.iter().enumerate() {
            self.set_slot(slot, h);
        }
    }

    /// Greedy sweeps over the free slots with `h_j` pinned.
    fn sweep(&mut self, pinned: usize, max_passes: usize) -> f64 {
        let mut cur = self.total();
        for _ in 0..max_passes {
            let mut moved = false;
            for slot in 0..self.slots.len() {
                if slot == pinned {
                    continue;
                }
                let mut best_h = self.slots[slot];
                let mut best = cur;
                for h in 0..self.n_h {
                    if h == self.slots[slot] {
                        continue;
                    }
                    let cand = self.loss_if(slot, h);
                    if cand < best {
                        best = cand;
                        best_h = h;
                    }
                }
                if best_h != self.slots[slot] {
                    self.set_slot(slot, best_h);
                    cur = best;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        cur
    }
}

/// Column refinement on top of refined row labels. Sequential in node
/// order; committed changes feed the later profiles.
pub fn refine_cols(
    data: &PanelData,
    net: &Network,
    params: &ParameterSet,
    mem: &Membership,
    grid: &QuantileGrid,
    opts: &RefinementOptions,
) -> Result<(Membership, Vec<MembershipChange>, Vec<usize>), RefinementError> {
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let norm = 1.0 / (grid.len() as f64 * t_len as f64);
    let threshold_factor = 1.0 / (t_len as f64).sqrt();
    let n_h = mem.n_col_groups();
    let mem_g = mem.row_labels().to_vec();
    let mut mem_h = mem.col_labels().to_vec();
    let mut changes = Vec::new();
    let mut unidentifiable = Vec::new();

    for j in 0..n {
        if net.in_degree(j) == 0 {
            unidentifiable.push(j);
            continue;
        }
        let profiled: Vec<usize> = net.second_order(j).to_vec();
        let pinned = profiled
            .iter()
            .position(|&l| l == j)
            .expect("j follows itself through its followers");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0xc015, j as u64]));

        // Unrefined reference: follower-sum loss at the current labels.
        let mut scan = FollowerScan::new(data, net, params, &mem_g, &mem_h, grid, j, &profiled);
        let unrefined = scan.total() * norm;

        let count = (n_h as u64).checked_pow(profiled.len() as u32);
        let exact = profiled.len() <= opts.enum_threshold
            && count.map(|c| c <= 1 << 18).unwrap_or(false);
        let mut best_h = mem_h[j];
        let mut best = f64::INFINITY;
        let incumbent: Vec<usize> = scan.slots.clone();
        for h in 0..n_h {
            let profiled_min = if exact {
                enumerate_follower_scan(&mut scan, pinned, h)
            } else {
                let mut best_local = f64::INFINITY;
                for restart in 0..opts.restarts.max(1) {
                    let mut start = if restart == 0 {
                        incumbent.clone()
                    } else {
                        (0..profiled.len())
                            .map(|_| rng.random_range(0..n_h))
                            .collect()
                    };
                    start[pinned] = h;
                    scan.set_all(&start);
                    best_local = best_local.min(scan.sweep(pinned, 10));
                }
                best_local
            } * norm;
            // Ties prefer the incumbent label (scanned in label order, the
            // incumbent wins equalities through strict comparison).
            if profiled_min < best - 1e-15 * (1.0 + best.abs())
                || (h == mem_h[j] && profiled_min <= best)
            {
                best = profiled_min;
                best_h = h;
            }
        }
        if best_h != mem_h[j] && protocol_switch(unrefined, best, threshold_factor) {
            changes.push(MembershipChange {
                node: j,
                old_label: mem_h[j],
                new_label: best_h,
            });
            mem_h[j] = best_h;
        }
    }

    let refined = Membership::new(mem_g, mem_h, mem.n_row_groups(), n_h)?;
    Ok((refined, changes, unidentifiable))
}

fn enumerate_follower_scan(scan: &mut FollowerScan, pinned: usize, h: usize) -> f64 {
    let len = scan.slots.len();
    let n_h = scan.n_h;
    let mut start = vec![0usize; len];
    start[pinned] = h;
    scan.set_all(&start);
    let mut digits = start;
    let mut best = scan.total();
    loop {
        let mut d = 0;
        loop {
            if d == pinned {
                d += 1;
                if d == len {
                    return best;
                }
                continue;
            }
            if d >= len {
                return best;
            }
            let next = (digits[d] + 1) % n_h;
            scan.set_slot(d, next);
            digits[d] = next;
            if next != 0 {
                break;
            }
            d += 1;
        }
        let loss = scan.total();
        if loss < best {
            best = loss;
        }
    }
}

/// One Step-I pass on the refined memberships.
pub fn refit_post_refinement(
    data: &PanelData,
    net: &Network,
    mem: &Membership,
    grid: &QuantileGrid,
    kind: crate::model::ModelKind,
    solver: &SolverOptions,
) -> Result<ParameterSet, RefinementError> {
    let (params, _diag) = update_params(data, net, mem, grid, kind, solver)?;
    Ok(params)
}

/// The full protocol: row refinement, column refinement, refit.
pub fn refine(
    data: &PanelData,
    net: &Network,
    fit: &FitResult,
    grid: &QuantileGrid,
    opts: &RefinementOptions,
) -> Result<RefinedFit, RefinementError> {
    let t_len = data.n_periods();
    let (after_rows, changed_rows) =
        refine_rows(data, net, &fit.params, &fit.membership, grid, opts)?;
    let (refined, changed_cols, unidentifiable_cols) =
        refine_cols(data, net, &fit.params, &after_rows, grid, opts)?;
    let params = refit_post_refinement(data, net, &refined, grid, fit.params.kind(), &opts.solver)?;
    let loss = total_loss(data, net, &params, &refined, grid)?;
    Ok(RefinedFit {
        membership: refined,
        params,
        loss,
        report: RefinementReport {
            changed_rows,
            changed_cols,
            unidentifiable_cols,
            threshold: 1.0 / (t_len as f64).sqrt(),
        },
    })
}
