//! Joint column-label proposals: for each node `i`, minimize the partial
//! loss over the labels of its active neighbors, holding inactive neighbors
//! at their current labels. Small sets are enumerated exactly (an odometer
//! walk keeps the prediction update O(1) per visited assignment); larger
//! sets fall back to the seeded cross-entropy search.

use crate::rng::derive_seed;

use super::ce;
use super::state::FitState;

/// Proposed labels per source node: `per_source[i]` holds `(j, label)` for
/// every active out-neighbor `j` of `i`, sorted by `j`.
#[derive(Debug, Clone, Default)]
pub struct ProposalTable {
    pub(crate) per_source: Vec<Vec<(usize, usize)>>,
}

impl ProposalTable {
    pub fn proposals_from(&self, i: usize) -> &[(usize, usize)] {
        &self.per_source[i]
    }

    pub(crate) fn lookup(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.per_source[i];
        row.binary_search_by_key(&j, |&(jj, _)| jj)
            .ok()
            .map(|idx| row[idx].1)
    }

    /// Every proposal disagreeing with the supplied labels.
    pub(crate) fn all_agree_with(&self, labels: &[usize]) -> bool {
        self.per_source
            .iter()
            .flatten()
            .all(|&(j, label)| labels[j] == label)
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.per_source.iter().all(Vec::is_empty)
    }
}

const ENUM_BUDGET: u64 = 1 << 18;

/// Build the proposal table for the given active mask.
pub(crate) fn propose(
    state: &FitState,
    active: &[bool],
    enum_threshold: usize,
    seed: u64,
    round: u64,
) -> ProposalTable {
    let n = state.data.n_nodes();
    let t_len = state.data.n_periods();
    let k_len = state.grid.len();
    let allowed: Vec<usize> = (0..state.n_col_groups)
        .filter(|&h| !state.dropped_cols[h])
        .collect();
    let n_labels = allowed.len();
    let mut table = ProposalTable {
        per_source: vec![Vec::new(); n],
    };
    if n_labels <= 1 {
        return table;
    }

    let mut base = vec![0.0f64; k_len * t_len];
    let mut contrib = vec![0.0f64; k_len * t_len];
    let mut wy: Vec<f64> = Vec::new();

    for i in 0..n {
        let set: Vec<usize> = state
            .net
            .out_neighbors(i)
            .iter()
            .copied()
            .filter(|&j| active[j])
            .collect();
        if set.is_empty() {
            continue;
        }
        let gi = state.g[i];
        let w = state.net.weight(i);

        // Residual with the set's current contribution added back, i.e. the
        // partial prediction excludes the nodes being optimized.
        for k in 0..k_len {
            let resid = state.resid_slice(i, k);
            base[k * t_len..(k + 1) * t_len].copy_from_slice(resid);
        }
        for &j in &set {
            let yj = state.data.y_row(j);
            let hj = state.h[j];
            for k in 0..k_len {
                let theta = state.params.theta(k, gi, hj) * w;
                let row = &mut base[k * t_len..(k + 1) * t_len];
                for tt in 0..t_len {
                    row[tt] += theta * yj[tt];
                }
            }
        }

        // Per-member weighted lag vectors.
        wy.clear();
        wy.resize(set.len() * t_len, 0.0);
        for (d, &j) in set.iter().enumerate() {
            let yj = state.data.y_row(j);
            for tt in 0..t_len {
                wy[d * t_len + tt] = w * yj[tt];
            }
        }

        let count = (n_labels as u64).checked_pow(set.len() as u32);
        let labels = if set.len() <= enum_threshold
            && count.map(|c| c <= ENUM_BUDGET).unwrap_or(false)
        {
            enumerate_assignments(state, gi, &set, &allowed, &base, &mut contrib, &wy, t_len)
        } else {
            ce_assignments(
                state,
                gi,
                &set,
                &allowed,
                &base,
                &wy,
                t_len,
                derive_seed(seed, &[0xce, round, i as u64]),
            )
        };
        table.per_source[i] = set.into_iter().zip(labels).collect();
    }
    table
}

/// Exact odometer enumeration; the first minimizer found wins, which makes
/// ties deterministic (lexicographically smallest assignment).
#[allow(clippy::too_many_arguments)]
fn enumerate_assignments(
    state: &FitState,
    gi: usize,
    set: &[usize],
    allowed: &[usize],
    base: &[f64],
    contrib: &mut [f64],
    wy: &[f64],
    t_len: usize,
) -> Vec<usize> {
    let k_len = state.grid.len();
    let n_labels = allowed.len();
    let mut digits = vec![0usize; set.len()];

    contrib.iter_mut().for_each(|v| *v = 0.0);
    for d in 0..set.len() {
        let theta_row: Vec<f64> = (0..k_len)
            .map(|k| state.params.theta(k, gi, allowed[0]))
            .collect();
        for (k, &theta) in theta_row.iter().enumerate() {
            let row = &mut contrib[k * t_len..(k + 1) * t_len];
            let wyd = &wy[d * t_len..(d + 1) * t_len];
            for tt in 0..t_len {
                row[tt] += theta * wyd[tt];
            }
        }
    }

    let eval = |contrib: &[f64]| -> f64 {
        let mut loss = 0.0;
        for k in 0..k_len {
            let tau = state.grid.tau(k);
            let b = &base[k * t_len..(k + 1) * t_len];
            let c = &contrib[k * t_len..(k + 1) * t_len];
            for tt in 0..t_len {
                loss += crate::model::rho(b[tt] - c[tt], tau);
            }
        }
        loss
    };

    let mut best_digits = digits.clone();
    let mut best_loss = eval(contrib);
    loop {
        // Odometer increment with incremental contribution updates.
        let mut d = 0;
        loop {
            if d == set.len() {
                let labels = best_digits.iter().map(|&x| allowed[x]).collect();
                return labels;
            }
            let old = allowed[digits[d]];
            let next = (digits[d] + 1) % n_labels;
            let new = allowed[next];
            digits[d] = next;
            for k in 0..k_len {
                let delta = state.params.theta(k, gi, new) - state.params.theta(k, gi, old);
                if delta != 0.0 {
                    let row = &mut contrib[k * t_len..(k + 1) * t_len];
                    let wyd = &wy[d * t_len..(d + 1) * t_len];
                    for tt in 0..t_len {
                        row[tt] += delta * wyd[tt];
                    }
                }
            }
            if next != 0 {
                break;
            }
            d += 1;
        }
        let loss = eval(contrib);
        if loss < best_loss {
            best_loss = loss;
            best_digits.copy_from_slice(&digits);
        }
    }
}

/// Cross-entropy fallback for large neighbor sets.
#[allow(clippy::too_many_arguments)]
fn ce_assignments(
    state: &FitState,
    gi: usize,
    set: &[usize],
    allowed: &[usize],
    base: &[f64],
    wy: &[f64],
    t_len: usize,
    seed: u64,
) -> Vec<usize> {
    let k_len = state.grid.len();
    let n_labels = allowed.len();
    let label_pos = |label: usize| allowed.iter().position(|&l| l == label).unwrap_or(0);
    let incumbent: Vec<usize> = set.iter().map(|&j| label_pos(state.h[j])).collect();

    let mut sums = vec![0.0f64; n_labels * t_len];
    let eval = |assignment: &[usize]| -> f64 {
        sums.iter_mut().for_each(|v| *v = 0.0);
        for (d, &slot) in assignment.iter().enumerate() {
            let row = &mut sums[slot * t_len..(slot + 1) * t_len];
            let wyd = &wy[d * t_len..(d + 1) * t_len];
            for tt in 0..t_len {
                row[tt] += wyd[tt];
            }
        }
        let mut loss = 0.0;
        for k in 0..k_len {
            let tau = state.grid.tau(k);
            let b = &base[k * t_len..(k + 1) * t_len];
            for tt in 0..t_len {
                let mut pred = 0.0;
                for (slot, &label) in allowed.iter().enumerate() {
                    pred += state.params.theta(k, gi, label) * sums[slot * t_len + tt];
                }
                loss += crate::model::rho(b[tt] - pred, tau);
            }
        }
        loss
    };
    let (best, _) = ce::minimize(set.len(), n_labels, &incumbent, seed, eval);
    best.into_iter().map(|slot| allowed[slot]).collect()
}
