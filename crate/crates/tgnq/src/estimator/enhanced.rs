//! Active-set escape around the vanilla descent.
//!
//! After the multi-start vanilla fit, each round draws joint follower-side
//! label proposals for the active nodes, samples a candidate column
//! membership vector per node from its followers' proposals, and restarts
//! the vanilla descent from two random halves of the disagreeing set. An
//! improved loss resets the round counter and the active set; after a run
//! of failed attempts fresh proposals are drawn from the shrunken active
//! set. The incumbent only ever improves.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::model::{FitDiagnostics, FitResult, Membership, Network, PanelData, ParameterSet, QuantileGrid};
use crate::rng::derive_seed;

use super::state::FitState;
use super::{canonicalize, init, proposals, run_descent, stream, EstimatorError, EstimatorOptions};

struct Incumbent {
    g: Vec<usize>,
    h: Vec<usize>,
    params: ParameterSet,
    loss: f64,
    trace: Vec<f64>,
    converged: bool,
    diagnostics: FitDiagnostics,
}

impl Incumbent {
    fn capture(state: &FitState, trace: Vec<f64>, converged: bool) -> Self {
        Self {
            g: state.g.clone(),
            h: state.h.clone(),
            params: state.params.clone(),
            loss: trace.last().copied().unwrap_or(f64::INFINITY),
            trace,
            converged,
            diagnostics: state.diagnostics.clone(),
        }
    }

    fn into_fit(self, opts: &EstimatorOptions) -> FitResult {
        let iterations = self.trace.len();
        FitResult {
            membership: Membership::new(
                self.g,
                self.h,
                opts.n_row_groups,
                opts.n_col_groups,
            )
            .expect("incumbent labels are valid"),
            params: self.params,
            loss: self.loss,
            loss_trace: self.trace,
            iterations,
            converged: self.converged,
            seed: opts.seed,
            diagnostics: self.diagnostics,
        }
    }
}

pub(crate) fn run(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
) -> Result<FitResult, EstimatorError> {
    let starts = init::initial_memberships(
        data,
        net,
        opts.n_row_groups,
        opts.n_col_groups,
        opts.n_inits,
        opts.seed,
    );
    run_from_starts(data, net, grid, opts, &starts)
}

pub(crate) fn run_from_starts(
    data: &PanelData,
    net: &Network,
    grid: &QuantileGrid,
    opts: &EstimatorOptions,
    starts: &[Membership],
) -> Result<FitResult, EstimatorError> {
    let n = data.n_nodes();
    let mut state = FitState::new(data, net, grid, &starts[0]);
    let mut best: Option<Incumbent> = None;
    for (idx, start) in starts.iter().enumerate() {
        super::check_init(data, opts, start)?;
        if idx > 0 {
            state.reset_from_membership(start);
        }
        let (trace, converged) = run_descent(&mut state, opts);
        let cand = Incumbent::capture(&state, trace, converged);
        if best.as_ref().map(|b| cand.loss < b.loss).unwrap_or(true) {
            best = Some(cand);
        }
    }
    let mut best = best.expect("at least one start");

    if opts.r_max > 0 && opts.n_col_groups > 1 {
        let mut rng = stream(opts.seed, 0xe5ca);
        let mut active = vec![true; n];
        let mut r = 0usize;
        'outer: loop {
            // Step II: joint proposals over the current active set.
            state.reset(&best.g, &best.h, Some(&best.params));
            let table = proposals::propose(
                &state,
                &active,
                opts.enum_threshold,
                derive_seed(opts.seed, &[0x11d7]),
                r as u64,
            );
            r += 1;
            if table.is_empty() || table.all_agree_with(&best.h) || r > opts.r_max {
                break;
            }
            let mut fails = 0usize;
            while fails < opts.fail_streak {
                // Draw a candidate vector from the followers' proposals.
                let mut htilde = best.h.clone();
                for j in 0..n {
                    if !active[j] {
                        continue;
                    }
                    let cands: Vec<usize> = net
                        .followers(j)
                        .iter()
                        .filter_map(|&i| table.lookup(i, j))
                        .collect();
                    if !cands.is_empty() {
                        htilde[j] = cands[rng.random_range(0..cands.len())];
                    }
                }
                let mut disagree: Vec<usize> =
                    (0..n).filter(|&j| htilde[j] != best.h[j]).collect();
                for flag in active.iter_mut() {
                    *flag = false;
                }
                for &j in &disagree {
                    active[j] = true;
                }
                if disagree.is_empty() {
                    fails += 1;
                    continue;
                }
                // Split the disagreeing set uniformly and restart the
                // descent from each half.
                disagree.shuffle(&mut rng);
                let half = disagree.len().div_ceil(2);
                let mut improved = false;
                for part in [&disagree[..half], &disagree[half..]] {
                    if part.is_empty() {
                        continue;
                    }
                    let mut h_try = best.h.clone();
                    for &j in part {
                        h_try[j] = htilde[j];
                    }
                    state.reset(&best.g, &h_try, Some(&best.params));
                    let (trace, converged) = run_descent(&mut state, opts);
                    let loss = trace.last().copied().unwrap_or(f64::INFINITY);
                    if loss < best.loss - 1e-12 {
                        best = Incumbent::capture(&state, trace, converged);
                        for flag in active.iter_mut() {
                            *flag = true;
                        }
                        r = 0;
                        improved = true;
                        break;
                    }
                }
                if improved {
                    continue 'outer;
                }
                fails += 1;
            }
        }
    }

    let mut fit = best.into_fit(opts);
    canonicalize(&mut fit, grid);
    Ok(fit)
}
