//! Cross-entropy minimization over label assignments, used when a joint
//! label search is too large to enumerate. Population 200, elite fraction
//! 0.1, at most 50 iterations, fully seeded.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const CE_POPULATION: usize = 200;
pub(crate) const CE_ELITE_FRACTION: f64 = 0.1;
pub(crate) const CE_MAX_ITERS: usize = 50;
const CE_SMOOTHING: f64 = 0.7;

/// Minimize `eval` over assignments in `[n_labels]^len`. The incumbent is
/// injected into the first population so the result never falls behind it.
pub(crate) fn minimize<F>(
    len: usize,
    n_labels: usize,
    incumbent: &[usize],
    seed: u64,
    mut eval: F,
) -> (Vec<usize>, f64)
where
    F: FnMut(&[usize]) -> f64,
{
    debug_assert_eq!(incumbent.len(), len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = vec![vec![1.0 / n_labels as f64; n_labels]; len];
    let mut best = incumbent.to_vec();
    let mut best_loss = eval(&best);
    let elite_count = ((CE_POPULATION as f64 * CE_ELITE_FRACTION).round() as usize).max(1);
    let mut stale = 0usize;

    let mut population: Vec<Vec<usize>> = vec![vec![0; len]; CE_POPULATION];
    let mut losses = vec![0.0f64; CE_POPULATION];
    for iter in 0..CE_MAX_ITERS {
        for (s, sample) in population.iter_mut().enumerate() {
            if iter == 0 && s == 0 {
                sample.copy_from_slice(incumbent);
            } else {
                for (slot, p) in probs.iter().enumerate() {
                    let mut u: f64 = rng.random_range(0.0..1.0);
                    let mut label = n_labels - 1;
                    for (l, &pl) in p.iter().enumerate() {
                        if u < pl {
                            label = l;
                            break;
                        }
                        u -= pl;
                    }
                    sample[slot] = label;
                }
            }
        }
        for (s, sample) in population.iter().enumerate() {
            losses[s] = eval(sample);
        }
        let mut order: Vec<usize> = (0..CE_POPULATION).collect();
        order.sort_by(|&a, &b| losses[a].partial_cmp(&losses[b]).unwrap().then(a.cmp(&b)));
        if losses[order[0]] < best_loss {
            best_loss = losses[order[0]];
            best.copy_from_slice(&population[order[0]]);
            stale = 0;
        } else {
            stale += 1;
        }
        // Elite frequencies with smoothing.
        let mut freq = vec![vec![0.0f64; n_labels]; len];
        for &s in order.iter().take(elite_count) {
            for (slot, &label) in population[s].iter().enumerate() {
                freq[slot][label] += 1.0;
            }
        }
        let mut degenerate = true;
        for slot in 0..len {
            let mut max_p = 0.0f64;
            for l in 0..n_labels {
                let f = freq[slot][l] / elite_count as f64;
                probs[slot][l] = CE_SMOOTHING * f + (1.0 - CE_SMOOTHING) * probs[slot][l];
                max_p = max_p.max(probs[slot][l]);
            }
            if max_p < 0.995 {
                degenerate = false;
            }
        }
        if degenerate || stale >= 6 {
            break;
        }
    }
    (best, best_loss)
}
