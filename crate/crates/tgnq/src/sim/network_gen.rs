//! Seeded random network generators.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::Network;
use crate::rng::derive_seed;

use super::{NetworkConfig, SimError};

/// Directed stochastic block model: nodes get uniform random communities;
/// ordered pairs connect with probability `6 log(N) / N` inside a community
/// and `2 log(N) / N` across.
pub fn gen_sbm(config: &NetworkConfig) -> Result<Network, SimError> {
    let n = config.n;
    if n < 10 {
        return Err(SimError::TooSmall {
            what: "SBM nodes",
            min: 10,
            got: n,
        });
    }
    let c = config.sbm_communities.max(1);
    let p_within = 6.0 * (n as f64).ln() / n as f64;
    let p_across = 2.0 * (n as f64).ln() / n as f64;
    if p_within > 1.0 {
        return Err(SimError::InvalidProbability { p: p_within });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x5b_b1]));
    let communities: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = if communities[i] == communities[j] {
                p_within
            } else {
                p_across
            };
            if rng.random_range(0.0..1.0) < p {
                edges.push((i, j));
            }
        }
    }
    Ok(Network::from_edges(n, &edges)?)
}

/// Power-law network: draw `d~_i` from `P(k) ~ k^{-2.5}` on `1..=N/4`, set
/// in-degree `d_i = 4 d~_i` (capped at `N - 1`), and pick that many distinct
/// followers uniformly.
pub fn gen_powerlaw(config: &NetworkConfig) -> Result<Network, SimError> {
    let n = config.n;
    if n < 20 {
        return Err(SimError::TooSmall {
            what: "power-law nodes",
            min: 20,
            got: n,
        });
    }
    let support = (n / 4).max(1);
    let weights: Vec<f64> = (1..=support).map(|k| (k as f64).powf(-2.5)).collect();
    let total: f64 = weights.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x9f_a2]));
    let mut edges = Vec::new();
    let mut pool: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = rng.random_range(0.0..total);
        let mut dtilde = support;
        for (idx, &w) in weights.iter().enumerate() {
            if u < w {
                dtilde = idx + 1;
                break;
            }
            u -= w;
        }
        let degree = (4 * dtilde).min(n - 1);
        // Partial Fisher-Yates over the candidate pool.
        pool.clear();
        pool.extend((0..n).filter(|&l| l != i));
        for slot in 0..degree {
            let pick = rng.random_range(slot..pool.len());
            pool.swap(slot, pick);
            edges.push((pool[slot], i));
        }
    }
    Ok(Network::from_edges(n, &edges)?)
}
