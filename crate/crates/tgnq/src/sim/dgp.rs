//! Parameter functions and the panel data generating process.
//!
//! Every simulated response follows the recursion
//! `Y_it = sum_j theta(g_i, h_j, U_it) w_ij Y_{j,t-1} + nu(g_i, U_it) Y_{i,t-1}
//!        + x_it' gamma(g_i, U_it)`
//! with independent `U_it ~ Uniform(0, 1)` and covariates drawn as absolute
//! values of standard normals. The coefficient functions are monotone
//! piecewise-linear interpolants of a tabulated truth on the quantile grid
//! (0.1, 0.3, 0.5, 0.7, 0.9), flat beyond the grid ends, so evaluating at a
//! grid quantile reproduces the tabulated values exactly and the right side
//! of the recursion stays non-decreasing in `U` (all regressors are
//! nonnegative along the trajectory).

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{ModelKind, Network, PanelData, ParameterSet, QuantileGrid};
use crate::rng::derive_seed;

use super::SimError;

/// Which data generating process to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Additive network effects `theta = alpha + beta`.
    S1Additive,
    /// Multiplicative network effects `theta = alpha * beta`.
    S2Multiplicative,
}

const TAB_TAUS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

// Tabulated truth per quantile row; three groups each way, two covariates.
const S1_ALPHA: [[f64; 3]; 5] = [
    [0.000, 0.090, 0.204],
    [0.000, 0.117, 0.210],
    [0.000, 0.131, 0.219],
    [0.000, 0.140, 0.233],
    [0.000, 0.146, 0.260],
];
const S1_NU: [[f64; 3]; 5] = [
    [0.007, 0.020, 0.043],
    [0.031, 0.060, 0.098],
    [0.062, 0.100, 0.138],
    [0.102, 0.140, 0.169],
    [0.157, 0.180, 0.193],
];
const S1_GAMMA1: [[f64; 3]; 5] = [
    [0.020, 0.038, 0.014],
    [0.060, 0.090, 0.047],
    [0.100, 0.131, 0.084],
    [0.140, 0.164, 0.125],
    [0.180, 0.191, 0.172],
];
const S1_GAMMA2: [[f64; 3]; 5] = [
    [0.033, 0.047, 0.028],
    [0.065, 0.091, 0.054],
    [0.100, 0.127, 0.086],
    [0.135, 0.155, 0.122],
    [0.167, 0.177, 0.161],
];
const S1_BETA: [[f64; 3]; 5] = [
    [0.474, 0.000, 0.149],
    [0.480, 0.000, 0.159],
    [0.483, 0.000, 0.167],
    [0.487, 0.000, 0.174],
    [0.492, 0.000, 0.184],
];

const S2_ALPHA: [[f64; 3]; 5] = [
    [1.000, 1.214, 1.340],
    [1.000, 1.232, 1.369],
    [1.000, 1.251, 1.385],
    [1.000, 1.271, 1.394],
    [1.000, 1.290, 1.401],
];
const S2_NU: [[f64; 3]; 5] = S1_NU;
const S2_GAMMA1: [[f64; 3]; 5] = [
    [0.020, 0.043, 0.007],
    [0.060, 0.098, 0.031],
    [0.100, 0.138, 0.062],
    [0.140, 0.169, 0.102],
    [0.180, 0.193, 0.157],
];
const S2_GAMMA2: [[f64; 3]; 5] = [
    [0.054, 0.096, 0.030],
    [0.126, 0.196, 0.073],
    [0.200, 0.271, 0.129],
    [0.274, 0.327, 0.204],
    [0.346, 0.370, 0.304],
];
const S2_BETA: [[f64; 3]; 5] = [
    [0.074, 0.398, 0.591],
    [0.079, 0.417, 0.623],
    [0.082, 0.431, 0.646],
    [0.086, 0.446, 0.670],
    [0.091, 0.468, 0.707],
];

/// Tabulated true coefficient functions with monotone piecewise-linear
/// interpolation in the quantile argument.
#[derive(Debug, Clone)]
pub struct ParamFunctions {
    taus: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    nu: Vec<Vec<f64>>,
    gamma: Vec<Vec<Vec<f64>>>,
    beta: Vec<Vec<f64>>,
    kind: ModelKind,
}

impl ParamFunctions {
    /// The tabulated truth for a scenario, restricted to the first `g0` row
    /// and `h0` column groups.
    pub fn scenario(scenario: Scenario, g0: usize, h0: usize) -> Result<Self, SimError> {
        if g0 == 0 || g0 > 3 || h0 == 0 || h0 > 3 {
            return Err(SimError::Invalid(
                "tabulated truth covers 1 to 3 groups each way".into(),
            ));
        }
        let (alpha_tab, nu_tab, g1_tab, g2_tab, beta_tab, kind) = match scenario {
            Scenario::S1Additive => (
                &S1_ALPHA,
                &S1_NU,
                &S1_GAMMA1,
                &S1_GAMMA2,
                &S1_BETA,
                ModelKind::Additive,
            ),
            Scenario::S2Multiplicative => (
                &S2_ALPHA,
                &S2_NU,
                &S2_GAMMA1,
                &S2_GAMMA2,
                &S2_BETA,
                ModelKind::Multiplicative,
            ),
        };
        let column = |tab: &[[f64; 3]; 5], g: usize| -> Vec<f64> {
            (0..5).map(|r| tab[r][g]).collect()
        };
        let fns = Self {
            taus: TAB_TAUS.to_vec(),
            alpha: (0..g0).map(|g| column(alpha_tab, g)).collect(),
            nu: (0..g0).map(|g| column(nu_tab, g)).collect(),
            gamma: (0..g0)
                .map(|g| vec![column(g1_tab, g), column(g2_tab, g)])
                .collect(),
            beta: (0..h0).map(|h| column(beta_tab, h)).collect(),
            kind,
        };
        fns.check_monotone()?;
        Ok(fns)
    }

    /// User-supplied tabulated functions; `alpha[g]`, `nu[g]`, `beta[h]`
    /// hold one value per grid point and `gamma[g][l]` likewise.
    pub fn custom(
        kind: ModelKind,
        taus: Vec<f64>,
        alpha: Vec<Vec<f64>>,
        nu: Vec<Vec<f64>>,
        gamma: Vec<Vec<Vec<f64>>>,
        beta: Vec<Vec<f64>>,
    ) -> Result<Self, SimError> {
        if kind == ModelKind::General {
            return Err(SimError::Invalid(
                "parameter functions factor through alpha and beta".into(),
            ));
        }
        if taus.is_empty()
            || taus.windows(2).any(|w| w[0] >= w[1])
            || taus.iter().any(|&t| t <= 0.0 || t >= 1.0)
        {
            return Err(SimError::Invalid(
                "tabulation grid must be strictly increasing inside (0, 1)".into(),
            ));
        }
        let len_ok = alpha.iter().all(|v| v.len() == taus.len())
            && nu.iter().all(|v| v.len() == taus.len())
            && beta.iter().all(|v| v.len() == taus.len())
            && gamma
                .iter()
                .all(|per_g| per_g.iter().all(|v| v.len() == taus.len()));
        if !len_ok || alpha.len() != nu.len() || alpha.len() != gamma.len() || alpha.is_empty() {
            return Err(SimError::Invalid(
                "tabulated component lengths disagree with the grid".into(),
            ));
        }
        let fns = Self {
            taus,
            alpha,
            nu,
            gamma,
            beta,
            kind,
        };
        fns.check_monotone()?;
        Ok(fns)
    }

    fn check_monotone(&self) -> Result<(), SimError> {
        let non_decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0] - 1e-12);
        let ok = self.alpha.iter().all(|v| non_decreasing(v))
            && self.nu.iter().all(|v| non_decreasing(v))
            && self.beta.iter().all(|v| non_decreasing(v))
            && self
                .gamma
                .iter()
                .all(|per_g| per_g.iter().all(|v| non_decreasing(v)));
        if ok {
            Ok(())
        } else {
            Err(SimError::Invalid(
                "tabulated parameter functions must be non-decreasing in tau".into(),
            ))
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_row_groups(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_col_groups(&self) -> usize {
        self.beta.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.gamma.first().map(|g| g.len()).unwrap_or(0)
    }

    fn interp(&self, table: &[f64], u: f64) -> f64 {
        let taus = &self.taus;
        if u <= taus[0] {
            return table[0];
        }
        if u >= taus[taus.len() - 1] {
            return table[table.len() - 1];
        }
        let mut hi = 1;
        while taus[hi] < u {
            hi += 1;
        }
        let lo = hi - 1;
        let frac = (u - taus[lo]) / (taus[hi] - taus[lo]);
        table[lo] + frac * (table[hi] - table[lo])
    }

    pub fn alpha(&self, g: usize, u: f64) -> f64 {
        self.interp(&self.alpha[g], u)
    }

    pub fn nu(&self, g: usize, u: f64) -> f64 {
        self.interp(&self.nu[g], u)
    }

    pub fn gamma(&self, g: usize, l: usize, u: f64) -> f64 {
        self.interp(&self.gamma[g][l], u)
    }

    pub fn beta(&self, h: usize, u: f64) -> f64 {
        self.interp(&self.beta[h], u)
    }

    pub fn theta(&self, g: usize, h: usize, u: f64) -> f64 {
        match self.kind {
            ModelKind::Additive => self.alpha(g, u) + self.beta(h, u),
            ModelKind::Multiplicative => self.alpha(g, u) * self.beta(h, u),
            ModelKind::General => unreachable!("tabulated truth is structured"),
        }
    }

    /// The true structured parameter set evaluated on a quantile grid.
    pub fn parameter_set(&self, grid: &QuantileGrid) -> ParameterSet {
        let k_len = grid.len();
        let g0 = self.n_row_groups();
        let h0 = self.n_col_groups();
        let p = self.n_covariates();
        let alpha = Array2::from_shape_fn((k_len, g0), |(k, g)| self.alpha(g, grid.tau(k)));
        let beta = Array2::from_shape_fn((k_len, h0), |(k, h)| self.beta(h, grid.tau(k)));
        let nu = Array2::from_shape_fn((k_len, g0), |(k, g)| self.nu(g, grid.tau(k)));
        let gamma =
            Array3::from_shape_fn((k_len, g0, p), |(k, g, l)| self.gamma(g, l, grid.tau(k)));
        ParameterSet::structured(self.kind, alpha, beta, nu, gamma)
            .expect("tabulated truth is consistent")
    }

    /// Right side of the generating recursion for one node given the lagged
    /// state; exposed so the monotonicity-in-`U` property can be swept.
    pub fn conditional_value(
        &self,
        net: &Network,
        row_labels: &[usize],
        col_labels: &[usize],
        y_prev: &[f64],
        x_row: &[f64],
        i: usize,
        u: f64,
    ) -> f64 {
        let g = row_labels[i];
        let w = net.weight(i);
        let mut acc = self.nu(g, u) * y_prev[i];
        for &j in net.out_neighbors(i) {
            acc += self.theta(g, col_labels[j], u) * w * y_prev[j];
        }
        for (l, &x) in x_row.iter().enumerate() {
            acc += self.gamma(g, l, u) * x;
        }
        acc
    }
}

/// Deterministic blocks of size `round(N * ratio)` (the last block absorbs
/// rounding), then a seeded shuffle of the node order.
pub fn gen_memberships(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<usize>, SimError> {
    super::check_ratios(ratios, ratios.len())?;
    let k = ratios.len();
    let mut sizes: Vec<usize> = ratios[..k - 1]
        .iter()
        .map(|&r| (n as f64 * r).round() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    if used >= n {
        return Err(SimError::InvalidRatios("rounded block sizes exhaust the nodes"));
    }
    sizes.push(n - used);
    if sizes.iter().any(|&s| s == 0) {
        return Err(SimError::InvalidRatios("a group would be empty at this size"));
    }
    let mut labels = Vec::with_capacity(n);
    for (label, &size) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat_n(label, size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x3e_11]));
    // Fisher-Yates over node order.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    Ok(labels)
}

/// Iterate the recursion from `y_0 = 0` for `burn_in + T` steps, discard the
/// burn-in, and return the final `T + 1` snapshots with their covariates.
pub fn gen_panel(
    net: &Network,
    row_labels: &[usize],
    col_labels: &[usize],
    fns: &ParamFunctions,
    t_len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<PanelData, SimError> {
    let n = net.n_nodes();
    if row_labels.len() != n || col_labels.len() != n {
        return Err(SimError::Invalid(
            "membership vectors must match the network size".into(),
        ));
    }
    let p = fns.n_covariates();
    let h0 = fns.n_col_groups();
    let mut rng_u = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x01]));
    let mut rng_x = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x02]));

    let mut y = Array2::zeros((n, t_len + 1));
    let mut x = Array3::zeros((n, t_len, p));
    let mut y_prev = vec![0.0f64; n];
    let mut y_next = vec![0.0f64; n];
    let mut x_step = vec![0.0f64; n * p];
    let mut agg = vec![0.0f64; h0];

    for step in 1..=burn_in + t_len {
        for i in 0..n {
            for l in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng_x);
                x_step[i * p + l] = z.abs();
            }
        }
        for i in 0..n {
            let u: f64 = rng_u.random_range(0.0..1.0);
            let g = row_labels[i];
            agg.iter_mut().for_each(|v| *v = 0.0);
            let w = net.weight(i);
            for &j in net.out_neighbors(i) {
                agg[col_labels[j]] += w * y_prev[j];
            }
            let mut value = fns.nu(g, u) * y_prev[i];
            for (h, &s) in agg.iter().enumerate() {
                value += fns.theta(g, h, u) * s;
            }
            for l in 0..p {
                value += fns.gamma(g, l, u) * x_step[i * p + l];
            }
            y_next[i] = value;
        }
        let norm = y_next.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if !norm.is_finite() || norm > 1e6 {
            return Err(SimError::Divergence { step, norm });
        }
        std::mem::swap(&mut y_prev, &mut y_next);
        if step >= burn_in {
            let t = step - burn_in;
            for i in 0..n {
                y[[i, t]] = y_prev[i];
            }
            if t >= 1 {
                for i in 0..n {
                    for l in 0..p {
                        x[[i, t - 1, l]] = x_step[i * p + l];
                    }
                }
            }
        }
    }
    Ok(PanelData::new(y, x)?)
}
