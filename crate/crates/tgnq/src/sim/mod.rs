//! Synthetic data generation and the Monte-Carlo replication harness.

mod dgp;
mod network_gen;
mod replicate;

pub use dgp::{gen_memberships, gen_panel, ParamFunctions, Scenario};
pub use network_gen::{gen_powerlaw, gen_sbm};
pub use replicate::*;

use thiserror::Error;

use crate::estimator::EstimatorError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("edge probability {p} exceeds 1 (network too small for the SBM rates)")]
    InvalidProbability { p: f64 },
    #[error("invalid membership ratios: {0}")]
    InvalidRatios(&'static str),
    #[error("{what} too small: need at least {min}, got {got}")]
    TooSmall {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error(
        "trajectory diverged at step {step} (max |y| = {norm:.3e}); the transition matrix built \
         from the parameter functions is not a contraction (spectral radius of B(tau) must stay \
         below one for stationarity)"
    )]
    Divergence { step: usize, norm: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Network family to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    Sbm,
    PowerLaw,
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    pub n: usize,
    /// Number of SBM communities (ignored for power-law networks).
    pub sbm_communities: usize,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn sbm(n: usize, communities: usize, seed: u64) -> Self {
        Self {
            kind: NetworkKind::Sbm,
            n,
            sbm_communities: communities,
            seed,
        }
    }

    pub fn power_law(n: usize, seed: u64) -> Self {
        Self {
            kind: NetworkKind::PowerLaw,
            n,
            sbm_communities: 1,
            seed,
        }
    }

    pub fn generate(&self) -> Result<crate::model::Network, SimError> {
        match self.kind {
            NetworkKind::Sbm => gen_sbm(self),
            NetworkKind::PowerLaw => gen_powerlaw(self),
        }
    }
}

/// Scenario layout: group counts, membership ratios, panel sizes.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub g0: usize,
    pub h0: usize,
    pub row_ratios: Vec<f64>,
    pub col_ratios: Vec<f64>,
    pub p: usize,
    pub t_len: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Membership ratios used in the reference experiments: (0.5, 0.5) rows
    /// and (0.4, 0.6) columns for two groups, (0.3, 0.3, 0.4) for three.
    pub fn new(scenario: Scenario, g0: usize, h0: usize, t_len: usize, seed: u64) -> Self {
        let ratios = |k: usize| -> Vec<f64> {
            match k {
                2 => vec![0.5, 0.5],
                3 => vec![0.3, 0.3, 0.4],
                k => vec![1.0 / k as f64; k],
            }
        };
        let col_ratios = match h0 {
            2 => vec![0.4, 0.6],
            3 => vec![0.3, 0.3, 0.4],
            k => vec![1.0 / k as f64; k],
        };
        Self {
            scenario,
            g0,
            h0,
            row_ratios: ratios(g0),
            col_ratios,
            p: 2,
            t_len,
            burn_in: 200,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.t_len < 2 {
            return Err(SimError::TooSmall {
                what: "time points",
                min: 2,
                got: self.t_len,
            });
        }
        check_ratios(&self.row_ratios, self.g0)?;
        check_ratios(&self.col_ratios, self.h0)?;
        Ok(())
    }
}

fn check_ratios(ratios: &[f64], k: usize) -> Result<(), SimError> {
    if ratios.len() != k {
        return Err(SimError::InvalidRatios("ratio count differs from group count"));
    }
    if ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(SimError::InvalidRatios("ratios must be positive"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SimError::InvalidRatios("ratios must sum to one"));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
