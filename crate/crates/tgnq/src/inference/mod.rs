//! Plug-in sandwich covariance and confidence intervals for the
//! post-refinement estimator.
//!
//! Per quantile the stacked regressor is
//! `X_it = e_{g_i} (x) (ybar_i', Y_{i,t-1}, x_it')'` with the column-group
//! lag aggregates `ybar_i`, so `X_it' xi(tau)` reproduces the model
//! prediction. The score outer-product estimate of `Sigma_X` uses only the
//! lag-zero term: `P(eps < 0 | F) = tau` makes the scores a martingale
//! difference sequence, so longer lags vanish in expectation. A Bartlett
//! HAC variant sits behind a flag for robustness checks. The density matrix
//! `Sigma_f` is the Powell kernel plug-in with a uniform kernel and a
//! Hall-Sheather style bandwidth, widened by doubling (up to three times)
//! when too few residuals land inside the band.

use nalgebra::DMatrix;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::model::{Membership, ModelError, Network, PanelData, ParameterSet, QuantileGrid};
use crate::refinement::RefinedFit;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("density matrix singular at quantile index {k} even after widening the bandwidth")]
    SingularDensity { k: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct InferenceOptions {
    /// Replace the martingale-difference score covariance with a Bartlett
    /// HAC estimate at lag floor(T^(1/3)).
    pub hac: bool,
    pub level: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            hac: false,
            level: 0.95,
        }
    }
}

/// Per-quantile covariance pieces; `sandwich = sigma_f^-1 sigma_x sigma_f^-1`.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub sigma_f: Vec<DMatrix<f64>>,
    pub sigma_x: Vec<DMatrix<f64>>,
    pub sandwich: Vec<DMatrix<f64>>,
    /// Bandwidth actually used per quantile (after any widening).
    pub bandwidth: Vec<f64>,
    /// Quantiles where `sigma_f` needed a pseudo-inverse.
    pub pseudo_inverse: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct CiEntry {
    pub name: String,
    pub tau: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    /// Set when the covariance at this coordinate came from a
    /// pseudo-inverse.
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct ConfidenceIntervals {
    pub level: f64,
    pub entries: Vec<CiEntry>,
}

/// Stacked regressors, one row per (node, time) pair in node-major order;
/// `q = G (H + p + 1)` columns.
pub fn build_stacked_design(
    data: &PanelData,
    net: &Network,
    mem: &Membership,
) -> Result<DMatrix<f64>, InferenceError> {
    if mem.n_nodes() != data.n_nodes() || net.n_nodes() != data.n_nodes() {
        return Err(InferenceError::Shape {
            context: "stacked design inputs",
            expected: data.n_nodes(),
            got: mem.n_nodes().min(net.n_nodes()),
        });
    }
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let p = data.n_covariates();
    let n_h = mem.n_col_groups();
    let block = n_h + 1 + p;
    let q = mem.n_row_groups() * block;
    let mut design = DMatrix::zeros(n * t_len, q);
    for i in 0..n {
        let g = mem.row_label(i);
        let offset = g * block;
        let w = net.weight(i);
        for t in 1..=t_len {
            let row = i * t_len + (t - 1);
            for &j in net.out_neighbors(i) {
                design[(row, offset + mem.col_label(j))] += w * data.y(j, t - 1);
            }
            design[(row, offset + n_h)] = data.y(i, t - 1);
            for l in 0..p {
                design[(row, offset + n_h + 1 + l)] = data.x(i, t, l);
            }
        }
    }
    Ok(design)
}

/// Residual matrix per quantile, rows aligned with the stacked design.
fn residual_matrix(
    data: &PanelData,
    mem: &Membership,
    params: &ParameterSet,
    grid: &QuantileGrid,
    design: &DMatrix<f64>,
) -> Vec<Vec<f64>> {
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let p = data.n_covariates();
    let n_h = mem.n_col_groups();
    let block = n_h + 1 + p;
    let k_len = grid.len();
    let mut resid = vec![vec![0.0; n * t_len]; k_len];
    for i in 0..n {
        let g = mem.row_label(i);
        let offset = g * block;
        for t in 1..=t_len {
            let row = i * t_len + (t - 1);
            for (k, r) in resid.iter_mut().enumerate() {
                let mut pred = 0.0;
                for h in 0..n_h {
                    pred += params.theta(k, g, h) * design[(row, offset + h)];
                }
                pred += params.nu(k, g) * design[(row, offset + n_h)];
                for l in 0..p {
                    pred += params.gamma(k, g, l) * design[(row, offset + n_h + 1 + l)];
                }
                r[row] = data.y(i, t) - pred;
            }
        }
    }
    resid
}

fn check_shapes(
    data: &PanelData,
    mem: &Membership,
    params: &ParameterSet,
    grid: &QuantileGrid,
) -> Result<(), InferenceError> {
    if params.n_row_groups() != mem.n_row_groups()
        || params.n_col_groups() != mem.n_col_groups()
        || params.n_covariates() != data.n_covariates()
        || params.n_quantiles() != grid.len()
    {
        return Err(InferenceError::Shape {
            context: "parameters vs membership/grid",
            expected: mem.n_row_groups() * mem.n_col_groups() * grid.len(),
            got: params.n_row_groups() * params.n_col_groups() * params.n_quantiles(),
        });
    }
    Ok(())
}

/// Score covariance `T^-1 sum_t g_t g_t'` with
/// `g_t = N^-1/2 sum_i (tau - 1{eps_it < 0}) X_it`; optionally Bartlett HAC.
pub fn estimate_sigma_x(
    data: &PanelData,
    net: &Network,
    mem: &Membership,
    params: &ParameterSet,
    grid: &QuantileGrid,
    hac: bool,
) -> Result<Vec<DMatrix<f64>>, InferenceError> {
    check_shapes(data, mem, params, grid)?;
    let design = build_stacked_design(data, net, mem)?;
    let resid = residual_matrix(data, mem, params, grid, &design);
    Ok(sigma_x_from_parts(data, grid, &design, &resid, hac))
}

fn sigma_x_from_parts(
    data: &PanelData,
    grid: &QuantileGrid,
    design: &DMatrix<f64>,
    resid: &[Vec<f64>],
    hac: bool,
) -> Vec<DMatrix<f64>> {
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let q = design.ncols();
    let mut out = Vec::with_capacity(grid.len());
    for (k, resid_k) in resid.iter().enumerate() {
        let tau = grid.tau(k);
        // Scores per time point.
        let mut scores: DMatrix<f64> = DMatrix::zeros(t_len, q);
        let scale = 1.0 / (n as f64).sqrt();
        for i in 0..n {
            for tt in 0..t_len {
                let row = i * t_len + tt;
                let psi = tau - if resid_k[row] < 0.0 { 1.0 } else { 0.0 };
                let weight = psi * scale;
                for c in 0..q {
                    let v = design[(row, c)];
                    if v != 0.0 {
                        scores[(tt, c)] += weight * v;
                    }
                }
            }
        }
        let mut sigma = DMatrix::zeros(q, q);
        for tt in 0..t_len {
            let g = scores.row(tt);
            for a in 0..q {
                for b in a..q {
                    let v = g[a] * g[b];
                    sigma[(a, b)] += v;
                }
            }
        }
        if hac {
            let lag = (t_len as f64).powf(1.0 / 3.0).floor() as usize;
            for l in 1..=lag {
                let w = 1.0 - l as f64 / (lag as f64 + 1.0);
                for tt in l..t_len {
                    let gt = scores.row(tt);
                    let gl = scores.row(tt - l);
                    for a in 0..q {
                        for b in 0..q {
                            // w (G_l + G_l') accumulated entrywise on the
                            // upper triangle.
                            if b >= a {
                                sigma[(a, b)] += w * (gt[a] * gl[b] + gl[a] * gt[b]);
                            }
                        }
                    }
                }
            }
        }
        sigma /= t_len as f64;
        for a in 0..q {
            for b in 0..a {
                sigma[(a, b)] = sigma[(b, a)];
            }
        }
        out.push(sigma);
    }
    out
}

/// Hall-Sheather style bandwidth for the density plug-in.
fn hall_sheather_bandwidth(tau: f64, m: usize) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z = 1.96f64;
    let q = normal.inverse_cdf(tau);
    let phi = normal.pdf(q);
    let core = (1.5 * phi * phi / (2.0 * q * q + 1.0)).powf(1.0 / 3.0);
    z.powf(2.0 / 3.0) * core * (m as f64).powf(-1.0 / 3.0)
}

/// Powell kernel plug-in for the density matrix
/// `(NT)^-1 sum_{i,t} K_h(eps_it) X_it X_it'` with the uniform kernel.
pub fn estimate_sigma_f(
    data: &PanelData,
    net: &Network,
    mem: &Membership,
    params: &ParameterSet,
    grid: &QuantileGrid,
) -> Result<(Vec<DMatrix<f64>>, Vec<f64>), InferenceError> {
    check_shapes(data, mem, params, grid)?;
    let design = build_stacked_design(data, net, mem)?;
    let resid = residual_matrix(data, mem, params, grid, &design);
    sigma_f_from_parts(data, grid, &design, &resid)
}

fn sigma_f_from_parts(
    data: &PanelData,
    grid: &QuantileGrid,
    design: &DMatrix<f64>,
    resid: &[Vec<f64>],
) -> Result<(Vec<DMatrix<f64>>, Vec<f64>), InferenceError> {
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let m = n * t_len;
    let q = design.ncols();
    let mut out = Vec::with_capacity(grid.len());
    let mut bandwidths = Vec::with_capacity(grid.len());
    for (k, resid_k) in resid.iter().enumerate() {
        let tau = grid.tau(k);
        let mut h = hall_sheather_bandwidth(tau, m);
        let mut chosen = None;
        for _attempt in 0..4 {
            let inside = resid_k.iter().filter(|r| r.abs() <= h).count();
            if inside >= q {
                chosen = Some(h);
                break;
            }
            h *= 2.0;
        }
        let h = chosen.ok_or(InferenceError::SingularDensity { k })?;
        out.push(powell_matrix(design, resid_k, h));
        bandwidths.push(h);
    }
    Ok((out, bandwidths))
}

/// `(m)^-1 sum_r 1{|resid_r| <= h} / (2h) x_r x_r'` for a fixed bandwidth.
pub(crate) fn powell_matrix(design: &DMatrix<f64>, resid: &[f64], h: f64) -> DMatrix<f64> {
    let m = design.nrows();
    let q = design.ncols();
    let mut sigma = DMatrix::zeros(q, q);
    let weight = 1.0 / (2.0 * h);
    for row in 0..m {
        if resid[row].abs() <= h {
            for a in 0..q {
                let va = design[(row, a)];
                if va == 0.0 {
                    continue;
                }
                for b in a..q {
                    sigma[(a, b)] += weight * va * design[(row, b)];
                }
            }
        }
    }
    sigma /= m as f64;
    for a in 0..q {
        for b in 0..a {
            sigma[(a, b)] = sigma[(b, a)];
        }
    }
    sigma
}

/// Covariance estimate for a refined fit.
pub fn estimate_covariance(
    data: &PanelData,
    net: &Network,
    refined: &RefinedFit,
    grid: &QuantileGrid,
    opts: &InferenceOptions,
) -> Result<CovarianceEstimate, InferenceError> {
    let mem = &refined.membership;
    let params = &refined.params;
    check_shapes(data, mem, params, grid)?;
    let design = build_stacked_design(data, net, mem)?;
    let resid = residual_matrix(data, mem, params, grid, &design);
    let sigma_x = sigma_x_from_parts(data, grid, &design, &resid, opts.hac);
    let (sigma_f, bandwidth) = sigma_f_from_parts(data, grid, &design, &resid)?;
    let mut sandwich = Vec::with_capacity(grid.len());
    let mut pseudo = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let (inv, used_pseudo) = invert_or_pseudo(&sigma_f[k]);
        let mut s = &inv * &sigma_x[k] * &inv;
        // Symmetrize against accumulated round-off.
        let st = s.transpose();
        s = (s + st) * 0.5;
        sandwich.push(s);
        pseudo.push(used_pseudo);
    }
    Ok(CovarianceEstimate {
        sigma_f,
        sigma_x,
        sandwich,
        bandwidth,
        pseudo_inverse: pseudo,
    })
}

fn invert_or_pseudo(mat: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = mat.clone().cholesky() {
        return (chol.inverse(), false);
    }
    let svd = mat.clone().svd(true, true);
    let eps = 1e-12 * mat.nrows() as f64 * svd.singular_values.max();
    (
        svd.pseudo_inverse(eps).expect("svd computed with vectors"),
        true,
    )
}

/// Confidence intervals for every coefficient at every quantile:
/// `point +/- z * sqrt(diag(sandwich) / (N T))`.
pub fn confidence_intervals(
    params: &ParameterSet,
    cov: &CovarianceEstimate,
    n: usize,
    t_len: usize,
    grid: &QuantileGrid,
    level: f64,
) -> Result<ConfidenceIntervals, InferenceError> {
    let n_g = params.n_row_groups();
    let n_h = params.n_col_groups();
    let p = params.n_covariates();
    let block = n_h + 1 + p;
    let q = n_g * block;
    if cov.sandwich.len() != grid.len() {
        return Err(InferenceError::Shape {
            context: "covariance quantiles",
            expected: grid.len(),
            got: cov.sandwich.len(),
        });
    }
    if cov.sandwich[0].nrows() != q {
        return Err(InferenceError::Shape {
            context: "sandwich dimension",
            expected: q,
            got: cov.sandwich[0].nrows(),
        });
    }
    // The reference experiments use the literal 1.96 at the 95% level.
    let z = if (level - 0.95).abs() < 1e-12 {
        1.96
    } else {
        Normal::new(0.0, 1.0)
            .expect("unit normal")
            .inverse_cdf(1.0 - (1.0 - level) / 2.0)
    };
    let nt = (n * t_len) as f64;
    let mut entries = Vec::with_capacity(grid.len() * q);
    for k in 0..grid.len() {
        let tau = grid.tau(k);
        let flagged = cov.pseudo_inverse[k];
        for g in 0..n_g {
            for c in 0..block {
                let coord = g * block + c;
                let (name, estimate) = if c < n_h {
                    (format!("theta[{}][{}]", g + 1, c + 1), params.theta(k, g, c))
                } else if c == n_h {
                    (format!("nu[{}]", g + 1), params.nu(k, g))
                } else {
                    let l = c - n_h - 1;
                    (format!("gamma[{}][{}]", g + 1, l + 1), params.gamma(k, g, l))
                };
                let var = cov.sandwich[k][(coord, coord)].max(0.0);
                let std_error = (var / nt).sqrt();
                entries.push(CiEntry {
                    name,
                    tau,
                    estimate,
                    std_error,
                    lower: estimate - z * std_error,
                    upper: estimate + z * std_error,
                    flagged,
                });
            }
        }
    }
    Ok(ConfidenceIntervals { level, entries })
}

/// Full inference pipeline on a refined fit.
pub fn infer(
    data: &PanelData,
    net: &Network,
    refined: &RefinedFit,
    grid: &QuantileGrid,
    opts: &InferenceOptions,
) -> Result<(CovarianceEstimate, ConfidenceIntervals), InferenceError> {
    let cov = estimate_covariance(data, net, refined, grid, opts)?;
    let cis = confidence_intervals(
        &refined.params,
        &cov,
        data.n_nodes(),
        data.n_periods(),
        grid,
        opts.level,
    )?;
    Ok((cov, cis))
}
