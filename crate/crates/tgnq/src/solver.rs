//! Inner convex solver: minimize `sum_r rho_tau(y_r - z_r' xi)` over `xi`.
//!
//! The check-loss objective is a linear program. We follow the classic
//! many-rows/few-columns recipe: a primal-dual interior-point iteration on
//! the LP (each step solves a small `q x q` normal system), followed by an
//! exact finishing stage that walks the polyhedral objective coordinate by
//! coordinate with exact weighted-quantile line searches. The finishing
//! stage pins flat optima down deterministically: within an optimal
//! interval a coordinate takes the value closest to zero, so isolated or
//! unidentified regressors come back as exact zeros and the output is
//! reproducible across platforms.

use ndarray::Array2;
use thiserror::Error;

/// Status of a quantile-regression solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrStatus {
    /// Converged to the requested duality-gap tolerance.
    Optimal,
    /// Iteration cap reached; the best iterate is returned.
    IterLimit,
    /// Rank-deficient design (for example an all-zero regressor); dependent
    /// directions are resolved toward the minimum-norm solution.
    Degenerate,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("design and response row counts differ: {design} vs {response}")]
    ShapeMismatch { design: usize, response: usize },
    #[error("empty problem: at least one observation is required")]
    Empty,
    #[error("quantile {tau} outside (0, 1)")]
    InvalidQuantile { tau: f64 },
    #[error("non-finite entry in {context}")]
    NonFinite { context: &'static str },
}

/// A single check-loss minimization: `m x q` design, length-`m` response,
/// one quantile level.
#[derive(Debug, Clone)]
pub struct QrProblem {
    pub design: Array2<f64>,
    pub response: Vec<f64>,
    pub tau: f64,
}

impl QrProblem {
    pub fn new(design: Array2<f64>, response: Vec<f64>, tau: f64) -> Result<Self, SolverError> {
        let (m, _q) = design.dim();
        if m == 0 {
            return Err(SolverError::Empty);
        }
        if response.len() != m {
            return Err(SolverError::ShapeMismatch {
                design: m,
                response: response.len(),
            });
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(SolverError::InvalidQuantile { tau });
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite { context: "design" });
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite {
                context: "response",
            });
        }
        Ok(Self {
            design,
            response,
            tau,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative duality-gap tolerance.
    pub tol: f64,
    /// Interior-point iteration cap.
    pub max_iters: usize,
    /// Finishing-stage sweep cap.
    pub polish_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 10_000,
            polish_sweeps: 40,
        }
    }
}

/// Solution of a [`QrProblem`].
#[derive(Debug, Clone)]
pub struct QrSolution {
    pub coef: Vec<f64>,
    pub objective: f64,
    pub status: QrStatus,
}

/// Exact check loss of a candidate coefficient vector.
pub fn qr_objective(problem: &QrProblem, coef: &[f64]) -> f64 {
    let (m, q) = problem.design.dim();
    let mut obj = 0.0;
    for r in 0..m {
        let mut pred = 0.0;
        for c in 0..q {
            pred += problem.design[[r, c]] * coef[c];
        }
        obj += rho(problem.response[r] - pred, problem.tau);
    }
    obj
}

#[inline(always)]
fn rho(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

pub fn solve_qr(problem: &QrProblem, opts: &SolverOptions) -> QrSolution {
    let (m, q) = problem.design.dim();
    if q == 0 {
        return QrSolution {
            coef: Vec::new(),
            objective: problem
                .response
                .iter()
                .map(|&y| rho(y, problem.tau))
                .sum(),
            status: QrStatus::Optimal,
        };
    }

    // Screen out all-zero regressors; their coefficients stay exactly 0.
    let mut active: Vec<usize> = Vec::with_capacity(q);
    for c in 0..q {
        let norm: f64 = (0..m).map(|r| problem.design[[r, c]].abs()).sum();
        if norm > 0.0 {
            active.push(c);
        }
    }
    let mut degenerate = active.len() < q;
    if active.is_empty() {
        return QrSolution {
            coef: vec![0.0; q],
            objective: problem
                .response
                .iter()
                .map(|&y| rho(y, problem.tau))
                .sum(),
            status: QrStatus::Degenerate,
        };
    }

    let qa = active.len();
    // Column-major copy of the active design for cache-friendly sweeps.
    let mut cols: Vec<f64> = Vec::with_capacity(qa * m);
    for &c in &active {
        for r in 0..m {
            cols.push(problem.design[[r, c]]);
        }
    }
    let y = &problem.response;
    let tau = problem.tau;

    let mut xi = vec![0.0; qa];
    let (converged, ip_degenerate) =
        interior_point(&cols, y, tau, m, qa, opts, &mut xi);
    degenerate |= ip_degenerate;

    polish(&cols, y, tau, m, qa, opts.polish_sweeps, &mut xi);

    let mut coef = vec![0.0; q];
    for (slot, &c) in active.iter().enumerate() {
        coef[c] = xi[slot];
    }
    let objective = qr_objective(problem, &coef);
    let status = if degenerate {
        QrStatus::Degenerate
    } else if converged {
        QrStatus::Optimal
    } else {
        QrStatus::IterLimit
    };
    QrSolution {
        coef,
        objective,
        status,
    }
}

/// Mehrotra-style predictor-corrector on the LP formulation
/// `min tau 1'u + (1-tau) 1'v  s.t.  X xi + u - v = y, u, v >= 0`
/// with box dual `d in [tau - 1, tau]^m`, `X'd = 0`.
/// Returns (converged, hit rank trouble).
fn interior_point(
    cols: &[f64],
    y: &[f64],
    tau: f64,
    m: usize,
    q: usize,
    opts: &SolverOptions,
    xi: &mut [f64],
) -> (bool, bool) {
    let col = |c: usize| &cols[c * m..(c + 1) * m];
    let y_scale = 1.0 + y.iter().map(|v| v.abs()).sum::<f64>() / m as f64;

    // Least-squares start with a whisper of ridge.
    let mut xtx = vec![0.0; q * q];
    let mut xty = vec![0.0; q];
    for a in 0..q {
        let ca = col(a);
        for b in a..q {
            let cb = col(b);
            let mut s = 0.0;
            for r in 0..m {
                s += ca[r] * cb[r];
            }
            xtx[a * q + b] = s;
            xtx[b * q + a] = s;
        }
        let mut s = 0.0;
        for r in 0..m {
            s += ca[r] * y[r];
        }
        xty[a] = s;
    }
    let trace: f64 = (0..q).map(|a| xtx[a * q + a]).sum();
    let base_ridge = 1e-12 * (trace / q as f64).max(1.0);
    let mut rank_trouble = false;
    {
        let mut a = xtx.clone();
        let mut b = xty.clone();
        let mut ridge = base_ridge;
        while !chol_solve_in_place(&mut a, &mut b, q) {
            ridge *= 1e4;
            a = xtx.clone();
            for i in 0..q {
                a[i * q + i] += ridge;
            }
            b = xty.clone();
            if ridge > 1e-2 * (trace / q as f64).max(1.0) {
                rank_trouble = true;
            }
            if ridge > 1e6 {
                break;
            }
        }
        xi.copy_from_slice(&b);
    }

    let mut resid = vec![0.0; m];
    let compute_resid = |xi: &[f64], resid: &mut [f64]| {
        resid.copy_from_slice(y);
        for c in 0..q {
            let xc = xi[c];
            if xc != 0.0 {
                let cc = col(c);
                for r in 0..m {
                    resid[r] -= cc[r] * xc;
                }
            }
        }
    };
    compute_resid(xi, &mut resid);

    let eps0 = (0.1 * resid.iter().map(|v| v.abs()).sum::<f64>() / m as f64).max(1e-4 * y_scale);
    let mut u: Vec<f64> = resid.iter().map(|&r| r.max(0.0) + eps0).collect();
    let mut v: Vec<f64> = resid.iter().map(|&r| (-r).max(0.0) + eps0).collect();
    let mut d = vec![tau - 0.5; m];

    let mut dd = vec![0.0; m];
    let mut rhs1 = vec![0.0; m];
    let mut du_aff = vec![0.0; m];
    let mut dd_aff = vec![0.0; m];
    let mut dv_aff = vec![0.0; m];
    let mut dxi = vec![0.0; q];
    let mut converged = false;

    for _iter in 0..opts.max_iters.min(300) {
        let mut gap = 0.0;
        let mut rd_inf: f64 = 0.0;
        let mut rp_inf: f64 = 0.0;
        for r in 0..m {
            let s = tau - d[r];
            let w = d[r] - (tau - 1.0);
            gap += u[r] * s + v[r] * w;
        }
        // r_p = y - X xi - u + v
        compute_resid(xi, &mut resid);
        for r in 0..m {
            let rp = resid[r] - u[r] + v[r];
            rp_inf = rp_inf.max(rp.abs());
        }
        let mut rd = vec![0.0; q];
        for c in 0..q {
            let cc = col(c);
            let mut s = 0.0;
            for r in 0..m {
                s += cc[r] * d[r];
            }
            rd[c] = -s;
            rd_inf = rd_inf.max(s.abs());
        }
        let obj: f64 = resid.iter().map(|&r| rho(r, tau)).sum();
        let dual_obj: f64 = y.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
        let gap_ok = (obj - dual_obj).abs() <= opts.tol * (1.0 + obj.abs());
        let feas_ok = rp_inf <= 1e2 * opts.tol * y_scale && rd_inf <= 1e2 * opts.tol * y_scale * m as f64;
        if gap_ok && feas_ok && gap <= opts.tol * (1.0 + obj.abs()) * 2.0 {
            converged = true;
            break;
        }

        // Normal matrix M = X' diag(1/D) X with D = u/s + v/w.
        let mut dinv = vec![0.0; m];
        for r in 0..m {
            let s = (tau - d[r]).max(1e-300);
            let w = (d[r] - (tau - 1.0)).max(1e-300);
            dinv[r] = 1.0 / (u[r] / s + v[r] / w);
        }
        let mut mat = vec![0.0; q * q];
        for a in 0..q {
            let ca = col(a);
            for b in a..q {
                let cb = col(b);
                let mut s = 0.0;
                for r in 0..m {
                    s += ca[r] * cb[r] * dinv[r];
                }
                mat[a * q + b] = s;
                mat[b * q + a] = s;
            }
        }
        let mut chol = mat.clone();
        let mut ridge = base_ridge;
        while !chol_factor(&mut chol, q) {
            chol.copy_from_slice(&mat);
            for i in 0..q {
                chol[i * q + i] += ridge;
            }
            ridge *= 1e4;
            if ridge > 1e8 {
                rank_trouble = true;
                break;
            }
        }

        // Affine (predictor) direction: rhs1 = y - X xi.
        for r in 0..m {
            rhs1[r] = resid[r];
        }
        solve_direction(
            cols, m, q, &chol, &dinv, &rhs1, &rd, &mut dxi, &mut dd,
        );
        for r in 0..m {
            let s = (tau - d[r]).max(1e-300);
            let w = (d[r] - (tau - 1.0)).max(1e-300);
            du_aff[r] = -u[r] + (u[r] / s) * dd[r];
            dv_aff[r] = -v[r] - (v[r] / w) * dd[r];
            dd_aff[r] = dd[r];
        }
        let (ap_aff, ad_aff) = step_lengths(&u, &v, &d, &du_aff, &dv_aff, &dd_aff, tau);
        let mut gap_aff = 0.0;
        for r in 0..m {
            let un = u[r] + ap_aff * du_aff[r];
            let vn = v[r] + ap_aff * dv_aff[r];
            let dn = d[r] + ad_aff * dd_aff[r];
            gap_aff += un * (tau - dn) + vn * (dn - (tau - 1.0));
        }
        let sigma = if gap > 0.0 {
            ((gap_aff / gap).powi(3)).clamp(1e-8, 1.0)
        } else {
            0.1
        };
        let mu = sigma * gap / (2.0 * m as f64);

        // Corrector with second-order complementarity terms.
        for r in 0..m {
            let s = (tau - d[r]).max(1e-300);
            let w = (d[r] - (tau - 1.0)).max(1e-300);
            let cu = mu - u[r] * s + du_aff[r] * dd_aff[r];
            let cv = mu - v[r] * w - dv_aff[r] * dd_aff[r];
            rhs1[r] = (resid[r] - u[r] + v[r]) - cu / s + cv / w;
        }
        solve_direction(
            cols, m, q, &chol, &dinv, &rhs1, &rd, &mut dxi, &mut dd,
        );
        let mut du = du_aff;
        let mut dv = dv_aff;
        for r in 0..m {
            let s = (tau - d[r]).max(1e-300);
            let w = (d[r] - (tau - 1.0)).max(1e-300);
            let cu = mu - u[r] * s + du[r] * dd_aff[r];
            let cv = mu - v[r] * w - dv[r] * dd_aff[r];
            du[r] = cu / s + (u[r] / s) * dd[r];
            dv[r] = cv / w - (v[r] / w) * dd[r];
        }
        let (ap, ad) = step_lengths(&u, &v, &d, &du, &dv, &dd, tau);
        for c in 0..q {
            xi[c] += ap * dxi[c];
        }
        for r in 0..m {
            u[r] = (u[r] + ap * du[r]).max(1e-300);
            v[r] = (v[r] + ap * dv[r]).max(1e-300);
            d[r] += ad * dd[r];
            d[r] = d[r].clamp(tau - 1.0 + 1e-14, tau - 1e-14);
        }
        du_aff = du;
        dv_aff = dv;
    }
    (converged, rank_trouble)
}

/// Shared predictor/corrector solve:
/// `M dxi = X' (rhs1 / D) - rd`, then `dd = (rhs1 - X dxi) / D`.
#[allow(clippy::too_many_arguments)]
fn solve_direction(
    cols: &[f64],
    m: usize,
    q: usize,
    chol: &[f64],
    dinv: &[f64],
    rhs1: &[f64],
    rd: &[f64],
    dxi: &mut [f64],
    dd: &mut [f64],
) {
    let col = |c: usize| &cols[c * m..(c + 1) * m];
    for c in 0..q {
        let cc = col(c);
        let mut s = 0.0;
        for r in 0..m {
            s += cc[r] * rhs1[r] * dinv[r];
        }
        dxi[c] = s - rd[c];
    }
    chol_solve_factored(chol, dxi, q);
    for r in 0..m {
        dd[r] = rhs1[r];
    }
    for c in 0..q {
        let step = dxi[c];
        if step != 0.0 {
            let cc = col(c);
            for r in 0..m {
                dd[r] -= cc[r] * step;
            }
        }
    }
    for r in 0..m {
        dd[r] *= dinv[r];
    }
}

fn step_lengths(
    u: &[f64],
    v: &[f64],
    d: &[f64],
    du: &[f64],
    dv: &[f64],
    dd: &[f64],
    tau: f64,
) -> (f64, f64) {
    let mut ap = 1.0f64;
    let mut ad = 1.0f64;
    for r in 0..u.len() {
        if du[r] < 0.0 {
            ap = ap.min(-u[r] / du[r]);
        }
        if dv[r] < 0.0 {
            ap = ap.min(-v[r] / dv[r]);
        }
        // Keep d strictly inside [tau - 1, tau].
        if dd[r] > 0.0 {
            ad = ad.min((tau - d[r]) / dd[r]);
        }
        if dd[r] < 0.0 {
            ad = ad.min((d[r] - (tau - 1.0)) / -dd[r]);
        }
    }
    (0.99995 * ap.min(1.0 / 0.99995), 0.99995 * ad.min(1.0 / 0.99995))
}

/// Exact cyclic coordinate descent on the polyhedral objective. Each line
/// search is a weighted quantile over residual/column breakpoints; within a
/// flat optimal interval the coordinate value closest to zero wins, which
/// keeps the output symmetric under response negation.
fn polish(
    cols: &[f64],
    y: &[f64],
    tau: f64,
    m: usize,
    q: usize,
    max_sweeps: usize,
    xi: &mut [f64],
) {
    let col = |c: usize| &cols[c * m..(c + 1) * m];
    let mut resid: Vec<f64> = y.to_vec();
    for c in 0..q {
        let xc = xi[c];
        if xc != 0.0 {
            let cc = col(c);
            for r in 0..m {
                resid[r] -= cc[r] * xc;
            }
        }
    }
    let mut breaks: Vec<(f64, f64)> = Vec::with_capacity(m);
    for _sweep in 0..max_sweeps {
        let mut moved = false;
        for c in 0..q {
            let cc = col(c);
            breaks.clear();
            let mut deriv = 0.0;
            for r in 0..m {
                let ci = cc[r];
                if ci != 0.0 {
                    breaks.push((resid[r] / ci, ci.abs()));
                    deriv -= ci.abs() * if ci > 0.0 { tau } else { 1.0 - tau };
                }
            }
            if breaks.is_empty() {
                continue;
            }
            breaks.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            // Walk the subgradient from the left until it turns nonnegative.
            let mut step = breaks[breaks.len() - 1].0;
            for (idx, &(s, wgt)) in breaks.iter().enumerate() {
                deriv += wgt;
                if deriv > 0.0 {
                    step = s;
                    break;
                }
                if deriv == 0.0 {
                    // Flat stretch [s, next]; take the point whose new
                    // coordinate value is closest to zero.
                    let hi = if idx + 1 < breaks.len() {
                        breaks[idx + 1].0
                    } else {
                        s
                    };
                    let target = -xi[c];
                    step = target.clamp(s, hi);
                    break;
                }
            }
            if step.abs() > 1e-13 * (1.0 + xi[c].abs()) {
                xi[c] += step;
                for r in 0..m {
                    resid[r] -= cc[r] * step;
                }
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// In-place Cholesky factorization of a row-major symmetric matrix.
/// Returns false when the matrix is not positive definite.
fn chol_factor(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return false;
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    true
}

fn chol_solve_factored(l: &[f64], b: &mut [f64], n: usize) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

fn chol_solve_in_place(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    if !chol_factor(a, n) {
        return false;
    }
    chol_solve_factored(a, b, n);
    true
}

#[cfg(test)]
mod tests;
