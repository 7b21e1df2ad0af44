//! Shared test oracles, independent of the library's solution paths.

use ndarray::Array2;

/// Exact minimum of `sum_r rho_tau(y_r - z_r' xi)` through the linear
/// program `min tau 1'u + (1 - tau) 1'v  s.t.  Z xi+ - Z xi- + u - v = y`,
/// solved by a dense simplex with Bland's rule. The initial basis takes
/// `u_r` or `v_r` per row, so no phase-one is needed.
pub fn lp_check_loss_minimum(design: &Array2<f64>, response: &[f64], tau: f64) -> f64 {
    let (m, q) = design.dim();
    let n = 2 * q + 2 * m;
    // Column-major constraint matrix and right side, flipped so b >= 0.
    let mut a = vec![0.0f64; m * n];
    let mut b = vec![0.0f64; m];
    let mut c = vec![0.0f64; n];
    for j in 0..q {
        c[j] = 0.0;
        c[q + j] = 0.0;
    }
    for r in 0..m {
        c[2 * q + r] = tau;
        c[2 * q + m + r] = 1.0 - tau;
    }
    for r in 0..m {
        let flip = if response[r] < 0.0 { -1.0 } else { 1.0 };
        b[r] = flip * response[r];
        for j in 0..q {
            a[j * m + r] = flip * design[[r, j]];
            a[(q + j) * m + r] = -flip * design[[r, j]];
        }
        a[(2 * q + r) * m + r] = flip;
        a[(2 * q + m + r) * m + r] = -flip;
    }
    // Initial basis: the split variable with +1 in its own row.
    let mut basis: Vec<usize> = (0..m)
        .map(|r| if response[r] < 0.0 { 2 * q + m + r } else { 2 * q + r })
        .collect();

    let col = |j: usize| -> &[f64] { &a[j * m..(j + 1) * m] };
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        assert!(iterations < 200_000, "simplex oracle failed to terminate");
        // Basis inverse via Gaussian elimination on [B | I].
        let mut tableau = vec![0.0f64; m * 2 * m];
        for (slot, &j) in basis.iter().enumerate() {
            let column = col(j);
            for r in 0..m {
                tableau[r * 2 * m + slot] = column[r];
            }
        }
        for r in 0..m {
            tableau[r * 2 * m + m + r] = 1.0;
        }
        for pivot in 0..m {
            let mut best = pivot;
            for r in pivot + 1..m {
                if tableau[r * 2 * m + pivot].abs() > tableau[best * 2 * m + pivot].abs() {
                    best = r;
                }
            }
            if tableau[best * 2 * m + pivot].abs() < 1e-12 {
                panic!("singular basis in simplex oracle");
            }
            if best != pivot {
                for cidx in 0..2 * m {
                    tableau.swap(pivot * 2 * m + cidx, best * 2 * m + cidx);
                }
            }
            let diag = tableau[pivot * 2 * m + pivot];
            for cidx in 0..2 * m {
                tableau[pivot * 2 * m + cidx] /= diag;
            }
            for r in 0..m {
                if r != pivot {
                    let factor = tableau[r * 2 * m + pivot];
                    if factor != 0.0 {
                        for cidx in 0..2 * m {
                            tableau[r * 2 * m + cidx] -= factor * tableau[pivot * 2 * m + cidx];
                        }
                    }
                }
            }
        }
        let binv = |r: usize, cidx: usize| tableau[r * 2 * m + m + cidx];

        // Basic solution and simplex multipliers.
        let mut x_b = vec![0.0f64; m];
        for r in 0..m {
            for k in 0..m {
                x_b[r] += binv(r, k) * b[k];
            }
        }
        let mut z = vec![0.0f64; m];
        for k in 0..m {
            for r in 0..m {
                z[k] += c[basis[r]] * binv(r, k);
            }
        }
        // Bland: smallest index with a negative reduced cost.
        let mut entering = None;
        for j in 0..n {
            if basis.contains(&j) {
                continue;
            }
            let column = col(j);
            let mut reduced = c[j];
            for r in 0..m {
                reduced -= z[r] * column[r];
            }
            if reduced < -1e-9 {
                entering = Some(j);
                break;
            }
        }
        let Some(entering) = entering else {
            return basis.iter().zip(&x_b).map(|(&j, &x)| c[j] * x).sum();
        };
        let column = col(entering);
        let mut w = vec![0.0f64; m];
        for r in 0..m {
            for k in 0..m {
                w[r] += binv(r, k) * column[k];
            }
        }
        // Ratio test, ties toward the smallest basis index (Bland).
        let mut leaving: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for r in 0..m {
            if w[r] > 1e-10 {
                let ratio = x_b[r] / w[r];
                let replace = match leaving {
                    None => true,
                    Some(cur) => {
                        ratio < best_ratio - 1e-12
                            || (ratio <= best_ratio + 1e-12 && basis[r] < basis[cur])
                    }
                };
                if replace {
                    leaving = Some(r);
                    best_ratio = ratio;
                }
            }
        }
        let leaving = leaving.expect("check-loss LP is bounded");
        basis[leaving] = entering;
    }
}
