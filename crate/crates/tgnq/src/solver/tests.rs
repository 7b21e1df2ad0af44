use super::*;
use approx::assert_abs_diff_eq;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn intercept_problem(values: &[f64], tau: f64) -> QrProblem {
    let m = values.len();
    QrProblem::new(Array2::from_elem((m, 1), 1.0), values.to_vec(), tau).unwrap()
}

/// One-sided directional derivatives of the objective along +/- e_c; both
/// must be nonnegative at an optimum.
fn directional_derivs(problem: &QrProblem, coef: &[f64], c: usize) -> (f64, f64) {
    let (m, q) = problem.design.dim();
    let tau = problem.tau;
    let mut plus = 0.0;
    let mut minus = 0.0;
    for r in 0..m {
        let mut pred = 0.0;
        for j in 0..q {
            pred += problem.design[[r, j]] * coef[j];
        }
        let resid = problem.response[r] - pred;
        let ci = problem.design[[r, c]];
        if ci == 0.0 {
            continue;
        }
        let eps = 1e-9 * (1.0 + resid.abs());
        if resid > eps {
            plus += -ci * tau;
            minus += ci * tau;
        } else if resid < -eps {
            plus += ci * (1.0 - tau);
            minus += -ci * (1.0 - tau);
        } else {
            plus += ci.abs() * if ci > 0.0 { 1.0 - tau } else { tau };
            minus += ci.abs() * if ci > 0.0 { tau } else { 1.0 - tau };
        }
    }
    (plus, minus)
}

/// Brute force over elemental (interpolating) candidate solutions; the LP
/// optimum is attained at one of them when the design has full column rank.
fn elemental_minimum(problem: &QrProblem) -> f64 {
    let (m, q) = problem.design.dim();
    assert!(q <= 2, "test helper limited to q <= 2");
    let mut best = f64::INFINITY;
    if q == 1 {
        for r in 0..m {
            let z = problem.design[[r, 0]];
            if z.abs() > 1e-12 {
                let coef = [problem.response[r] / z];
                best = best.min(qr_objective(problem, &coef));
            }
        }
    } else {
        for a in 0..m {
            for b in (a + 1)..m {
                let (z11, z12) = (problem.design[[a, 0]], problem.design[[a, 1]]);
                let (z21, z22) = (problem.design[[b, 0]], problem.design[[b, 1]]);
                let det = z11 * z22 - z12 * z21;
                if det.abs() < 1e-10 {
                    continue;
                }
                let (y1, y2) = (problem.response[a], problem.response[b]);
                let coef = [(y1 * z22 - y2 * z12) / det, (z11 * y2 - z21 * y1) / det];
                best = best.min(qr_objective(problem, &coef));
            }
        }
    }
    best
}

#[test]
fn median_of_three() {
    let problem = intercept_problem(&[1.0, 2.0, 3.0], 0.5);
    let sol = solve_qr(&problem, &SolverOptions::default());
    assert_abs_diff_eq!(sol.coef[0], 2.0, epsilon = 1e-7);
    assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-9);
    assert_eq!(sol.status, QrStatus::Optimal);
}

#[test]
fn flat_optimum_takes_left_endpoint() {
    // tau = 0.25 over {1, 2, 3, 4}: every point of [1, 2] attains the
    // minimum; the tie rule picks 1. The optimal value is checked against a
    // scan over the breakpoints.
    let problem = intercept_problem(&[1.0, 2.0, 3.0, 4.0], 0.25);
    let mut brute = f64::INFINITY;
    for cand in [1.0, 1.25, 1.5, 1.75, 2.0, 3.0, 4.0] {
        brute = brute.min(qr_objective(&problem, &[cand]));
    }
    let sol = solve_qr(&problem, &SolverOptions::default());
    assert_abs_diff_eq!(sol.objective, brute, epsilon = 1e-9);
    assert_abs_diff_eq!(sol.objective, 1.5, epsilon = 1e-9);
    assert_abs_diff_eq!(sol.coef[0], 1.0, epsilon = 1e-7);
}

#[test]
fn zero_column_gets_exact_zero() {
    let mut design = Array2::from_elem((5, 2), 1.0);
    for r in 0..5 {
        design[[r, 1]] = 0.0;
    }
    let problem = QrProblem::new(design, vec![1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap();
    let sol = solve_qr(&problem, &SolverOptions::default());
    assert_eq!(sol.coef[1], 0.0);
    assert_eq!(sol.status, QrStatus::Degenerate);
    assert_abs_diff_eq!(sol.coef[0], 3.0, epsilon = 1e-7);
}

#[test]
fn joint_scaling_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let design = Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0));
    let response: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
    let problem = QrProblem::new(design.clone(), response.clone(), 0.3).unwrap();
    let scaled = QrProblem::new(
        design.mapv(|v| 7.5 * v),
        response.iter().map(|v| 7.5 * v).collect(),
        0.3,
    )
    .unwrap();
    let opts = SolverOptions::default();
    let a = solve_qr(&problem, &opts);
    let b = solve_qr(&scaled, &opts);
    assert_abs_diff_eq!(b.objective, 7.5 * a.objective, epsilon = 1e-6);
    for c in 0..3 {
        assert_abs_diff_eq!(a.coef[c], b.coef[c], epsilon = 1e-6);
    }
}

#[test]
fn negation_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for tau in [0.25, 0.5, 0.75, 0.1] {
        let design = Array2::from_shape_fn((25, 2), |_| rng.random_range(-1.0..1.0));
        let response: Vec<f64> = (0..25).map(|_| rng.random_range(-2.0..2.0)).collect();
        let problem = QrProblem::new(design.clone(), response.clone(), tau).unwrap();
        let negated = QrProblem::new(
            design,
            response.iter().map(|v| -v).collect(),
            1.0 - tau,
        )
        .unwrap();
        let opts = SolverOptions::default();
        let a = solve_qr(&problem, &opts);
        let b = solve_qr(&negated, &opts);
        assert_abs_diff_eq!(a.objective, b.objective, epsilon = 1e-8);
        for c in 0..2 {
            assert_abs_diff_eq!(a.coef[c], -b.coef[c], epsilon = 1e-7);
        }
    }
}

#[test]
fn subgradient_optimality_componentwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let m = rng.random_range(5..40);
        let q = rng.random_range(1..4).min(m);
        let mut design = Array2::from_shape_fn((m, q), |_| rng.random_range(-2.0..2.0));
        for r in 0..m {
            design[[r, 0]] = 1.0;
        }
        let response: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = [0.1, 0.3, 0.5, 0.7, 0.9][trial % 5];
        let problem = QrProblem::new(design, response, tau).unwrap();
        let sol = solve_qr(&problem, &SolverOptions::default());
        for c in 0..q {
            let (plus, minus) = directional_derivs(&problem, &sol.coef, c);
            assert!(
                plus >= -1e-6 && minus >= -1e-6,
                "trial {trial}: coordinate {c} not optimal (d+ = {plus}, d- = {minus})"
            );
        }
    }
}

#[test]
fn matches_elemental_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..30 {
        let m = rng.random_range(4..14);
        let q = if trial % 2 == 0 { 1 } else { 2.min(m) };
        let mut design = Array2::from_shape_fn((m, q), |_| rng.random_range(-2.0..2.0));
        for r in 0..m {
            design[[r, 0]] = 1.0;
        }
        let response: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = [0.2, 0.5, 0.8][trial % 3];
        let problem = QrProblem::new(design, response, tau).unwrap();
        let sol = solve_qr(&problem, &SolverOptions::default());
        let brute = elemental_minimum(&problem);
        assert_abs_diff_eq!(sol.objective, brute, epsilon = 1e-7);
    }
}

#[test]
fn iteration_cap_reports_iter_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let design = Array2::from_shape_fn((30, 2), |_| rng.random_range(-1.0..1.0));
    let response: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
    let problem = QrProblem::new(design, response, 0.4).unwrap();
    let opts = SolverOptions {
        max_iters: 1,
        polish_sweeps: 0,
        ..SolverOptions::default()
    };
    let sol = solve_qr(&problem, &opts);
    assert_eq!(sol.status, QrStatus::IterLimit);
    assert!(sol.objective.is_finite());
}

#[test]
fn problem_validation() {
    assert!(QrProblem::new(Array2::zeros((0, 1)), vec![], 0.5).is_err());
    assert!(QrProblem::new(Array2::zeros((2, 1)), vec![1.0], 0.5).is_err());
    assert!(QrProblem::new(Array2::zeros((2, 1)), vec![1.0, 2.0], 1.0).is_err());
    assert!(QrProblem::new(Array2::zeros((2, 1)), vec![f64::NAN, 2.0], 0.5).is_err());
}

#[test]
fn deterministic_across_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let design = Array2::from_shape_fn((40, 3), |_| rng.random_range(-1.0..1.0));
    let response: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let problem = QrProblem::new(design, response, 0.7).unwrap();
    let opts = SolverOptions::default();
    let a = solve_qr(&problem, &opts);
    let b = solve_qr(&problem, &opts);
    assert_eq!(a.coef, b.coef);
    assert_eq!(a.objective, b.objective);
}
