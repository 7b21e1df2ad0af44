use ndarray::{Array2, Array3};

use super::ModelError;

/// How the network-effect block `theta[g][h]` is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Unconstrained `G x H` block per quantile.
    General,
    /// `theta[g][h] = alpha[g] + beta[h]`.
    Additive,
    /// `theta[g][h] = alpha[g] * beta[h]`.
    Multiplicative,
}

/// Row ("receiving") and column ("influencing") group labels, 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Membership {
    g: Vec<usize>,
    h: Vec<usize>,
    n_row_groups: usize,
    n_col_groups: usize,
}

impl Membership {
    pub fn new(
        g: Vec<usize>,
        h: Vec<usize>,
        n_row_groups: usize,
        n_col_groups: usize,
    ) -> Result<Self, ModelError> {
        if n_row_groups == 0 || n_col_groups == 0 {
            return Err(ModelError::TooSmall {
                what: "groups",
                min: 1,
                got: 0,
            });
        }
        if g.len() != h.len() {
            return Err(ModelError::DimensionMismatch {
                context: "membership vectors",
                expected: g.len(),
                got: h.len(),
            });
        }
        for &label in &g {
            if label >= n_row_groups {
                return Err(ModelError::LabelOutOfRange {
                    label,
                    group_count: n_row_groups,
                });
            }
        }
        for &label in &h {
            if label >= n_col_groups {
                return Err(ModelError::LabelOutOfRange {
                    label,
                    group_count: n_col_groups,
                });
            }
        }
        Ok(Self {
            g,
            h,
            n_row_groups,
            n_col_groups,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.g.len()
    }

    pub fn n_row_groups(&self) -> usize {
        self.n_row_groups
    }

    pub fn n_col_groups(&self) -> usize {
        self.n_col_groups
    }

    #[inline(always)]
    pub fn row_label(&self, i: usize) -> usize {
        self.g[i]
    }

    #[inline(always)]
    pub fn col_label(&self, j: usize) -> usize {
        self.h[j]
    }

    pub fn row_labels(&self) -> &[usize] {
        &self.g
    }

    pub fn col_labels(&self) -> &[usize] {
        &self.h
    }

    pub fn set_row_label(&mut self, i: usize, g: usize) {
        debug_assert!(g < self.n_row_groups);
        self.g[i] = g;
    }

    pub fn set_col_label(&mut self, j: usize, h: usize) {
        debug_assert!(h < self.n_col_groups);
        self.h[j] = h;
    }

    /// Members of row group `g`.
    pub fn row_group(&self, g: usize) -> Vec<usize> {
        (0..self.g.len()).filter(|&i| self.g[i] == g).collect()
    }

    /// Members of column group `h`.
    pub fn col_group(&self, h: usize) -> Vec<usize> {
        (0..self.h.len()).filter(|&j| self.h[j] == h).collect()
    }

    pub fn row_group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_row_groups];
        for &g in &self.g {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn col_group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_col_groups];
        for &h in &self.h {
            sizes[h] += 1;
        }
        sizes
    }

    pub(crate) fn check_compatible(&self, params: &ParameterSet) -> Result<(), ModelError> {
        if params.n_row_groups() < self.n_row_groups {
            return Err(ModelError::DimensionMismatch {
                context: "row groups vs parameters",
                expected: self.n_row_groups,
                got: params.n_row_groups(),
            });
        }
        if params.n_col_groups() < self.n_col_groups {
            return Err(ModelError::DimensionMismatch {
                context: "column groups vs parameters",
                expected: self.n_col_groups,
                got: params.n_col_groups(),
            });
        }
        Ok(())
    }
}

/// Group-level coefficients at every quantile: `theta` is `K x G x H`,
/// `nu` is `K x G`, `gamma` is `K x G x p`. Structured kinds additionally
/// carry the `alpha`/`beta` factors that `theta` is derived from.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    theta: Array3<f64>,
    nu: Array2<f64>,
    gamma: Array3<f64>,
    kind: ModelKind,
    alpha: Option<Array2<f64>>,
    beta: Option<Array2<f64>>,
}

impl ParameterSet {
    pub fn general(
        theta: Array3<f64>,
        nu: Array2<f64>,
        gamma: Array3<f64>,
    ) -> Result<Self, ModelError> {
        let set = Self {
            theta,
            nu,
            gamma,
            kind: ModelKind::General,
            alpha: None,
            beta: None,
        };
        set.validate()?;
        Ok(set)
    }

    /// Build a structured set; `theta` is derived entrywise from the factors.
    pub fn structured(
        kind: ModelKind,
        alpha: Array2<f64>,
        beta: Array2<f64>,
        nu: Array2<f64>,
        gamma: Array3<f64>,
    ) -> Result<Self, ModelError> {
        let (k, g) = alpha.dim();
        let (kb, h) = beta.dim();
        if kb != k {
            return Err(ModelError::DimensionMismatch {
                context: "alpha vs beta quantiles",
                expected: k,
                got: kb,
            });
        }
        let mut theta = Array3::zeros((k, g, h));
        for ki in 0..k {
            for gi in 0..g {
                for hi in 0..h {
                    theta[[ki, gi, hi]] = match kind {
                        ModelKind::Additive => alpha[[ki, gi]] + beta[[ki, hi]],
                        ModelKind::Multiplicative => alpha[[ki, gi]] * beta[[ki, hi]],
                        ModelKind::General => {
                            return Err(ModelError::InconsistentStructured { kind })
                        }
                    };
                }
            }
        }
        let set = Self {
            theta,
            nu,
            gamma,
            kind,
            alpha: Some(alpha),
            beta: Some(beta),
        };
        set.validate()?;
        Ok(set)
    }

    /// All-zero general parameters with the given dimensions.
    pub fn zeros(k: usize, g: usize, h: usize, p: usize) -> Self {
        Self {
            theta: Array3::zeros((k, g, h)),
            nu: Array2::zeros((k, g)),
            gamma: Array3::zeros((k, g, p)),
            kind: ModelKind::General,
            alpha: None,
            beta: None,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let (k, g, h) = self.theta.dim();
        let (kn, gn) = self.nu.dim();
        if kn != k || gn != g {
            return Err(ModelError::DimensionMismatch {
                context: "nu dimensions",
                expected: k * g,
                got: kn * gn,
            });
        }
        let (kg, gg, _p) = self.gamma.dim();
        if kg != k || gg != g {
            return Err(ModelError::DimensionMismatch {
                context: "gamma dimensions",
                expected: k * g,
                got: kg * gg,
            });
        }
        if self.theta.iter().any(|v| !v.is_finite())
            || self.nu.iter().any(|v| !v.is_finite())
            || self.gamma.iter().any(|v| !v.is_finite())
        {
            return Err(ModelError::NonFinite {
                context: "parameter set",
            });
        }
        if let (Some(alpha), Some(beta)) = (&self.alpha, &self.beta) {
            if alpha.iter().any(|v| !v.is_finite()) || beta.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    context: "structured factors",
                });
            }
            for ki in 0..k {
                for gi in 0..g {
                    for hi in 0..h {
                        let derived = match self.kind {
                            ModelKind::Additive => alpha[[ki, gi]] + beta[[ki, hi]],
                            ModelKind::Multiplicative => alpha[[ki, gi]] * beta[[ki, hi]],
                            ModelKind::General => unreachable!(),
                        };
                        if (derived - self.theta[[ki, gi, hi]]).abs() > 1e-12 {
                            return Err(ModelError::InconsistentStructured { kind: self.kind });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_quantiles(&self) -> usize {
        self.theta.dim().0
    }

    pub fn n_row_groups(&self) -> usize {
        self.theta.dim().1
    }

    pub fn n_col_groups(&self) -> usize {
        self.theta.dim().2
    }

    pub fn n_covariates(&self) -> usize {
        self.gamma.dim().2
    }

    #[inline(always)]
    pub fn theta(&self, k: usize, g: usize, h: usize) -> f64 {
        self.theta[[k, g, h]]
    }

    #[inline(always)]
    pub fn nu(&self, k: usize, g: usize) -> f64 {
        self.nu[[k, g]]
    }

    #[inline(always)]
    pub fn gamma(&self, k: usize, g: usize, l: usize) -> f64 {
        self.gamma[[k, g, l]]
    }

    pub fn theta_array(&self) -> &Array3<f64> {
        &self.theta
    }

    pub fn nu_array(&self) -> &Array2<f64> {
        &self.nu
    }

    pub fn gamma_array(&self) -> &Array3<f64> {
        &self.gamma
    }

    pub fn alpha_array(&self) -> Option<&Array2<f64>> {
        self.alpha.as_ref()
    }

    pub fn beta_array(&self) -> Option<&Array2<f64>> {
        self.beta.as_ref()
    }

    pub(crate) fn theta_mut(&mut self) -> &mut Array3<f64> {
        &mut self.theta
    }

    pub(crate) fn nu_mut(&mut self) -> &mut Array2<f64> {
        &mut self.nu
    }

    pub(crate) fn gamma_mut(&mut self) -> &mut Array3<f64> {
        &mut self.gamma
    }

    pub(crate) fn set_factors(&mut self, alpha: Array2<f64>, beta: Array2<f64>) {
        self.alpha = Some(alpha);
        self.beta = Some(beta);
    }

    pub(crate) fn set_kind(&mut self, kind: ModelKind) {
        self.kind = kind;
    }

    /// Reorder row groups by `row_perm` and column groups by `col_perm`,
    /// where `perm[new] = old`.
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        let (k, g, h) = self.theta.dim();
        let p = self.gamma.dim().2;
        let mut theta = Array3::zeros((k, g, h));
        let mut nu = Array2::zeros((k, g));
        let mut gamma = Array3::zeros((k, g, p));
        for ki in 0..k {
            for (new_g, &old_g) in row_perm.iter().enumerate() {
                nu[[ki, new_g]] = self.nu[[ki, old_g]];
                for l in 0..p {
                    gamma[[ki, new_g, l]] = self.gamma[[ki, old_g, l]];
                }
                for (new_h, &old_h) in col_perm.iter().enumerate() {
                    theta[[ki, new_g, new_h]] = self.theta[[ki, old_g, old_h]];
                }
            }
        }
        let alpha = self.alpha.as_ref().map(|a| {
            let mut out = Array2::zeros(a.dim());
            for ki in 0..k {
                for (new_g, &old_g) in row_perm.iter().enumerate() {
                    out[[ki, new_g]] = a[[ki, old_g]];
                }
            }
            out
        });
        let beta = self.beta.as_ref().map(|b| {
            let mut out = Array2::zeros(b.dim());
            for ki in 0..k {
                for (new_h, &old_h) in col_perm.iter().enumerate() {
                    out[[ki, new_h]] = b[[ki, old_h]];
                }
            }
            out
        });
        Self {
            theta,
            nu,
            gamma,
            kind: self.kind,
            alpha,
            beta,
        }
    }
}

/// Estimation diagnostics that are not part of the fitted model itself.
#[derive(Debug, Clone, Default)]
pub struct FitDiagnostics {
    /// Row groups that emptied during iteration and were dropped.
    pub dropped_row_groups: Vec<usize>,
    /// Column groups that emptied during iteration and were dropped.
    pub dropped_col_groups: Vec<usize>,
    /// Solver reported a rank-deficient design at least once.
    pub degenerate_solves: usize,
    /// Multiplicative beta updates skipped because the factor column vanished.
    pub frozen_beta_updates: usize,
}

/// Converged estimate: parameters, memberships, and the loss trajectory.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParameterSet,
    pub membership: Membership,
    pub loss: f64,
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub diagnostics: FitDiagnostics,
}
