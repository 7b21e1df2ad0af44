use ndarray::{Array2, Array3};

use super::ModelError;

/// Response/covariate panel. Responses `y` are an `N x (T+1)` matrix whose
/// column `t = 0` only ever serves as a lagged regressor; covariates `x` are
/// `N x T x p` with `x[[i, t-1, .]]` paired with the response `y[[i, t]]`.
#[derive(Debug, Clone)]
pub struct PanelData {
    y: Array2<f64>,
    x: Array3<f64>,
    n: usize,
    t_len: usize,
    p: usize,
}

impl PanelData {
    pub fn new(y: Array2<f64>, x: Array3<f64>) -> Result<Self, ModelError> {
        let (n, t_plus_1) = y.dim();
        if n < 2 {
            return Err(ModelError::TooSmall {
                what: "nodes",
                min: 2,
                got: n,
            });
        }
        if t_plus_1 < 3 {
            return Err(ModelError::TooSmall {
                what: "time points (T + 1)",
                min: 3,
                got: t_plus_1,
            });
        }
        let t_len = t_plus_1 - 1;
        let (xn, xt, p) = x.dim();
        if xn != n {
            return Err(ModelError::DimensionMismatch {
                context: "covariate rows",
                expected: n,
                got: xn,
            });
        }
        if xt != t_len {
            return Err(ModelError::DimensionMismatch {
                context: "covariate time points",
                expected: t_len,
                got: xt,
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                context: "response matrix",
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                context: "covariate array",
            });
        }
        Ok(Self { y, x, n, t_len, p })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// Number of fitted time points `T`; responses run over `0..=T`.
    pub fn n_periods(&self) -> usize {
        self.t_len
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    /// Response `Y_{it}` for `t` in `0..=T`.
    #[inline(always)]
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[[i, t]]
    }

    /// Covariate `x_{itl}` for `t` in `1..=T`.
    #[inline(always)]
    pub fn x(&self, i: usize, t: usize, l: usize) -> f64 {
        self.x[[i, t - 1, l]]
    }

    pub fn responses(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn covariates(&self) -> &Array3<f64> {
        &self.x
    }

    /// Responses of node `i` as a slice of length `T + 1` (index = time).
    #[inline(always)]
    pub(crate) fn y_row(&self, i: usize) -> &[f64] {
        let stride = self.t_len + 1;
        &self.y.as_slice().expect("standard layout")[i * stride..(i + 1) * stride]
    }

    /// Covariates of node `i` as a slice of length `T * p`;
    /// entry `(t - 1) * p + l` is `x_{itl}`.
    #[inline(always)]
    pub(crate) fn x_row(&self, i: usize) -> &[f64] {
        let stride = self.t_len * self.p;
        &self.x.as_slice().expect("standard layout")[i * stride..(i + 1) * stride]
    }
}

/// A strictly increasing set of quantile levels inside (0, 1).
#[derive(Debug, Clone)]
pub struct QuantileGrid {
    taus: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(taus: Vec<f64>) -> Result<Self, ModelError> {
        if taus.is_empty() {
            return Err(ModelError::TooSmall {
                what: "quantiles",
                min: 1,
                got: 0,
            });
        }
        for &tau in &taus {
            if !tau.is_finite() || tau <= 0.0 || tau >= 1.0 {
                return Err(ModelError::InvalidQuantile { tau });
            }
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::UnsortedQuantiles);
        }
        Ok(Self { taus })
    }

    /// The five-quantile default grid (0.1, 0.3, 0.5, 0.7, 0.9).
    pub fn default_five() -> Self {
        Self::new(vec![0.1, 0.3, 0.5, 0.7, 0.9]).expect("static grid")
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    #[inline(always)]
    pub fn tau(&self, k: usize) -> f64 {
        self.taus[k]
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// Index of the grid point closest to the median (lower one on ties).
    pub fn median_index(&self) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (k, &tau) in self.taus.iter().enumerate() {
            let d = (tau - 0.5).abs();
            if d < best_dist {
                best = k;
                best_dist = d;
            }
        }
        best
    }
}
