use super::ModelError;

/// Directed network with row-normalized weights. An edge `i -> j`
/// (`a_ij = 1`) means node `i` follows node `j`: `j` is an out-neighbor of
/// `i`, and `i` is a follower of `j`. Weights are `w_ij = a_ij / n_i`, with
/// all-zero rows for isolated nodes (`n_i = 0`).
#[derive(Debug, Clone)]
pub struct Network {
    n: usize,
    out_neighbors: Vec<Vec<usize>>,
    followers: Vec<Vec<usize>>,
    second_order: Vec<Vec<usize>>,
}

impl Network {
    /// Build from a directed edge list `(src, dst)` meaning `a[src][dst] = 1`.
    /// Duplicate edges collapse to one; self-loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, ModelError> {
        if n < 2 {
            return Err(ModelError::TooSmall {
                what: "network nodes",
                min: 2,
                got: n,
            });
        }
        let mut out_neighbors = vec![Vec::new(); n];
        for &(src, dst) in edges {
            if src >= n || dst >= n {
                return Err(ModelError::EdgeOutOfRange { src, dst, n });
            }
            if src == dst {
                return Err(ModelError::SelfLoop { node: src });
            }
            out_neighbors[src].push(dst);
        }
        for nb in &mut out_neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        let mut followers = vec![Vec::new(); n];
        for (i, nb) in out_neighbors.iter().enumerate() {
            for &j in nb {
                followers[j].push(i);
            }
        }
        // F_j^2 = union of N_i over followers i of j: every node whose column
        // membership shares a follower-side loss term with node j.
        let mut second_order = vec![Vec::new(); n];
        for j in 0..n {
            let mut acc: Vec<usize> = Vec::new();
            for &i in &followers[j] {
                acc.extend_from_slice(&out_neighbors[i]);
            }
            acc.sort_unstable();
            acc.dedup();
            second_order[j] = acc;
        }
        Ok(Self {
            n,
            out_neighbors,
            followers,
            second_order,
        })
    }

    /// Build from a dense adjacency matrix (row-major, `a[i][j]`).
    pub fn from_adjacency(a: &[Vec<u8>]) -> Result<Self, ModelError> {
        let n = a.len();
        let mut edges = Vec::new();
        for (i, row) in a.iter().enumerate() {
            if row.len() != n {
                return Err(ModelError::DimensionMismatch {
                    context: "adjacency row",
                    expected: n,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if v != 0 {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// Out-neighbors `N_i` (sorted, deduplicated).
    #[inline(always)]
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_neighbors[i]
    }

    #[inline(always)]
    pub fn out_degree(&self, i: usize) -> usize {
        self.out_neighbors[i].len()
    }

    /// Row-normalized weight shared by every out-edge of `i`; 0 when isolated.
    #[inline(always)]
    pub fn weight(&self, i: usize) -> f64 {
        let d = self.out_neighbors[i].len();
        if d == 0 {
            0.0
        } else {
            1.0 / d as f64
        }
    }

    /// Followers `F_j = {i : a_ij = 1}` (sorted).
    #[inline(always)]
    pub fn followers(&self, j: usize) -> &[usize] {
        &self.followers[j]
    }

    #[inline(always)]
    pub fn in_degree(&self, j: usize) -> usize {
        self.followers[j].len()
    }

    /// Second-order set `F_j^2 = {l : sum_i a_il a_ij != 0}` (sorted).
    #[inline(always)]
    pub fn second_order(&self, j: usize) -> &[usize] {
        &self.second_order[j]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.out_neighbors[i].binary_search(&j).is_ok()
    }

    pub fn n_edges(&self) -> usize {
        self.out_neighbors.iter().map(Vec::len).sum()
    }

    /// Average out-degree, the `n-bar` entering the selection penalty.
    pub fn mean_out_degree(&self) -> f64 {
        self.n_edges() as f64 / self.n as f64
    }
}
