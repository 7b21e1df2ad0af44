//! Step-I group designs built straight from the memberships.

use ndarray::Array2;

use crate::model::{Membership, Network, PanelData};

use super::EstimatorError;

/// Per-time design blocks for one row group: at each `t`, a
/// `|R_g| x (H + p + 1)` matrix whose columns are the column-group lag
/// aggregates, the own lag, and the covariates, with the matching response
/// vector.
#[derive(Debug, Clone)]
pub struct GroupDesign {
    pub members: Vec<usize>,
    pub blocks: Vec<Array2<f64>>,
    pub responses: Vec<Vec<f64>>,
}

impl GroupDesign {
    /// All time blocks stacked into one `|R_g| T x (H + p + 1)` system.
    pub fn stacked(&self) -> (Array2<f64>, Vec<f64>) {
        let q = self.blocks[0].dim().1;
        let rows = self.members.len() * self.blocks.len();
        let mut design = Array2::zeros((rows, q));
        let mut response = Vec::with_capacity(rows);
        let mut row = 0;
        for (block, resp) in self.blocks.iter().zip(&self.responses) {
            for r in 0..block.dim().0 {
                for c in 0..q {
                    design[[row, c]] = block[[r, c]];
                }
                response.push(resp[r]);
                row += 1;
            }
        }
        (design, response)
    }
}

/// Build the group design for row group `g` under the given memberships.
pub fn build_group_design(
    data: &PanelData,
    net: &Network,
    mem: &Membership,
    g: usize,
) -> Result<GroupDesign, EstimatorError> {
    let members = mem.row_group(g);
    if members.is_empty() {
        return Err(EstimatorError::EmptyRowGroup { group: g });
    }
    let t_len = data.n_periods();
    let p = data.n_covariates();
    let n_h = mem.n_col_groups();
    let q = n_h + 1 + p;
    let mut blocks = Vec::with_capacity(t_len);
    let mut responses = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let mut block = Array2::zeros((members.len(), q));
        let mut resp = Vec::with_capacity(members.len());
        for (r, &i) in members.iter().enumerate() {
            let w = net.weight(i);
            for &j in net.out_neighbors(i) {
                block[[r, mem.col_label(j)]] += w * data.y(j, t - 1);
            }
            block[[r, n_h]] = data.y(i, t - 1);
            for l in 0..p {
                block[[r, n_h + 1 + l]] = data.x(i, t, l);
            }
            resp.push(data.y(i, t));
        }
        blocks.push(block);
        responses.push(resp);
    }
    Ok(GroupDesign {
        members,
        blocks,
        responses,
    })
}
