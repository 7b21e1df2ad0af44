//! File formats: long-form panel CSV, edge-list CSV, fit/truth JSON
//! artifacts, and the CSV tables. Node ids and group labels are 1-based in
//! every file and 0-based in memory. All parsers take raw bytes, validate
//! eagerly, and never panic on malformed input.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use tgnq::inference::ConfidenceIntervals;
use tgnq::model::{FitResult, Membership, ModelKind, Network, PanelData, ParameterSet};
use tgnq::refinement::{MembershipChange, RefinementReport};
use tgnq::selection::{CellStatus, QicCell};
use tgnq::sim::AggregateRow;

use crate::config::{kind_name, parse_kind};
use crate::CliError;

const MAX_CELLS: usize = 100_000_000;

/// Parse the long-form panel `node_id,t,y,x1,...,xp`. Covariate cells must
/// be empty at `t = 0` (the initial response only serves as a lag) and
/// filled from `t = 1` on.
pub fn parse_panel_csv(bytes: &[u8]) -> Result<PanelData, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("panel header: {e}")))?
        .clone();
    if headers.len() < 3 || &headers[0] != "node_id" || &headers[1] != "t" || &headers[2] != "y" {
        return Err(CliError::Data(
            "panel header must start with node_id,t,y".to_string(),
        ));
    }
    let p = headers.len() - 3;
    for (l, name) in headers.iter().skip(3).enumerate() {
        let expected = format!("x{}", l + 1);
        if name != expected {
            return Err(CliError::Data(format!(
                "covariate column {} must be named {expected}, got {name}",
                l + 4
            )));
        }
    }

    let mut cells: BTreeMap<(usize, usize), (f64, Vec<f64>)> = BTreeMap::new();
    let mut max_node = 0usize;
    let mut max_t = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("panel row {}: {e}", line + 2)))?;
        if record.len() != headers.len() {
            return Err(CliError::Data(format!(
                "panel row {}: expected {} fields, got {}",
                line + 2,
                headers.len(),
                record.len()
            )));
        }
        let node: usize = record[0]
            .parse()
            .map_err(|_| CliError::Data(format!("panel row {}: bad node_id", line + 2)))?;
        if node == 0 {
            return Err(CliError::Data(format!(
                "panel row {}: node ids are 1-based",
                line + 2
            )));
        }
        let t: usize = record[1]
            .parse()
            .map_err(|_| CliError::Data(format!("panel row {}: bad t", line + 2)))?;
        let y: f64 = record[2]
            .parse()
            .map_err(|_| CliError::Data(format!("panel row {}: bad y", line + 2)))?;
        if !y.is_finite() {
            return Err(CliError::Data(format!(
                "panel row {}: non-finite response",
                line + 2
            )));
        }
        let mut xs = Vec::with_capacity(p);
        for l in 0..p {
            let field = &record[3 + l];
            if t == 0 {
                if !field.is_empty() {
                    return Err(CliError::Data(format!(
                        "panel row {}: covariates must be empty at t = 0",
                        line + 2
                    )));
                }
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    CliError::Data(format!("panel row {}: bad x{}", line + 2, l + 1))
                })?;
                if !v.is_finite() {
                    return Err(CliError::Data(format!(
                        "panel row {}: non-finite covariate",
                        line + 2
                    )));
                }
                xs.push(v);
            }
        }
        max_node = max_node.max(node);
        max_t = max_t.max(t);
        if max_node
            .checked_mul(max_t + 1)
            .map(|c| c > MAX_CELLS)
            .unwrap_or(true)
        {
            return Err(CliError::Data("panel too large".to_string()));
        }
        if cells.insert((node, t), (y, xs)).is_some() {
            return Err(CliError::Data(format!(
                "duplicate panel cell for node {node} at t = {t}"
            )));
        }
    }
    let n = max_node;
    let t_len = max_t;
    if n < 2 || t_len < 2 {
        return Err(CliError::Data(format!(
            "panel needs at least 2 nodes and T >= 2, got N = {n}, T = {t_len}"
        )));
    }
    if cells.len() != n * (t_len + 1) {
        return Err(CliError::Data(format!(
            "panel is ragged: expected {} cells for {} nodes over t = 0..{}, got {}",
            n * (t_len + 1),
            n,
            t_len,
            cells.len()
        )));
    }
    let mut y = Array2::zeros((n, t_len + 1));
    let mut x = Array3::zeros((n, t_len, p));
    for ((node, t), (value, xs)) in cells {
        y[[node - 1, t]] = value;
        if t >= 1 {
            for (l, &v) in xs.iter().enumerate() {
                x[[node - 1, t - 1, l]] = v;
            }
        }
    }
    PanelData::new(y, x).map_err(|e| CliError::Data(e.to_string()))
}

/// Parse the edge list `src,dst` (1-based, `src` follows `dst`).
pub fn parse_edge_list(bytes: &[u8]) -> Result<Vec<(usize, usize)>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("edge header: {e}")))?;
    if headers.len() != 2 || &headers[0] != "src" || &headers[1] != "dst" {
        return Err(CliError::Data("edge header must be src,dst".to_string()));
    }
    let mut edges = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("edge row {}: {e}", line + 2)))?;
        if record.len() != 2 {
            return Err(CliError::Data(format!(
                "edge row {}: expected 2 fields",
                line + 2
            )));
        }
        let src: usize = record[0]
            .parse()
            .map_err(|_| CliError::Data(format!("edge row {}: bad src", line + 2)))?;
        let dst: usize = record[1]
            .parse()
            .map_err(|_| CliError::Data(format!("edge row {}: bad dst", line + 2)))?;
        if src == 0 || dst == 0 {
            return Err(CliError::Data(format!(
                "edge row {}: node ids are 1-based",
                line + 2
            )));
        }
        if edges.len() >= MAX_CELLS / 8 {
            return Err(CliError::Data("edge list too large".to_string()));
        }
        edges.push((src, dst));
    }
    Ok(edges)
}

/// Build the network against the panel's node count, naming offending ids.
pub fn build_network(n: usize, edges: &[(usize, usize)]) -> Result<Network, CliError> {
    let mut zero_based = Vec::with_capacity(edges.len());
    for &(src, dst) in edges {
        if src > n || dst > n {
            return Err(CliError::Data(format!(
                "edge ({src}, {dst}) references a node beyond the panel's {n} nodes"
            )));
        }
        zero_based.push((src - 1, dst - 1));
    }
    Network::from_edges(n, &zero_based).map_err(|e| CliError::Data(e.to_string()))
}

fn labels_out(labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|&l| l + 1).collect()
}

fn labels_in(labels: &[usize], count: usize, what: &str) -> Result<Vec<usize>, CliError> {
    labels
        .iter()
        .map(|&l| {
            if l == 0 || l > count {
                Err(CliError::Data(format!(
                    "{what} label {l} out of range 1..={count}"
                )))
            } else {
                Ok(l - 1)
            }
        })
        .collect()
}

fn theta_out(params: &ParameterSet) -> Vec<Vec<Vec<f64>>> {
    (0..params.n_quantiles())
        .map(|k| {
            (0..params.n_row_groups())
                .map(|g| {
                    (0..params.n_col_groups())
                        .map(|h| params.theta(k, g, h))
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn nu_out(params: &ParameterSet) -> Vec<Vec<f64>> {
    (0..params.n_quantiles())
        .map(|k| (0..params.n_row_groups()).map(|g| params.nu(k, g)).collect())
        .collect()
}

fn gamma_out(params: &ParameterSet) -> Vec<Vec<Vec<f64>>> {
    (0..params.n_quantiles())
        .map(|k| {
            (0..params.n_row_groups())
                .map(|g| {
                    (0..params.n_covariates())
                        .map(|l| params.gamma(k, g, l))
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangeArtifact {
    pub node: usize,
    pub old_label: usize,
    pub new_label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementArtifact {
    pub threshold: f64,
    pub changed_rows: Vec<ChangeArtifact>,
    pub changed_cols: Vec<ChangeArtifact>,
    pub unidentifiable_cols: Vec<usize>,
}

impl RefinementArtifact {
    pub fn from_report(report: &RefinementReport) -> Self {
        let convert = |c: &MembershipChange| ChangeArtifact {
            node: c.node + 1,
            old_label: c.old_label + 1,
            new_label: c.new_label + 1,
        };
        Self {
            threshold: report.threshold,
            changed_rows: report.changed_rows.iter().map(convert).collect(),
            changed_cols: report.changed_cols.iter().map(convert).collect(),
            unidentifiable_cols: report.unidentifiable_cols.iter().map(|&j| j + 1).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsArtifact {
    pub dropped_row_groups: Vec<usize>,
    pub dropped_col_groups: Vec<usize>,
    pub degenerate_solves: usize,
    pub frozen_beta_updates: usize,
}

/// The persisted fit: final (post-refinement when enabled) parameters and
/// memberships plus the descent trace and the refinement report.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub taus: Vec<f64>,
    pub kind: String,
    pub g: usize,
    pub h: usize,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    pub theta: Vec<Vec<Vec<f64>>>,
    pub nu: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub alpha: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub beta: Option<Vec<Vec<f64>>>,
    pub loss: f64,
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default)]
    pub refinement: Option<RefinementArtifact>,
    #[serde(default)]
    pub diagnostics: DiagnosticsArtifact,
}

impl FitArtifact {
    pub fn new(
        config_hash: String,
        taus: &[f64],
        fit: &FitResult,
        final_params: &ParameterSet,
        final_mem: &Membership,
        final_loss: f64,
        refinement: Option<&RefinementReport>,
    ) -> Self {
        Self {
            config_hash,
            seed: fit.seed,
            taus: taus.to_vec(),
            kind: kind_name(final_params.kind()).to_string(),
            g: final_mem.n_row_groups(),
            h: final_mem.n_col_groups(),
            row_labels: labels_out(final_mem.row_labels()),
            col_labels: labels_out(final_mem.col_labels()),
            theta: theta_out(final_params),
            nu: nu_out(final_params),
            gamma: gamma_out(final_params),
            alpha: final_params.alpha_array().map(|a| {
                (0..a.dim().0)
                    .map(|k| (0..a.dim().1).map(|g| a[[k, g]]).collect())
                    .collect()
            }),
            beta: final_params.beta_array().map(|b| {
                (0..b.dim().0)
                    .map(|k| (0..b.dim().1).map(|h| b[[k, h]]).collect())
                    .collect()
            }),
            loss: final_loss,
            loss_trace: fit.loss_trace.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            refinement: refinement.map(RefinementArtifact::from_report),
            diagnostics: DiagnosticsArtifact {
                dropped_row_groups: fit
                    .diagnostics
                    .dropped_row_groups
                    .iter()
                    .map(|&g| g + 1)
                    .collect(),
                dropped_col_groups: fit
                    .diagnostics
                    .dropped_col_groups
                    .iter()
                    .map(|&h| h + 1)
                    .collect(),
                degenerate_solves: fit.diagnostics.degenerate_solves,
                frozen_beta_updates: fit.diagnostics.frozen_beta_updates,
            },
        }
    }

    pub fn membership(&self) -> Result<Membership, CliError> {
        let g = labels_in(&self.row_labels, self.g, "row")?;
        let h = labels_in(&self.col_labels, self.h, "column")?;
        Membership::new(g, h, self.g, self.h).map_err(|e| CliError::Data(e.to_string()))
    }

    pub fn parameter_set(&self) -> Result<ParameterSet, CliError> {
        params_from_tables(
            parse_kind(&self.kind)?,
            &self.theta,
            &self.nu,
            &self.gamma,
            self.alpha.as_deref(),
            self.beta.as_deref(),
        )
    }
}

pub fn parse_fit_artifact(bytes: &[u8]) -> Result<FitArtifact, CliError> {
    let artifact: FitArtifact =
        serde_json::from_slice(bytes).map_err(|e| CliError::Data(format!("fit artifact: {e}")))?;
    // Eager consistency checks so downstream code can trust the shapes.
    artifact.membership()?;
    artifact.parameter_set()?;
    if artifact.taus.is_empty() || artifact.taus.len() != artifact.theta.len() {
        return Err(CliError::Data(
            "fit artifact: quantile grid disagrees with the parameter tables".to_string(),
        ));
    }
    Ok(artifact)
}

pub(crate) fn params_from_tables(
    kind: ModelKind,
    theta: &[Vec<Vec<f64>>],
    nu: &[Vec<f64>],
    gamma: &[Vec<Vec<f64>>],
    alpha: Option<&[Vec<f64>]>,
    beta: Option<&[Vec<f64>]>,
) -> Result<ParameterSet, CliError> {
    let k_len = theta.len();
    if k_len == 0 || nu.len() != k_len || gamma.len() != k_len {
        return Err(CliError::Data(
            "parameter tables disagree on the quantile count".to_string(),
        ));
    }
    let n_g = theta[0].len();
    let n_h = theta[0].first().map(Vec::len).unwrap_or(0);
    let p = gamma[0].first().map(Vec::len).unwrap_or(0);
    if n_g == 0 || n_h == 0 {
        return Err(CliError::Data("empty parameter tables".to_string()));
    }
    let shape_ok = theta
        .iter()
        .all(|per_k| per_k.len() == n_g && per_k.iter().all(|row| row.len() == n_h))
        && nu.iter().all(|per_k| per_k.len() == n_g)
        && gamma
            .iter()
            .all(|per_k| per_k.len() == n_g && per_k.iter().all(|row| row.len() == p));
    if !shape_ok {
        return Err(CliError::Data("ragged parameter tables".to_string()));
    }
    let theta_arr = Array3::from_shape_fn((k_len, n_g, n_h), |(k, g, h)| theta[k][g][h]);
    let nu_arr = Array2::from_shape_fn((k_len, n_g), |(k, g)| nu[k][g]);
    let gamma_arr = Array3::from_shape_fn((k_len, n_g, p), |(k, g, l)| gamma[k][g][l]);
    match (kind, alpha, beta) {
        (ModelKind::General, _, _) | (_, None, _) | (_, _, None) => {
            ParameterSet::general(theta_arr, nu_arr, gamma_arr)
                .map_err(|e| CliError::Data(e.to_string()))
        }
        (kind, Some(alpha), Some(beta)) => {
            let a_ok = alpha.len() == k_len && alpha.iter().all(|row| row.len() == n_g);
            let b_ok = beta.len() == k_len && beta.iter().all(|row| row.len() == n_h);
            if !a_ok || !b_ok {
                return Err(CliError::Data("ragged factor tables".to_string()));
            }
            let alpha_arr = Array2::from_shape_fn((k_len, n_g), |(k, g)| alpha[k][g]);
            let beta_arr = Array2::from_shape_fn((k_len, n_h), |(k, h)| beta[k][h]);
            ParameterSet::structured(kind, alpha_arr, beta_arr, nu_arr, gamma_arr)
                .map_err(|e| CliError::Data(e.to_string()))
        }
    }
}

/// Simulated ground truth stored next to the panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthArtifact {
    pub scenario: String,
    pub g0: usize,
    pub h0: usize,
    pub seed: u64,
    pub taus: Vec<f64>,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    pub theta: Vec<Vec<Vec<f64>>>,
    pub nu: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<Vec<f64>>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl TruthArtifact {
    pub fn membership(&self) -> Result<Membership, CliError> {
        let g = labels_in(&self.row_labels, self.g0, "row")?;
        let h = labels_in(&self.col_labels, self.h0, "column")?;
        Membership::new(g, h, self.g0, self.h0).map_err(|e| CliError::Data(e.to_string()))
    }

    pub fn parameter_set(&self) -> Result<ParameterSet, CliError> {
        let kind = match self.scenario.as_str() {
            "s1_additive" => ModelKind::Additive,
            "s2_multiplicative" => ModelKind::Multiplicative,
            other => {
                return Err(CliError::Data(format!(
                    "truth artifact: unknown scenario '{other}'"
                )))
            }
        };
        params_from_tables(
            kind,
            &self.theta,
            &self.nu,
            &self.gamma,
            Some(&self.alpha),
            Some(&self.beta),
        )
    }
}

pub fn parse_truth_artifact(bytes: &[u8]) -> Result<TruthArtifact, CliError> {
    let artifact: TruthArtifact = serde_json::from_slice(bytes)
        .map_err(|e| CliError::Data(format!("truth artifact: {e}")))?;
    artifact.membership()?;
    artifact.parameter_set()?;
    Ok(artifact)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<String>,
}

pub fn write_string(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_string(path, &text)
}

pub fn write_panel_csv(path: &Path, data: &PanelData) -> Result<(), CliError> {
    let n = data.n_nodes();
    let t_len = data.n_periods();
    let p = data.n_covariates();
    let mut out = String::from("node_id,t,y");
    for l in 1..=p {
        out.push_str(&format!(",x{l}"));
    }
    out.push('\n');
    for i in 0..n {
        for t in 0..=t_len {
            out.push_str(&format!("{},{},{}", i + 1, t, data.y(i, t)));
            for l in 0..p {
                if t == 0 {
                    out.push(',');
                } else {
                    out.push_str(&format!(",{}", data.x(i, t, l)));
                }
            }
            out.push('\n');
        }
    }
    write_string(path, &out)
}

pub fn write_covariates_csv(path: &Path, data: &PanelData) -> Result<(), CliError> {
    let p = data.n_covariates();
    let mut out = String::from("node_id,t");
    for l in 1..=p {
        out.push_str(&format!(",x{l}"));
    }
    out.push('\n');
    for i in 0..data.n_nodes() {
        for t in 1..=data.n_periods() {
            out.push_str(&format!("{},{}", i + 1, t));
            for l in 0..p {
                out.push_str(&format!(",{}", data.x(i, t, l)));
            }
            out.push('\n');
        }
    }
    write_string(path, &out)
}

pub fn write_edges_csv(path: &Path, net: &Network) -> Result<(), CliError> {
    let mut out = String::from("src,dst\n");
    for i in 0..net.n_nodes() {
        for &j in net.out_neighbors(i) {
            out.push_str(&format!("{},{}\n", i + 1, j + 1));
        }
    }
    write_string(path, &out)
}

pub fn write_qic_csv(path: &Path, table: &[QicCell]) -> Result<(), CliError> {
    let mut out = String::from("G,H,loss,qic,status\n");
    for cell in table {
        let status = match cell.status {
            CellStatus::Ok => "ok",
            CellStatus::DegenerateFit => "degenerate",
            CellStatus::Failed => "failed",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.g, cell.h, cell.loss, cell.qic, status
        ));
    }
    write_string(path, &out)
}

pub fn write_ci_csv(path: &Path, cis: &ConfidenceIntervals) -> Result<(), CliError> {
    let mut out = String::from("parameter_name,tau,estimate,std_error,lower,upper\n");
    for e in &cis.entries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.name, e.tau, e.estimate, e.std_error, e.lower, e.upper
        ));
    }
    write_string(path, &out)
}

/// Context columns shared by every row of a metrics CSV.
#[derive(Debug, Clone)]
pub struct MetricsContext {
    pub scenario: String,
    pub network: String,
    pub g: usize,
    pub h: usize,
    pub n: usize,
    pub t_len: usize,
}

pub fn write_metrics_csv(
    path: &Path,
    context: &MetricsContext,
    rows: &[AggregateRow],
) -> Result<(), CliError> {
    let mut out = String::from("scenario,network,G,H,N,T,tau,metric,value\n");
    for row in rows {
        let g = row.g.unwrap_or(context.g);
        let h = row.h.unwrap_or(context.h);
        let tau = row.tau.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            context.scenario, context.network, g, h, context.n, context.t_len, tau, row.metric,
            row.value
        ));
    }
    write_string(path, &out)
}
