//! Config schemas. Every file is schema-validated before any computation;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tgnq::estimator::EstimatorOptions;
use tgnq::model::ModelKind;
use tgnq::selection::LambdaRule;
use tgnq::sim::{NetworkConfig, NetworkKind, Scenario, ScenarioConfig};
use tgnq::solver::SolverOptions;

use crate::CliError;

pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Canonical hash of the resolved configuration, recorded in manifests.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn default_taus() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}

fn default_burn_in() -> usize {
    200
}

fn default_true() -> bool {
    true
}

fn default_kind() -> String {
    "general".to_string()
}

fn default_communities() -> usize {
    5
}

pub fn parse_kind(name: &str) -> Result<ModelKind, CliError> {
    match name {
        "general" => Ok(ModelKind::General),
        "additive" => Ok(ModelKind::Additive),
        "multiplicative" => Ok(ModelKind::Multiplicative),
        other => Err(CliError::Config(format!(
            "unknown model kind '{other}' (expected general, additive, or multiplicative)"
        ))),
    }
}

pub fn kind_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::General => "general",
        ModelKind::Additive => "additive",
        ModelKind::Multiplicative => "multiplicative",
    }
}

pub fn parse_scenario(name: &str) -> Result<Scenario, CliError> {
    match name {
        "s1_additive" => Ok(Scenario::S1Additive),
        "s2_multiplicative" => Ok(Scenario::S2Multiplicative),
        other => Err(CliError::Config(format!(
            "unknown scenario '{other}' (expected s1_additive or s2_multiplicative)"
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCfg {
    /// "sbm" or "power_law".
    pub kind: String,
    pub n: usize,
    #[serde(default = "default_communities")]
    pub communities: usize,
}

impl NetworkCfg {
    pub fn build(&self, seed: u64) -> Result<NetworkConfig, CliError> {
        let kind = match self.kind.as_str() {
            "sbm" => NetworkKind::Sbm,
            "power_law" => NetworkKind::PowerLaw,
            other => {
                return Err(CliError::Config(format!(
                    "unknown network kind '{other}' (expected sbm or power_law)"
                )))
            }
        };
        Ok(NetworkConfig {
            kind,
            n: self.n,
            sbm_communities: self.communities,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: String,
    pub network: NetworkCfg,
    pub g0: usize,
    pub h0: usize,
    #[serde(default)]
    pub row_ratios: Option<Vec<f64>>,
    #[serde(default)]
    pub col_ratios: Option<Vec<f64>>,
    pub t_len: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SimulateConfig {
    pub fn scenario_config(&self) -> Result<ScenarioConfig, CliError> {
        let scenario = parse_scenario(&self.scenario)?;
        let mut cfg = ScenarioConfig::new(scenario, self.g0, self.h0, self.t_len, self.seed);
        if let Some(rr) = &self.row_ratios {
            cfg.row_ratios = rr.clone();
        }
        if let Some(cr) = &self.col_ratios {
            cfg.col_ratios = cr.clone();
        }
        cfg.burn_in = self.burn_in;
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Estimator tuning knobs; anything omitted takes the library default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorCfg {
    #[serde(default)]
    pub max_outer_iters: Option<usize>,
    #[serde(default)]
    pub r_max: Option<usize>,
    #[serde(default)]
    pub fail_streak: Option<usize>,
    #[serde(default)]
    pub enum_threshold: Option<usize>,
    #[serde(default)]
    pub n_inits: Option<usize>,
    #[serde(default)]
    pub col_rounds: Option<usize>,
    #[serde(default)]
    pub solver_tol: Option<f64>,
    #[serde(default)]
    pub solver_max_iters: Option<usize>,
}

impl EstimatorCfg {
    pub fn build(&self, g: usize, h: usize, kind: ModelKind, seed: u64) -> EstimatorOptions {
        let mut opts = EstimatorOptions::new(g, h);
        opts.kind = kind;
        opts.seed = seed;
        if let Some(v) = self.max_outer_iters {
            opts.max_outer_iters = v;
        }
        if let Some(v) = self.r_max {
            opts.r_max = v;
        }
        if let Some(v) = self.fail_streak {
            opts.fail_streak = v;
        }
        if let Some(v) = self.enum_threshold {
            opts.enum_threshold = v;
        }
        if let Some(v) = self.n_inits {
            opts.n_inits = v;
        }
        if let Some(v) = self.col_rounds {
            opts.col_rounds = v;
        }
        let mut solver = SolverOptions::default();
        if let Some(v) = self.solver_tol {
            solver.tol = v;
        }
        if let Some(v) = self.solver_max_iters {
            solver.max_iters = v;
        }
        opts.solver = solver;
        opts
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub panel: PathBuf,
    pub edges: PathBuf,
    pub g: usize,
    pub h: usize,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_true")]
    pub refine: bool,
    #[serde(default)]
    pub estimator: EstimatorCfg,
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

/// Penalty rule: the string "default" or an explicit number.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaCfg {
    Rule(String),
    Value(f64),
}

impl Default for LambdaCfg {
    fn default() -> Self {
        LambdaCfg::Rule("default".to_string())
    }
}

impl LambdaCfg {
    pub fn build(&self) -> Result<LambdaRule, CliError> {
        match self {
            LambdaCfg::Rule(name) if name == "default" => Ok(LambdaRule::PaperDefault),
            LambdaCfg::Rule(other) => Err(CliError::Config(format!(
                "unknown lambda rule '{other}' (expected \"default\" or a number)"
            ))),
            LambdaCfg::Value(v) => Ok(LambdaRule::Fixed(*v)),
        }
    }

    pub fn from_flag(flag: &str) -> Result<Self, CliError> {
        if flag == "default" {
            Ok(LambdaCfg::Rule("default".into()))
        } else {
            flag.parse::<f64>()
                .map(LambdaCfg::Value)
                .map_err(|_| CliError::Config(format!("--qic-lambda expects a number or 'default', got '{flag}'")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub panel: PathBuf,
    pub edges: PathBuf,
    pub g_min: usize,
    pub g_max: usize,
    pub h_min: usize,
    pub h_max: usize,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub lambda: LambdaCfg,
    #[serde(default)]
    pub estimator: EstimatorCfg,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub panel: PathBuf,
    pub edges: PathBuf,
    pub fit: PathBuf,
    #[serde(default)]
    pub hac: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionGridCfg {
    pub g_min: usize,
    pub g_max: usize,
    pub h_min: usize,
    pub h_max: usize,
    #[serde(default)]
    pub lambda: LambdaCfg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateConfig {
    pub scenario: String,
    pub network: NetworkCfg,
    pub g0: usize,
    pub h0: usize,
    #[serde(default)]
    pub row_ratios: Option<Vec<f64>>,
    #[serde(default)]
    pub col_ratios: Option<Vec<f64>>,
    pub t_len: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    pub fit_g: usize,
    pub fit_h: usize,
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_true")]
    pub refine: bool,
    #[serde(default)]
    pub infer: bool,
    #[serde(default)]
    pub hac: bool,
    #[serde(default)]
    pub selection: Option<SelectionGridCfg>,
    pub n_replicates: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub estimator: EstimatorCfg,
    #[serde(default, skip_serializing)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub fit: PathBuf,
    pub truth: PathBuf,
}
