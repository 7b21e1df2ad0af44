//! Command implementations. Each command resolves its config (file plus
//! flag overrides), does the work, and writes its outputs together with a
//! manifest carrying the config hash and seed; reruns with an identical
//! manifest are byte-identical.

use std::path::Path;

use tgnq::estimator::{enhanced_fit, vanilla_fit, EstimatorOptions};
use tgnq::inference::{infer, InferenceOptions};
use tgnq::metrics::{
    alignment_maps, clustering_errors, clustering_errors_best_permutation, param_errors,
    rmse_all_errors,
};
use tgnq::model::{total_loss, Membership, ModelKind, QuantileGrid};
use tgnq::refinement::{refine, RefinedFit, RefinementOptions};
use tgnq::selection::{select_group_numbers, SelectionConfig};
use tgnq::sim::{
    gen_memberships, gen_panel, run_replications, AggregateRow, ExperimentConfig, ParamFunctions,
    ReplicateOutcome, ScenarioConfig,
};

use crate::config::{
    config_hash, parse_kind, EvaluateConfig, FitConfig, InferConfig, LambdaCfg,
    ReplicateConfig, SelectConfig, SimulateConfig,
};
use crate::io::{
    build_network, parse_edge_list, parse_fit_artifact, parse_panel_csv, parse_truth_artifact,
    write_ci_csv, write_covariates_csv, write_edges_csv, write_json, write_metrics_csv,
    write_panel_csv, write_qic_csv, FitArtifact, Manifest, MetricsContext, TruthArtifact,
};
use crate::CliError;

/// Flag overrides shared by the commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub taus: Option<Vec<f64>>,
    pub g: Option<usize>,
    pub h: Option<usize>,
    pub kind: Option<String>,
    pub refine: Option<bool>,
    pub qic_lambda: Option<String>,
    pub hac: Option<bool>,
}

fn build_grid(taus: &[f64]) -> Result<QuantileGrid, CliError> {
    let mut sorted = taus.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    QuantileGrid::new(sorted).map_err(|e| CliError::Config(e.to_string()))
}

fn install_workers(workers: Option<usize>) -> Result<Option<rayon::ThreadPool>, CliError> {
    match workers {
        None => Ok(None),
        Some(0) => Err(CliError::Config("workers must be >= 1".to_string())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| CliError::Config(e.to_string())),
    }
}

fn with_pool<T>(
    pool: &Option<rayon::ThreadPool>,
    body: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError>
where
    T: Send,
{
    match pool {
        Some(pool) => pool.install(body),
        None => body(),
    }
}

fn write_manifest(
    out: &Path,
    command: &str,
    hash: &str,
    seed: u64,
    files: &[&str],
) -> Result<(), CliError> {
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: hash.to_string(),
        seed,
        files: files.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn load_inputs(
    panel_path: &Path,
    edges_path: &Path,
) -> Result<(tgnq::model::PanelData, tgnq::model::Network), CliError> {
    let panel_bytes = std::fs::read(panel_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", panel_path.display())))?;
    let panel = parse_panel_csv(&panel_bytes)?;
    let edge_bytes = std::fs::read(edges_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", edges_path.display())))?;
    let edges = parse_edge_list(&edge_bytes)?;
    let net = build_network(panel.n_nodes(), &edges)?;
    Ok((panel, net))
}

pub fn cmd_simulate(
    config_path: &Path,
    out: &Path,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let mut config: SimulateConfig = crate::config::load(config_path)?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(taus) = &overrides.taus {
        config.taus = taus.clone();
    }
    let grid = build_grid(&config.taus)?;
    let scenario_cfg: ScenarioConfig = config.scenario_config()?;
    let net_config = config.network.build(config.seed)?;
    let hash = config_hash(&config);

    let net = net_config
        .generate()
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let g = gen_memberships(net.n_nodes(), &scenario_cfg.row_ratios, config.seed ^ 0x01)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let h = gen_memberships(net.n_nodes(), &scenario_cfg.col_ratios, config.seed ^ 0x02)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let fns = ParamFunctions::scenario(scenario_cfg.scenario, config.g0, config.h0)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let panel = gen_panel(
        &net,
        &g,
        &h,
        &fns,
        config.t_len,
        config.burn_in,
        config.seed ^ 0x03,
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;

    let truth_params = fns.parameter_set(&grid);
    let truth = TruthArtifact {
        scenario: config.scenario.clone(),
        g0: config.g0,
        h0: config.h0,
        seed: config.seed,
        taus: grid.taus().to_vec(),
        row_labels: g.iter().map(|&l| l + 1).collect(),
        col_labels: h.iter().map(|&l| l + 1).collect(),
        theta: (0..grid.len())
            .map(|k| {
                (0..config.g0)
                    .map(|gg| (0..config.h0).map(|hh| truth_params.theta(k, gg, hh)).collect())
                    .collect()
            })
            .collect(),
        nu: (0..grid.len())
            .map(|k| (0..config.g0).map(|gg| truth_params.nu(k, gg)).collect())
            .collect(),
        gamma: (0..grid.len())
            .map(|k| {
                (0..config.g0)
                    .map(|gg| {
                        (0..truth_params.n_covariates())
                            .map(|l| truth_params.gamma(k, gg, l))
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        alpha: (0..grid.len())
            .map(|k| {
                let a = truth_params.alpha_array().expect("structured truth");
                (0..config.g0).map(|gg| a[[k, gg]]).collect()
            })
            .collect(),
        beta: (0..grid.len())
            .map(|k| {
                let b = truth_params.beta_array().expect("structured truth");
                (0..config.h0).map(|hh| b[[k, hh]]).collect()
            })
            .collect(),
    };

    write_panel_csv(&out.join("panel.csv"), &panel)?;
    write_covariates_csv(&out.join("covariates.csv"), &panel)?;
    write_edges_csv(&out.join("edges.csv"), &net)?;
    write_json(&out.join("truth.json"), &truth)?;
    write_manifest(
        out,
        "simulate",
        &hash,
        config.seed,
        &["panel.csv", "covariates.csv", "edges.csv", "truth.json"],
    )
}

pub fn cmd_fit(config_path: &Path, out: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let mut config: FitConfig = crate::config::load(config_path)?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(workers) = overrides.workers {
        config.workers = Some(workers);
    }
    if let Some(taus) = &overrides.taus {
        config.taus = taus.clone();
    }
    if let Some(g) = overrides.g {
        config.g = g;
    }
    if let Some(h) = overrides.h {
        config.h = h;
    }
    if let Some(kind) = &overrides.kind {
        config.kind = kind.clone();
    }
    if let Some(refine_flag) = overrides.refine {
        config.refine = refine_flag;
    }
    let kind = parse_kind(&config.kind)?;
    let grid = build_grid(&config.taus)?;
    let hash = config_hash(&config);
    let pool = install_workers(config.workers)?;

    let (panel, net) = load_inputs(&config.panel, &config.edges)?;
    let opts = config.estimator.build(config.g, config.h, kind, config.seed);

    let warm_membership = match &config.warm_start {
        None => None,
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let artifact = parse_fit_artifact(&bytes)?;
            if artifact.g != config.g || artifact.h != config.h {
                return Err(CliError::Data(format!(
                    "warm start has ({}, {}) groups, fit wants ({}, {})",
                    artifact.g, artifact.h, config.g, config.h
                )));
            }
            Some(artifact.membership()?)
        }
    };

    let artifact = with_pool(&pool, || {
        let fit = match &warm_membership {
            Some(init) => vanilla_fit(&panel, &net, &grid, &opts, init),
            None => enhanced_fit(&panel, &net, &grid, &opts),
        }
        .map_err(|e| CliError::Numerical(e.to_string()))?;

        let artifact = if config.refine {
            let ref_opts = RefinementOptions {
                enum_threshold: opts.enum_threshold,
                seed: config.seed ^ 0x0f,
                solver: opts.solver,
                ..RefinementOptions::default()
            };
            let refined = refine(&panel, &net, &fit, &grid, &ref_opts)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            FitArtifact::new(
                hash.clone(),
                grid.taus(),
                &fit,
                &refined.params,
                &refined.membership,
                refined.loss,
                Some(&refined.report),
            )
        } else {
            FitArtifact::new(
                hash.clone(),
                grid.taus(),
                &fit,
                &fit.params,
                &fit.membership,
                fit.loss,
                None,
            )
        };
        Ok(artifact)
    })?;

    write_json(&out.join("fit.json"), &artifact)?;
    write_manifest(out, "fit", &hash, config.seed, &["fit.json"])
}

pub fn cmd_select(config_path: &Path, out: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let mut config: SelectConfig = crate::config::load(config_path)?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(workers) = overrides.workers {
        config.workers = Some(workers);
    }
    if let Some(taus) = &overrides.taus {
        config.taus = taus.clone();
    }
    if let Some(flag) = &overrides.qic_lambda {
        config.lambda = LambdaCfg::from_flag(flag)?;
    }
    let grid = build_grid(&config.taus)?;
    let hash = config_hash(&config);
    let pool = install_workers(config.workers)?;
    let lambda = config.lambda.build()?;
    let selection = SelectionConfig {
        g_range: (config.g_min, config.g_max),
        h_range: (config.h_min, config.h_max),
        lambda,
    };
    selection
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let (panel, net) = load_inputs(&config.panel, &config.edges)?;
    let opts = config
        .estimator
        .build(config.g_min, config.h_min, ModelKind::General, config.seed);

    let outcome = with_pool(&pool, || {
        select_group_numbers(&panel, &net, &grid, &selection, &opts)
            .map_err(|e| CliError::Numerical(e.to_string()))
    })?;

    #[derive(serde::Serialize)]
    struct Selected {
        g: usize,
        h: usize,
        lambda: f64,
    }
    write_qic_csv(&out.join("qic.csv"), &outcome.table)?;
    write_json(
        &out.join("selected.json"),
        &Selected {
            g: outcome.g,
            h: outcome.h,
            lambda: outcome.lambda,
        },
    )?;
    write_manifest(
        out,
        "select",
        &hash,
        config.seed,
        &["qic.csv", "selected.json"],
    )
}

pub fn cmd_infer(config_path: &Path, out: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let mut config: InferConfig = crate::config::load(config_path)?;
    if let Some(hac) = overrides.hac {
        config.hac = hac;
    }
    let hash = config_hash(&config);
    let (panel, net) = load_inputs(&config.panel, &config.edges)?;
    let bytes = std::fs::read(&config.fit)
        .map_err(|e| CliError::Data(format!("{}: {e}", config.fit.display())))?;
    let artifact = parse_fit_artifact(&bytes)?;
    if artifact.refinement.is_none() {
        return Err(CliError::Data(
            "inference requires a refined fit: rerun `tgnq fit` with refine enabled".to_string(),
        ));
    }
    let grid = build_grid(&artifact.taus)?;
    let refined = RefinedFit {
        membership: artifact.membership()?,
        params: artifact.parameter_set()?,
        loss: artifact.loss,
        report: Default::default(),
    };
    let (_cov, cis) = infer(
        &panel,
        &net,
        &refined,
        &grid,
        &InferenceOptions {
            hac: config.hac,
            level: 0.95,
        },
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    write_ci_csv(&out.join("ci.csv"), &cis)?;
    write_manifest(out, "infer", &hash, artifact.seed, &["ci.csv"])
}

pub fn cmd_replicate(
    config_path: &Path,
    out: &Path,
    overrides: &Overrides,
) -> Result<(), CliError> {
    let mut config: ReplicateConfig = crate::config::load(config_path)?;
    if let Some(seed) = overrides.seed {
        config.master_seed = seed;
    }
    if let Some(workers) = overrides.workers {
        config.workers = Some(workers);
    }
    if let Some(taus) = &overrides.taus {
        config.taus = taus.clone();
    }
    if let Some(kind) = &overrides.kind {
        config.kind = kind.clone();
    }
    if let Some(refine_flag) = overrides.refine {
        config.refine = refine_flag;
    }
    let kind = parse_kind(&config.kind)?;
    let scenario = crate::config::parse_scenario(&config.scenario)?;
    let hash = config_hash(&config);
    let pool = install_workers(config.workers)?;

    let mut scenario_cfg = ScenarioConfig::new(
        scenario,
        config.g0,
        config.h0,
        config.t_len,
        config.master_seed,
    );
    if let Some(rr) = &config.row_ratios {
        scenario_cfg.row_ratios = rr.clone();
    }
    if let Some(cr) = &config.col_ratios {
        scenario_cfg.col_ratios = cr.clone();
    }
    scenario_cfg.burn_in = config.burn_in;
    scenario_cfg
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let network = config.network.build(config.master_seed)?;

    let estimator: EstimatorOptions =
        config
            .estimator
            .build(config.fit_g, config.fit_h, kind, config.master_seed);
    let selection = match &config.selection {
        None => None,
        Some(grid_cfg) => {
            let sel = SelectionConfig {
                g_range: (grid_cfg.g_min, grid_cfg.g_max),
                h_range: (grid_cfg.h_min, grid_cfg.h_max),
                lambda: grid_cfg.lambda.build()?,
            };
            sel.validate().map_err(|e| CliError::Config(e.to_string()))?;
            Some(sel)
        }
    };
    build_grid(&config.taus)?;

    let experiment = ExperimentConfig {
        scenario: scenario_cfg,
        network: network.clone(),
        taus: config.taus.clone(),
        fit_g: config.fit_g,
        fit_h: config.fit_h,
        kind,
        estimator,
        refine: config.refine,
        infer: config.infer,
        hac: config.hac,
        selection,
        n_replicates: config.n_replicates,
        master_seed: config.master_seed,
    };

    let store = with_pool(&pool, || {
        run_replications(&experiment).map_err(|e| CliError::Numerical(e.to_string()))
    })?;

    // Per-replicate records.
    #[derive(serde::Serialize)]
    struct ReplicateJson {
        index: usize,
        seed: u64,
        status: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        message: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        loss: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        rho1: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        rho2: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        selected_g: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        selected_h: Option<usize>,
    }
    let mut files: Vec<String> = vec!["metrics.csv".to_string()];
    for outcome in &store.records {
        let (index, record) = match outcome {
            ReplicateOutcome::Success(rec) => (
                rec.index,
                ReplicateJson {
                    index: rec.index,
                    seed: rec.seed,
                    status: "ok".into(),
                    message: None,
                    loss: Some(rec.loss),
                    rho1: Some(rec.rho1_chi),
                    rho2: Some(rec.rho2_chi),
                    selected_g: rec.selection.as_ref().map(|s| s.selected_g),
                    selected_h: rec.selection.as_ref().map(|s| s.selected_h),
                },
            ),
            ReplicateOutcome::Failure {
                index,
                seed,
                message,
            } => (
                *index,
                ReplicateJson {
                    index: *index,
                    seed: *seed,
                    status: "failed".into(),
                    message: Some(message.clone()),
                    loss: None,
                    rho1: None,
                    rho2: None,
                    selected_g: None,
                    selected_h: None,
                },
            ),
        };
        let name = format!("replicates/rep_{index:04}.json");
        write_json(&out.join(&name), &record)?;
        files.push(name);
    }

    let context = MetricsContext {
        scenario: config.scenario.clone(),
        network: config.network.kind.clone(),
        g: config.fit_g,
        h: config.fit_h,
        n: config.network.n,
        t_len: config.t_len,
    };
    write_metrics_csv(&out.join("metrics.csv"), &context, &store.aggregates)?;
    let file_refs: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(out, "replicate", &hash, config.master_seed, &file_refs)
}

pub fn cmd_evaluate(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let config: EvaluateConfig = crate::config::load(config_path)?;
    let hash = config_hash(&config);
    let fit_bytes = std::fs::read(&config.fit)
        .map_err(|e| CliError::Data(format!("{}: {e}", config.fit.display())))?;
    let fit = parse_fit_artifact(&fit_bytes)?;
    let truth_bytes = std::fs::read(&config.truth)
        .map_err(|e| CliError::Data(format!("{}: {e}", config.truth.display())))?;
    let truth = parse_truth_artifact(&truth_bytes)?;

    if fit.taus.len() != truth.taus.len()
        || fit
            .taus
            .iter()
            .zip(&truth.taus)
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(CliError::Data(
            "fit and truth use different quantile grids".to_string(),
        ));
    }
    let est_mem: Membership = fit.membership()?;
    let est_params = fit.parameter_set()?;
    let truth_mem = truth.membership()?;
    let truth_params = truth.parameter_set()?;
    if est_mem.n_nodes() != truth_mem.n_nodes() {
        return Err(CliError::Data(format!(
            "fit covers {} nodes, truth covers {}",
            est_mem.n_nodes(),
            truth_mem.n_nodes()
        )));
    }

    let maps = alignment_maps(&est_mem, &truth_mem).map_err(|e| CliError::Data(e.to_string()))?;
    let (rho1, rho2) =
        clustering_errors(&est_mem, &truth_mem).map_err(|e| CliError::Data(e.to_string()))?;
    let (rho1_perm, rho2_perm) = clustering_errors_best_permutation(&est_mem, &truth_mem)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let errors =
        param_errors(&est_params, &truth_params, &maps).map_err(|e| CliError::Data(e.to_string()))?;
    let errors_all = rmse_all_errors(&est_params, &est_mem, &truth_params, &truth_mem)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let mut rows = vec![
        AggregateRow {
            metric: "rho1_chi".into(),
            tau: None,
            g: None,
            h: None,
            value: rho1,
        },
        AggregateRow {
            metric: "rho2_chi".into(),
            tau: None,
            g: None,
            h: None,
            value: rho2,
        },
        AggregateRow {
            metric: "rho1_perm".into(),
            tau: None,
            g: None,
            h: None,
            value: rho1_perm,
        },
        AggregateRow {
            metric: "rho2_perm".into(),
            tau: None,
            g: None,
            h: None,
            value: rho2_perm,
        },
    ];
    for (k, &tau) in fit.taus.iter().enumerate() {
        for (metric, value) in [
            ("rmse_theta", errors.theta[k]),
            ("rmse_nu", errors.nu[k]),
            ("rmse_gamma", errors.gamma[k]),
            ("rmse_all_theta", errors_all.theta[k]),
            ("rmse_all_nu", errors_all.nu[k]),
            ("rmse_all_gamma", errors_all.gamma[k]),
        ] {
            rows.push(AggregateRow {
                metric: metric.into(),
                tau: Some(tau),
                g: None,
                h: None,
                value,
            });
        }
    }
    let context = MetricsContext {
        scenario: truth.scenario.clone(),
        network: "user".into(),
        g: est_mem.n_row_groups(),
        h: est_mem.n_col_groups(),
        n: est_mem.n_nodes(),
        t_len: 0,
    };
    write_metrics_csv(&out.join("metrics.csv"), &context, &rows)?;
    write_manifest(out, "evaluate", &hash, fit.seed, &["metrics.csv"])
}

/// Recompute a fit's loss from its artifact and inputs (used by tests and
/// available for debugging).
pub fn recomputed_loss(
    panel: &tgnq::model::PanelData,
    net: &tgnq::model::Network,
    artifact: &FitArtifact,
) -> Result<f64, CliError> {
    let grid = build_grid(&artifact.taus)?;
    let mem = artifact.membership()?;
    let params = artifact.parameter_set()?;
    total_loss(panel, net, &params, &mem, &grid).map_err(|e| CliError::Numerical(e.to_string()))
}

pub fn parse_taus_flag(flag: &str) -> Result<Vec<f64>, CliError> {
    flag.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad quantile '{s}' in --taus")))
        })
        .collect()
}

/// Entry point shared by main and the integration tests.
pub fn run(
    command: &str,
    config: &Path,
    out: &Path,
    overrides: &Overrides,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    match command {
        "simulate" => cmd_simulate(config, out, overrides),
        "fit" => cmd_fit(config, out, overrides),
        "select" => cmd_select(config, out, overrides),
        "infer" => cmd_infer(config, out, overrides),
        "replicate" => cmd_replicate(config, out, overrides),
        "evaluate" => cmd_evaluate(config, out),
        other => Err(CliError::Config(format!("unknown command '{other}'"))),
    }
}
