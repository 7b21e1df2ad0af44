use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tgnq_cli::commands::{parse_taus_flag, run, Overrides};

#[derive(Parser)]
#[command(
    name = "tgnq",
    about = "Two-way grouped network quantile autoregression: simulate, fit, select, infer, replicate, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count override.
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated quantile levels, e.g. 0.1,0.5,0.9.
    #[arg(long)]
    taus: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel, network, and ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the model to a panel and edge list.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Row group count override.
        #[arg(long = "G")]
        g: Option<usize>,
        /// Column group count override.
        #[arg(long = "H")]
        h: Option<usize>,
        /// Network-effect parameterization.
        #[arg(long, value_parser = ["general", "additive", "multiplicative"])]
        kind: Option<String>,
        /// Run the membership refinement protocol after the fit.
        #[arg(long)]
        refine: Option<bool>,
    },
    /// Select the group numbers over a QIC grid.
    Select {
        #[command(flatten)]
        common: Common,
        /// Penalty weight: a number or 'default' for the reference rule.
        #[arg(long = "qic-lambda")]
        qic_lambda: Option<String>,
    },
    /// Sandwich confidence intervals for a refined fit.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Bartlett HAC score covariance instead of the lag-zero form.
        #[arg(long)]
        hac: bool,
    },
    /// Run a replicated experiment and aggregate the metrics.
    Replicate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["general", "additive", "multiplicative"])]
        kind: Option<String>,
        #[arg(long)]
        refine: Option<bool>,
    },
    /// Compare a fit artifact against a stored truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, overrides) = match cli.command {
        Command::Simulate { common } => ("simulate", common, Overrides::default()),
        Command::Fit {
            common,
            g,
            h,
            kind,
            refine,
        } => (
            "fit",
            common,
            Overrides {
                g,
                h,
                kind,
                refine,
                ..Overrides::default()
            },
        ),
        Command::Select { common, qic_lambda } => (
            "select",
            common,
            Overrides {
                qic_lambda,
                ..Overrides::default()
            },
        ),
        Command::Infer { common, hac } => (
            "infer",
            common,
            Overrides {
                hac: Some(hac),
                ..Overrides::default()
            },
        ),
        Command::Replicate {
            common,
            kind,
            refine,
        } => (
            "replicate",
            common,
            Overrides {
                kind,
                refine,
                ..Overrides::default()
            },
        ),
        Command::Evaluate { common } => ("evaluate", common, Overrides::default()),
    };

    let mut overrides = overrides;
    overrides.seed = common.seed;
    overrides.workers = common.workers;
    if let Some(taus) = &common.taus {
        match parse_taus_flag(taus) {
            Ok(v) => overrides.taus = Some(v),
            Err(err) => {
                eprintln!("{err}");
                return ExitCode::from(err.exit_code() as u8);
            }
        }
    }

    match run(name, &common.config, &common.out, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
