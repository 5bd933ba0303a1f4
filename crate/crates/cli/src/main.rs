//! `mutguard` command line: train → attack → mutate → calibrate → detect →
//! evaluate. Every stage reads and writes files under one output directory.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mutguard::mutation::Operator;

use crate::config::{Overrides, RunConfig};

/// An error in how the tool was invoked or configured: bad flags, invalid
/// settings, missing inputs or missing upstream artifacts.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "mutguard", version, about = "Adversarial-sample detection by model mutation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; flags below override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    operator: Option<OperatorArg>,
    /// Mutation rate γ.
    #[arg(long, global = true)]
    rate: Option<f64>,
    #[arg(long, global = true)]
    pool_size: Option<usize>,
    /// Threshold multiplier ρ.
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Master seed; every stage derives its own sub-seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $MUTGUARD_OUT, else ./mutguard-out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OperatorArg {
    Nai,
    Gf,
    Ws,
    Ns,
}

impl From<OperatorArg> for Operator {
    fn from(o: OperatorArg) -> Self {
        match o {
            OperatorArg::Nai => Operator::Nai,
            OperatorArg::Gf => Operator::Gf,
            OperatorArg::Ws => Operator::Ws,
            OperatorArg::Ns => Operator::Ns,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Fgsm,
    Jsma,
    WronglyLabeled,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Jsma => "jsma",
            Method::WronglyLabeled => "wrongly-labeled",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier; writes model.json and train_log.json.
    Train,
    /// Attack correctly classified test samples; writes adversarial-<method>.jsonl.
    Attack {
        #[arg(long, value_enum)]
        method: Method,
        /// Number of attempts [default: from config].
        #[arg(long)]
        count: Option<usize>,
    },
    /// Generate the accuracy-filtered mutant pool into pool/.
    Mutate,
    /// Derive the detection threshold from normal samples; writes sprt.json.
    Calibrate,
    /// Run the sequential detector; writes reports.jsonl and detect_summary.json.
    Detect {
        /// Adversarial JSON-lines inputs [default: every adversarial-*.jsonl in the output directory].
        #[arg(long = "adversarial", value_name = "PATH")]
        adversarial: Vec<PathBuf>,
        /// Zero the wall-clock fields so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// LCR tables, ROC curves, AUROC, detection accuracy and cost; writes metrics.json and roc-<group>.csv.
    Evaluate {
        #[arg(long = "adversarial", value_name = "PATH")]
        adversarial: Vec<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig, Usage> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        operator: g.operator.map(Operator::from),
        rate: g.rate,
        pool_size: g.pool_size,
        rho: g.rho,
        alpha: g.alpha,
        beta: g.beta,
        seed: g.seed,
        out: g.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Attack { method, count } => commands::attack(&cfg, method, count),
        Command::Mutate => commands::mutate(&cfg),
        Command::Calibrate => commands::calibrate(&cfg),
        Command::Detect {
            adversarial,
            no_timing,
        } => commands::detect(&cfg, &adversarial, no_timing),
        Command::Evaluate { adversarial } => commands::evaluate(&cfg, &adversarial),
        Command::ShowConfig => {
            print!("{}", toml::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
