mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epfgnn_core::dataset::SyntheticParams;
use epfgnn_core::mrf::{CoefficientMode, RedistributionScheme};
use epfgnn_core::oracle::OracleLimit;
use epfgnn_core::selfcheck::SelfCheckConfig;

use config::{RunConfig, SplitKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    SelfCheck(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::SelfCheck(_) => 3,
        }
    }
}

impl From<epfgnn_core::Error> for CliError {
    fn from(e: epfgnn_core::Error) -> Self {
        match e {
            epfgnn_core::Error::Config(_) | epfgnn_core::Error::OracleLimit { .. } => CliError::Config(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "epfgnn", version, about = "Pairwise-factorized GNN node classification")]
struct Cli {
    /// Print only final results.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Coeff {
    None,
    Layer,
    Edge,
}

#[derive(Clone, Copy, ValueEnum)]
enum Redist {
    Average,
    Center,
}

/// Options shared by the commands that train or score models. Flags
/// override values read from `--config`.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or citation file prefix.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitKind>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    coeff: Option<Coeff>,
    #[arg(long, value_enum)]
    redist: Option<Redist>,
    #[arg(long)]
    em_rounds: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(k) = self.split {
            cfg.split.kind = k;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(c) = self.coeff {
            cfg.train.coefficient = match c {
                Coeff::None => CoefficientMode::None,
                Coeff::Layer => CoefficientMode::Layer,
                Coeff::Edge => CoefficientMode::Edge,
            };
        }
        if let Some(r) = self.redist {
            cfg.train.redistribution = match r {
                Redist::Average => RedistributionScheme::Average,
                Redist::Center => RedistributionScheme::Center,
            };
        }
        if let Some(n) = self.em_rounds {
            cfg.train.em_rounds = n;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train over the configured seeds and write reports and checkpoints.
    Train(RunArgs),
    /// Score a saved checkpoint on the split of the first seed.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print dataset statistics and the homophily measure.
    Homophily {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Check piece inference, gradients and mean-field updates against
    /// enumeration and finite differences.
    OracleCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Node count of the exact-inference instances.
        #[arg(long, default_value_t = 6)]
        nodes: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest number of joint configurations to enumerate.
        #[arg(long, default_value_t = OracleLimit::default().0)]
        limit: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Run the coefficient × redistribution grid.
    Ablate(RunArgs),
    /// Write a synthetic dataset in the generic directory format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        nodes: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        edges_per_node: usize,
        #[arg(long, default_value_t = 0.25)]
        homophily: f64,
        #[arg(long, default_value_t = 100)]
        features: usize,
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a ratio split, given as TRAIN,VAL,TEST fractions.
        #[arg(long, value_delimiter = ',')]
        ratio_split: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Train(args) => commands::cmd_train(&args.resolve()?, quiet),
        Command::Evaluate { run, checkpoint } => commands::cmd_evaluate(&run.resolve()?, &checkpoint, quiet),
        Command::Homophily { dataset } => commands::cmd_homophily(&dataset),
        Command::OracleCheck {
            trials,
            nodes,
            classes,
            seed,
            limit,
            corrupt_gradient,
        } => {
            if trials == 0 || nodes == 0 || classes < 2 {
                return Err(CliError::Config("need trials ≥ 1, nodes ≥ 1 and classes ≥ 2".into()));
            }
            commands::cmd_oracle_check(&SelfCheckConfig {
                trials,
                nodes,
                classes,
                seed,
                limit: OracleLimit(limit),
                corrupt_gradient,
            })
        }
        Command::Ablate(args) => commands::cmd_ablate(&args.resolve()?, quiet),
        Command::Synth {
            out,
            nodes,
            classes,
            edges_per_node,
            homophily,
            features,
            noise,
            seed,
            ratio_split,
        } => {
            let params = SyntheticParams {
                num_nodes: nodes,
                num_classes: classes,
                edges_per_node,
                homophily_target: homophily,
                feature_dim: features,
                feature_noise: noise,
                seed,
            };
            let ratio = match ratio_split.as_deref() {
                None => None,
                Some(&[a, b, c]) => Some([a, b, c]),
                Some(_) => return Err(CliError::Config("--ratio-split takes three fractions".into())),
            };
            commands::cmd_synth(&params, ratio, &out, quiet)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
