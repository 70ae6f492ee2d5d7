//! `advloop` — drive the adversarial attack loop from the shell.
//!
//! Subcommands: `gen-data`, `train`, `attack`, `evaluate`, `ablate`.
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use advloop_core::attacks::AttackMethod;
use advloop_core::orchestrator::AblationMode;
use advloop_core::Error;

use advloop_cli::commands::{self, AttackArgs};
use advloop_cli::config::FullConfig;

#[derive(Parser)]
#[command(name = "advloop", version, about = "Closed-loop adversarial attack engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    UniformAveraging,
    NoInfo,
    NoInfoNoConductor,
}

impl From<ModeArg> for AblationMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::Full => AblationMode::Full,
            ModeArg::UniformAveraging => AblationMode::UniformAveraging,
            ModeArg::NoInfo => AblationMode::NoInfo,
            ModeArg::NoInfoNoConductor => AblationMode::NoInfoNoConductor,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Cw,
    Jsma,
    Sta,
}

impl From<MethodArg> for AttackMethod {
    fn from(value: MethodArg) -> Self {
        match value {
            MethodArg::Cw => AttackMethod::Cw,
            MethodArg::Jsma => AttackMethod::Jsma,
            MethodArg::Sta => AttackMethod::Sta,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (train/ and holdout/ directories).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the two surrogates and the blind model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attack a directory (or single image), writing adversarial images and
    /// reports.
    Attack {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        models_dir: PathBuf,
        /// Image file or dataset directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Loop configuration (the ablation rows).
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
        /// Lock the blend onto a single generator.
        #[arg(long, value_enum)]
        single_method: Option<MethodArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the blind query budget.
        #[arg(long)]
        max_queries: Option<u64>,
        /// Use the remote chat-completions backend for the info and advisor
        /// agents (reads ADVLOOP_API_BASE / ADVLOOP_API_KEY / ADVLOOP_MODEL).
        #[arg(long)]
        remote: bool,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Recompute metrics offline from originals and adversarial images.
    Evaluate {
        #[arg(long)]
        models_dir: PathBuf,
        #[arg(long)]
        originals: PathBuf,
        #[arg(long)]
        adversarial: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run all four loop configurations across seeds and tabulate them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        models_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        remote: bool,
        #[arg(long, short)]
        verbose: bool,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<FullConfig, Error> {
    match path {
        Some(p) => FullConfig::load(p),
        None => Ok(FullConfig::default()),
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData {
            config,
            out_dir,
            seed,
        } => commands::gen_data(&load_config(&config)?, &out_dir, seed),
        Command::Train {
            config,
            data_dir,
            out_dir,
            seed,
        } => commands::train_models(&load_config(&config)?, &data_dir, &out_dir, seed),
        Command::Attack {
            config,
            models_dir,
            input,
            out_dir,
            mode,
            single_method,
            seed,
            max_queries,
            remote,
            verbose,
        } => {
            let config = load_config(&config)?;
            commands::attack(&AttackArgs {
                config: &config,
                models_dir: &models_dir,
                input: &input,
                out_dir: &out_dir,
                ablation: mode.into(),
                single_method: single_method.map(Into::into),
                seed,
                max_queries,
                remote,
                verbose,
            })
            .map(|_| ())
        }
        Command::Evaluate {
            models_dir,
            originals,
            adversarial,
            out_dir,
        } => commands::evaluate(&models_dir, &originals, &adversarial, &out_dir),
        Command::Ablate {
            config,
            models_dir,
            input,
            out_dir,
            seeds,
            remote,
            verbose,
        } => {
            let config = load_config(&config)?;
            commands::ablate(&config, &models_dir, &input, &out_dir, &seeds, remote, verbose)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Io(_) | Error::Image(_) | Error::ModelFile(_) => 3,
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}
