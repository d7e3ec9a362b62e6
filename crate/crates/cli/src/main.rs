//! `mint`: data generation, training, calibration, evaluation, drop-off
//! simulation, the session service and transcript replay.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use artifacts::ConfigError;

#[derive(Parser)]
#[command(
    name = "mint",
    version,
    about = "Interactive input acquisition for multi-modal classifiers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config file for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (MINT_THREADS takes precedence).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Task1,
    Task2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Inputs {
    /// One opening image; images and metadata are both acquired.
    Full,
    /// Every image up front; only metadata is acquired.
    MetaOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (schema.json, train/val/test.jsonl).
    GenData,
    /// Train the classifier, optionally with the image value model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Also fit the image value model on the validation split.
        #[arg(long)]
        fit_image_value: bool,
    },
    /// Choose thresholds on the validation split.
    Calibrate {
        #[arg(value_enum)]
        task: TaskArg,
        /// Bound on O2 for task1, required O1 for task2.
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Engine token supplying the metric and other options.
        #[arg(long, default_value = "js")]
        engine: String,
        /// `default` or `quantile:N` (N interior metadata thresholds).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_enum)]
        inputs: Option<Inputs>,
    },
    /// Run policies on a split and write curves, histograms and statistics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Policy tokens, e.g. `mint:js`, `global`, `random`, `msp:tau=0.8`.
        #[arg(long = "policy", required = true)]
        policies: Vec<String>,
        /// `from:<cal.json>` fills in thresholds for mint policies that set none.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Simulate user drop-off over transcripts (`--config` is the flow model).
    Dropoff {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        /// Transcripts of the same cases to compare against (e.g. all inputs).
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n_sims: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Serve interactive sessions over HTTP.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// Default engine token for new sessions.
        #[arg(long)]
        engine: Option<String>,
        #[arg(long)]
        thresholds: Option<String>,
        /// Directory with the built UI bundle.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        ttl_minutes: u64,
        /// Split offered to simulated sessions.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render transcripts as text.
    Replay {
        #[arg(long)]
        transcripts: PathBuf,
        /// Dataset directory, for field names and labels.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        case: Option<u64>,
    },
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match std::env::var("MINT_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            artifacts::config_error(format!("MINT_THREADS must be a number, got `{v}`"))
        })?),
        Err(_) => flag,
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| artifacts::config_error(e.to_string()))?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<mint_core::Error>() {
            return match err {
                mint_core::Error::Infeasible { .. } => 3,
                mint_core::Error::Config(_) | mint_core::Error::SchemaMismatch(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads(cli.common.threads)?;
    let c = &cli.common;
    match cli.command {
        Command::GenData => commands::gen_data(c),
        Command::Train {
            data,
            fit_image_value,
        } => commands::train(c, &data, fit_image_value),
        Command::Calibrate {
            task,
            epsilon,
            data,
            model,
            engine,
            grid,
            inputs,
        } => commands::calibrate(
            c,
            commands::CalibrateArgs {
                task,
                epsilon,
                data,
                model,
                engine,
                grid,
                inputs,
            },
        ),
        Command::Eval {
            data,
            model,
            policies,
            thresholds,
            split,
            k,
        } => commands::eval(
            c,
            &data,
            &model,
            &policies,
            thresholds.as_deref(),
            &split,
            k,
        ),
        Command::Dropoff {
            data,
            transcripts,
            against,
            n_sims,
            k,
        } => commands::dropoff(c, &data, &transcripts, against.as_deref(), n_sims, k),
        Command::Serve {
            data,
            model,
            addr,
            engine,
            thresholds,
            static_dir,
            ttl_minutes,
            split,
        } => commands::serve(
            c,
            &data,
            &model,
            addr,
            engine.as_deref(),
            thresholds.as_deref(),
            static_dir,
            ttl_minutes,
            &split,
        ),
        Command::Replay {
            transcripts,
            data,
            case,
        } => commands::replay(c, &transcripts, data.as_deref(), case),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
