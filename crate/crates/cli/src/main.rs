use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use gpboost_cli::commands::{self, PredictOptions, TrainArgs};
use gpboost_cli::config::RunConfig;
use gpboost_cli::CliError;
use gpboost_core::vecchia::VecchiaPredictionMode;

#[derive(Parser)]
#[command(name = "gpboost", version, about = "Tree boosting with Gaussian process and grouped random effects")]
struct Cli {
    /// Increase log verbosity (-v debug, -vv trace); logs go to stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredMode {
    ObservedFirst,
    PredictionFirst,
    ObservedOnly,
}

impl From<PredMode> for VecchiaPredictionMode {
    fn from(m: PredMode) -> Self {
        match m {
            PredMode::ObservedFirst => VecchiaPredictionMode::ObservedFirst,
            PredMode::PredictionFirst => VecchiaPredictionMode::PredictionFirst,
            PredMode::ObservedOnly => VecchiaPredictionMode::ObservedOnlyConditioning,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV file and write it as JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Per-iteration NLL and parameter trajectory as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predictive means and variances for new rows.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Predict the latent mean function plus random effects (no noise).
        #[arg(long)]
        latent: bool,
        /// Append the mean and variance of the sum over all rows.
        #[arg(long)]
        sum: bool,
        /// Column with weights for --sum.
        #[arg(long, requires = "sum")]
        weights: Option<String>,
        /// Add a predictive quantile column; may be repeated.
        #[arg(long)]
        quantile: Vec<f64>,
        #[arg(long, value_enum)]
        vecchia_pred_mode: Option<PredMode>,
    },
    /// Write simulated replicates as CSV files.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the simulation study and write the metric table.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Include wall-clock fit times (not reproducible between runs).
        #[arg(long)]
        timings: bool,
    },
    /// Grid search; writes all grid results and a config with the best values.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        best: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    gpboost_cli::init_threads()?;
    match cli.command {
        Command::Train { config, data, model, log } => {
            commands::train(&TrainArgs { config, data, model, log })?;
        }
        Command::Predict {
            model,
            data,
            out,
            latent,
            sum,
            weights,
            quantile,
            vecchia_pred_mode,
        } => {
            let opts = PredictOptions {
                latent,
                sum,
                weights,
                quantiles: quantile,
                vecchia_pred_mode: vecchia_pred_mode.map(Into::into),
            };
            commands::predict(&model, &data, &out, &opts)?;
        }
        Command::Simulate { config, out_dir } => {
            let (cfg, _) = RunConfig::load(&config)?;
            let files = commands::simulate_to_dir(&cfg, &out_dir)?;
            log::info!("wrote {} files to {}", files.len(), out_dir.display());
        }
        Command::Evaluate { config, out, timings } => {
            let (cfg, _) = RunConfig::load(&config)?;
            print!("{}", commands::evaluate(&cfg, &out, timings)?);
        }
        Command::Tune { config, out, best } => {
            let (cfg, _) = RunConfig::load(&config)?;
            for (m, t) in commands::tune(&cfg, &out, &best)? {
                println!(
                    "{m:?}: learning_rate {} max_depth {} min_samples_leaf {} iterations {} score {:.6}",
                    t.learning_rate, t.tree.max_depth, t.tree.min_samples_leaf, t.iterations, t.score
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
