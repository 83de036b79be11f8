//! `pi` — desk-scale perceptual-initialization pipeline.
//!
//! Subcommands: gen-data | train | eval | fit-scaling | report | compare.
//! Exit codes: 0 success, 1 usage error, 2 validation (config/input) error,
//! 3 runtime/io error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pi_core::train::Stage;
use pi_core::{Error, Result};

use pi_cli::commands::{self, Ctx};
use pi_cli::config::{load_config, AppConfig};

#[derive(Parser)]
#[command(
    name = "pi",
    version,
    about = "Perceptual-initialization pipeline: synthetic data, four training arms, zero-shot evaluation, scaling fits, and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; every key optional, defaults documented in README.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Freeze timestamps in manifests and metric logs (reproducibility runs).
    #[arg(long)]
    fixed_clock: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic triplet and image–caption datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's data seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's data dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one arm: stage1 | stage2 | baseline | posthoc.
    Train {
        #[command(flatten)]
        common: Common,
        /// stage1 | stage2 | baseline | posthoc
        #[arg(long)]
        stage: String,
        /// Overrides the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Checkpoint to start from (required for stage2 and posthoc).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the zero-shot probe suite.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Run id for the emitted records; defaults to the checkpoint stem.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Fit power-law scaling curves to metric CSVs.
    FitScaling {
        #[command(flatten)]
        common: Common,
        /// Metric CSV produced by train (repeatable).
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        /// Metric name to fit (repeatable).
        #[arg(long = "metric", default_value = commands::HEADLINE_METRIC)]
        metric_names: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Render the markdown results report from eval and fit CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Eval CSV (repeatable).
        #[arg(long = "eval", required = true)]
        eval: Vec<PathBuf>,
        /// Fits CSV (repeatable).
        #[arg(long = "fits")]
        fits: Vec<PathBuf>,
        /// Run id reported as "ours".
        #[arg(long)]
        ours: String,
        /// Run id reported as the baseline.
        #[arg(long)]
        base: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Full PI-vs-baseline pipeline for one seed: data, four arms, eval,
    /// fits, and report, under a single manifest.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

/// A command-line contract violation (exit code 1), as opposed to a
/// validation or runtime failure inside the library.
struct UsageError(String);

fn load(common: &Common) -> Result<AppConfig> {
    match &common.config {
        Some(path) => load_config(path),
        None => Ok(AppConfig::default()),
    }
}

fn dispatch(cli: Cli) -> std::result::Result<Result<()>, UsageError> {
    let run = match cli.command {
        Command::GenData { common, seed, out } => (|| {
            let mut config = load(&common)?;
            if let Some(s) = seed {
                config.data.seed = s;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&config.data.dir));
            let ctx = Ctx { seed: config.seed, config, out, fixed_clock: common.fixed_clock };
            commands::cmd_gen_data(&ctx)
        })(),
        Command::Train { common, stage, seed, out, init } => {
            let stage = Stage::parse(&stage).map_err(|e| UsageError(e.to_string()))?;
            match (stage, init.is_some()) {
                (Stage::Stage2 | Stage::Posthoc, false) => {
                    return Err(UsageError(format!(
                        "--stage {} requires --init <checkpoint>",
                        stage.as_str()
                    )));
                }
                (Stage::Stage1 | Stage::Baseline, true) => {
                    return Err(UsageError(format!(
                        "--stage {} starts from scratch and takes no --init",
                        stage.as_str()
                    )));
                }
                _ => {}
            }
            (|| {
                let mut config = load(&common)?;
                if let Some(s) = seed {
                    config.seed = s;
                }
                let ctx =
                    Ctx { seed: config.seed, config, out, fixed_clock: common.fixed_clock };
                commands::cmd_train(&ctx, stage, init.as_deref())
            })()
        }
        Command::Eval { common, init, out, run_id } => (|| {
            let config = load(&common)?;
            let ctx = Ctx { seed: config.seed, config, out, fixed_clock: common.fixed_clock };
            commands::cmd_eval(&ctx, &init, run_id.as_deref())
        })(),
        Command::FitScaling { common, metrics, metric_names, out } => (|| {
            let config = load(&common)?;
            let ctx = Ctx { seed: config.seed, config, out, fixed_clock: common.fixed_clock };
            commands::cmd_fit_scaling(&ctx, &metrics, &metric_names)
        })(),
        Command::Report { common, eval, fits, ours, base, out } => (|| {
            let config = load(&common)?;
            let ctx = Ctx { seed: config.seed, config, out, fixed_clock: common.fixed_clock };
            commands::cmd_report(&ctx, &eval, &fits, &ours, &base)
        })(),
        Command::Compare { common, seed, out } => (|| {
            let mut config = load(&common)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let ctx = Ctx { seed: config.seed, config, out, fixed_clock: common.fixed_clock };
            commands::cmd_compare(&ctx)
        })(),
    };
    Ok(run)
}

/// Validation failures (bad configs or inputs) exit 2; runtime, io, format,
/// and internal-contract failures exit 3.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful exits; real parse errors are
            // usage errors (clap's default exit 2 is remapped to 1).
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };

    match dispatch(cli) {
        Err(UsageError(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
