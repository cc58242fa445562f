mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand, ValueEnum};
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

/// One-shot skeleton action recognition from signal-level images.
#[derive(Debug, Parser)]
#[command(name = "sigshot", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepParam {
    Alpha,
    Resolution,
    Lambda,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StreamChoice {
    Primary,
    Secondary,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic NTU-format dataset plus index.json.
    Synth {
        /// Manifest JSON; without it a random manifest is drawn from --seed.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0.1)]
        speed_jitter: f64,
    },
    /// Render skeleton files to PPM signal images.
    Transform {
        /// A skeleton file or a directory of *.skeleton files.
        input: PathBuf,
        #[arg(long, default_value = "position")]
        feature: sigshot::sig::ImageKind,
        /// Output size as HxW, e.g. 32x32.
        #[arg(long, value_parser = commands::parse_resolution)]
        res: Option<[usize; 2]>,
    },
    /// Train a model; writes history.csv and checkpoints.
    Train,
    /// Evaluate a checkpoint on the test classes; writes eval.json.
    Eval {
        /// Defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and evaluate once per value; writes sweep_<param>.csv.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values; resolutions are square side lengths.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Export attention, DTW table and warping path for one pair.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, value_enum, default_value = "primary")]
        stream: StreamChoice,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = cli.out.clone();
    match cli.command {
        Command::Synth {
            manifest,
            classes,
            instances,
            frames,
            noise,
            speed_jitter,
        } => {
            let out = out.ok_or_else(|| CliError::Usage("synth needs --out".into()))?;
            let manifest = match manifest {
                Some(p) => commands::read_manifest(&p)?,
                None => sigshot::skeleton::SynthManifest::random(
                    classes,
                    instances,
                    frames,
                    noise,
                    speed_jitter,
                    sigshot::rng::sub_seed(cli.seed.unwrap_or(0), "data"),
                ),
            };
            commands::synth(&manifest, &out)
        }
        Command::Transform { input, feature, res } => {
            let out = out.ok_or_else(|| CliError::Usage("transform needs --out".into()))?;
            commands::transform(&input, feature, res, &out)
        }
        Command::Train => {
            let run = commands::Run::load(cli.config.as_deref(), cli.seed, out)?;
            commands::train(&run)
        }
        Command::Eval { checkpoint, episodes } => {
            let run = commands::Run::load(cli.config.as_deref(), cli.seed, out)?;
            let ckpt = checkpoint.unwrap_or_else(|| run.out.join("checkpoint.json"));
            commands::eval(&run, &ckpt, episodes)
        }
        Command::Sweep {
            param,
            values,
            episodes,
        } => {
            let run = commands::Run::load(cli.config.as_deref(), cli.seed, out)?;
            let param = match param {
                SweepParam::Alpha => commands::Sweep::Alpha,
                SweepParam::Resolution => commands::Sweep::Resolution,
                SweepParam::Lambda => commands::Sweep::Lambda,
            };
            commands::sweep(&run, param, &values, episodes)
        }
        Command::Inspect {
            checkpoint,
            support,
            query,
            stream,
        } => {
            let out = out.ok_or_else(|| CliError::Usage("inspect needs --out".into()))?;
            commands::inspect(&checkpoint, &support, &query, matches!(stream, StreamChoice::Secondary), &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sigshot: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
