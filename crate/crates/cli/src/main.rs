//! `wavediff`: ingest minute bars, encode them as wavelet images, train a
//! diffusion model, sample, decode and evaluate stylized facts.

mod commands;
mod config;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Codec, Overrides, PipelineConfig, Preset};
use workspace::Workspace;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or configuration (exit code 2).
    #[error("{0}")]
    Usage(String),
    /// Failure while running a stage (exit code 1).
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] wavediff::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Core(wavediff::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wavediff", version, about = "Wavelet-imaged diffusion for intraday market data")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file; missing keys take preset defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global RNG seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true, value_enum)]
    codec: Option<Codec>,
    /// Directory holding every artifact of a run.
    #[arg(long, global = true, env = "WAVEDIFF_WORKSPACE", default_value = "workspace", value_name = "DIR")]
    workspace: PathBuf,
    /// Proceed despite configuration lineage mismatches; restart training
    /// instead of resuming.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a minute-bar CSV and keep complete trading days.
    Ingest {
        /// Overrides `paths.input` from the config.
        input: Option<PathBuf>,
    },
    /// Generate reference data from the GARCH simulator.
    Simulate,
    /// Fit the normalization manifest and encode every day as an image.
    Prepare,
    /// Train (or resume training) the diffusion model.
    Train {
        /// Stop after this many epochs in this invocation; a later run resumes.
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
    },
    /// Sample images and decode them into a synthetic day set.
    Sample {
        /// Overrides `sample.count`.
        #[arg(long, short = 'n')]
        count: Option<usize>,
    },
    /// Decode an image container into a synthetic day set.
    Decode {
        /// Defaults to the sampled images in the workspace.
        #[arg(long, value_name = "PATH")]
        images: Option<PathBuf>,
    },
    /// Compare real and synthetic day sets; writes JSON, CSV and SVG.
    Evaluate {
        /// Skip the SVG charts.
        #[arg(long)]
        no_svg: bool,
    },
    /// Print the verdicts of the last evaluation.
    Report,
    /// Inspect configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print the preset defaults as TOML.
    PrintDefaults,
    /// Print the effective configuration and its lineage digest.
    Show,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let ov = Overrides {
        seed: g.seed,
        preset: g.preset,
        codec: g.codec,
    };
    if let Command::Config {
        action: ConfigAction::PrintDefaults,
    } = cli.command
    {
        let mut d = PipelineConfig::defaults(g.preset.unwrap_or(Preset::Desk));
        if let Some(seed) = g.seed {
            d.seed = seed;
        }
        print!("{}", d.to_toml()?);
        return Ok(());
    }
    let cfg = PipelineConfig::load(g.config.as_deref(), &ov)?;
    let ws = Workspace::new(&g.workspace);
    let ctx = commands::Context {
        digest: cfg.digest(),
        cfg,
        ws,
        force: g.force,
    };
    match cli.command {
        Command::Config { .. } => {
            println!("# config digest {}", ctx.digest);
            print!("{}", ctx.cfg.to_toml()?);
            Ok(())
        }
        Command::Report => commands::report(&ctx),
        cmd => {
            let _lock = ctx.ws.lock()?;
            match cmd {
                Command::Ingest { input } => commands::ingest(&ctx, input),
                Command::Simulate => commands::simulate(&ctx),
                Command::Prepare => commands::prepare(&ctx),
                Command::Train { stop_after } => commands::train(&ctx, stop_after),
                Command::Sample { count } => commands::sample(&ctx, count),
                Command::Decode { images } => commands::decode(&ctx, images),
                Command::Evaluate { no_svg } => commands::evaluate(&ctx, !no_svg),
                Command::Report | Command::Config { .. } => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
