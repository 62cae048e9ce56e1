use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semvo::config::RunConfig;
use semvo::pipeline::{self, PipelineError};

/// Semantic-element visual odometry: simulate, map, localize and evaluate.
#[derive(Debug, Parser)]
#[command(name = "semvo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world plus mapping and drive passes.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the benchmark library from the mapping pass of a dataset.
    BuildLibrary {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Library file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize the drive of a dataset against a library.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        library: PathBuf,
        /// Ignore ground-truth ids in detections and track boxes instead.
        #[arg(long)]
        strip_ids: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a localization run against the simulated ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory of `localize`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also score the raw INS trajectory and elements.
        #[arg(long)]
        before_after: bool,
    },
    /// Print the metric table of an evaluation directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate { common, out } => {
            let m = pipeline::cmd_simulate(&load(&common)?, &out)?;
            println!("{}", m.config_hash);
        }
        Command::BuildLibrary { common, dataset, out } => {
            let n = pipeline::cmd_build_library(&dataset, &load(&common)?, &out)?;
            println!("{n} library frames");
        }
        Command::Localize {
            common,
            dataset,
            library,
            strip_ids,
            out,
        } => {
            let mut cfg = load(&common)?;
            cfg.localize.strip_ids |= strip_ids;
            let r = pipeline::cmd_localize(&dataset, &library, &cfg, &out)?;
            println!("{} frames, {} elements", r.corrected.len(), r.reported.len());
        }
        Command::Evaluate {
            common,
            dataset,
            run,
            out,
            before_after,
        } => {
            pipeline::cmd_evaluate(&dataset, &run, &load(&common)?, &out, before_after)?;
            print!("{}", pipeline::cmd_report(&out)?);
        }
        Command::Report { run } => print!("{}", pipeline::cmd_report(Path::new(&run))?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEMVO_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
