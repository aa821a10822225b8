use std::path::PathBuf;
use std::process::ExitCode;

use attrivis::deconv::MaskMode;
use attrivis::Result;
use attrivis_cli::{pipeline, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attrivis", version, about = "Attribute prediction, significance testing and deconvnet feature maps")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Attribute to process; repeat for several. Overrides the config list.
    #[arg(long = "attribute", global = true)]
    attributes: Vec<String>,
    /// Output directory. Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed. Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    All,
    Full,
    Positive,
    Negative,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face dataset with known feature regions.
    Synth,
    /// Crop and resize images, binarize ratings and assign folds.
    Preprocess,
    /// Train one CNN and one linear SVM per fold.
    Train,
    /// Assemble out-of-fold predictions and write results.csv.
    Evaluate,
    /// Test the pooled scores against chance and human raters.
    Stats,
    /// Write mean deconvolution feature images and channel energies.
    Visualize {
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
    },
    /// Run every stage in order.
    RunAll,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !cli.attributes.is_empty() {
        cfg.attributes = cli.attributes.clone();
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match cli.command {
        Command::Synth => {
            pipeline::synth(&cfg)?;
        }
        Command::Preprocess => pipeline::preprocess(&cfg)?,
        Command::Train => pipeline::train(&cfg)?,
        Command::Evaluate => {
            pipeline::evaluate(&cfg)?;
        }
        Command::Stats => {
            pipeline::stats(&cfg)?;
        }
        Command::Visualize { mode } => {
            let modes = match mode {
                ModeArg::All => MaskMode::ALL.to_vec(),
                ModeArg::Full => vec![MaskMode::Full],
                ModeArg::Positive => vec![MaskMode::PositiveOnly],
                ModeArg::Negative => vec![MaskMode::NegativeOnly],
            };
            pipeline::visualize(&cfg, &modes)?;
        }
        Command::RunAll => pipeline::run_all(&cfg)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
