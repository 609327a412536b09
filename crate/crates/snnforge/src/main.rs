use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snnforge::commands::{self, Command, Context};
use snnforge::config::{env_overrides, ExperimentConfig};
use snnforge::CliError;

/// Convert, simulate and fine-tune spiking U-Nets.
#[derive(Parser, Debug)]
#[command(name = "snnforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value`, applied after environment overrides. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Generate a synthetic dataset (shapes-seg or noisy-images).
    GenSynthetic(Common),
    /// Train the reference network.
    Train(Common),
    /// Collect activation percentiles for normalisation.
    Stats(Common),
    /// Convert the trained network into a spiking one.
    Convert(Common),
    /// Simulate the converted network and report rate statistics.
    Simulate(Common),
    /// Fine-tune the converted network on accumulated spike flows.
    Finetune(Common),
    /// Compare models on the test split.
    Eval(Common),
    /// Estimate operation counts and energy.
    Energy(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cmd, common) = match cli.command {
        Sub::GenSynthetic(c) => (Some(Command::GenSynthetic), c),
        Sub::Train(c) => (Some(Command::Train), c),
        Sub::Stats(c) => (Some(Command::Stats), c),
        Sub::Convert(c) => (Some(Command::Convert), c),
        Sub::Simulate(c) => (Some(Command::Simulate), c),
        Sub::Finetune(c) => (Some(Command::Finetune), c),
        Sub::Eval(c) => (Some(Command::Eval), c),
        Sub::Energy(c) => (Some(Command::Energy), c),
        Sub::Pipeline(c) => (None, c),
    };
    let env = env_overrides(std::env::vars());
    let cfg = ExperimentConfig::load(&common.config, &env, &common.overrides)?;
    let out_dir = common
        .out_dir
        .or_else(|| cfg.paths.out_dir.clone())
        .ok_or_else(|| CliError::Config(vec!["no output directory: pass --out-dir or set paths.out_dir".into()]))?;
    let ctx = Context::new(cfg, out_dir);
    let summaries = match cmd {
        Some(c) => vec![commands::run(c, &ctx)?],
        None => commands::pipeline(&ctx)?,
    };
    for s in summaries {
        println!("{}: {}", s.command, serde_json::to_string(&s.metrics).expect("serialisable"));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
