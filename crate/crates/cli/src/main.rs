//! `flowvid`: synthetic data, flow, conditions, training and
//! edit-propagate video generation from the command line.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowvid_core::Error;

use config::{Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "flowvid", version, about = "Flow-guided video editing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural clip with ground-truth flow, masks and depth.
    Synth(Flags),
    /// Estimate first-frame flows and occlusion masks.
    Flow(Flags),
    /// Warp the (edited) first frame onto every frame.
    Warp(Flags),
    /// Extract canny or depth condition images.
    Conditions(Flags),
    /// Train the denoiser on one or more clips.
    Train(Flags),
    /// DDIM-invert the first batch of key frames.
    Invert(Flags),
    /// Edit the first frame and propagate it over the clip.
    Generate(Flags),
    /// Temporal consistency and fidelity against a reference clip.
    Metrics(Flags),
    /// Time each stage of a generation run.
    Bench(Flags),
}

impl Command {
    fn parts(&self) -> (&'static str, &Flags) {
        match self {
            Command::Synth(f) => ("synth", f),
            Command::Flow(f) => ("flow", f),
            Command::Warp(f) => ("warp", f),
            Command::Conditions(f) => ("conditions", f),
            Command::Train(f) => ("train", f),
            Command::Invert(f) => ("invert", f),
            Command::Generate(f) => ("generate", f),
            Command::Metrics(f) => ("metrics", f),
            Command::Bench(f) => ("bench", f),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Dimension(_) | Error::Shape(_) | Error::Contract(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn run(command: &Command) -> flowvid_core::Result<()> {
    let (name, flags) = command.parts();
    let cfg = RunConfig::resolve(name, flags)?;
    log::debug!("resolved config:\n{}", cfg.to_kv());
    match name {
        "synth" => commands::synth(&cfg),
        "flow" => commands::flow(&cfg),
        "warp" => commands::warp(&cfg),
        "conditions" => commands::conditions_cmd(&cfg),
        "train" => commands::train(&cfg),
        "invert" => commands::invert(&cfg),
        "generate" => commands::generate(&cfg),
        "metrics" => commands::metrics(&cfg),
        "bench" => commands::bench(&cfg),
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
