mod args;
mod cmd;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tcd_core::config::{EngineConfig, RawConfig};

/// Tri-layer contrastive decoding with a watermark-probed visual layer.
#[derive(Debug, Parser)]
#[command(name = "tcd", version, about)]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Suppress timestamps in log output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for suite evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity; repeatable.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Composite the probe watermark onto an image.
    Watermark(cmd::watermark::Args),
    /// Generate synthetic datasets and trace archives.
    #[command(subcommand)]
    Synth(cmd::synth::SynthCommand),
    /// Report the visual and amateur layers chosen for samples.
    Select(cmd::select::Args),
    /// Decode one sample and print per-step diagnostics.
    Decode(cmd::decode::Args),
    /// Run a suite and report hallucination metrics.
    Eval(cmd::eval::Args),
    /// Trace archive utilities.
    #[command(subcommand)]
    Trace(cmd::trace::TraceCommand),
    /// Same as `trace validate`.
    TraceValidate(cmd::trace::ValidateArgs),
}

/// Shared state handed to every subcommand.
pub struct Ctx {
    config_file: Option<PathBuf>,
    jobs: Option<usize>,
}

impl Ctx {
    /// Resolves the engine config from file, the given flags and the environment.
    pub fn engine(&self, mut flags: RawConfig) -> Result<EngineConfig> {
        if self.jobs.is_some() {
            flags.jobs = self.jobs;
        }
        Ok(EngineConfig::load(self.config_file.as_deref(), flags)?)
    }
}

/// A command-line mistake detected outside the engine.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<tcd_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<tcd_core::decode::DecodeError>() {
            return if e.source.is_validation() { 1 } else { 2 };
        }
        if cause.is::<Usage>() {
            return 1;
        }
    }
    2
}

fn init_logging(verbose: u8, deterministic: bool) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let mut builder = env_logger::Builder::new();
    builder.filter_level(level).parse_default_env();
    if deterministic {
        builder.format_timestamp(None);
    }
    let _ = builder.try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose, cli.deterministic);
    let ctx = Ctx {
        config_file: cli.config,
        jobs: cli.jobs,
    };
    let result = match cli.command {
        Command::Watermark(a) => cmd::watermark::run(&ctx, a),
        Command::Synth(c) => cmd::synth::run(&ctx, c),
        Command::Select(a) => cmd::select::run(&ctx, a),
        Command::Decode(a) => cmd::decode::run(&ctx, a),
        Command::Eval(a) => cmd::eval::run(&ctx, a),
        Command::Trace(c) => cmd::trace::run(c),
        Command::TraceValidate(a) => cmd::trace::validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
