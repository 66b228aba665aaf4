use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Subcommand;
use tcd_core::config::RawConfig;
use tcd_core::eval::synth::{as_trace_dataset, record_trace, synthetic_suite, SynthSuiteSpec};
use tcd_core::eval::{Dataset, SuiteKind};
use tcd_core::trace::write_trace;

use crate::output::{ensure_dir, stdout, write_text};
use crate::Ctx;

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write a seeded grounded-versus-biased dataset manifest.
    Suite(SuiteArgs),
    /// Record a synthetic dataset as a trace archive.
    Trace(TraceArgs),
}

#[derive(Debug, clap::Args)]
pub struct SuiteArgs {
    #[arg(long, default_value = "pope")]
    suite: SuiteKind,
    /// Defaults to the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    layers: usize,
    /// Fraction of samples whose deep layers carry a misleading prior.
    #[arg(long, default_value_t = 0.5)]
    biased_fraction: f64,
    #[arg(long, default_value_t = 0.25)]
    noise_scale: f32,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TraceArgs {
    /// Synthetic dataset manifest to record.
    #[arg(long)]
    dataset: PathBuf,
    /// Decoding steps recorded per sample.
    #[arg(long, default_value_t = 4)]
    steps: usize,
    /// Archive directory; a replaying `dataset.json` is written next to the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    model_name: String,
}

pub fn run(ctx: &Ctx, cmd: SynthCommand) -> Result<()> {
    match cmd {
        SynthCommand::Suite(a) => suite(ctx, a),
        SynthCommand::Trace(a) => trace(ctx, a),
    }
}

fn suite(ctx: &Ctx, args: SuiteArgs) -> Result<()> {
    let cfg = ctx.engine(RawConfig {
        seed: args.seed,
        ..RawConfig::default()
    })?;
    let spec = SynthSuiteSpec {
        suite: args.suite,
        seed: cfg.seed,
        samples: args.samples,
        num_layers: args.layers,
        biased_fraction: args.biased_fraction,
        noise_scale: args.noise_scale,
    };
    let mut text = synthetic_suite(&spec)?.to_json()?;
    text.push('\n');
    match args.output {
        Some(path) => write_text(&path, &text),
        None => stdout(&text),
    }
}

fn trace(ctx: &Ctx, args: TraceArgs) -> Result<()> {
    let cfg = ctx.engine(RawConfig::default())?;
    let ds = Dataset::load(&args.dataset)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let archive = record_trace(&ds, &cfg.watermark, args.steps, &args.model_name)?;
    ensure_dir(&args.out)?;
    write_trace(&archive, &args.out)
        .with_context(|| format!("writing trace {}", args.out.display()))?;
    let mut replay = as_trace_dataset(&ds, ".").to_json()?;
    replay.push('\n');
    write_text(&args.out.join("dataset.json"), &replay)
}
