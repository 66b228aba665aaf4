use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Subcommand;
use tcd_core::trace::validate_trace;

use crate::output::{json_pretty, stdout};

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Check magic, version, shapes and checksums of an archive.
    Validate(ValidateArgs),
}

#[derive(Debug, clap::Args)]
pub struct ValidateArgs {
    dir: PathBuf,
    /// Also fail when the mature-row argmax disagrees with a recorded greedy token.
    #[arg(long)]
    strict: bool,
}

pub fn run(cmd: TraceCommand) -> Result<()> {
    match cmd {
        TraceCommand::Validate(a) => validate(a),
    }
}

pub fn validate(args: ValidateArgs) -> Result<()> {
    let report =
        validate_trace(&args.dir).with_context(|| format!("validating {}", args.dir.display()))?;
    stdout(&json_pretty(&report)?)?;
    if args.strict && report.greedy_mismatches > 0 {
        return Err(tcd_core::Error::Trace(format!(
            "{} recorded greedy tokens disagree with the mature layer",
            report.greedy_mismatches
        ))
        .into());
    }
    Ok(())
}
