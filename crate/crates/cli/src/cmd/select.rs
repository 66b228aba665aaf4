use std::path::PathBuf;

use anyhow::Result;
use serde_json::json;
use tcd_core::config::RawConfig;
use tcd_core::eval::{layer_heatmap, select_layers};
use tcd_core::model::DecodeContext;
use tcd_core::select::{run_watermark_prepass, select_amateur_layer, CandidateSet};

use super::{open_dataset, open_sample, out_dir};
use crate::args::{DecodeFlags, WatermarkFlags};
use crate::output::{csv_string, ensure_dir, json_pretty, jsonl, stdout, write_text};
use crate::Ctx;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Trace archive directory.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Show gains and divergences for a single sample.
    #[arg(long)]
    sample: Option<String>,
    /// Print a per-layer selection-frequency CSV instead of per-sample lines.
    #[arg(long)]
    emit_heatmap: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[command(flatten)]
    watermark: WatermarkFlags,
}

pub fn run(ctx: &Ctx, args: Args) -> Result<()> {
    let mut raw = RawConfig::default();
    args.decode.apply(&mut raw);
    args.watermark.apply(&mut raw);
    let cfg = ctx.engine(raw)?;
    let ds = open_dataset(
        args.trace.as_deref(),
        args.dataset.as_deref(),
        cfg.trace_dir.as_deref(),
    )?;
    let out = out_dir(args.out, cfg.out.as_deref());

    if let Some(id) = &args.sample {
        let s = open_sample(&ds, id, &cfg.prompt_suffix)?;
        let prepass = run_watermark_prepass(
            s.model.as_ref(),
            &s.image,
            &cfg.watermark,
            cfg.decode.gain_mode,
        )?;
        let stack = s
            .model
            .step(&DecodeContext::new(s.image.clone(), s.question))?;
        let candidates = CandidateSet::below_mature(stack.num_layers(), cfg.decode.candidate_k)?;
        let amateur = select_amateur_layer(&stack, &candidates)?;
        let detail = json!({
            "id": id,
            "gain": cfg.decode.gain_mode.to_string(),
            "visual": prepass.visual,
            "probe_position": prepass.position,
            "amateur": amateur,
        });
        let text = json_pretty(&detail)?;
        if let Some(dir) = &out {
            ensure_dir(dir)?;
            write_text(&dir.join("selection.json"), &text)?;
        }
        return stdout(&text);
    }

    let (choices, skipped) = select_layers(&ds, &cfg)?;
    for id in &skipped {
        log::warn!("skipped {id}: not in the trace archive");
    }
    let lines = jsonl(&choices)?;
    let heatmap = csv_string(layer_heatmap(&choices))?;
    if let Some(dir) = &out {
        ensure_dir(dir)?;
        write_text(&dir.join("selections.jsonl"), &lines)?;
        write_text(&dir.join("heatmap.csv"), &heatmap)?;
    }
    stdout(if args.emit_heatmap { &heatmap } else { &lines })
}
