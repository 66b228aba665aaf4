use std::path::PathBuf;

use anyhow::Result;
use serde::Serialize;
use tcd_core::config::RawConfig;
use tcd_core::decode::{decode_greedy, decode_mature_greedy, GenerationResult, Termination};
use tcd_core::model::DecodeContext;
use tcd_core::select::{main_pass_image, run_watermark_prepass};

use super::{open_dataset, open_sample, out_dir};
use crate::args::{DecodeFlags, WatermarkFlags};
use crate::output::{ensure_dir, jsonl, stdout, write_text};
use crate::Ctx;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Trace archive directory.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    sample: String,
    /// Plain greedy decoding of the mature layer instead.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[command(flatten)]
    watermark: WatermarkFlags,
}

#[derive(Serialize)]
struct StepLine<'a> {
    step: usize,
    l_a: usize,
    l_v: usize,
    plausible: usize,
    token: u32,
    text: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    sample: &'a str,
    visual_layer: usize,
    tokens: usize,
    termination: Option<Termination>,
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
    let s = open_sample(&ds, &args.sample, &cfg.prompt_suffix)?;
    let model = s.model.as_ref();
    let mut decode = cfg.decode_for(model.vocab())?;
    if let Some(h) = s.horizon {
        decode.max_tokens = decode.max_tokens.min(h);
    }
    let prepass = run_watermark_prepass(model, &s.image, &cfg.watermark, decode.gain_mode)?;
    let image = main_pass_image(&s.image, &cfg.watermark, cfg.watermark_main_pass)?;
    let dctx = DecodeContext::new(image, s.question.clone());
    let result: GenerationResult = if args.baseline {
        decode_mature_greedy(model, &dctx, &decode)?
    } else {
        decode_greedy(model, &dctx, prepass.visual.layer, &decode)?
    };

    let vocab = model.vocab();
    let words = vocab.decode(&result.tokens);
    let lines = jsonl(result.steps.iter().zip(&words).map(|(st, text)| StepLine {
        step: st.step,
        l_a: st.selection.amateur,
        l_v: st.selection.visual,
        plausible: st.plausible,
        token: st.token,
        text,
        score: st.fused_score,
    }))?;
    let summary = serde_json::to_string(&Summary {
        sample: &args.sample,
        visual_layer: prepass.visual.layer,
        tokens: result.tokens.len(),
        termination: result.termination,
    })?;
    let text = format!("{}\n", words.join(" "));
    if let Some(dir) = out_dir(args.out, cfg.out.as_deref()) {
        ensure_dir(&dir)?;
        write_text(&dir.join("decode.txt"), &text)?;
        write_text(&dir.join("decode.jsonl"), &lines)?;
    }
    log::info!("{summary}");
    stdout(&format!("{text}{lines}"))
}
