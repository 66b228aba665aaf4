use std::path::PathBuf;

use anyhow::{Context, Result};
use serde_json::json;
use tcd_core::config::RawConfig;
use tcd_core::image::{load_image, save_image};
use tcd_core::watermark::embed_watermark_placed;

use crate::args::WatermarkFlags;
use crate::output::stdout;
use crate::Ctx;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Base image (PNG or binary PPM).
    #[arg(long = "in", visible_alias = "input")]
    input: PathBuf,
    /// Where to write the composited image; the extension picks the format.
    #[arg(long = "out", visible_alias = "output")]
    output: PathBuf,
    #[command(flatten)]
    watermark: WatermarkFlags,
}

pub fn run(ctx: &Ctx, args: Args) -> Result<()> {
    let mut raw = RawConfig::default();
    args.watermark.apply(&mut raw);
    let cfg = ctx.engine(raw)?;
    let base =
        load_image(&args.input).with_context(|| format!("loading {}", args.input.display()))?;
    let (img, p) = embed_watermark_placed(&base, &cfg.watermark)?;
    save_image(&img, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    let line = json!({
        "center": [p.center.0, p.center.1],
        "size": [p.size.0, p.size.1],
        "rect": [p.rect.x0, p.rect.y0, p.rect.x1, p.rect.y1],
        "shrink_iterations": p.shrink_iterations,
    });
    stdout(&format!("{line}\n"))
}
