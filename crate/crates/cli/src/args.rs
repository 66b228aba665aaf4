use std::path::PathBuf;

use clap::Args;
use tcd_core::config::RawConfig;
use tcd_core::decode::{AmateurMode, FusionMode};
use tcd_core::prob::Temperature;
use tcd_core::select::GainMode;
use tcd_core::watermark::BlendMode;

#[derive(Debug, Clone, Default, Args)]
pub struct DecodeFlags {
    /// Weight of the visual layer.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Plausibility threshold relative to the mature maximum.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = parse_tau)]
    pub tau: Option<Temperature>,
    /// Gain used in the visual-layer search: change or log.
    #[arg(long)]
    pub gain: Option<GainMode>,
    /// Number of amateur candidate layers below the mature layer.
    #[arg(long)]
    pub k: Option<usize>,
    /// tri or interp.
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    /// per-step or static.
    #[arg(long)]
    pub amateur_mode: Option<AmateurMode>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Token text that ends generation; repeatable.
    #[arg(long = "stop-token")]
    pub stop_tokens: Vec<String>,
    /// Sample from the fused distribution instead of taking the argmax.
    #[arg(long)]
    pub stochastic: bool,
    /// Log-softmax each layer row before fusing.
    #[arg(long)]
    pub log_softmax: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct WatermarkFlags {
    /// Watermark opacity.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Anchor of the watermark center as fractions of width and height, e.g. 0.9,0.9.
    #[arg(long, value_parser = parse_anchor)]
    pub anchor: Option<(f64, f64)>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// additive or convex.
    #[arg(long, value_parser = parse_blend)]
    pub blend: Option<BlendMode>,
    /// Watermark image replacing the bundled CAPTCHA.
    #[arg(long = "wm", visible_alias = "watermark-image")]
    pub watermark_image: Option<PathBuf>,
    /// Keep the watermark in the image while decoding, not only for layer selection.
    #[arg(long)]
    pub watermark_main_pass: bool,
    #[arg(long)]
    pub probe_question: Option<String>,
    #[arg(long)]
    pub expected_answer: Option<String>,
}

impl DecodeFlags {
    pub fn apply(&self, raw: &mut RawConfig) {
        raw.lambda = self.lambda;
        raw.beta = self.beta;
        raw.tau = self.tau;
        raw.gain = self.gain;
        raw.k = self.k;
        raw.fusion = self.fusion;
        raw.amateur_mode = self.amateur_mode;
        raw.max_tokens = self.max_tokens;
        if !self.stop_tokens.is_empty() {
            raw.stop_tokens = Some(self.stop_tokens.clone());
        }
        raw.stochastic = self.stochastic.then_some(true);
        raw.log_softmax = self.log_softmax.then_some(true);
        raw.seed = self.seed;
    }
}

impl WatermarkFlags {
    pub fn apply(&self, raw: &mut RawConfig) {
        raw.alpha = self.alpha;
        raw.anchor = self.anchor;
        raw.scale = self.scale;
        raw.blend = self.blend;
        raw.watermark_image.clone_from(&self.watermark_image);
        raw.probe_question.clone_from(&self.probe_question);
        raw.expected_answer.clone_from(&self.expected_answer);
        raw.watermark_main_pass = self.watermark_main_pass.then_some(true);
    }
}

fn parse_tau(s: &str) -> Result<Temperature, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    Temperature::new(v).map_err(|e| e.to_string())
}

fn parse_anchor(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s
        .split_once(',')
        .ok_or("expected two comma-separated fractions")?;
    let x = x.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let y = y.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((x, y))
}

fn parse_blend(s: &str) -> Result<BlendMode, String> {
    match s {
        "additive" => Ok(BlendMode::Additive),
        "convex" => Ok(BlendMode::Convex),
        other => Err(format!("unknown blend mode {other:?}")),
    }
}
