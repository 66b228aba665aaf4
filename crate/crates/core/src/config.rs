//! Engine configuration: a flat JSON object whose keys mirror the CLI flags.
//!
//! Values are layered as defaults < file < flags < `TCD_SEED`. Every error
//! names the key that caused it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::decode::{AmateurMode, DecodeConfig, FusionMode, TokenChoice};
use crate::error::{Error, Result};
use crate::image::load_image;
use crate::model::Vocab;
use crate::prob::Temperature;
use crate::select::GainMode;
use crate::watermark::{BlendMode, WatermarkSpec};

pub const SEED_ENV: &str = "TCD_SEED";
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_PROMPT_SUFFIX: &str = "Please answer the question using a single word or phrase.";

macro_rules! raw_config {
    ($($field:ident : $ty:ty),* $(,)?) => {
        /// Partially specified configuration, as read from a file or from flags.
        #[derive(Debug, Clone, Default, PartialEq)]
        pub struct RawConfig {
            $(pub $field: Option<$ty>,)*
        }

        impl RawConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn set(&mut self, key: &str, value: Value) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = Some(
                            serde_json::from_value(value).map_err(|e| Error::config(key, e.to_string()))?,
                        );
                    })*
                    other => return Err(Error::config(other, "unknown key")),
                }
                Ok(())
            }

            /// Values in `over` win.
            pub fn overlay(self, over: RawConfig) -> RawConfig {
                RawConfig {
                    $($field: over.$field.or(self.$field),)*
                }
            }
        }
    };
}

raw_config! {
    lambda: f64,
    beta: f64,
    alpha: f64,
    tau: Temperature,
    gain: GainMode,
    k: usize,
    fusion: FusionMode,
    amateur_mode: AmateurMode,
    max_tokens: usize,
    stop_tokens: Vec<String>,
    stochastic: bool,
    log_softmax: bool,
    blend: BlendMode,
    anchor: (f64, f64),
    scale: f64,
    watermark_image: PathBuf,
    probe_question: String,
    expected_answer: String,
    watermark_main_pass: bool,
    prompt_suffix: String,
    trace_dir: PathBuf,
    dataset: PathBuf,
    out: PathBuf,
    seed: u64,
    jobs: usize,
}

impl RawConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(Error::config("<file>", "top level must be a JSON object"));
        };
        let mut raw = RawConfig::default();
        for (key, value) in map {
            raw.set(&key, value)?;
        }
        Ok(raw)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Decode settings; `stop_tokens` is filled in by [`EngineConfig::decode_for`].
    pub decode: DecodeConfig,
    pub stop_tokens: Vec<String>,
    pub watermark: WatermarkSpec,
    /// Decode on the watermarked image too, not only during layer selection.
    pub watermark_main_pass: bool,
    pub prompt_suffix: String,
    pub trace_dir: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub jobs: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig::resolve(RawConfig::default(), None).expect("defaults are valid")
    }
}

impl EngineConfig {
    /// Applies defaults, the seed override and validation.
    pub fn resolve(raw: RawConfig, env_seed: Option<&str>) -> Result<Self> {
        let seed = match env_seed {
            Some(s) => s
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::config(SEED_ENV, format!("{s:?}: {e}")))?,
            None => raw.seed.unwrap_or(DEFAULT_SEED),
        };
        let base = DecodeConfig::default();
        let decode = DecodeConfig {
            lambda: raw.lambda.unwrap_or(base.lambda),
            beta: raw.beta.unwrap_or(base.beta),
            tau: raw.tau.unwrap_or(base.tau),
            gain_mode: raw.gain.unwrap_or(base.gain_mode),
            candidate_k: raw.k.unwrap_or(base.candidate_k),
            fusion: raw.fusion.unwrap_or(base.fusion),
            amateur_mode: raw.amateur_mode.unwrap_or(base.amateur_mode),
            max_tokens: raw.max_tokens.unwrap_or(base.max_tokens),
            stop_tokens: BTreeSet::new(),
            choice: if raw.stochastic.unwrap_or(false) {
                TokenChoice::Sample { seed }
            } else {
                TokenChoice::Greedy
            },
            log_softmax_rows: raw.log_softmax.unwrap_or(false),
            reselect_visual_token: None,
        };
        decode.validate().map_err(keyed)?;

        let mut watermark = match &raw.watermark_image {
            Some(path) => WatermarkSpec::with_image(load_image(path)?),
            None => WatermarkSpec::default(),
        };
        if let Some(a) = raw.alpha {
            watermark.alpha = a;
        }
        if let Some(a) = raw.anchor {
            watermark.anchor_fraction = a;
        }
        if let Some(s) = raw.scale {
            watermark.scale = s;
        }
        if let Some(b) = raw.blend {
            watermark.blend = b;
        }
        if let Some(q) = raw.probe_question {
            watermark.probe_question = q;
        }
        if let Some(a) = raw.expected_answer {
            watermark.expected_answer = a;
        }
        watermark.validate().map_err(keyed)?;

        if raw.jobs == Some(0) {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        Ok(EngineConfig {
            decode,
            stop_tokens: raw.stop_tokens.unwrap_or_default(),
            watermark,
            watermark_main_pass: raw.watermark_main_pass.unwrap_or(false),
            prompt_suffix: raw
                .prompt_suffix
                .unwrap_or_else(|| DEFAULT_PROMPT_SUFFIX.to_owned()),
            trace_dir: raw.trace_dir,
            dataset: raw.dataset,
            out: raw.out,
            seed,
            jobs: raw.jobs,
        })
    }

    /// File (if any), then flags, then the process environment.
    pub fn load(file: Option<&Path>, flags: RawConfig) -> Result<Self> {
        let from_file = match file {
            Some(path) => RawConfig::from_file(path)?,
            None => RawConfig::default(),
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(from_file.overlay(flags), env.as_deref())
    }

    /// Decode settings with stop tokens resolved against `vocab`.
    pub fn decode_for(&self, vocab: &Vocab) -> Result<DecodeConfig> {
        let mut cfg = self.decode.clone();
        for text in &self.stop_tokens {
            let id = vocab.resolve(text).map_err(|_| {
                Error::config(
                    "stop_tokens",
                    format!("{text:?} is not a single vocabulary token"),
                )
            })?;
            cfg.stop_tokens.insert(id);
        }
        Ok(cfg)
    }
}

fn keyed(e: Error) -> Error {
    match e {
        Error::Parameter { name, reason } => Error::config(name, reason),
        other => other,
    }
}
