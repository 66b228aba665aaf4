//! Layered model abstraction: every decoding step yields one logit row per
//! decoder layer (early exit through the shared vocabulary head).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Per-step logits, one row per layer. Rows are 1-indexed; row `L` is the mature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogitStack {
    step_index: u32,
    num_layers: usize,
    vocab_size: usize,
    data: Vec<f32>,
}

impl LayerLogitStack {
    pub fn new(
        step_index: u32,
        num_layers: usize,
        vocab_size: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if num_layers < 2 {
            return Err(Error::Dimension(format!(
                "stack needs at least 2 layers, got {num_layers}"
            )));
        }
        if vocab_size == 0 {
            return Err(Error::Dimension("stack over an empty vocabulary".into()));
        }
        let expected = num_layers
            .checked_mul(vocab_size)
            .ok_or_else(|| Error::Dimension("stack size overflows".into()))?;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "{} values for a {num_layers}x{vocab_size} stack",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            step_index,
            num_layers,
            vocab_size,
            data,
        })
    }

    pub fn from_rows(step_index: u32, rows: &[Vec<f32>]) -> Result<Self> {
        let vocab = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != vocab) {
            return Err(Error::Dimension("ragged logit rows".into()));
        }
        Self::new(step_index, rows.len(), vocab, rows.concat())
    }

    pub fn step_index(&self) -> u32 {
        self.step_index
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Logits of layer `layer` (1-indexed).
    ///
    /// Panics when `layer` is 0 or above `num_layers`.
    pub fn row(&self, layer: usize) -> &[f32] {
        assert!(
            (1..=self.num_layers).contains(&layer),
            "layer {layer} outside 1..={}",
            self.num_layers
        );
        let start = (layer - 1) * self.vocab_size;
        &self.data[start..start + self.vocab_size]
    }

    pub fn mature_row(&self) -> &[f32] {
        self.row(self.num_layers)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.vocab_size)
    }

    /// Layer-major, token-major flat view.
    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn with_step_index(mut self, step_index: u32) -> Self {
        self.step_index = step_index;
        self
    }

    pub(crate) fn row_mut(&mut self, layer: usize) -> &mut [f32] {
        let start = (layer - 1) * self.vocab_size;
        &mut self.data[start..start + self.vocab_size]
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.step_index == other.step_index
            && self.num_layers == other.num_layers
            && self.vocab_size == other.vocab_size
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Ordered token strings plus the ids treated as special (not content).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawVocab", into = "RawVocab")]
pub struct Vocab {
    tokens: Vec<String>,
    special: BTreeSet<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVocab {
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    special: BTreeSet<u32>,
}

impl TryFrom<RawVocab> for Vocab {
    type Error = Error;

    fn try_from(raw: RawVocab) -> Result<Self> {
        Vocab::new(raw.tokens, raw.special)
    }
}

impl From<Vocab> for RawVocab {
    fn from(v: Vocab) -> Self {
        RawVocab {
            tokens: v.tokens,
            special: v.special,
        }
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>, special: impl IntoIterator<Item = u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Dimension("empty vocabulary".into()));
        }
        if u32::try_from(tokens.len()).is_err() {
            return Err(Error::Dimension("vocabulary exceeds u32 ids".into()));
        }
        let special: BTreeSet<u32> = special.into_iter().collect();
        if let Some(&bad) = special.iter().find(|&&t| t as usize >= tokens.len()) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: tokens.len(),
            });
        }
        Ok(Self { tokens, special })
    }

    pub fn from_strs(tokens: &[&str]) -> Self {
        Self::new(tokens.iter().map(|s| (*s).to_owned()).collect(), []).expect("non-empty vocab")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special(&self) -> &BTreeSet<u32> {
        &self.special
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special.contains(&id)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn check(&self, id: u32) -> Result<u32> {
        if (id as usize) < self.tokens.len() {
            Ok(id)
        } else {
            Err(Error::TokenOutOfRange {
                token: id,
                vocab: self.tokens.len(),
            })
        }
    }

    /// Resolves `text` to exactly one token id.
    pub fn resolve(&self, text: &str) -> Result<u32> {
        let mut hits = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.as_str() == text)
            .map(|(i, _)| i as u32);
        match (hits.next(), hits.next()) {
            (Some(id), None) => Ok(id),
            (None, _) => Err(Error::config(
                "expected_answer",
                format!("token {text:?} is not in the vocabulary"),
            )),
            (Some(_), Some(_)) => Err(Error::config(
                "expected_answer",
                format!("token {text:?} appears more than once in the vocabulary"),
            )),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().filter_map(|&id| self.token(id)).collect()
    }
}

/// What the model looks at besides the text.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ContextImage {
    #[default]
    None,
    Pixels(ImageBuffer),
    /// Replay key into a trace archive.
    TraceSample(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeContext {
    pub image: ContextImage,
    pub question: String,
    pub generated_prefix: Vec<u32>,
}

impl DecodeContext {
    pub fn new(image: ContextImage, question: impl Into<String>) -> Self {
        Self {
            image,
            question: question.into(),
            generated_prefix: Vec::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.generated_prefix.len()
    }

    pub fn check_prefix(&self, vocab: &Vocab) -> Result<()> {
        for &t in &self.generated_prefix {
            vocab.check(t)?;
        }
        Ok(())
    }
}

/// A probe-pass stack and the answer position it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeStack {
    pub stack: LayerLogitStack,
    /// Index of the first content (non-special) token in the probe answer.
    pub position: usize,
}

/// Anything that can produce per-layer logits for a decoding context.
///
/// Implementations must be deterministic and return exactly
/// `num_layers() x vocab().len()` finite values per call.
pub trait LayeredModel: Send + Sync {
    fn num_layers(&self) -> usize;

    fn vocab(&self) -> &Vocab;

    fn step(&self, ctx: &DecodeContext) -> Result<LayerLogitStack>;

    /// Stack used for visual-layer selection on the watermark probe question.
    fn probe_stack(&self, ctx: &DecodeContext) -> Result<ProbeStack> {
        Ok(ProbeStack {
            stack: self.step(ctx)?,
            position: ctx.step(),
        })
    }
}

/// Adds `boost` to `token` at every layer `>= layer` when the question matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub layer: usize,
    pub token: u32,
    pub boost: f32,
    /// Substring the question must contain; `None` matches every question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorBias {
    pub token: u32,
    pub bias: f32,
}

fn default_noise_scale() -> f32 {
    1.0
}

/// Seeded test model emulating layer-wise emergence of visual evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModelConfig {
    pub seed: u64,
    pub num_layers: usize,
    pub vocab: Vocab,
    #[serde(default)]
    pub injections: Vec<Injection>,
    #[serde(default)]
    pub prior_bias: Vec<PriorBias>,
    /// First layer (1-indexed) receiving `prior_bias`.
    #[serde(default)]
    pub prior_depth: usize,
    /// Base logits are uniform in `[-noise_scale, noise_scale)`.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f32,
}

impl SyntheticModelConfig {
    pub fn new(seed: u64, num_layers: usize, vocab: Vocab) -> Self {
        Self {
            seed,
            num_layers,
            vocab,
            injections: Vec::new(),
            prior_bias: Vec::new(),
            prior_depth: num_layers,
            noise_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 || self.num_layers > usize::from(u16::MAX) {
            return Err(Error::param(
                "num_layers",
                format!("{} not in [2, 65535]", self.num_layers),
            ));
        }
        if self.vocab.is_empty() {
            return Err(Error::param("vocab", "empty"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::param(
                "noise_scale",
                "must be finite and non-negative",
            ));
        }
        for inj in &self.injections {
            if !(1..=self.num_layers).contains(&inj.layer) {
                return Err(Error::param(
                    "injections",
                    format!("layer {} outside 1..={}", inj.layer, self.num_layers),
                ));
            }
            self.vocab.check(inj.token)?;
            if !inj.boost.is_finite() {
                return Err(Error::param("injections", "boost must be finite"));
            }
        }
        if !self.prior_bias.is_empty() && !(1..=self.num_layers).contains(&self.prior_depth) {
            return Err(Error::param(
                "prior_depth",
                format!("{} outside 1..={}", self.prior_depth, self.num_layers),
            ));
        }
        for pb in &self.prior_bias {
            self.vocab.check(pb.token)?;
            if !pb.bias.is_finite() {
                return Err(Error::param("prior_bias", "bias must be finite"));
            }
        }
        Ok(())
    }
}

/// Base pseudo-random logits keyed by `(seed, step, layer)`; one ChaCha stream per row.
pub fn synthetic_base_row(
    seed: u64,
    step: u32,
    layer: usize,
    vocab: usize,
    scale: f32,
) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(step) << 32) | layer as u64);
    (0..vocab)
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * f64::from(scale)) as f32)
        .collect()
}

/// One step of the synthetic model.
pub fn synthetic_step(cfg: &SyntheticModelConfig, ctx: &DecodeContext) -> Result<LayerLogitStack> {
    cfg.validate()?;
    ctx.check_prefix(&cfg.vocab)?;
    let step = u32::try_from(ctx.step())
        .map_err(|_| Error::Dimension("step index overflows u32".into()))?;
    let v = cfg.vocab.len();
    let mut data = Vec::with_capacity(cfg.num_layers * v);
    for layer in 1..=cfg.num_layers {
        data.extend(synthetic_base_row(
            cfg.seed,
            step,
            layer,
            v,
            cfg.noise_scale,
        ));
    }
    let mut stack = LayerLogitStack::new(step, cfg.num_layers, v, data)?;
    for inj in &cfg.injections {
        let matches = inj
            .condition
            .as_deref()
            .is_none_or(|c| ctx.question.contains(c));
        if matches {
            for layer in inj.layer..=cfg.num_layers {
                stack.row_mut(layer)[inj.token as usize] += inj.boost;
            }
        }
    }
    if !cfg.prior_bias.is_empty() {
        for layer in cfg.prior_depth..=cfg.num_layers {
            let row = stack.row_mut(layer);
            for pb in &cfg.prior_bias {
                row[pb.token as usize] += pb.bias;
            }
        }
    }
    Ok(stack)
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    cfg: SyntheticModelConfig,
}

impl SyntheticModel {
    pub fn new(cfg: SyntheticModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SyntheticModelConfig {
        &self.cfg
    }
}

impl LayeredModel for SyntheticModel {
    fn num_layers(&self) -> usize {
        self.cfg.num_layers
    }

    fn vocab(&self) -> &Vocab {
        &self.cfg.vocab
    }

    fn step(&self, ctx: &DecodeContext) -> Result<LayerLogitStack> {
        synthetic_step(&self.cfg, ctx)
    }
}
