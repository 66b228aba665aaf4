//! Adaptive plausibility masking, tri-layer logit fusion and the
//! autoregressive decode loop.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::error::{Error, Result};
use crate::model::{DecodeContext, LayerLogitStack, LayeredModel};
use crate::prob::{argmax, log_softmax, softmax_f32, ProbDist, Temperature};
use crate::select::{
    select_amateur_against, select_visual_layer, CandidateSet, GainMode, TriLayerSelection,
    DEFAULT_CANDIDATE_K,
};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FusionMode {
    /// `z_L - z_a + lambda * z_v`
    #[default]
    #[serde(rename = "tri")]
    Tri,
    /// `z_L - lambda * z_a + (1 - lambda) * z_v`
    #[serde(rename = "interp", alias = "interpolated")]
    Interpolated,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Tri => "tri",
            FusionMode::Interpolated => "interp",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tri" => Ok(FusionMode::Tri),
            "interp" | "interpolated" => Ok(FusionMode::Interpolated),
            other => Err(Error::config(
                "fusion",
                format!("unknown fusion mode {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmateurMode {
    /// Re-run the JSD search on every step.
    #[default]
    PerStep,
    /// Search once on the first step and reuse the layer.
    Static,
}

impl FromStr for AmateurMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(AmateurMode::PerStep),
            "static" => Ok(AmateurMode::Static),
            other => Err(Error::config(
                "amateur_mode",
                format!("unknown amateur mode {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TokenChoice {
    #[default]
    Greedy,
    /// Samples from `softmax(F / tau)` restricted to the plausible set.
    Sample { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub lambda: f64,
    pub beta: f64,
    pub tau: Temperature,
    pub gain_mode: GainMode,
    pub candidate_k: usize,
    pub fusion: FusionMode,
    pub amateur_mode: AmateurMode,
    pub max_tokens: usize,
    pub stop_tokens: BTreeSet<u32>,
    pub choice: TokenChoice,
    /// Replace each fused row by its log-softmax before fusion.
    pub log_softmax_rows: bool,
    /// Experimental: redo the gain search on every step for this answer token.
    pub reselect_visual_token: Option<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            tau: Temperature::ONE,
            gain_mode: GainMode::Difference,
            candidate_k: DEFAULT_CANDIDATE_K,
            fusion: FusionMode::Tri,
            amateur_mode: AmateurMode::PerStep,
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_tokens: BTreeSet::new(),
            choice: TokenChoice::Greedy,
            log_softmax_rows: false,
            reselect_visual_token: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::param(
                "lambda",
                format!("{} must be >= 0", self.lambda),
            ));
        }
        check_beta(self.beta)?;
        if self.max_tokens == 0 {
            return Err(Error::param("max_tokens", "must be at least 1"));
        }
        if self.candidate_k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::param("beta", format!("{beta} not in [0, 1]")))
    }
}

/// Tokens whose mature probability reaches `beta` times the mature maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlausibleSet {
    mask: Vec<bool>,
    count: usize,
}

impl PlausibleSet {
    pub fn contains(&self, token: u32) -> bool {
        self.mask.get(token as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.mask.len()
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i as u32)
    }

    pub fn is_subset(&self, other: &PlausibleSet) -> bool {
        self.mask.len() == other.mask.len()
            && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }
}

pub fn apc_mask(mature: &ProbDist, beta: f64) -> Result<PlausibleSet> {
    check_beta(beta)?;
    let threshold = beta * mature.max();
    let mask: Vec<bool> = mature.as_slice().iter().map(|&p| p >= threshold).collect();
    let count = mask.iter().filter(|&&m| m).count();
    Ok(PlausibleSet { mask, count })
}

/// Fused scores restricted to a plausible set. Masked tokens score `-inf`
/// conceptually; the finite score vector is kept alongside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLogits {
    scores: Vec<f64>,
    mask: PlausibleSet,
}

impl MaskedLogits {
    pub fn score(&self, token: u32) -> f64 {
        if self.mask.contains(token) {
            self.scores[token as usize]
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn mask(&self) -> &PlausibleSet {
        &self.mask
    }

    /// Best plausible token, lowest id on ties.
    pub fn argmax(&self) -> u32 {
        let mut best: Option<u32> = None;
        for t in self.mask.tokens() {
            if best.is_none_or(|b| self.scores[t as usize] > self.scores[b as usize]) {
                best = Some(t);
            }
        }
        best.expect("plausible set is never empty")
    }

    fn sample(&self, tau: Temperature, rng: &mut ChaCha8Rng) -> u32 {
        let tokens: Vec<u32> = self.mask.tokens().collect();
        let z: Vec<f64> = tokens.iter().map(|&t| self.scores[t as usize]).collect();
        let p = crate::prob::softmax(
            &crate::prob::LogitVector::new(z).expect("finite scores"),
            tau,
        );
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &pi) in p.as_slice().iter().enumerate() {
            acc += pi;
            if u < acc {
                return tokens[i];
            }
        }
        *tokens.last().expect("non-empty")
    }
}

fn row_f64(stack: &LayerLogitStack, layer: usize, normalize: bool) -> Vec<f64> {
    let row: Vec<f64> = stack.row(layer).iter().map(|&v| f64::from(v)).collect();
    if normalize {
        log_softmax(&row)
    } else {
        row
    }
}

/// Applies the fusion formula on the plausible set.
pub fn fuse_logits(
    stack: &LayerLogitStack,
    sel: &TriLayerSelection,
    plausible: &PlausibleSet,
    cfg: &DecodeConfig,
) -> Result<MaskedLogits> {
    let l = stack.num_layers();
    if sel.mature != l || sel.amateur == 0 || sel.amateur >= l || sel.visual == 0 || sel.visual > l
    {
        return Err(Error::param(
            "selection",
            format!(
                "layers (mature {}, amateur {}, visual {}) invalid for {l} rows",
                sel.mature, sel.amateur, sel.visual
            ),
        ));
    }
    if plausible.vocab_size() != stack.vocab_size() || plausible.is_empty() {
        return Err(Error::Dimension(
            "plausible set does not match the vocabulary".into(),
        ));
    }
    let mature = row_f64(stack, sel.mature, cfg.log_softmax_rows);
    let amateur = row_f64(stack, sel.amateur, cfg.log_softmax_rows);
    let visual = row_f64(stack, sel.visual, cfg.log_softmax_rows);
    let lambda = cfg.lambda;
    let scores = (0..stack.vocab_size())
        .map(|t| match cfg.fusion {
            FusionMode::Tri => mature[t] - amateur[t] + lambda * visual[t],
            FusionMode::Interpolated => {
                mature[t] - lambda * amateur[t] + (1.0 - lambda) * visual[t]
            }
        })
        .collect();
    Ok(MaskedLogits {
        scores,
        mask: plausible.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    StopToken,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub selection: TriLayerSelection,
    pub plausible: usize,
    pub token: u32,
    pub fused_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationResult {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepRecord>,
    pub termination: Option<Termination>,
}

impl GenerationResult {
    fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            steps: Vec::new(),
            termination: None,
        }
    }
}

/// A decode that failed part-way; `partial` holds every completed step.
#[derive(Debug, ThisError)]
#[error("decoding stopped after {} tokens: {source}", partial.tokens.len())]
pub struct DecodeError {
    pub partial: GenerationResult,
    #[source]
    pub source: Error,
}

impl From<DecodeError> for Error {
    fn from(e: DecodeError) -> Self {
        e.source
    }
}

/// One fused decision on a single stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub selection: TriLayerSelection,
    pub plausible: PlausibleSet,
    pub fused: MaskedLogits,
}

/// Mature distribution, plausibility mask, amateur search and fusion for one stack.
pub fn decide_step(
    stack: &LayerLogitStack,
    visual: usize,
    fixed_amateur: Option<usize>,
    cfg: &DecodeConfig,
) -> Result<StepDecision> {
    let l = stack.num_layers();
    if visual == 0 || visual > l {
        return Err(Error::param(
            "visual_layer",
            format!("{visual} outside 1..={l}"),
        ));
    }
    let mature_t = softmax_f32(stack.mature_row(), cfg.tau)?;
    let plausible = apc_mask(&mature_t, cfg.beta)?;
    let (amateur, jsd) = match fixed_amateur {
        Some(a) => (a, Vec::new()),
        None => {
            let candidates = CandidateSet::below_mature(l, cfg.candidate_k)?;
            let mature_1 = if cfg.tau == Temperature::ONE {
                mature_t.clone()
            } else {
                softmax_f32(stack.mature_row(), Temperature::ONE)?
            };
            let sel = select_amateur_against(stack, &mature_1, &candidates)?;
            (sel.layer, sel.jsd)
        }
    };
    let (visual, gains) = match cfg.reselect_visual_token {
        Some(token) => {
            let v = select_visual_layer(stack, token, cfg.gain_mode)?;
            (v.layer, v.gains)
        }
        None => (visual, Vec::new()),
    };
    if visual == l {
        log::debug!(
            "visual layer equals the mature layer; fusion degenerates to (1+lambda) z_L - z_a"
        );
    }
    let selection = TriLayerSelection {
        mature: l,
        amateur,
        visual,
        gains,
        jsd,
    };
    let fused = fuse_logits(stack, &selection, &plausible, cfg)?;
    Ok(StepDecision {
        selection,
        plausible,
        fused,
    })
}

/// Tri-layer contrastive decoding from `ctx` with a fixed visual layer.
pub fn decode_greedy(
    model: &dyn LayeredModel,
    ctx: &DecodeContext,
    visual_layer: usize,
    cfg: &DecodeConfig,
) -> Result<GenerationResult, DecodeError> {
    let mut result = GenerationResult::empty();
    if let Err(source) = cfg.validate() {
        return Err(DecodeError {
            partial: result,
            source,
        });
    }
    let mut ctx = ctx.clone();
    let mut static_amateur = None;
    let mut rng = match cfg.choice {
        TokenChoice::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        TokenChoice::Greedy => None,
    };
    for step in 0..cfg.max_tokens {
        let decision = model
            .step(&ctx)
            .and_then(|stack| decide_step(&stack, visual_layer, static_amateur, cfg));
        let decision = match decision {
            Ok(d) => d,
            Err(source) => {
                return Err(DecodeError {
                    partial: result,
                    source,
                })
            }
        };
        if cfg.amateur_mode == AmateurMode::Static && static_amateur.is_none() {
            static_amateur = Some(decision.selection.amateur);
        }
        let token = match rng.as_mut() {
            Some(rng) => decision.fused.sample(cfg.tau, rng),
            None => decision.fused.argmax(),
        };
        result.steps.push(StepRecord {
            step,
            plausible: decision.plausible.len(),
            fused_score: decision.fused.score(token),
            selection: decision.selection,
            token,
        });
        result.tokens.push(token);
        ctx.generated_prefix.push(token);
        if cfg.stop_tokens.contains(&token) {
            result.termination = Some(Termination::StopToken);
            return Ok(result);
        }
    }
    result.termination = Some(Termination::MaxTokens);
    Ok(result)
}

/// Plain greedy decoding of the mature layer, with the same stop rules.
pub fn decode_mature_greedy(
    model: &dyn LayeredModel,
    ctx: &DecodeContext,
    cfg: &DecodeConfig,
) -> Result<GenerationResult, DecodeError> {
    let mut result = GenerationResult::empty();
    if let Err(source) = cfg.validate() {
        return Err(DecodeError {
            partial: result,
            source,
        });
    }
    let mut ctx = ctx.clone();
    for step in 0..cfg.max_tokens {
        let stack = match model.step(&ctx) {
            Ok(s) => s,
            Err(source) => {
                return Err(DecodeError {
                    partial: result,
                    source,
                })
            }
        };
        let row: Vec<f64> = stack.mature_row().iter().map(|&v| f64::from(v)).collect();
        let token = argmax(&row) as u32;
        let l = stack.num_layers();
        result.steps.push(StepRecord {
            step,
            selection: TriLayerSelection {
                mature: l,
                amateur: l - 1,
                visual: l,
                gains: Vec::new(),
                jsd: Vec::new(),
            },
            plausible: stack.vocab_size(),
            token,
            fused_score: row[token as usize],
        });
        result.tokens.push(token);
        ctx.generated_prefix.push(token);
        if cfg.stop_tokens.contains(&token) {
            result.termination = Some(Termination::StopToken);
            return Ok(result);
        }
    }
    result.termination = Some(Termination::MaxTokens);
    Ok(result)
}
