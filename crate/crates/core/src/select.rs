//! Visual-layer selection by maximum probability gain on the watermark
//! answer, and amateur-layer selection by maximum JSD from the mature layer.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::model::{ContextImage, DecodeContext, LayerLogitStack, LayeredModel};
use crate::prob::{jsd, log_safe_ratio, softmax_f32, ProbDist, Temperature, LOG_RATIO_EPS};
use crate::watermark::{embed_watermark, WatermarkSpec};

/// Default number of amateur candidates below the mature layer.
pub const DEFAULT_CANDIDATE_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum GainMode {
    /// `p(l) - p(l-1)`
    #[default]
    #[serde(rename = "change")]
    Difference,
    /// `ln((p(l) + eps) / (p(l-1) + eps))`
    #[serde(rename = "log")]
    LogRatio,
}

impl GainMode {
    pub fn gain(self, current: f64, previous: f64) -> f64 {
        match self {
            GainMode::Difference => current - previous,
            GainMode::LogRatio => log_safe_ratio(current, previous, LOG_RATIO_EPS)
                .expect("softmax outputs are probabilities"),
        }
    }
}

impl fmt::Display for GainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GainMode::Difference => "change",
            GainMode::LogRatio => "log",
        })
    }
}

impl FromStr for GainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "change" | "difference" => Ok(GainMode::Difference),
            "log" | "log-ratio" => Ok(GainMode::LogRatio),
            other => Err(Error::config(
                "gain",
                format!("unknown gain mode {other:?}"),
            )),
        }
    }
}

/// Layers eligible as the amateur, strictly increasing within `[1, L-1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateSet(Vec<usize>);

impl CandidateSet {
    pub fn new(layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("candidates", "empty candidate set"));
        }
        if layers.iter().any(|&l| l == 0 || l >= num_layers) {
            return Err(Error::param(
                "candidates",
                format!(
                    "candidate layers must lie in [1, {}]",
                    num_layers.saturating_sub(1)
                ),
            ));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("candidates", "must be strictly increasing"));
        }
        Ok(Self(layers))
    }

    /// The `k` layers directly below the mature layer, clamped to what exists.
    pub fn below_mature(num_layers: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("k", "candidate count must be positive"));
        }
        let lo = num_layers.saturating_sub(k).max(1);
        Self::new((lo..num_layers).collect(), num_layers)
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisualSelection {
    pub layer: usize,
    /// `p^(l)(answer)` for `l = 1..=L`.
    pub answer_probs: Vec<f64>,
    /// Gain for `l = 2..=L`; entry `i` belongs to layer `i + 2`.
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmateurSelection {
    pub layer: usize,
    /// `(layer, jsd)` for every candidate, in candidate order.
    pub jsd: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriLayerSelection {
    pub mature: usize,
    pub amateur: usize,
    pub visual: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub gains: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub jsd: Vec<(usize, f64)>,
}

fn layer_dists(stack: &LayerLogitStack, tau: Temperature) -> Vec<ProbDist> {
    stack
        .rows()
        .map(|row| softmax_f32(row, tau).expect("stack rows are finite and non-empty"))
        .collect()
}

/// Maximum probability gain search over all layers `2..=L`; lowest layer wins ties.
pub fn select_visual_layer(
    stack: &LayerLogitStack,
    answer_token: u32,
    mode: GainMode,
) -> Result<VisualSelection> {
    if stack.num_layers() < 2 {
        return Err(Error::Dimension(
            "visual selection needs at least two layers".into(),
        ));
    }
    if answer_token as usize >= stack.vocab_size() {
        return Err(Error::TokenOutOfRange {
            token: answer_token,
            vocab: stack.vocab_size(),
        });
    }
    let answer_probs: Vec<f64> = layer_dists(stack, Temperature::ONE)
        .iter()
        .map(|p| p.as_slice()[answer_token as usize])
        .collect();
    let gains: Vec<f64> = answer_probs
        .windows(2)
        .map(|w| mode.gain(w[1], w[0]))
        .collect();
    let best = crate::prob::argmax(&gains);
    Ok(VisualSelection {
        layer: best + 2,
        answer_probs,
        gains,
    })
}

/// Candidate with the largest JSD from the mature distribution; lowest layer wins ties.
pub fn select_amateur_layer(
    stack: &LayerLogitStack,
    candidates: &CandidateSet,
) -> Result<AmateurSelection> {
    let mature = softmax_f32(stack.mature_row(), Temperature::ONE)?;
    select_amateur_against(stack, &mature, candidates)
}

pub(crate) fn select_amateur_against(
    stack: &LayerLogitStack,
    mature: &ProbDist,
    candidates: &CandidateSet,
) -> Result<AmateurSelection> {
    if candidates.is_empty() {
        return Err(Error::param("candidates", "empty candidate set"));
    }
    if let Some(&bad) = candidates
        .layers()
        .iter()
        .find(|&&l| l >= stack.num_layers())
    {
        return Err(Error::param(
            "candidates",
            format!(
                "layer {bad} is not below the mature layer {}",
                stack.num_layers()
            ),
        ));
    }
    let mut profile = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for &layer in candidates.layers() {
        let p = softmax_f32(stack.row(layer), Temperature::ONE)?;
        let d = jsd(mature, &p)?;
        profile.push((layer, d));
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((layer, d));
        }
    }
    Ok(AmateurSelection {
        layer: best.expect("non-empty candidates").0,
        jsd: profile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepassResult {
    pub visual: VisualSelection,
    pub answer_token: u32,
    /// Answer position the probe stack was taken at.
    pub position: usize,
}

/// Composites the watermark, asks the probe question and runs the gain search.
///
/// Pixel sources are watermarked before querying; trace samples replay
/// the recorded probe pass.
pub fn run_watermark_prepass(
    model: &dyn LayeredModel,
    source: &ContextImage,
    spec: &WatermarkSpec,
    mode: GainMode,
) -> Result<PrepassResult> {
    spec.validate()?;
    let answer_token = model.vocab().resolve(&spec.expected_answer)?;
    let image = match source {
        ContextImage::Pixels(img) => ContextImage::Pixels(embed_watermark(img, spec)?),
        other => other.clone(),
    };
    let ctx = DecodeContext::new(image, spec.probe_question.clone());
    let probe = model.probe_stack(&ctx)?;
    let visual = select_visual_layer(&probe.stack, answer_token, mode)?;
    Ok(PrepassResult {
        visual,
        answer_token,
        position: probe.position,
    })
}

/// Image used for the main decoding pass.
///
/// Only pixel sources can carry the watermark; synthetic and trace sources
/// are returned unchanged.
pub fn main_pass_image(
    source: &ContextImage,
    spec: &WatermarkSpec,
    watermarked: bool,
) -> Result<ContextImage> {
    match source {
        ContextImage::Pixels(img) if watermarked => {
            Ok(ContextImage::Pixels(embed_watermark(img, spec)?))
        }
        other => Ok(other.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PrepassKey {
    Sample(String),
    Image(ImageBuffer),
}

impl PrepassKey {
    pub fn for_source(source: &ContextImage, fallback_id: &str) -> Self {
        match source {
            ContextImage::Pixels(img) => PrepassKey::Image(img.clone()),
            ContextImage::TraceSample(id) => PrepassKey::Sample(id.clone()),
            ContextImage::None => PrepassKey::Sample(fallback_id.to_owned()),
        }
    }
}

/// Write-once per-image cache of probe-pass results.
#[derive(Debug, Default)]
pub struct PrepassCache {
    inner: RwLock<HashMap<PrepassKey, PrepassResult>>,
}

impl PrepassCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_run(
        &self,
        key: PrepassKey,
        run: impl FnOnce() -> Result<PrepassResult>,
    ) -> Result<PrepassResult> {
        if let Some(hit) = self.inner.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let result = run()?;
        let mut map = self.inner.write().expect("cache lock");
        Ok(map.entry(key).or_insert(result).clone())
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Injection, SyntheticModel, SyntheticModelConfig, Vocab};
    use std::f64::consts::LN_2;

    fn stack(rows: &[Vec<f32>]) -> LayerLogitStack {
        LayerLogitStack::from_rows(0, rows).unwrap()
    }

    #[test]
    fn main_pass_image_marks_only_when_asked() {
        let base = ImageBuffer::new(40, 30, 3, vec![200; 40 * 30 * 3]).unwrap();
        let spec = WatermarkSpec::default();
        let src = ContextImage::Pixels(base.clone());
        assert_eq!(main_pass_image(&src, &spec, false).unwrap(), src);
        let marked = main_pass_image(&src, &spec, true).unwrap();
        assert_eq!(
            marked,
            ContextImage::Pixels(embed_watermark(&base, &spec).unwrap())
        );
        assert_ne!(marked, src);
        assert_eq!(
            main_pass_image(&ContextImage::None, &spec, true).unwrap(),
            ContextImage::None
        );
    }

    #[test]
    fn identical_rows_pick_layer_two() {
        let rows = vec![vec![0.1, 0.5, -0.2]; 6];
        for mode in [GainMode::Difference, GainMode::LogRatio] {
            let sel = select_visual_layer(&stack(&rows), 1, mode).unwrap();
            assert_eq!(sel.layer, 2);
            assert!(sel.gains.iter().all(|&g| g == 0.0));
            assert_eq!(sel.gains.len(), 5);
            assert_eq!(sel.answer_probs.len(), 6);
        }
    }

    #[test]
    fn brute_force_gain_scan() {
        let rows = vec![
            vec![0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.5, 0.0],
            vec![0.0, 4.0, 0.0],
            vec![0.0, 4.2, 0.0],
        ];
        let s = stack(&rows);
        let p: Vec<f64> = rows
            .iter()
            .map(|r| {
                let e: Vec<f64> = r.iter().map(|&v| f64::from(v).exp()).collect();
                e[1] / e.iter().sum::<f64>()
            })
            .collect();
        let diff: Vec<f64> = (1..5).map(|i| p[i] - p[i - 1]).collect();
        let logr: Vec<f64> = (1..5).map(|i| (p[i] / p[i - 1]).ln()).collect();
        let pick = |v: &[f64]| {
            2 + v
                .iter()
                .enumerate()
                .fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
        };
        assert_eq!(
            select_visual_layer(&s, 1, GainMode::Difference)
                .unwrap()
                .layer,
            pick(&diff)
        );
        assert_eq!(
            select_visual_layer(&s, 1, GainMode::LogRatio)
                .unwrap()
                .layer,
            pick(&logr)
        );
        // the two modes disagree here: biggest absolute jump vs biggest ratio
        assert_eq!(pick(&diff), 4);
        assert_eq!(pick(&logr), 2);
    }

    #[test]
    fn visual_errors() {
        let s = stack(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(matches!(
            select_visual_layer(&s, 2, GainMode::Difference),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn amateur_identity_picks_lowest_candidate() {
        let rows = vec![vec![0.3, -1.0, 2.0]; 5];
        let cands = CandidateSet::new(vec![2, 3, 4], 5).unwrap();
        let sel = select_amateur_layer(&stack(&rows), &cands).unwrap();
        assert_eq!(sel.layer, 2);
        assert!(sel.jsd.iter().all(|&(_, d)| d <= 1e-12));
    }

    #[test]
    fn amateur_disjoint_candidate_saturates() {
        let rows = vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 40.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![40.0, 0.0, 0.0, 0.0],
        ];
        let cands = CandidateSet::below_mature(4, 20).unwrap();
        assert_eq!(cands.layers(), &[1, 2, 3]);
        let sel = select_amateur_layer(&stack(&rows), &cands).unwrap();
        assert_eq!(sel.layer, 2);
        assert!((sel.jsd[1].1 - LN_2).abs() < 1e-9);
        assert_eq!(sel.jsd.len(), 3);
    }

    #[test]
    fn candidate_set_validation() {
        assert!(CandidateSet::new(vec![], 4).is_err());
        assert!(CandidateSet::new(vec![0, 1], 4).is_err());
        assert!(CandidateSet::new(vec![1, 4], 4).is_err());
        assert!(CandidateSet::new(vec![2, 1], 4).is_err());
        assert_eq!(
            CandidateSet::below_mature(32, 20).unwrap().layers(),
            &(12..32).collect::<Vec<_>>()[..]
        );
        assert_eq!(
            CandidateSet::below_mature(32, 20).unwrap().len(),
            DEFAULT_CANDIDATE_K
        );
        let s = stack(&[vec![0.0], vec![0.0]]);
        let too_deep = CandidateSet::new(vec![1, 2], 3).unwrap();
        assert!(select_amateur_layer(&s, &too_deep).is_err());
    }

    #[test]
    fn gain_mode_names() {
        assert_eq!("change".parse::<GainMode>().unwrap(), GainMode::Difference);
        assert_eq!("log".parse::<GainMode>().unwrap(), GainMode::LogRatio);
        assert!("nope".parse::<GainMode>().is_err());
        assert_eq!(
            serde_json::to_string(&GainMode::Difference).unwrap(),
            "\"change\""
        );
        assert_eq!(GainMode::default(), GainMode::Difference);
    }

    fn probe_model(layer: usize) -> SyntheticModel {
        let vocab = Vocab::from_strs(&["<s>", "yes", "no", "7", "8", "f", "w"]);
        let mut cfg = SyntheticModelConfig::new(11, 12, vocab);
        cfg.injections.push(Injection {
            layer,
            token: 4,
            boost: 12.0,
            condition: Some("captcha".into()),
        });
        SyntheticModel::new(cfg).unwrap()
    }

    #[test]
    fn prepass_recovers_injected_layer() {
        let model = probe_model(7);
        let image = ContextImage::Pixels(ImageBuffer::filled(64, 64, &[30, 30, 30]).unwrap());
        for mode in [GainMode::Difference, GainMode::LogRatio] {
            let r = run_watermark_prepass(&model, &image, &WatermarkSpec::default(), mode).unwrap();
            assert_eq!(r.visual.layer, 7);
            assert_eq!(r.answer_token, 4);
            assert_eq!(r.position, 0);
        }
    }

    #[test]
    fn prepass_unknown_answer_is_config_error() {
        let model = probe_model(3);
        let spec = WatermarkSpec {
            expected_answer: "9".into(),
            ..WatermarkSpec::default()
        };
        let err = run_watermark_prepass(&model, &ContextImage::None, &spec, GainMode::Difference)
            .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn cache_runs_once() {
        let cache = PrepassCache::new();
        let model = probe_model(5);
        let mut calls = 0;
        for _ in 0..3 {
            cache
                .get_or_run(PrepassKey::Sample("a".into()), || {
                    calls += 1;
                    run_watermark_prepass(
                        &model,
                        &ContextImage::None,
                        &WatermarkSpec::default(),
                        GainMode::Difference,
                    )
                })
                .unwrap();
        }
        assert_eq!(calls, 1);
        assert_eq!(cache.len(), 1);
    }
}
