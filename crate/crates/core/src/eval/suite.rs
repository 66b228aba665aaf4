use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::dataset::{Dataset, DatasetSample, SuiteKind};
use super::metrics::{
    amber_metrics, binary_metrics, extract_objects, mme_score, pair_by_image, parse_binary_answer,
    AmberMetrics, BinaryMetrics, BinarySample, GenerativeSample, Label, Prediction,
};
use crate::config::EngineConfig;
use crate::decode::{
    decode_greedy, decode_mature_greedy, DecodeConfig, GenerationResult, Termination,
};
use crate::error::{Error, Result};
use crate::model::{ContextImage, DecodeContext, LayeredModel, SyntheticModel};
use crate::select::{main_pass_image, run_watermark_prepass, select_amateur_layer, CandidateSet};
use crate::trace::{read_trace, TraceModel};

/// What one decoder produced for a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeSummary {
    pub tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<Prediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mentioned: Option<BTreeSet<String>>,
    /// Amateur layer per step; empty for the mature-only baseline.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub amateur_layers: Vec<usize>,
    pub termination: Option<Termination>,
}

/// One line of the per-sample log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subtask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    pub visual_layer: usize,
    pub tcd: DecodeSummary,
    pub baseline: DecodeSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryReport {
    /// Pooled over every sample.
    pub micro: BinaryMetrics,
    /// Unweighted mean over splits; equals micro when there is one split.
    pub macro_accuracy: f64,
    pub macro_f1: f64,
    pub splits: BTreeMap<String, BinaryMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmeReport {
    pub subtasks: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SuiteMetrics {
    Binary(BinaryReport),
    Mme(MmeReport),
    Amber(AmberMetrics),
}

impl SuiteMetrics {
    /// Headline accuracy for binary suites.
    pub fn accuracy(&self) -> Option<f64> {
        match self {
            SuiteMetrics::Binary(r) => Some(r.micro.accuracy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub suite: SuiteKind,
    pub evaluated: usize,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub skipped_ids: Vec<String>,
    pub tcd: SuiteMetrics,
    pub baseline: SuiteMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRun {
    pub report: MetricReport,
    pub records: Vec<SampleRecord>,
}

enum Backend {
    Synthetic,
    Trace(TraceModel),
}

fn load_backend(dataset: &Dataset, cfg: &EngineConfig) -> Result<Backend> {
    match dataset.trace_dir() {
        None => Ok(Backend::Synthetic),
        Some(dir) => {
            let dir = cfg.trace_dir.as_deref().unwrap_or(dir);
            Ok(Backend::Trace(TraceModel::new(Arc::new(read_trace(dir)?))))
        }
    }
}

/// A model plus the context that addresses one sample in it.
enum Bound<'a> {
    Owned(SyntheticModel, ContextImage),
    Shared(&'a TraceModel, ContextImage),
}

impl Bound<'_> {
    fn model(&self) -> &dyn LayeredModel {
        match self {
            Bound::Owned(m, _) => m,
            Bound::Shared(m, _) => *m,
        }
    }

    fn image(&self) -> &ContextImage {
        match self {
            Bound::Owned(_, i) | Bound::Shared(_, i) => i,
        }
    }
}

fn bind<'a>(
    backend: &'a Backend,
    dataset: &Dataset,
    sample: &DatasetSample,
) -> Result<Option<Bound<'a>>> {
    match backend {
        Backend::Synthetic => {
            let cfg = dataset.model_for(sample).ok_or_else(|| {
                Error::config(
                    "model",
                    format!("no synthetic model for sample {:?}", sample.id),
                )
            })?;
            Ok(Some(Bound::Owned(
                SyntheticModel::new(cfg.clone())?,
                ContextImage::None,
            )))
        }
        Backend::Trace(model) => {
            let id = sample.trace_id();
            if model.archive().sample(id).is_err() {
                log::warn!("sample {id:?} is missing from the trace archive; skipping");
                return Ok(None);
            }
            Ok(Some(Bound::Shared(
                model,
                ContextImage::TraceSample(id.to_owned()),
            )))
        }
    }
}

fn decode_config(bound: &Bound<'_>, cfg: &EngineConfig) -> Result<DecodeConfig> {
    let mut decode = cfg.decode_for(bound.model().vocab())?;
    if let Bound::Shared(model, ContextImage::TraceSample(id)) = bound {
        let recorded = model.archive().sample(id)?.steps.len();
        if recorded == 0 {
            return Err(Error::Trace(format!("sample {id:?} has no recorded steps")));
        }
        decode.max_tokens = decode.max_tokens.min(recorded);
    }
    Ok(decode)
}

fn summarize(
    result: &GenerationResult,
    model: &dyn LayeredModel,
    suite: SuiteKind,
    lexicon: &BTreeSet<String>,
    contrastive: bool,
) -> DecodeSummary {
    let vocab = model.vocab();
    DecodeSummary {
        tokens: vocab
            .decode(&result.tokens)
            .into_iter()
            .map(str::to_owned)
            .collect(),
        answer: suite
            .is_binary()
            .then(|| parse_binary_answer(&result.tokens, vocab)),
        mentioned: (!suite.is_binary()).then(|| extract_objects(&result.tokens, vocab, lexicon)),
        amateur_layers: if contrastive {
            result.steps.iter().map(|s| s.selection.amateur).collect()
        } else {
            Vec::new()
        },
        termination: result.termination,
    }
}

fn run_sample(
    backend: &Backend,
    dataset: &Dataset,
    sample: &DatasetSample,
    cfg: &EngineConfig,
    lexicon: &BTreeSet<String>,
) -> Result<Option<SampleRecord>> {
    let Some(bound) = bind(backend, dataset, sample)? else {
        return Ok(None);
    };
    let model = bound.model();
    let decode = decode_config(&bound, cfg)?;
    let prepass = run_watermark_prepass(model, bound.image(), &cfg.watermark, decode.gain_mode)?;
    let image = main_pass_image(bound.image(), &cfg.watermark, cfg.watermark_main_pass)?;
    let ctx = DecodeContext::new(image, dataset.prompt_for(sample, &cfg.prompt_suffix));
    let tcd = decode_greedy(model, &ctx, prepass.visual.layer, &decode)?;
    let baseline = decode_mature_greedy(model, &ctx, &decode)?;
    Ok(Some(SampleRecord {
        id: sample.id.clone(),
        split: sample.split.clone(),
        image: sample.image.clone(),
        subtask: sample.subtask.clone(),
        gold: sample.label,
        visual_layer: prepass.visual.layer,
        tcd: summarize(&tcd, model, dataset.suite, lexicon, true),
        baseline: summarize(&baseline, model, dataset.suite, lexicon, false),
    }))
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::param("jobs", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs the probe pre-pass, contrastive decoding and the mature-only
/// baseline on every sample, then aggregates both sets of metrics.
pub fn run_suite(dataset: &Dataset, cfg: &EngineConfig) -> Result<SuiteRun> {
    dataset.validate()?;
    let backend = load_backend(dataset, cfg)?;
    let lexicon: BTreeSet<String> = dataset
        .lexicon
        .iter()
        .map(|s| s.trim().to_lowercase())
        .collect();
    let outcomes: Vec<Result<Option<SampleRecord>>> = with_pool(cfg.jobs, || {
        dataset
            .samples
            .par_iter()
            .map(|s| run_sample(&backend, dataset, s, cfg, &lexicon))
            .collect()
    })?;

    let mut records = Vec::with_capacity(outcomes.len());
    let mut skipped_ids = Vec::new();
    for (sample, outcome) in dataset.samples.iter().zip(outcomes) {
        match outcome? {
            Some(r) => records.push(r),
            None => skipped_ids.push(sample.id.clone()),
        }
    }
    if records.is_empty() {
        return Err(Error::Trace(format!(
            "none of the {} samples could be evaluated",
            dataset.samples.len()
        )));
    }
    let tcd = aggregate(dataset, &records, |r| &r.tcd)?;
    let baseline = aggregate(dataset, &records, |r| &r.baseline)?;
    Ok(SuiteRun {
        report: MetricReport {
            suite: dataset.suite,
            evaluated: records.len(),
            skipped: skipped_ids.len(),
            skipped_ids,
            tcd,
            baseline,
        },
        records,
    })
}

fn binary_samples(
    records: &[SampleRecord],
    pick: impl Fn(&SampleRecord) -> &DecodeSummary,
) -> Vec<BinarySample> {
    records
        .iter()
        .map(|r| {
            BinarySample::new(
                r.id.clone(),
                r.gold.expect("binary suites carry labels"),
                pick(r).answer.unwrap_or(Prediction::Invalid),
            )
        })
        .collect()
}

fn aggregate(
    dataset: &Dataset,
    records: &[SampleRecord],
    pick: impl Fn(&SampleRecord) -> &DecodeSummary,
) -> Result<SuiteMetrics> {
    match dataset.suite {
        SuiteKind::Pope => {
            let samples = binary_samples(records, &pick);
            let micro = binary_metrics(&samples)?;
            let mut by_split: BTreeMap<String, Vec<BinarySample>> = BTreeMap::new();
            for (r, s) in records.iter().zip(samples) {
                let key = r.split.clone().unwrap_or_else(|| "all".to_owned());
                by_split.entry(key).or_default().push(s);
            }
            let splits = by_split
                .into_iter()
                .map(|(k, v)| Ok((k, binary_metrics(&v)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let n = splits.len() as f64;
            let macro_accuracy = splits.values().map(|m| m.accuracy).sum::<f64>() / n;
            let macro_f1 = splits.values().map(|m| m.f1).sum::<f64>() / n;
            Ok(SuiteMetrics::Binary(BinaryReport {
                micro,
                macro_accuracy,
                macro_f1,
                splits,
            }))
        }
        SuiteKind::Mme => {
            let samples = binary_samples(records, &pick);
            let mut by_task: BTreeMap<String, Vec<(String, BinarySample)>> = BTreeMap::new();
            for (r, s) in records.iter().zip(samples) {
                let task = r.subtask.clone().unwrap_or_else(|| "default".to_owned());
                let image = r.image.clone().expect("mme samples carry image keys");
                by_task.entry(task).or_default().push((image, s));
            }
            let mut subtasks = BTreeMap::new();
            for (task, samples) in by_task {
                let pairs = pair_by_image(&samples)?;
                subtasks.insert(task, mme_score(&pairs)?);
            }
            let total = subtasks.values().sum();
            Ok(SuiteMetrics::Mme(MmeReport { subtasks, total }))
        }
        SuiteKind::Amber => {
            let cog: BTreeSet<&str> = dataset.cog_prone.iter().map(String::as_str).collect();
            let gt: BTreeMap<&str, &Vec<String>> = dataset
                .samples
                .iter()
                .map(|s| (s.id.as_str(), &s.gt_objects))
                .collect();
            let samples: Vec<GenerativeSample> = records
                .iter()
                .map(|r| {
                    let mentioned: Vec<&str> = pick(r)
                        .mentioned
                        .iter()
                        .flatten()
                        .map(String::as_str)
                        .collect();
                    let gt_objects: Vec<&str> =
                        gt[r.id.as_str()].iter().map(String::as_str).collect();
                    GenerativeSample::new(
                        r.id.clone(),
                        mentioned,
                        gt_objects,
                        cog.iter().copied().collect(),
                    )
                })
                .collect();
            Ok(SuiteMetrics::Amber(amber_metrics(&samples)?))
        }
    }
}

/// Layers chosen for one sample without decoding further than the first step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerChoice {
    pub id: String,
    pub num_layers: usize,
    pub visual: usize,
    pub amateur: usize,
}

/// Visual (probe pass) and first-step amateur layers for every sample.
pub fn select_layers(
    dataset: &Dataset,
    cfg: &EngineConfig,
) -> Result<(Vec<LayerChoice>, Vec<String>)> {
    dataset.validate()?;
    let backend = load_backend(dataset, cfg)?;
    let outcomes: Vec<Result<Option<LayerChoice>>> = with_pool(cfg.jobs, || {
        dataset
            .samples
            .par_iter()
            .map(|sample| {
                let Some(bound) = bind(&backend, dataset, sample)? else {
                    return Ok(None);
                };
                let model = bound.model();
                let prepass = run_watermark_prepass(
                    model,
                    bound.image(),
                    &cfg.watermark,
                    cfg.decode.gain_mode,
                )?;
                let image =
                    main_pass_image(bound.image(), &cfg.watermark, cfg.watermark_main_pass)?;
                let ctx = DecodeContext::new(image, dataset.prompt_for(sample, &cfg.prompt_suffix));
                let stack = model.step(&ctx)?;
                let candidates =
                    CandidateSet::below_mature(stack.num_layers(), cfg.decode.candidate_k)?;
                let amateur = select_amateur_layer(&stack, &candidates)?;
                Ok(Some(LayerChoice {
                    id: sample.id.clone(),
                    num_layers: stack.num_layers(),
                    visual: prepass.visual.layer,
                    amateur: amateur.layer,
                }))
            })
            .collect()
    })?;
    let mut choices = Vec::new();
    let mut skipped = Vec::new();
    for (sample, outcome) in dataset.samples.iter().zip(outcomes) {
        match outcome? {
            Some(c) => choices.push(c),
            None => skipped.push(sample.id.clone()),
        }
    }
    Ok((choices, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub visual: usize,
    pub amateur: usize,
}

/// Per-layer selection counts, one row for each layer up to the deepest seen.
pub fn layer_heatmap(choices: &[LayerChoice]) -> Vec<HeatmapRow> {
    let depth = choices.iter().map(|c| c.num_layers).max().unwrap_or(0);
    let mut rows: Vec<HeatmapRow> = (1..=depth)
        .map(|layer| HeatmapRow {
            layer,
            visual: 0,
            amateur: 0,
        })
        .collect();
    for c in choices {
        rows[c.visual - 1].visual += 1;
        rows[c.amateur - 1].amateur += 1;
    }
    rows
}
