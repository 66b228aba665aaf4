//! Seeded synthetic suites in which a prior bias in the deep layers
//! overrides visual evidence that surfaces at an intermediate layer.
//!
//! Every sample's model shares one vocabulary and depth:
//!
//! * a filler token carries `+FILLER_BOOST` from layer 1 and is cancelled at
//!   the visual layer `j`, so shallow layers disagree with the mature layer;
//! * the grounded answer gains `GROUNDED_BOOST` from layer `j` on;
//! * the probe answer `"8"` gains `PROBE_BOOST` from layer `j` when the
//!   question mentions the captcha;
//! * biased samples add a prior in `BIAS_RANGE` to a wrong answer from a
//!   depth `d > j`, which flips the mature argmax but keeps the grounded
//!   answer inside the plausible set at `beta = 0.1`.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{DataSource, Dataset, DatasetSample, SuiteKind};
use super::metrics::Label;
use crate::error::{Error, Result};
use crate::model::{
    DecodeContext, Injection, LayeredModel, PriorBias, SyntheticModel, SyntheticModelConfig, Vocab,
};
use crate::prob::argmax;
use crate::trace::{ProbePass, TraceArchive, TraceSample};
use crate::watermark::WatermarkSpec;

pub const FILLER_BOOST: f32 = 10.0;
pub const GROUNDED_BOOST: f32 = 8.0;
pub const PROBE_BOOST: f32 = 8.0;
pub const BIAS_RANGE: RangeInclusive<f32> = 8.75..=9.75;
pub const PROBE_CONDITION: &str = "captcha";

pub const TOKENS: &[&str] = &[
    "<s>", "</s>", "yes", "no", "the", "8", "dog", "cat", "car", "tree", "person", "table",
];
pub const YES: u32 = 2;
pub const NO: u32 = 3;
pub const FILLER: u32 = 4;
pub const PROBE_ANSWER: u32 = 5;
pub const OBJECTS: RangeInclusive<u32> = 6..=11;
const SPLITS: &[&str] = &["random", "popular", "adversarial"];
const SUBTASKS: &[&str] = &["existence", "count"];
const COG_PRONE: &[&str] = &["person", "table"];

pub fn synth_vocab() -> Vocab {
    Vocab::new(TOKENS.iter().map(|s| (*s).to_owned()).collect(), [0, 1])
        .expect("static vocabulary is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSuiteSpec {
    pub suite: SuiteKind,
    pub seed: u64,
    pub samples: usize,
    pub num_layers: usize,
    pub biased_fraction: f64,
    pub noise_scale: f32,
}

impl Default for SynthSuiteSpec {
    fn default() -> Self {
        Self {
            suite: SuiteKind::Pope,
            seed: 0,
            samples: 100,
            num_layers: 16,
            biased_fraction: 0.5,
            noise_scale: 0.25,
        }
    }
}

impl SynthSuiteSpec {
    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::param("samples", "must be at least 1"));
        }
        if self.suite == SuiteKind::Mme && !self.samples.is_multiple_of(2) {
            return Err(Error::param(
                "samples",
                "MME suites need an even sample count",
            ));
        }
        if !(6..=usize::from(u16::MAX)).contains(&self.num_layers) {
            return Err(Error::param(
                "num_layers",
                format!("{} not in [6, 65535]", self.num_layers),
            ));
        }
        if !(0.0..=1.0).contains(&self.biased_fraction) {
            return Err(Error::param("biased_fraction", "must lie in [0, 1]"));
        }
        if !(self.noise_scale.is_finite() && (0.0..=0.5).contains(&self.noise_scale)) {
            return Err(Error::param("noise_scale", "must lie in [0, 0.5]"));
        }
        Ok(())
    }

    /// Range the visual layer is drawn from.
    pub fn visual_range(&self) -> RangeInclusive<usize> {
        3..=(self.num_layers / 2 + 2).min(self.num_layers - 2)
    }
}

fn object_name(token: u32) -> &'static str {
    TOKENS[token as usize]
}

/// Builds the dataset described by `spec`; identical specs give identical datasets.
pub fn synthetic_suite(spec: &SynthSuiteSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_biased = (spec.samples as f64 * spec.biased_fraction).round() as usize;
    let mut biased: Vec<bool> = (0..spec.samples).map(|i| i < n_biased).collect();
    biased.shuffle(&mut rng);
    let vocab = synth_vocab();
    let l = spec.num_layers;
    let objects: Vec<u32> = OBJECTS.collect();

    let mut samples = Vec::with_capacity(spec.samples);
    for (i, &is_biased) in biased.iter().enumerate() {
        let j = rng.random_range(spec.visual_range());
        let depth = rng.random_range(j + 1..=l);
        let bias = rng.random_range(BIAS_RANGE);
        let object = objects[rng.random_range(0..objects.len())];
        let model_seed: u64 = rng.random();

        let (grounded, wrong, label) = match spec.suite {
            SuiteKind::Pope | SuiteKind::Mme => {
                let label = if i % 2 == 0 { Label::Yes } else { Label::No };
                let (g, w) = if label == Label::Yes {
                    (YES, NO)
                } else {
                    (NO, YES)
                };
                (g, w, Some(label))
            }
            SuiteKind::Amber => {
                let others: Vec<u32> = objects.iter().copied().filter(|&o| o != object).collect();
                (object, others[rng.random_range(0..others.len())], None)
            }
        };

        let mut cfg = SyntheticModelConfig::new(model_seed, l, vocab.clone());
        cfg.noise_scale = spec.noise_scale;
        cfg.injections = vec![
            Injection {
                layer: 1,
                token: FILLER,
                boost: FILLER_BOOST,
                condition: None,
            },
            Injection {
                layer: j,
                token: FILLER,
                boost: -FILLER_BOOST,
                condition: None,
            },
            Injection {
                layer: j,
                token: grounded,
                boost: GROUNDED_BOOST,
                condition: None,
            },
            Injection {
                layer: j,
                token: PROBE_ANSWER,
                boost: PROBE_BOOST,
                condition: Some(PROBE_CONDITION.to_owned()),
            },
        ];
        if is_biased {
            cfg.prior_bias = vec![PriorBias { token: wrong, bias }];
            cfg.prior_depth = depth;
        }

        let name = object_name(object);
        let mut sample = DatasetSample {
            id: format!("s{i}"),
            question: match spec.suite {
                SuiteKind::Amber => "Describe the image.".to_owned(),
                _ => format!("Is there a {name} in the image?"),
            },
            label,
            split: None,
            image: None,
            subtask: None,
            gt_objects: Vec::new(),
            trace_sample: None,
            model: Some(cfg),
        };
        match spec.suite {
            SuiteKind::Pope => sample.split = Some(SPLITS[i % SPLITS.len()].to_owned()),
            SuiteKind::Mme => {
                sample.image = Some(format!("img{}", i / 2));
                sample.subtask = Some(SUBTASKS[(i / 2) % SUBTASKS.len()].to_owned());
            }
            SuiteKind::Amber => sample.gt_objects = vec![name.to_owned()],
        }
        samples.push(sample);
    }

    let (lexicon, cog_prone) = match spec.suite {
        SuiteKind::Amber => (
            objects.iter().map(|&o| object_name(o).to_owned()).collect(),
            COG_PRONE.iter().map(|s| (*s).to_owned()).collect(),
        ),
        _ => (Vec::new(), Vec::new()),
    };
    Ok(Dataset {
        suite: spec.suite,
        source: DataSource::Synthetic { model: None },
        lexicon,
        cog_prone,
        samples,
    })
}

/// The layer where the probe answer is injected, if the model has one.
pub fn injected_visual_layer(cfg: &SyntheticModelConfig) -> Option<usize> {
    cfg.injections
        .iter()
        .find(|inj| inj.condition.as_deref() == Some(PROBE_CONDITION))
        .map(|inj| inj.layer)
}

/// Records a synthetic dataset as a trace archive: one probe pass plus
/// `steps` stacks along the mature-layer greedy path for every sample.
pub fn record_trace(
    dataset: &Dataset,
    spec: &WatermarkSpec,
    steps: usize,
    model_name: &str,
) -> Result<TraceArchive> {
    dataset.validate()?;
    if steps == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    let first = dataset
        .model_for(&dataset.samples[0])
        .ok_or_else(|| Error::config("source", "only synthetic datasets can be recorded"))?;
    let (num_layers, vocab) = (first.num_layers, first.vocab.clone());
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let cfg = dataset.model_for(s).ok_or_else(|| {
            Error::config("model", format!("no synthetic model for sample {:?}", s.id))
        })?;
        if cfg.num_layers != num_layers || cfg.vocab != vocab {
            return Err(Error::config(
                "model",
                "recorded samples must share depth and vocabulary",
            ));
        }
        let model = SyntheticModel::new(cfg.clone())?;
        let probe_ctx = DecodeContext::new(Default::default(), spec.probe_question.clone());
        let probe = model.probe_stack(&probe_ctx)?;
        let mut ctx = DecodeContext::new(Default::default(), s.question.clone());
        let mut stacks = Vec::with_capacity(steps);
        let mut greedy = Vec::with_capacity(steps);
        for _ in 0..steps {
            let stack = model.step(&ctx)?;
            let row: Vec<f64> = stack.mature_row().iter().map(|&v| f64::from(v)).collect();
            let token = argmax(&row) as u32;
            greedy.push(token);
            ctx.generated_prefix.push(token);
            stacks.push(stack);
        }
        let mut meta = BTreeMap::new();
        if let Some(j) = injected_visual_layer(cfg) {
            meta.insert("injected_layer".to_owned(), serde_json::Value::from(j));
        }
        samples.push(TraceSample {
            id: s.trace_id().to_owned(),
            question: s.question.clone(),
            greedy_tokens: greedy,
            probe: Some(ProbePass {
                question: spec.probe_question.clone(),
                expected_answer: spec.expected_answer.clone(),
                position: probe.position,
                stack: probe.stack,
            }),
            steps: stacks,
            meta,
        });
    }
    let archive = TraceArchive {
        model: model_name.to_owned(),
        source_layers: (1..=num_layers as u32).collect(),
        vocab,
        samples,
        metadata: BTreeMap::new(),
    };
    archive.validate()?;
    Ok(archive)
}

/// The same samples, replayed from a trace directory instead of live models.
pub fn as_trace_dataset(dataset: &Dataset, dir: impl Into<std::path::PathBuf>) -> Dataset {
    let mut out = dataset.clone();
    out.source = DataSource::Trace { dir: dir.into() };
    for s in &mut out.samples {
        s.model = None;
    }
    out
}
