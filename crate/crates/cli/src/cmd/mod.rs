pub mod decode;
pub mod eval;
pub mod select;
pub mod synth;
pub mod trace;
pub mod watermark;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use tcd_core::eval::{DataSource, Dataset, DatasetSample, SuiteKind};
use tcd_core::model::{ContextImage, LayeredModel, SyntheticModel};
use tcd_core::trace::{read_manifest, read_trace, TraceModel};

use crate::Usage;

/// `--trace DIR` or `--dataset FILE`, with an optional config fallback for the trace dir.
pub fn open_dataset(
    trace: Option<&Path>,
    dataset: Option<&Path>,
    fallback_trace: Option<&Path>,
) -> Result<Dataset> {
    match (trace, dataset) {
        (Some(_), Some(_)) => {
            Err(Usage("pass either --trace or --dataset, not both".into()).into())
        }
        (None, Some(path)) => {
            Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
        }
        (Some(dir), None) => archive_dataset(dir),
        (None, None) => match fallback_trace {
            Some(dir) => archive_dataset(dir),
            None => Err(Usage("one of --trace or --dataset is required".into()).into()),
        },
    }
}

/// Every sample of a trace archive, as an unlabeled dataset.
fn archive_dataset(dir: &Path) -> Result<Dataset> {
    let manifest =
        read_manifest(dir).with_context(|| format!("reading trace {}", dir.display()))?;
    Ok(Dataset {
        suite: SuiteKind::Amber,
        source: DataSource::Trace {
            dir: dir.to_path_buf(),
        },
        lexicon: Vec::new(),
        cog_prone: Vec::new(),
        samples: manifest
            .samples
            .into_iter()
            .map(|s| DatasetSample {
                id: s.id,
                question: s.question,
                label: None,
                split: None,
                image: None,
                subtask: None,
                gt_objects: Vec::new(),
                trace_sample: None,
                model: None,
            })
            .collect(),
    })
}

pub struct OpenSample {
    pub model: Box<dyn LayeredModel>,
    pub image: ContextImage,
    pub question: String,
    /// Recorded steps when the sample replays a trace.
    pub horizon: Option<usize>,
}

pub fn open_sample(ds: &Dataset, id: &str, prompt_suffix: &str) -> Result<OpenSample> {
    let sample = ds
        .samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| tcd_core::Error::Trace(format!("no sample {id:?} in the input")))?;
    let question = ds.prompt_for(sample, prompt_suffix);
    match &ds.source {
        DataSource::Synthetic { .. } => {
            let cfg = ds.model_for(sample).ok_or_else(|| {
                tcd_core::Error::Trace(format!("no synthetic model for sample {id:?}"))
            })?;
            Ok(OpenSample {
                model: Box::new(SyntheticModel::new(cfg.clone())?),
                image: ContextImage::None,
                question,
                horizon: None,
            })
        }
        DataSource::Trace { dir } => {
            let archive =
                read_trace(dir).with_context(|| format!("reading trace {}", dir.display()))?;
            let trace_id = sample.trace_id().to_owned();
            let horizon = archive.sample(&trace_id)?.steps.len();
            Ok(OpenSample {
                model: Box::new(TraceModel::new(Arc::new(archive))),
                image: ContextImage::TraceSample(trace_id),
                question,
                horizon: Some(horizon),
            })
        }
    }
}

pub fn out_dir(flag: Option<PathBuf>, config: Option<&Path>) -> Option<PathBuf> {
    flag.or_else(|| config.map(Path::to_path_buf))
}
