use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::Label;
use crate::error::{Error, Result};
use crate::model::SyntheticModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    /// Binary object-existence questions.
    Pope,
    /// Binary questions paired per image, scored per subtask.
    Mme,
    /// Free generation scored against ground-truth object sets.
    Amber,
}

impl SuiteKind {
    pub fn is_binary(self) -> bool {
        matches!(self, SuiteKind::Pope | SuiteKind::Mme)
    }
}

impl fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuiteKind::Pope => "pope",
            SuiteKind::Mme => "mme",
            SuiteKind::Amber => "amber",
        })
    }
}

impl FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pope" => Ok(SuiteKind::Pope),
            "mme" => Ok(SuiteKind::Mme),
            "amber" => Ok(SuiteKind::Amber),
            other => Err(Error::config("suite", format!("unknown suite {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Samples run against a synthetic model, shared or per sample.
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<SyntheticModelConfig>,
    },
    /// Samples replay a trace archive; relative paths resolve against the manifest.
    Trace { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSample {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    /// POPE subset (random, popular, adversarial, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Pairing key for MME.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gt_objects: Vec<String>,
    /// Archive sample id when it differs from `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_sample: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<SyntheticModelConfig>,
}

impl DatasetSample {
    pub fn trace_id(&self) -> &str {
        self.trace_sample.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub suite: SuiteKind,
    pub source: DataSource,
    /// Object vocabulary scanned in generated text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lexicon: Vec<String>,
    /// Hallucination-prone objects counted by Cog.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cog_prone: Vec<String>,
    pub samples: Vec<DatasetSample>,
}

impl Dataset {
    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    /// Reads a manifest and resolves a relative trace directory against it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ds = Self::from_json(&text)?;
        if let DataSource::Trace { dir } = &mut ds.source {
            if dir.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                *dir = base.join(&*dir);
            }
        }
        Ok(ds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::param("samples", "dataset has no samples"));
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if s.id.is_empty() {
                return Err(Error::config("samples.id", "empty sample id"));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::config(
                    "samples.id",
                    format!("duplicate sample id {:?}", s.id),
                ));
            }
            if self.suite.is_binary() && s.label.is_none() {
                return Err(Error::config(
                    "samples.label",
                    format!("sample {:?} needs a yes/no label", s.id),
                ));
            }
            if self.suite == SuiteKind::Mme && s.image.is_none() {
                return Err(Error::config(
                    "samples.image",
                    format!("sample {:?} needs an image key", s.id),
                ));
            }
            match &self.source {
                DataSource::Synthetic { model } => {
                    let cfg = s.model.as_ref().or(model.as_ref()).ok_or_else(|| {
                        Error::config("model", format!("no synthetic model for sample {:?}", s.id))
                    })?;
                    cfg.validate()?;
                }
                DataSource::Trace { .. } => {
                    if s.model.is_some() {
                        return Err(Error::config(
                            "samples.model",
                            "trace datasets cannot carry synthetic models",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Question text sent to the model; binary suites get the answer-format suffix.
    pub fn prompt_for(&self, sample: &DatasetSample, suffix: &str) -> String {
        if self.suite.is_binary() && !suffix.is_empty() {
            format!("{} {suffix}", sample.question)
        } else {
            sample.question.clone()
        }
    }

    pub fn trace_dir(&self) -> Option<&Path> {
        match &self.source {
            DataSource::Trace { dir } => Some(dir),
            DataSource::Synthetic { .. } => None,
        }
    }

    pub fn model_for<'a>(&'a self, sample: &'a DatasetSample) -> Option<&'a SyntheticModelConfig> {
        match &self.source {
            DataSource::Synthetic { model } => sample.model.as_ref().or(model.as_ref()),
            DataSource::Trace { .. } => None,
        }
    }
}
