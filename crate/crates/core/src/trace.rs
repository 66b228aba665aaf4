//! Trace archives: recorded per-layer logits from a real model, replayed
//! teacher-forced.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/samples/<id>.tcdt
//! ```
//!
//! A `.tcdt` file is a sequence of records. Each record is a 16-byte
//! little-endian header followed by `L * |V|` little-endian `f32` logits,
//! layer-major then token-major:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `TCDT`                   |
//! | 4      | 2    | format version (`1`)           |
//! | 6      | 2    | layer count `L`                |
//! | 8      | 4    | vocabulary size `|V|`          |
//! | 12     | 4    | step index (`0xFFFFFFFF` = probe pass) |
//!
//! The probe-pass record, when present, comes first; decoding steps follow
//! in order. The manifest stores a CRC-32 of each whole sample file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ContextImage, DecodeContext, LayerLogitStack, LayeredModel, ProbeStack, Vocab};
use crate::prob::argmax;

pub const MAGIC: [u8; 4] = *b"TCDT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
/// Step index marking the watermark probe-pass record.
pub const PROBE_STEP: u32 = u32::MAX;
pub const MANIFEST_FORMAT: &str = "tcd-trace";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_DIR: &str = "samples";
pub const SAMPLE_EXT: &str = "tcdt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordHeader {
    pub version: u16,
    pub num_layers: u16,
    pub vocab_size: u32,
    pub step: u32,
}

impl RecordHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..8].copy_from_slice(&self.num_layers.to_le_bytes());
        out[8..12].copy_from_slice(&self.vocab_size.to_le_bytes());
        out[12..16].copy_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let Some(h) = bytes.get(..HEADER_LEN) else {
            return Err(Error::Truncated(format!(
                "record header needs {HEADER_LEN} bytes, {} left",
                bytes.len()
            )));
        };
        if h[0..4] != MAGIC {
            return Err(Error::Trace(format!("bad record magic {:02x?}", &h[0..4])));
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Trace(format!(
                "unsupported record version {version}"
            )));
        }
        Ok(Self {
            version,
            num_layers: u16::from_le_bytes([h[6], h[7]]),
            vocab_size: u32::from_le_bytes([h[8], h[9], h[10], h[11]]),
            step: u32::from_le_bytes([h[12], h[13], h[14], h[15]]),
        })
    }

    fn payload_len(&self) -> Result<usize> {
        usize::from(self.num_layers)
            .checked_mul(self.vocab_size as usize)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Trace("record payload size overflows".into()))
    }
}

pub fn encode_record(stack: &LayerLogitStack, step: u32) -> Result<Vec<u8>> {
    let header = RecordHeader {
        version: FORMAT_VERSION,
        num_layers: u16::try_from(stack.num_layers())
            .map_err(|_| Error::Trace("more than 65535 layers".into()))?,
        vocab_size: u32::try_from(stack.vocab_size())
            .map_err(|_| Error::Trace("vocabulary exceeds u32".into()))?,
        step,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + stack.as_flat().len() * 4);
    out.extend_from_slice(&header.to_bytes());
    for v in stack.as_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes every record in a sample file body. Does not check the checksum.
pub fn decode_records(mut bytes: &[u8]) -> Result<Vec<(RecordHeader, LayerLogitStack)>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let header = RecordHeader::parse(bytes)?;
        let len = header.payload_len()?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < len {
            return Err(Error::Truncated(format!(
                "record payload has {} of {len} bytes",
                body.len()
            )));
        }
        let values: Vec<f32> = body[..len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let step_index = if header.step == PROBE_STEP {
            0
        } else {
            header.step
        };
        let stack = LayerLogitStack::new(
            step_index,
            usize::from(header.num_layers),
            header.vocab_size as usize,
            values,
        )?;
        out.push((header, stack));
        bytes = &body[len..];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRecord {
    pub question: String,
    pub expected_answer: String,
    /// Answer position the stack was taken at (first content token).
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleDescriptor {
    pub id: String,
    pub question: String,
    pub steps: usize,
    /// The host model's own greedy tokens for the recorded steps.
    pub greedy_tokens: Vec<u32>,
    /// `crc32:xxxxxxxx` over the whole sample file.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// On-disk `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub format: String,
    pub version: u16,
    pub model: String,
    pub num_layers: usize,
    /// Host-model layer index behind each row; the last entry is the mature layer.
    pub source_layers: Vec<u32>,
    pub vocab: Vocab,
    pub samples: Vec<SampleDescriptor>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl TraceManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Trace(format!(
                "unknown manifest format {:?}",
                self.format
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Trace(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if self.num_layers < 2 || self.num_layers > usize::from(u16::MAX) {
            return Err(Error::Trace(format!(
                "num_layers {} not in [2, 65535]",
                self.num_layers
            )));
        }
        check_source_layers(&self.source_layers, self.num_layers)?;
        let mut seen = HashSet::new();
        for s in &self.samples {
            check_sample_id(&s.id)?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Trace(format!("duplicate sample id {:?}", s.id)));
            }
            if s.greedy_tokens.len() != s.steps {
                return Err(Error::Trace(format!(
                    "sample {:?}: {} greedy tokens for {} steps",
                    s.id,
                    s.greedy_tokens.len(),
                    s.steps
                )));
            }
            for &t in &s.greedy_tokens {
                self.vocab.check(t)?;
            }
            parse_checksum(&s.checksum)
                .map_err(|e| Error::Trace(format!("sample {:?}: {e}", s.id)))?;
        }
        Ok(())
    }
}

fn check_source_layers(layers: &[u32], num_layers: usize) -> Result<()> {
    if layers.len() != num_layers {
        return Err(Error::Trace(format!(
            "{} source layers listed for {num_layers} rows",
            layers.len()
        )));
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Trace(
            "source layers must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Sample ids double as file names.
pub fn check_sample_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Trace(format!("invalid sample id {id:?}")))
    }
}

fn parse_checksum(text: &str) -> std::result::Result<u32, String> {
    text.strip_prefix("crc32:")
        .filter(|h| h.len() == 8)
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| format!("malformed checksum {text:?}"))
}

fn format_checksum(crc: u32) -> String {
    format!("crc32:{crc:08x}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePass {
    pub question: String,
    pub expected_answer: String,
    pub position: usize,
    pub stack: LayerLogitStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub id: String,
    pub question: String,
    pub greedy_tokens: Vec<u32>,
    pub probe: Option<ProbePass>,
    pub steps: Vec<LayerLogitStack>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl TraceSample {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        if let Some(probe) = &self.probe {
            out.extend(encode_record(&probe.stack, PROBE_STEP)?);
        }
        for (i, stack) in self.steps.iter().enumerate() {
            let step = u32::try_from(i).map_err(|_| Error::Trace("too many steps".into()))?;
            out.extend(encode_record(stack, step)?);
        }
        Ok(out)
    }
}

/// An in-memory trace archive.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceArchive {
    pub model: String,
    pub source_layers: Vec<u32>,
    pub vocab: Vocab,
    pub samples: Vec<TraceSample>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl TraceArchive {
    pub fn num_layers(&self) -> usize {
        self.source_layers.len()
    }

    pub fn sample(&self, id: &str) -> Result<&TraceSample> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Trace(format!("no sample {id:?} in archive")))
    }

    /// Shape and consistency checks shared by reader and writer.
    pub fn validate(&self) -> Result<()> {
        let l = self.num_layers();
        if l < 2 || l > usize::from(u16::MAX) {
            return Err(Error::Trace(format!("num_layers {l} not in [2, 65535]")));
        }
        check_source_layers(&self.source_layers, l)?;
        let v = self.vocab.len();
        let mut seen = HashSet::new();
        for s in &self.samples {
            check_sample_id(&s.id)?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Trace(format!("duplicate sample id {:?}", s.id)));
            }
            if s.greedy_tokens.len() != s.steps.len() {
                return Err(Error::Trace(format!(
                    "sample {:?}: {} greedy tokens for {} steps",
                    s.id,
                    s.greedy_tokens.len(),
                    s.steps.len()
                )));
            }
            for &t in &s.greedy_tokens {
                self.vocab.check(t)?;
            }
            for (i, stack) in s.steps.iter().enumerate() {
                if stack.step_index() as usize != i {
                    return Err(Error::Trace(format!(
                        "sample {:?}: stack {i} carries step index {}",
                        s.id,
                        stack.step_index()
                    )));
                }
            }
            if let Some(p) = &s.probe {
                if p.stack.step_index() as usize != p.position {
                    return Err(Error::Trace(format!(
                        "sample {:?}: probe stack index differs from its position",
                        s.id
                    )));
                }
            }
            let stacks = s.probe.iter().map(|p| &p.stack).chain(&s.steps);
            for stack in stacks {
                if stack.num_layers() != l || stack.vocab_size() != v {
                    return Err(Error::Trace(format!(
                        "sample {:?}: {}x{} stack in a {l}x{v} archive",
                        s.id,
                        stack.num_layers(),
                        stack.vocab_size()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Writes `archive` under `dir`, creating it if needed.
pub fn write_trace(archive: &TraceArchive, dir: impl AsRef<Path>) -> Result<()> {
    archive.validate()?;
    let dir = dir.as_ref();
    let samples_dir = dir.join(SAMPLES_DIR);
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut descriptors = Vec::with_capacity(archive.samples.len());
    for sample in &archive.samples {
        let bytes = sample.encode()?;
        let path = sample_path(dir, &sample.id);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        descriptors.push(SampleDescriptor {
            id: sample.id.clone(),
            question: sample.question.clone(),
            steps: sample.steps.len(),
            greedy_tokens: sample.greedy_tokens.clone(),
            checksum: format_checksum(crc32fast::hash(&bytes)),
            probe: sample.probe.as_ref().map(|p| ProbeRecord {
                question: p.question.clone(),
                expected_answer: p.expected_answer.clone(),
                position: p.position,
            }),
            meta: sample.meta.clone(),
        });
    }
    let manifest = TraceManifest {
        format: MANIFEST_FORMAT.to_owned(),
        version: FORMAT_VERSION,
        model: archive.model.clone(),
        num_layers: archive.num_layers(),
        source_layers: archive.source_layers.clone(),
        vocab: archive.vocab.clone(),
        samples: descriptors,
        metadata: archive.metadata.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn sample_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(SAMPLES_DIR).join(format!("{id}.{SAMPLE_EXT}"))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<TraceManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    TraceManifest::from_json(&text)
}

/// Decodes one sample file after verifying its checksum against the manifest.
pub fn decode_sample(
    manifest: &TraceManifest,
    desc: &SampleDescriptor,
    bytes: &[u8],
) -> Result<TraceSample> {
    let expected = parse_checksum(&desc.checksum).map_err(Error::Trace)?;
    let found = crc32fast::hash(bytes);
    if found != expected {
        return Err(Error::Checksum {
            sample: desc.id.clone(),
            expected,
            found,
        });
    }
    let mut records = decode_records(bytes)
        .map_err(|e| Error::Trace(format!("sample {:?}: {e}", desc.id)))?
        .into_iter()
        .peekable();
    let probe = match (&desc.probe, records.peek()) {
        (Some(p), Some((h, _))) if h.step == PROBE_STEP => {
            let (_, stack) = records.next().expect("peeked");
            let stack = stack.with_step_index(u32::try_from(p.position).unwrap_or(u32::MAX));
            Some(ProbePass {
                question: p.question.clone(),
                expected_answer: p.expected_answer.clone(),
                position: p.position,
                stack,
            })
        }
        (Some(_), _) => {
            return Err(Error::Trace(format!(
                "sample {:?}: probe record missing",
                desc.id
            )));
        }
        (None, _) => None,
    };
    let mut steps = Vec::with_capacity(desc.steps);
    for (i, (header, stack)) in records.enumerate() {
        if header.step as usize != i {
            return Err(Error::Trace(format!(
                "sample {:?}: record {i} carries step {}",
                desc.id, header.step
            )));
        }
        if stack.num_layers() != manifest.num_layers || stack.vocab_size() != manifest.vocab.len() {
            return Err(Error::Trace(format!(
                "sample {:?}: {}x{} record in a {}x{} archive",
                desc.id,
                stack.num_layers(),
                stack.vocab_size(),
                manifest.num_layers,
                manifest.vocab.len()
            )));
        }
        steps.push(stack);
    }
    if let Some(p) = &probe {
        if p.stack.num_layers() != manifest.num_layers
            || p.stack.vocab_size() != manifest.vocab.len()
        {
            return Err(Error::Trace(format!(
                "sample {:?}: probe record shape mismatch",
                desc.id
            )));
        }
    }
    if steps.len() != desc.steps {
        return Err(Error::Trace(format!(
            "sample {:?}: {} step records, manifest says {}",
            desc.id,
            steps.len(),
            desc.steps
        )));
    }
    Ok(TraceSample {
        id: desc.id.clone(),
        question: desc.question.clone(),
        greedy_tokens: desc.greedy_tokens.clone(),
        probe,
        steps,
        meta: desc.meta.clone(),
    })
}

pub fn read_trace(dir: impl AsRef<Path>) -> Result<TraceArchive> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for desc in &manifest.samples {
        let path = sample_path(dir, &desc.id);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        samples.push(decode_sample(&manifest, desc, &bytes)?);
    }
    Ok(TraceArchive {
        model: manifest.model,
        source_layers: manifest.source_layers,
        vocab: manifest.vocab,
        samples,
        metadata: manifest.metadata,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub model: String,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub samples: usize,
    pub steps: usize,
    pub probe_records: usize,
    /// Steps whose mature-row argmax differs from the recorded greedy token.
    pub greedy_mismatches: usize,
}

/// Full read with checksum and shape checks; greedy replay is counted, not enforced.
pub fn validate_trace(dir: impl AsRef<Path>) -> Result<ValidationReport> {
    let archive = read_trace(dir)?;
    archive.validate()?;
    let greedy_mismatches = archive
        .samples
        .iter()
        .flat_map(|s| s.steps.iter().zip(&s.greedy_tokens))
        .filter(|(stack, &tok)| {
            let row: Vec<f64> = stack.mature_row().iter().map(|&v| f64::from(v)).collect();
            argmax(&row) as u32 != tok
        })
        .count();
    Ok(ValidationReport {
        model: archive.model.clone(),
        num_layers: archive.num_layers(),
        vocab_size: archive.vocab.len(),
        samples: archive.samples.len(),
        steps: archive.samples.iter().map(|s| s.steps.len()).sum(),
        probe_records: archive.samples.iter().filter(|s| s.probe.is_some()).count(),
        greedy_mismatches,
    })
}

/// Teacher-forced replay: the stack recorded at step `ctx.generated_prefix.len()`.
pub fn trace_step(
    archive: &TraceArchive,
    sample: &str,
    ctx: &DecodeContext,
) -> Result<LayerLogitStack> {
    let s = archive.sample(sample)?;
    let step = ctx.step();
    s.steps
        .get(step)
        .cloned()
        .ok_or_else(|| Error::ReplayExhausted {
            sample: sample.to_owned(),
            step,
            recorded: s.steps.len(),
        })
}

/// Replays a trace archive through the [`LayeredModel`] interface.
///
/// Contexts must carry [`ContextImage::TraceSample`] naming the sample.
#[derive(Debug, Clone)]
pub struct TraceModel {
    archive: Arc<TraceArchive>,
}

impl TraceModel {
    pub fn new(archive: Arc<TraceArchive>) -> Self {
        Self { archive }
    }

    pub fn archive(&self) -> &TraceArchive {
        &self.archive
    }

    fn sample_id<'a>(&self, ctx: &'a DecodeContext) -> Result<&'a str> {
        match &ctx.image {
            ContextImage::TraceSample(id) => Ok(id),
            _ => Err(Error::Trace(
                "trace-backed model needs a trace sample id in the context".into(),
            )),
        }
    }
}

impl LayeredModel for TraceModel {
    fn num_layers(&self) -> usize {
        self.archive.num_layers()
    }

    fn vocab(&self) -> &Vocab {
        &self.archive.vocab
    }

    fn step(&self, ctx: &DecodeContext) -> Result<LayerLogitStack> {
        trace_step(&self.archive, self.sample_id(ctx)?, ctx)
    }

    fn probe_stack(&self, ctx: &DecodeContext) -> Result<ProbeStack> {
        let id = self.sample_id(ctx)?;
        let probe = self
            .archive
            .sample(id)?
            .probe
            .as_ref()
            .ok_or_else(|| Error::Trace(format!("sample {id:?} has no probe-pass record")))?;
        Ok(ProbeStack {
            stack: probe.stack.clone(),
            position: probe.position,
        })
    }
}
