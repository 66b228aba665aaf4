use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;
use tcd_core::config::RawConfig;
use tcd_core::eval::{
    run_suite, Dataset, DecodeSummary, MetricReport, Prediction, SampleRecord, SuiteKind,
    SuiteMetrics,
};

use super::out_dir;
use crate::args::{DecodeFlags, WatermarkFlags};
use crate::output::{csv_string, ensure_dir, json_pretty, jsonl, stdout, write_text};
use crate::{Ctx, Usage};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// pope, mme or amber; must match the dataset.
    #[arg(long)]
    suite: SuiteKind,
    /// Dataset manifest; falls back to the configured `dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory for report.json, samples.jsonl, samples.csv and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[command(flatten)]
    watermark: WatermarkFlags,
}

#[derive(Serialize)]
struct SampleRow<'a> {
    id: &'a str,
    split: Option<&'a str>,
    image: Option<&'a str>,
    gold: Option<&'static str>,
    visual_layer: usize,
    tcd: String,
    baseline: String,
    tcd_text: String,
    baseline_text: String,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    decoder: &'a str,
    scope: &'a str,
    metric: &'a str,
    value: f64,
}

fn answer_cell(d: &DecodeSummary) -> String {
    match (d.answer, &d.mentioned) {
        (Some(Prediction::Yes), _) => "yes".into(),
        (Some(Prediction::No), _) => "no".into(),
        (Some(Prediction::Invalid), _) => "invalid".into(),
        (None, Some(m)) => m.iter().cloned().collect::<Vec<_>>().join(";"),
        (None, None) => String::new(),
    }
}

fn sample_row(r: &SampleRecord) -> SampleRow<'_> {
    SampleRow {
        id: &r.id,
        split: r.split.as_deref(),
        image: r.image.as_deref(),
        gold: r.gold.map(|g| match g {
            tcd_core::eval::Label::Yes => "yes",
            tcd_core::eval::Label::No => "no",
        }),
        visual_layer: r.visual_layer,
        tcd: answer_cell(&r.tcd),
        baseline: answer_cell(&r.baseline),
        tcd_text: r.tcd.tokens.join(" "),
        baseline_text: r.baseline.tokens.join(" "),
    }
}

fn metric_rows<'a>(decoder: &'a str, m: &'a SuiteMetrics) -> Vec<MetricRow<'a>> {
    let row = |scope, metric, value| MetricRow {
        decoder,
        scope,
        metric,
        value,
    };
    let mut rows = Vec::new();
    match m {
        SuiteMetrics::Binary(b) => {
            let mut push = |scope: &'a str, x: &'a tcd_core::eval::BinaryMetrics| {
                rows.push(row(scope, "accuracy", x.accuracy));
                rows.push(row(scope, "precision", x.precision));
                rows.push(row(scope, "recall", x.recall));
                rows.push(row(scope, "f1", x.f1));
            };
            push("micro", &b.micro);
            for (split, x) in &b.splits {
                push(split, x);
            }
            rows.push(row("macro", "accuracy", b.macro_accuracy));
            rows.push(row("macro", "f1", b.macro_f1));
        }
        SuiteMetrics::Mme(x) => {
            for (task, score) in &x.subtasks {
                rows.push(row(task, "score", *score));
            }
            rows.push(row("total", "score", x.total));
        }
        SuiteMetrics::Amber(x) => {
            rows.push(row("all", "chair", x.chair));
            rows.push(row("all", "cover", x.cover));
            rows.push(row("all", "hal_rate", x.hal_rate));
            rows.push(row("all", "cog", x.cog));
        }
    }
    rows
}

fn metrics_csv(report: &MetricReport) -> Result<String> {
    let mut rows = metric_rows("tcd", &report.tcd);
    rows.extend(metric_rows("baseline", &report.baseline));
    csv_string(rows)
}

pub fn run(ctx: &Ctx, args: Args) -> Result<()> {
    let mut raw = RawConfig {
        dataset: args.dataset.clone(),
        ..RawConfig::default()
    };
    args.decode.apply(&mut raw);
    args.watermark.apply(&mut raw);
    let cfg = ctx.engine(raw)?;
    let path = cfg
        .dataset
        .clone()
        .ok_or_else(|| Usage("--dataset is required (or set `dataset` in the config)".into()))?;
    let ds = Dataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))?;
    if ds.suite != args.suite {
        return Err(Usage(format!(
            "--suite {} does not match the dataset's suite {}",
            args.suite, ds.suite
        ))
        .into());
    }
    let run = run_suite(&ds, &cfg)?;
    let report = json_pretty(&run.report)?;
    if let Some(dir) = out_dir(args.out, cfg.out.as_deref()) {
        ensure_dir(&dir)?;
        write_text(&dir.join("report.json"), &report)?;
        write_text(&dir.join("samples.jsonl"), &jsonl(&run.records)?)?;
        write_text(
            &dir.join("samples.csv"),
            &csv_string(run.records.iter().map(sample_row))?,
        )?;
        write_text(&dir.join("metrics.csv"), &metrics_csv(&run.report)?)?;
    }
    stdout(&report)
}
