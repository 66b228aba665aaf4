//! Hallucination metrics and the suite runner.

mod dataset;
mod metrics;
mod suite;
pub mod synth;

pub use dataset::{DataSource, Dataset, DatasetSample, SuiteKind};
pub use metrics::{
    amber_metrics, binary_metrics, extract_objects, mme_score, pair_by_image, parse_binary_answer,
    AmberMetrics, BinaryMetrics, BinarySample, GenerativeSample, Label, Prediction,
};
pub use suite::{
    layer_heatmap, run_suite, select_layers, BinaryReport, DecodeSummary, HeatmapRow, LayerChoice,
    MetricReport, MmeReport, SampleRecord, SuiteMetrics, SuiteRun,
};
