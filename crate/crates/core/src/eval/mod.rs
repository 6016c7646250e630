//! Metrics (NE, relative change, purity, recall) and the synthetic
//! end-to-end experiment.

mod experiment;
mod metrics;

pub use experiment::{
    heldout_ne, knn_recall, recall_vs_baseline, report_for, run_experiment, run_pipeline, run_sweep,
    ExperimentReport, Metric, PipelineRun, RecallResult, Timing, REPORT_FOOTER,
};
pub use metrics::{
    format_percent, mean_std, neighbor_purity, normalized_entropy, relative_metric_change, retrieval_recall, Platt,
    PREDICTION_CLIP,
};
