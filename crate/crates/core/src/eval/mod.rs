//! Ranking metrics, the segmentation-aggregation baseline and report output.

mod metrics;
mod report;

pub use metrics::{
    aggregate_segmentation, average_precision, confusion_matrix, pr_curve, roc_auc, roc_curve, Confusion,
};
pub use report::{
    evaluate, render_table, write_curves, FixedScorer, MetricsReport, ModelScorer, ScoredStudy, Scorer, TableRow,
    AP_METHOD, DEFAULT_THRESHOLD,
};
