//! Matching, confusion accounting, metrics, reports and the pipeline runner.

mod matching;
mod metrics;
mod pipeline;
mod report;

pub use matching::{
    centroid_distance_mm, hungarian, iou, match_truth, pair_costs, truth_voxels, MatchPolicy, TruthMatch,
};
pub use metrics::{confusion, dice3d, evaluate_study, metrics, ConfusionCounts, MetricsReport};
pub use pipeline::{
    filter_study, is_backend_error, run_ablation, study_counts, AblationRow, FilterOptions, FilterOutcome,
    OnBackendError,
};
pub use report::{
    emit_report, fp_histogram_csv, parse_report_csv, report_csv, report_text, CsvRow, Report, ReportRow,
    CSV_HEADER,
};
