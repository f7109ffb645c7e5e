//! Measurement core: box overlap, grouping of per-slice detections into
//! findings, lesion- and patient-level matching, metrics, F1 threshold
//! selection, the exact McNemar test and reader-count import.

mod matching;
mod mcnemar;
mod metrics;
mod published;
mod reader_counts;
mod sweep;

use thiserror::Error;

pub use matching::{
    compute_patient_metrics, finding_lesion_iou, group_findings, iou, match_case, match_lesions, CaseFindings,
    CaseMatch, Finding, PatientMetrics, DEFAULT_IOU_THRESHOLD,
};
pub(crate) use matching::iou_unchecked;
pub use mcnemar::{mcnemar_exact, McNemarInput};
pub use metrics::{
    compute_metrics, round_f64_half_up, round_percent, round_ratio_half_up, table1_report, Decimal, FormattedRow,
    MatchCounts, MetricsRow, ReportRow, Table1Report, TABLE1_CSV_HEADER,
};
pub use published::{
    check_published, published_counts, CellCheck, PublishedCheck, PUBLISHED_CASES, PUBLISHED_DISCORDANT, PUBLISHED_LESIONS,
    PUBLISHED_P, PUBLISHED_ROWS,
};
pub use reader_counts::{
    aggregate_reader_rows, import_reader_counts, parse_reader_rows, Additions, ConsistencyWarning, CountsLayout,
    PairedMatrix, PhaseCounts, ReaderCase, ReaderCaseRow, ReaderImport, TABLE_S1_CSV,
};
pub use sweep::{cut_points, evaluate_at, sweep_threshold, EvalCase, SweepPoint, SweepResult};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("degenerate box: non-positive width or height")]
    DegenerateBox,
    #[error("no lesions in the evaluated set; sensitivity is undefined")]
    ZeroLesions,
    #[error("schema error: {0}")]
    Schema(String),
}
