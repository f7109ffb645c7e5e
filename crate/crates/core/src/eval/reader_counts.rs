//! Import of per-case reader interpretation counts (the raw-results table
//! layout) and their aggregation into phase totals, the paired 2x2 matrix and
//! the McNemar input.

use serde::{Deserialize, Serialize};

use super::matching::PatientMetrics;
use super::mcnemar::McNemarInput;
use super::metrics::MatchCounts;
use super::EvalError;

/// Published raw reader results, 49 cases.
pub const TABLE_S1_CSV: &str = include_str!("../../data/table_s1.csv");

/// How the per-row TP/FP/FN columns relate to the added-lesion column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountsLayout {
    /// Row counts are the final interpretation; additions are already included
    /// and are subtracted to recover the blind phase. The published table sums
    /// to its phase totals under this layout.
    #[default]
    FinalCounts,
    /// Row counts are the blind phase; additions are added on top.
    BlindCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Additions {
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderCaseRow {
    pub case_index: usize,
    pub n_lesions: usize,
    pub suspected: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub added: Additions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderCase {
    pub case_index: usize,
    pub n_lesions: usize,
    pub blind: PhaseCounts,
    pub disclosed: PhaseCounts,
}

/// Paired lesion outcomes without (rows) and with (columns) the software.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedMatrix {
    pub tp_tp: usize,
    pub tp_fn: usize,
    pub fn_tp: usize,
    pub fn_fn: usize,
}

impl PairedMatrix {
    pub fn mcnemar_input(&self) -> McNemarInput {
        McNemarInput { b: self.fn_tp as u64, c: self.tp_fn as u64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyWarning {
    pub case_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderImport {
    pub cases: Vec<ReaderCase>,
    pub blind: MatchCounts,
    pub disclosed: MatchCounts,
    pub matrix: PairedMatrix,
    pub mcnemar: McNemarInput,
    pub warnings: Vec<ConsistencyWarning>,
}

impl ReaderImport {
    pub fn patient_metrics(&self) -> (PatientMetrics, PatientMetrics) {
        let with: Vec<&ReaderCase> = self.cases.iter().filter(|c| c.n_lesions > 0).collect();
        let blind = with.iter().filter(|c| c.blind.tp > 0).count();
        let disclosed = with.iter().filter(|c| c.disclosed.tp > 0).count();
        (PatientMetrics::from_counts(with.len(), blind), PatientMetrics::from_counts(with.len(), disclosed))
    }
}

fn parse_additions(field: &str, line: usize) -> Result<Additions, EvalError> {
    let mut added = Additions::default();
    let field = field.trim();
    if field.is_empty() || field == "0" {
        return Ok(added);
    }
    for part in field.split([';', '+', '/']) {
        let part = part.trim();
        let bad = || EvalError::Schema(format!("line {line}: cannot parse additions {field:?}"));
        let (count, tag) = part.split_once('(').ok_or_else(bad)?;
        let count: usize = count.trim().parse().map_err(|_| bad())?;
        match tag.trim_end_matches(')').trim() {
            "TP" => added.tp += count,
            "FP" => added.fp += count,
            _ => return Err(bad()),
        }
    }
    Ok(added)
}

pub fn parse_reader_rows(csv_text: &str) -> Result<Vec<ReaderCaseRow>, EvalError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(csv_text.as_bytes());
    let headers = reader.headers().map_err(|e| EvalError::Schema(e.to_string()))?.clone();
    if headers.len() != 7 {
        return Err(EvalError::Schema(format!("expected 7 columns, found {}", headers.len())));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| EvalError::Schema(format!("line {line}: {e}")))?;
        let int = |k: usize| {
            rec[k].trim().parse::<usize>().map_err(|_| EvalError::Schema(format!("line {line}: column {} is not a count", k + 1)))
        };
        rows.push(ReaderCaseRow {
            case_index: int(0)?,
            n_lesions: int(1)?,
            suspected: int(2)?,
            tp: int(3)?,
            fp: int(4)?,
            fn_: int(5)?,
            added: parse_additions(&rec[6], line)?,
        });
    }
    Ok(rows)
}

/// Aggregates reader rows under the no-deletion rule: every blind TP stays a TP,
/// so the TP-to-FN cell is zero by construction.
pub fn aggregate_reader_rows(rows: &[ReaderCaseRow], layout: CountsLayout) -> ReaderImport {
    let mut warnings = Vec::new();
    let mut cases = Vec::with_capacity(rows.len());
    for r in rows {
        let mut warn = |message: String| warnings.push(ConsistencyWarning { case_index: r.case_index, message });
        if r.tp + r.fp != r.suspected {
            warn(format!("TP {} + FP {} != suspected {}", r.tp, r.fp, r.suspected));
        }
        if r.tp + r.fn_ != r.n_lesions {
            warn(format!("TP {} + FN {} != lesions {}", r.tp, r.fn_, r.n_lesions));
        }
        let (blind, disclosed) = match layout {
            CountsLayout::FinalCounts => {
                if r.added.tp > r.tp || r.added.fp > r.fp {
                    warn(format!("additions {:?} exceed final counts TP {} FP {}", r.added, r.tp, r.fp));
                }
                let blind = PhaseCounts {
                    tp: r.tp.saturating_sub(r.added.tp),
                    fp: r.fp.saturating_sub(r.added.fp),
                    fn_: r.fn_ + r.added.tp.min(r.tp),
                };
                (blind, PhaseCounts { tp: r.tp, fp: r.fp, fn_: r.fn_ })
            }
            CountsLayout::BlindCounts => {
                if r.added.tp > r.fn_ {
                    warn(format!("added TP {} exceeds remaining FN {}", r.added.tp, r.fn_));
                }
                let disclosed = PhaseCounts {
                    tp: r.tp + r.added.tp,
                    fp: r.fp + r.added.fp,
                    fn_: r.fn_.saturating_sub(r.added.tp),
                };
                (PhaseCounts { tp: r.tp, fp: r.fp, fn_: r.fn_ }, disclosed)
            }
        };
        cases.push(ReaderCase { case_index: r.case_index, n_lesions: r.n_lesions, blind, disclosed });
    }
    let n_cases = cases.len();
    let total = |f: fn(&ReaderCase) -> PhaseCounts| {
        cases.iter().map(f).fold(MatchCounts::new(0, 0, 0, n_cases), |mut acc, p| {
            acc.tp += p.tp;
            acc.fp += p.fp;
            acc.fn_ += p.fn_;
            acc
        })
    };
    let blind = total(|c| c.blind);
    let disclosed = total(|c| c.disclosed);
    let tp_tp = blind.tp;
    let fn_tp = disclosed.tp - blind.tp.min(disclosed.tp);
    let matrix = PairedMatrix { tp_tp, tp_fn: 0, fn_tp, fn_fn: blind.fn_.saturating_sub(fn_tp) };
    ReaderImport { cases, blind, disclosed, matrix, mcnemar: matrix.mcnemar_input(), warnings }
}

pub fn import_reader_counts(csv_text: &str, layout: CountsLayout) -> Result<ReaderImport, EvalError> {
    Ok(aggregate_reader_rows(&parse_reader_rows(csv_text)?, layout))
}
