//! Published detection summary and paired reader comparison, as lesion counts
//! back-solved from the printed percentages, with a self-check that recomputes
//! every printed cell.

use serde::Serialize;

use super::mcnemar::{mcnemar_exact, McNemarInput};
use super::metrics::{round_f64_half_up, FormattedRow, MatchCounts};
use super::EvalError;

pub const PUBLISHED_LESIONS: usize = 75;
pub const PUBLISHED_CASES: usize = 49;

/// Name, (tp, fp, fn), printed sensitivity %, FPC, precision %, F1.
pub const PUBLISHED_ROWS: [(&str, (usize, usize, usize), [&str; 4]); 5] = [
    ("one-stage", (32, 139, 43), ["42.7", "2.837", "18.7", "0.260"]),
    ("two-stage-1slice", (23, 103, 52), ["30.7", "2.102", "18.2", "0.229"]),
    ("two-stage-3slice", (28, 62, 47), ["37.3", "1.265", "31.1", "0.339"]),
    ("reader-blind", (25, 16, 50), ["33.3", "0.327", "61.0", "0.431"]),
    ("reader-with-software", (31, 19, 44), ["41.3", "0.388", "62.0", "0.496"]),
];

/// Discordant lesions (undetected then detected, detected then undetected).
pub const PUBLISHED_DISCORDANT: (u64, u64) = (6, 0);
pub const PUBLISHED_P: &str = "0.0313";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCheck {
    pub row: String,
    pub column: &'static str,
    pub computed: String,
    pub published: String,
}

impl CellCheck {
    pub fn ok(&self) -> bool {
        self.computed == self.published
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PublishedCheck {
    pub cells: Vec<CellCheck>,
    pub p_value: f64,
}

impl PublishedCheck {
    pub fn ok(&self) -> bool {
        self.cells.iter().all(CellCheck::ok)
    }

    pub fn mismatches(&self) -> Vec<&CellCheck> {
        self.cells.iter().filter(|c| !c.ok()).collect()
    }
}

pub fn published_counts() -> Vec<(String, MatchCounts)> {
    PUBLISHED_ROWS.iter().map(|(n, (tp, fp, fn_), _)| (n.to_string(), MatchCounts::new(*tp, *fp, *fn_, PUBLISHED_CASES))).collect()
}

/// Recomputes every printed cell from the counts.
pub fn check_published() -> Result<PublishedCheck, EvalError> {
    let mut cells = Vec::new();
    for (name, (tp, fp, fn_), printed) in PUBLISHED_ROWS {
        let r = FormattedRow::from_counts(name, &MatchCounts::new(tp, fp, fn_, PUBLISHED_CASES))?;
        let computed = [r.sensitivity_pct, r.fpc, r.precision_pct, r.f1];
        for ((column, value), published) in ["sensitivity_pct", "fpc", "precision_pct", "f1"].into_iter().zip(computed).zip(printed) {
            cells.push(CellCheck { row: name.to_string(), column, computed: value.to_string(), published: published.to_string() });
        }
    }
    let (b, c) = PUBLISHED_DISCORDANT;
    let p_value = mcnemar_exact(McNemarInput { b, c });
    cells.push(CellCheck { row: "mcnemar".into(), column: "p", computed: round_f64_half_up(p_value, 4).to_string(), published: PUBLISHED_P.into() });
    Ok(PublishedCheck { cells, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_cell_matches() {
        let c = check_published().unwrap();
        assert!(c.ok(), "{:?}", c.mismatches());
        assert_eq!(c.cells.len(), 21);
        assert!(published_counts().iter().all(|(_, m)| m.lesions() == PUBLISHED_LESIONS));
    }
}
