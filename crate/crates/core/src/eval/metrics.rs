use std::fmt;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Lesion-level tallies over an evaluated case set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_cases: usize,
}

impl MatchCounts {
    pub fn new(tp: usize, fp: usize, fn_: usize, n_cases: usize) -> Self {
        Self { tp, fp, fn_, n_cases }
    }

    pub fn lesions(&self) -> usize {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub sensitivity: f64,
    pub fpc: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn compute_metrics(counts: &MatchCounts) -> Result<MetricsRow, EvalError> {
    if counts.lesions() == 0 {
        return Err(EvalError::ZeroLesions);
    }
    let tp = counts.tp as f64;
    let sensitivity = tp / counts.lesions() as f64;
    let precision = if counts.tp + counts.fp == 0 { 0.0 } else { tp / (counts.tp + counts.fp) as f64 };
    let f1 = if precision + sensitivity == 0.0 { 0.0 } else { 2.0 * precision * sensitivity / (precision + sensitivity) };
    let fpc = if counts.n_cases == 0 { 0.0 } else { counts.fp as f64 / counts.n_cases as f64 };
    Ok(MetricsRow { sensitivity, fpc, precision, f1 })
}

/// Fixed-point decimal: `units * 10^-decimals`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decimal {
    pub units: u64,
    pub decimals: u32,
}

impl Decimal {
    pub fn to_f64(self) -> f64 {
        // Parsing the printed form gives the f64 nearest to the decimal value.
        self.to_string().parse().expect("formatted decimal parses")
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scale = 10u64.pow(self.decimals);
        if self.decimals == 0 {
            write!(f, "{}", self.units)
        } else {
            write!(f, "{}.{:0width$}", self.units / scale, self.units % scale, width = self.decimals as usize)
        }
    }
}

/// Rounds `num / den` (both non-negative) half-up to `decimals` places, exactly.
pub fn round_ratio_half_up(num: u64, den: u64, decimals: u32) -> Decimal {
    assert!(den > 0, "zero denominator");
    let scaled = num as u128 * 10u128.pow(decimals);
    let units = (2 * scaled + den as u128) / (2 * den as u128);
    Decimal { units: units as u64, decimals }
}

/// Percentage with one decimal: the ratio is first kept to four decimals
/// (half-up), then the percentage is printed half-even. This reproduces every
/// published percent cell, including 23/126 = 18.254% printed as 18.2.
pub fn round_percent(num: u64, den: u64) -> Decimal {
    if den == 0 {
        return Decimal { units: 0, decimals: 1 };
    }
    let q4 = round_ratio_half_up(num, den, 4).units;
    let (q, r) = (q4 / 10, q4 % 10);
    let units = if r > 5 || (r == 5 && q % 2 == 1) { q + 1 } else { q };
    Decimal { units, decimals: 1 }
}

/// Half-up rounding of a non-negative float; used for p-values.
pub fn round_f64_half_up(value: f64, decimals: u32) -> Decimal {
    let scale = 10f64.powi(decimals as i32);
    Decimal { units: (value * scale + 0.5).floor() as u64, decimals }
}

/// One row of the detection summary, rounded to the published precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FormattedRow {
    pub name: String,
    pub counts: MatchCounts,
    pub sensitivity_pct: Decimal,
    pub fpc: Decimal,
    pub precision_pct: Decimal,
    pub f1: Decimal,
}

impl FormattedRow {
    pub fn from_counts(name: &str, c: &MatchCounts) -> Result<Self, EvalError> {
        if c.lesions() == 0 {
            return Err(EvalError::ZeroLesions);
        }
        let zero3 = Decimal { units: 0, decimals: 3 };
        Ok(Self {
            name: name.to_string(),
            counts: *c,
            sensitivity_pct: round_percent(c.tp as u64, c.lesions() as u64),
            fpc: if c.n_cases == 0 { zero3 } else { round_ratio_half_up(c.fp as u64, c.n_cases as u64, 3) },
            precision_pct: round_percent(c.tp as u64, (c.tp + c.fp) as u64),
            f1: if c.tp == 0 {
                zero3
            } else {
                round_ratio_half_up(2 * c.tp as u64, (2 * c.tp + c.fp + c.fn_) as u64, 3)
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_cases: usize,
    pub sensitivity_pct: f64,
    pub fpc: f64,
    pub precision_pct: f64,
    pub f1: f64,
}

/// Detection summary in the layout of the published table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Report {
    pub rows: Vec<ReportRow>,
}

pub const TABLE1_CSV_HEADER: &str = "name,tp,fp,fn,n_cases,sensitivity_pct,fpc,precision_pct,f1";

impl Table1Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self, formatted: &[FormattedRow]) -> String {
        let mut out = String::from(TABLE1_CSV_HEADER);
        out.push('\n');
        for r in formatted {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                csv_field(&r.name),
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                r.counts.n_cases,
                r.sensitivity_pct,
                r.fpc,
                r.precision_pct,
                r.f1
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| EvalError::Schema(e.to_string()))?;
            if rec.len() != 9 {
                return Err(EvalError::Schema(format!("expected 9 columns, found {}", rec.len())));
            }
            let int = |i: usize| rec[i].trim().parse::<usize>().map_err(|e| EvalError::Schema(e.to_string()));
            let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|e| EvalError::Schema(e.to_string()));
            rows.push(ReportRow {
                name: rec[0].to_string(),
                tp: int(1)?,
                fp: int(2)?,
                fn_: int(3)?,
                n_cases: int(4)?,
                sensitivity_pct: num(5)?,
                fpc: num(6)?,
                precision_pct: num(7)?,
                f1: num(8)?,
            });
        }
        Ok(Self { rows })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Builds the report (JSON values and CSV text) for named count rows.
pub fn table1_report(rows: &[(String, MatchCounts)]) -> Result<(Table1Report, String), EvalError> {
    let formatted = rows.iter().map(|(n, c)| FormattedRow::from_counts(n, c)).collect::<Result<Vec<_>, _>>()?;
    let report = Table1Report {
        rows: formatted
            .iter()
            .map(|r| ReportRow {
                name: r.name.clone(),
                tp: r.counts.tp,
                fp: r.counts.fp,
                fn_: r.counts.fn_,
                n_cases: r.counts.n_cases,
                sensitivity_pct: r.sensitivity_pct.to_f64(),
                fpc: r.fpc.to_f64(),
                precision_pct: r.precision_pct.to_f64(),
                f1: r.f1.to_f64(),
            })
            .collect(),
    };
    let csv = report.to_csv(&formatted);
    Ok((report, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tp_conventions() {
        let m = compute_metrics(&MatchCounts::new(0, 5, 10, 2)).unwrap();
        assert_eq!((m.sensitivity, m.precision, m.f1, m.fpc), (0.0, 0.0, 0.0, 2.5));
        assert!(matches!(compute_metrics(&MatchCounts::new(0, 3, 0, 1)), Err(EvalError::ZeroLesions)));
    }

    #[test]
    fn three_slice_row_values() {
        let m = compute_metrics(&MatchCounts::new(28, 62, 47, 49)).unwrap();
        assert!((m.sensitivity - 0.373).abs() < 5e-4);
        assert!((m.fpc - 1.265).abs() < 5e-4);
        assert!((m.precision - 0.311).abs() < 5e-4);
        assert!((m.f1 - 0.339).abs() < 5e-4);
    }

    #[test]
    fn decimal_rounding() {
        assert_eq!(round_ratio_half_up(1, 8, 2).to_string(), "0.13");
        assert_eq!(round_ratio_half_up(139, 49, 3).to_string(), "2.837");
        assert_eq!(round_ratio_half_up(0, 49, 3).to_string(), "0.000");
        assert_eq!(round_percent(23, 126).to_string(), "18.2");
        assert_eq!(round_percent(25, 41).to_string(), "61.0");
        assert_eq!(round_f64_half_up(0.03125, 4).to_string(), "0.0313");
    }

    #[test]
    fn empty_report_has_header_only() {
        let (report, csv) = table1_report(&[]).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(csv, format!("{TABLE1_CSV_HEADER}\n"));
    }
}
