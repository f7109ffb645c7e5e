//! Scored detections flowing between the detector, the false-positive
//! reduction stage and evaluation, plus their JSON-lines wire format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::volume::BoundingBox2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    OneStage,
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "CandidateLine", into = "CandidateLine")]
pub struct Candidate {
    pub case_id: String,
    pub bbox: BoundingBox2D,
    pub probability: f64,
    pub stage: Stage,
    /// Index of the split model that produced the detection, when known.
    pub model_id: Option<usize>,
}

impl Candidate {
    pub fn z(&self) -> usize {
        self.bbox.z
    }
}

#[derive(Serialize, Deserialize)]
struct CandidateLine {
    case: String,
    z: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    prob: f64,
    stage: Stage,
    model_id: Option<usize>,
}

impl From<&Candidate> for CandidateLine {
    fn from(c: &Candidate) -> Self {
        Self {
            case: c.case_id.clone(),
            z: c.bbox.z,
            bbox: c.bbox.to_array(),
            prob: c.probability,
            stage: c.stage,
            model_id: c.model_id,
        }
    }
}

impl From<Candidate> for CandidateLine {
    fn from(c: Candidate) -> Self {
        Self::from(&c)
    }
}

impl From<CandidateLine> for Candidate {
    fn from(l: CandidateLine) -> Self {
        let [x_min, y_min, x_max, y_max] = l.bbox;
        Self {
            case_id: l.case,
            bbox: BoundingBox2D::new(l.z, x_min, y_min, x_max, y_max),
            probability: l.prob,
            stage: l.stage,
            model_id: l.model_id,
        }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, candidates: &[Candidate]) -> std::io::Result<()> {
    for c in candidates {
        serde_json::to_writer(&mut out, &CandidateLine::from(c))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CandidateLine = serde_json::from_str(&line)?;
        out.push(parsed.into());
    }
    Ok(out)
}
