//! Reader-study sessions: blind marking, disclosure of software results, then
//! additions only. Every mutation is an event; state is the fold of the log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::candidate::{Candidate, Stage};
use crate::eval::{compute_metrics, match_case, mcnemar_exact, EvalError, Finding, MatchCounts, MetricsRow, PairedMatrix, DEFAULT_IOU_THRESHOLD};
use crate::volume::{BoundingBox2D, CaseAnnotation};

/// Side of the box placed around a clicked point.
pub const DEFAULT_MARK_SIZE: f64 = 20.0;

#[derive(Debug, Error)]
pub enum ReaderError {
    #[error("unknown case {0}")]
    UnknownCase(String),
    #[error("case {case} has no mark {mark}")]
    UnknownMark { case: String, mark: u64 },
    #[error("mark {mark} of case {case} was placed before disclosure and cannot be removed")]
    ImmutableMark { case: String, mark: u64 },
    #[error("case {0} is already done")]
    CaseDone(String),
    #[error("case {0} is already disclosed")]
    AlreadyDisclosed(String),
    #[error("case {0} must be disclosed before it is done")]
    NotDisclosed(String),
    #[error("{} case(s) not done", pending.len())]
    IncompleteSession { pending: Vec<String> },
    #[error("session already finalized")]
    Finalized,
    #[error("invalid box {0:?}")]
    InvalidBox(BoundingBox2D),
    #[error("duplicate case {0}")]
    DuplicateCase(String),
    #[error("no ground truth for case {0}")]
    MissingAnnotation(String),
    #[error("event log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ReaderError {
    /// Machine-readable error name.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownCase(_) => "UnknownCase",
            Self::UnknownMark { .. } => "UnknownMark",
            Self::ImmutableMark { .. } => "ImmutableMark",
            Self::CaseDone(_) => "CaseDone",
            Self::AlreadyDisclosed(_) => "AlreadyDisclosed",
            Self::NotDisclosed(_) => "NotDisclosed",
            Self::IncompleteSession { .. } => "IncompleteSession",
            Self::Finalized => "Finalized",
            Self::InvalidBox(_) => "InvalidBox",
            Self::DuplicateCase(_) => "DuplicateCase",
            Self::MissingAnnotation(_) => "MissingAnnotation",
            Self::Log { .. } => "InvalidLog",
            Self::Eval(_) => "EvalError",
            Self::Io(_) => "IoError",
            Self::Json(_) => "InvalidJson",
        }
    }
}

pub type Result<T, E = ReaderError> = std::result::Result<T, E>;

/// Timestamp source for events.
pub trait Clock: Send {
    fn now(&mut self) -> SystemTime;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&mut self) -> SystemTime {
        SystemTime::now()
    }
}

/// One second per event starting at the epoch; makes logs reproducible.
#[derive(Debug, Default)]
pub struct LogicalClock {
    ticks: u64,
}

impl Clock for LogicalClock {
    fn now(&mut self) -> SystemTime {
        self.ticks += 1;
        UNIX_EPOCH + Duration::from_secs(self.ticks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CasePhase {
    Blind,
    Disclosed,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryPhase {
    Blind,
    Disclosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox2D,
    pub phase: EntryPhase,
    pub t: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseState {
    pub phase: CasePhase,
    pub marks: Vec<Mark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum Event {
    Created { session_id: String, reader_id: String, cases: Vec<String>, software: Vec<Candidate> },
    MarkAdded { case: String, mark_id: u64, #[serde(rename = "box")] bbox: BoundingBox2D },
    MarkRemoved { case: String, mark_id: u64 },
    Disclosed { case: String },
    Done { case: String },
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t: String,
    #[serde(flatten)]
    pub event: Event,
}

/// Replayable state: everything the log determines.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SessionState {
    pub session_id: String,
    pub reader_id: String,
    pub cases: BTreeMap<String, CaseState>,
    pub case_order: Vec<String>,
    #[serde(skip)]
    pub software: BTreeMap<String, Vec<Candidate>>,
    pub next_mark_id: u64,
    pub finalized: bool,
}

impl SessionState {
    fn case_mut(&mut self, case: &str) -> Result<&mut CaseState> {
        self.cases.get_mut(case).ok_or_else(|| ReaderError::UnknownCase(case.to_string()))
    }

    /// Validates `event` against the current state and applies it.
    fn apply(&mut self, event: &Event, t: &str) -> Result<()> {
        if self.finalized {
            return Err(ReaderError::Finalized);
        }
        match event {
            Event::Created { session_id, reader_id, cases, software } => {
                let mut states = BTreeMap::new();
                for c in cases {
                    if states.insert(c.clone(), CaseState { phase: CasePhase::Blind, marks: Vec::new() }).is_some() {
                        return Err(ReaderError::DuplicateCase(c.clone()));
                    }
                }
                let mut by_case: BTreeMap<String, Vec<Candidate>> = cases.iter().map(|c| (c.clone(), Vec::new())).collect();
                for s in software {
                    by_case.get_mut(&s.case_id).ok_or_else(|| ReaderError::UnknownCase(s.case_id.clone()))?.push(s.clone());
                }
                *self = Self { session_id: session_id.clone(), reader_id: reader_id.clone(), cases: states, case_order: cases.clone(), software: by_case, next_mark_id: 1, finalized: false };
            }
            Event::MarkAdded { case, mark_id, bbox } => {
                if !bbox.is_valid() {
                    return Err(ReaderError::InvalidBox(*bbox));
                }
                let next = self.next_mark_id;
                let st = self.case_mut(case)?;
                let phase = match st.phase {
                    CasePhase::Blind => EntryPhase::Blind,
                    CasePhase::Disclosed => EntryPhase::Disclosed,
                    CasePhase::Done => return Err(ReaderError::CaseDone(case.clone())),
                };
                if *mark_id != next {
                    return Err(ReaderError::Log { line: 0, message: format!("mark id {mark_id} out of sequence, expected {next}") });
                }
                st.marks.push(Mark { id: *mark_id, bbox: *bbox, phase, t: t.to_string() });
                self.next_mark_id += 1;
            }
            Event::MarkRemoved { case, mark_id } => {
                let st = self.case_mut(case)?;
                if st.phase == CasePhase::Done {
                    return Err(ReaderError::CaseDone(case.clone()));
                }
                let pos = st.marks.iter().position(|m| m.id == *mark_id).ok_or_else(|| ReaderError::UnknownMark { case: case.clone(), mark: *mark_id })?;
                if st.marks[pos].phase == EntryPhase::Blind && st.phase != CasePhase::Blind {
                    return Err(ReaderError::ImmutableMark { case: case.clone(), mark: *mark_id });
                }
                st.marks.remove(pos);
            }
            Event::Disclosed { case } => {
                let st = self.case_mut(case)?;
                match st.phase {
                    CasePhase::Blind => st.phase = CasePhase::Disclosed,
                    CasePhase::Disclosed => return Err(ReaderError::AlreadyDisclosed(case.clone())),
                    CasePhase::Done => return Err(ReaderError::CaseDone(case.clone())),
                }
            }
            Event::Done { case } => {
                let st = self.case_mut(case)?;
                match st.phase {
                    CasePhase::Blind => return Err(ReaderError::NotDisclosed(case.clone())),
                    CasePhase::Disclosed => st.phase = CasePhase::Done,
                    CasePhase::Done => return Err(ReaderError::CaseDone(case.clone())),
                }
            }
            Event::Finalized => {
                let pending = self.pending_cases();
                if !pending.is_empty() {
                    return Err(ReaderError::IncompleteSession { pending });
                }
                self.finalized = true;
            }
        }
        Ok(())
    }

    pub fn pending_cases(&self) -> Vec<String> {
        self.case_order.iter().filter(|c| self.cases[*c].phase != CasePhase::Done).cloned().collect()
    }

    /// SHA-256 of the canonical JSON of the state, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("state serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn format_time(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

/// 20x20 box centred on a clicked point.
pub fn default_mark_box(z: usize, x: f64, y: f64) -> BoundingBox2D {
    BoundingBox2D::from_center(z, x, y, DEFAULT_MARK_SIZE, DEFAULT_MARK_SIZE)
}

pub struct Session {
    state: SessionState,
    log: Vec<LogEntry>,
    clock: Box<dyn Clock>,
    sink: Option<File>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("state", &self.state).field("events", &self.log.len()).finish()
    }
}

impl Session {
    pub fn create(session_id: &str, reader_id: &str, cases: Vec<String>, software: Vec<Candidate>, clock: Box<dyn Clock>) -> Result<Self> {
        let mut s = Self { state: SessionState::default(), log: Vec::new(), clock, sink: None };
        s.record(Event::Created { session_id: session_id.to_string(), reader_id: reader_id.to_string(), cases, software })?;
        Ok(s)
    }

    /// Rebuilds a session by folding `entries` from the empty state.
    pub fn replay(entries: Vec<LogEntry>, clock: Box<dyn Clock>) -> Result<Self> {
        let mut state = SessionState::default();
        for (i, e) in entries.iter().enumerate() {
            if (i == 0) != matches!(e.event, Event::Created { .. }) {
                return Err(ReaderError::Log { line: i + 1, message: "the log must start with exactly one created event".into() });
            }
            state.apply(&e.event, &e.t).map_err(|err| match err {
                ReaderError::Log { message, .. } => ReaderError::Log { line: i + 1, message },
                other => ReaderError::Log { line: i + 1, message: other.to_string() },
            })?;
        }
        if entries.is_empty() {
            return Err(ReaderError::Log { line: 0, message: "empty log".into() });
        }
        Ok(Self { state, log: entries, clock, sink: None })
    }

    pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogEntry>> {
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| ReaderError::Log { line: i + 1, message: e.to_string() })?);
        }
        Ok(out)
    }

    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.log {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes the log so far to `path` and appends every later event to it.
    pub fn persist_to(&mut self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        self.write_log(&mut f)?;
        f.sync_data()?;
        self.sink = Some(f);
        Ok(())
    }

    /// Replays the log at `path` and keeps appending to it.
    pub fn resume(path: &Path, clock: Box<dyn Clock>) -> Result<Self> {
        let entries = Self::read_log(BufReader::new(File::open(path)?))?;
        let mut s = Self::replay(entries, clock)?;
        s.sink = Some(OpenOptions::new().append(true).open(path)?);
        Ok(s)
    }

    fn record(&mut self, event: Event) -> Result<()> {
        let t = format_time(self.clock.now());
        self.state.apply(&event, &t)?;
        let entry = LogEntry { t, event };
        if let Some(f) = &mut self.sink {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        self.log.push(entry);
        Ok(())
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn events(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn case_ids(&self) -> &[String] {
        &self.state.case_order
    }

    pub fn case(&self, case: &str) -> Result<&CaseState> {
        self.state.cases.get(case).ok_or_else(|| ReaderError::UnknownCase(case.to_string()))
    }

    pub fn add_mark(&mut self, case: &str, bbox: BoundingBox2D) -> Result<u64> {
        let mark_id = self.state.next_mark_id;
        self.record(Event::MarkAdded { case: case.to_string(), mark_id, bbox })?;
        Ok(mark_id)
    }

    pub fn remove_mark(&mut self, case: &str, mark_id: u64) -> Result<()> {
        self.record(Event::MarkRemoved { case: case.to_string(), mark_id })
    }

    /// Advances the case to disclosed and returns its software candidates.
    pub fn disclose(&mut self, case: &str) -> Result<Vec<Candidate>> {
        self.record(Event::Disclosed { case: case.to_string() })?;
        Ok(self.state.software[case].clone())
    }

    pub fn done(&mut self, case: &str) -> Result<()> {
        self.record(Event::Done { case: case.to_string() })
    }

    /// Software candidates, visible only once the case is disclosed.
    pub fn visible_software(&self, case: &str) -> Result<Option<&[Candidate]>> {
        Ok((self.case(case)?.phase >= CasePhase::Disclosed).then(|| self.state.software[case].as_slice()))
    }

    /// Evaluates the session and seals it against further changes.
    pub fn finalize(&mut self, ground_truth: &[CaseAnnotation]) -> Result<ReaderReport> {
        let report = finalize_report(&self.state, ground_truth)?;
        if !self.state.finalized {
            self.record(Event::Finalized)?;
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub counts: MatchCounts,
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReaderReport {
    pub session_id: String,
    pub reader_id: String,
    pub blind: PhaseReport,
    pub disclosed: PhaseReport,
    pub paired: PairedMatrix,
    pub p_value: f64,
}

impl ReaderReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mark_findings(case: &str, marks: &[&Mark]) -> Vec<Finding> {
    marks
        .iter()
        .map(|m| {
            // Blind marks outrank later additions so they keep their lesions in the second pass.
            let probability = if m.phase == EntryPhase::Blind { 1.0 } else { 0.5 };
            Finding::single(Candidate { case_id: case.to_string(), bbox: m.bbox, probability, stage: Stage::OneStage, model_id: None })
        })
        .collect()
}

/// Lesion-level comparison of blind marks against all marks.
pub fn finalize_report(state: &SessionState, ground_truth: &[CaseAnnotation]) -> Result<ReaderReport> {
    let pending = state.pending_cases();
    if !pending.is_empty() {
        return Err(ReaderError::IncompleteSession { pending });
    }
    let gt: BTreeMap<&str, &CaseAnnotation> = ground_truth.iter().map(|a| (a.case_id.as_str(), a)).collect();
    let n = state.case_order.len();
    let mut blind = MatchCounts::new(0, 0, 0, n);
    let mut disclosed = MatchCounts::new(0, 0, 0, n);
    let mut paired = PairedMatrix { tp_tp: 0, tp_fn: 0, fn_tp: 0, fn_fn: 0 };
    for case in &state.case_order {
        let ann = gt.get(case.as_str()).ok_or_else(|| ReaderError::MissingAnnotation(case.clone()))?;
        let marks = &state.cases[case].marks;
        let first: Vec<&Mark> = marks.iter().filter(|m| m.phase == EntryPhase::Blind).collect();
        let all: Vec<&Mark> = marks.iter().collect();
        let m1 = match_case(&mark_findings(case, &first), &ann.lesions, DEFAULT_IOU_THRESHOLD);
        let m2 = match_case(&mark_findings(case, &all), &ann.lesions, DEFAULT_IOU_THRESHOLD);
        for (c, m) in [(&mut blind, &m1), (&mut disclosed, &m2)] {
            c.tp += m.tp();
            c.fp += m.fp();
            c.fn_ += m.fn_();
        }
        for (a, b) in m1.lesion_matched_by.iter().zip(&m2.lesion_matched_by) {
            match (a.is_some(), b.is_some()) {
                (true, true) => paired.tp_tp += 1,
                (true, false) => paired.tp_fn += 1,
                (false, true) => paired.fn_tp += 1,
                (false, false) => paired.fn_fn += 1,
            }
        }
    }
    Ok(ReaderReport {
        session_id: state.session_id.clone(),
        reader_id: state.reader_id.clone(),
        blind: PhaseReport { counts: blind, metrics: compute_metrics(&blind)? },
        disclosed: PhaseReport { counts: disclosed, metrics: compute_metrics(&disclosed)? },
        p_value: mcnemar_exact(paired.mcnemar_input()),
        paired,
    })
}
