use aisdet::candidate::{Candidate, Stage};
use aisdet::readerstudy::*;
use aisdet::volume::{BoundingBox2D, CaseAnnotation, Lesion};
use rand::Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("case_{i:04}")).collect()
}

fn session(n: usize, software: Vec<Candidate>) -> Session {
    Session::create("s1", "r1", ids(n), software, Box::new(LogicalClock::default())).unwrap()
}

fn b(z: usize, x: f64, y: f64) -> BoundingBox2D {
    BoundingBox2D::new(z, x, y, x + 10.0, y + 10.0)
}

fn replayed(s: &Session) -> Session {
    let mut buf = Vec::new();
    s.write_log(&mut buf).unwrap();
    Session::replay(Session::read_log(buf.as_slice()).unwrap(), Box::new(LogicalClock::default())).unwrap()
}

#[test]
fn new_session_is_blind() {
    let s = session(49, vec![]);
    assert_eq!(s.state().cases.len(), 49);
    assert!(s.state().cases.values().all(|c| c.phase == CasePhase::Blind && c.marks.is_empty()));
    assert_eq!(s.visible_software("case_0000").unwrap(), None);
}

#[test]
fn unknown_software_case_is_rejected() {
    let c = Candidate { case_id: "nope".into(), bbox: b(0, 0.0, 0.0), probability: 0.9, stage: Stage::TwoStage, model_id: None };
    let r = Session::create("s", "r", ids(2), vec![c], Box::new(LogicalClock::default()));
    assert!(matches!(r, Err(ReaderError::UnknownCase(id)) if id == "nope"));
    let dup = Session::create("s", "r", vec!["a".into(), "a".into()], vec![], Box::new(LogicalClock::default()));
    assert!(matches!(dup, Err(ReaderError::DuplicateCase(_))));
}

#[test]
fn empty_software_disclosure_advances_phase() {
    let mut s = session(1, vec![]);
    assert!(s.disclose("case_0000").unwrap().is_empty());
    assert_eq!(s.case("case_0000").unwrap().phase, CasePhase::Disclosed);
    assert_eq!(s.visible_software("case_0000").unwrap(), Some(&[][..]));
}

#[test]
fn disclosure_reveals_only_own_case() {
    let c = Candidate { case_id: "case_0001".into(), bbox: b(3, 1.0, 2.0), probability: 0.7, stage: Stage::TwoStage, model_id: None };
    let mut s = session(2, vec![c.clone()]);
    assert!(s.disclose("case_0000").unwrap().is_empty());
    assert_eq!(s.disclose("case_0001").unwrap(), vec![c]);
}

#[test]
fn mark_phases_and_replay() {
    let mut s = session(2, vec![]);
    let a = s.add_mark("case_0000", b(1, 0.0, 0.0)).unwrap();
    let m = s.add_mark("case_0000", b(2, 5.0, 5.0)).unwrap();
    s.disclose("case_0000").unwrap();
    let c = s.add_mark("case_0000", default_mark_box(3, 30.0, 30.0)).unwrap();
    let marks = &s.case("case_0000").unwrap().marks;
    assert_eq!(marks.iter().map(|m| m.id).collect::<Vec<_>>(), vec![a, m, c]);
    assert_eq!(marks.iter().map(|m| m.phase).collect::<Vec<_>>(), vec![EntryPhase::Blind, EntryPhase::Blind, EntryPhase::Disclosed]);
    assert_eq!(marks[2].bbox.to_array(), [20.0, 20.0, 40.0, 40.0]);
    let r = replayed(&s);
    assert_eq!(r.state(), s.state());
    assert_eq!(r.state().hash(), s.state().hash());
}

#[test]
fn removal_rules() {
    let mut s = session(1, vec![]);
    let c = "case_0000";
    let gone = s.add_mark(c, b(0, 0.0, 0.0)).unwrap();
    s.remove_mark(c, gone).unwrap();
    let kept = s.add_mark(c, b(0, 0.0, 0.0)).unwrap();
    s.disclose(c).unwrap();
    assert!(matches!(s.remove_mark(c, kept), Err(ReaderError::ImmutableMark { mark, .. }) if mark == kept));
    let later = s.add_mark(c, b(1, 0.0, 0.0)).unwrap();
    s.remove_mark(c, later).unwrap();
    assert!(matches!(s.remove_mark(c, 999), Err(ReaderError::UnknownMark { .. })));
    s.done(c).unwrap();
    assert!(matches!(s.add_mark(c, b(0, 1.0, 1.0)), Err(ReaderError::CaseDone(_))));
    assert_eq!(s.case(c).unwrap().marks.len(), 1);
}

#[test]
fn phase_transitions() {
    let mut s = session(1, vec![]);
    let c = "case_0000";
    assert!(matches!(s.done(c), Err(ReaderError::NotDisclosed(_))));
    let id = s.add_mark(c, b(0, 0.0, 0.0)).unwrap();
    let before = s.state().clone();
    s.disclose(c).unwrap();
    assert!(matches!(s.disclose(c), Err(ReaderError::AlreadyDisclosed(_))));
    // Only the phase changed.
    let mut expected = before.clone();
    expected.cases.get_mut(c).unwrap().phase = CasePhase::Disclosed;
    assert_eq!(s.state(), &expected);
    assert_ne!(s.state().hash(), before.hash());
    assert_eq!(s.case(c).unwrap().marks[0].id, id);
    assert!(matches!(s.add_mark("x", b(0, 0.0, 0.0)), Err(ReaderError::UnknownCase(_))));
    assert!(matches!(s.add_mark(c, BoundingBox2D::new(0, 5.0, 5.0, 5.0, 9.0)), Err(ReaderError::InvalidBox(_))));
    // Failed calls leave no trace in the log.
    assert_eq!(s.events().len(), 3);
}

fn gt(case: &str, n: usize) -> CaseAnnotation {
    CaseAnnotation { case_id: case.into(), lesions: (0..n).map(|k| Lesion { id: format!("l{k}"), boxes: vec![b(k, 10.0 * k as f64, 0.0)] }).collect() }
}

#[test]
fn finalize_requires_all_cases_done() {
    let mut s = session(2, vec![]);
    s.disclose("case_0000").unwrap();
    s.done("case_0000").unwrap();
    let truth = vec![gt("case_0000", 1), gt("case_0001", 1)];
    assert!(matches!(s.finalize(&truth), Err(ReaderError::IncompleteSession { pending }) if pending == vec!["case_0001".to_string()]));
}

#[test]
fn zero_marks_report() {
    let mut s = session(3, vec![]);
    for c in ids(3) {
        s.disclose(&c).unwrap();
        s.done(&c).unwrap();
    }
    let truth: Vec<_> = ids(3).iter().map(|c| gt(c, 2)).collect();
    let r = s.finalize(&truth).unwrap();
    assert_eq!(r.blind.counts.tp, 0);
    assert_eq!(r.blind.counts, r.disclosed.counts);
    assert_eq!(r.p_value, 1.0);
    assert!(matches!(s.add_mark("case_0000", b(0, 0.0, 0.0)), Err(ReaderError::Finalized)));
}

/// 49 cases, 75 lesions; the reader finds 25 blind, 6 more after disclosure,
/// with 16 blind and 3 later false marks.
fn table2_session() -> (Session, Vec<CaseAnnotation>) {
    let cases = ids(49);
    let truth: Vec<CaseAnnotation> = cases.iter().enumerate().map(|(i, c)| gt(c, if i < 26 { 2 } else { 1 })).collect();
    assert_eq!(truth.iter().map(|a| a.lesions.len()).sum::<usize>(), 75);
    let mut s = Session::create("paper", "radiologist", cases.clone(), vec![], Box::new(LogicalClock::default())).unwrap();
    let lesion_box = |a: &CaseAnnotation, k: usize| a.lesions[k].boxes[0];
    let mut all: Vec<(usize, usize)> = truth.iter().enumerate().flat_map(|(i, a)| (0..a.lesions.len()).map(move |k| (i, k))).collect();
    let later = all.split_off(25);
    for &(i, k) in &all {
        s.add_mark(&cases[i], lesion_box(&truth[i], k)).unwrap();
    }
    for i in 0..16 {
        s.add_mark(&cases[i], b(9, 50.0, 50.0)).unwrap();
    }
    for c in &cases {
        s.disclose(c).unwrap();
    }
    for &(i, k) in &later[..6] {
        s.add_mark(&cases[i], lesion_box(&truth[i], k)).unwrap();
    }
    for i in 20..23 {
        s.add_mark(&cases[i], b(9, 50.0, 50.0)).unwrap();
    }
    for c in &cases {
        s.done(c).unwrap();
    }
    (s, truth)
}

#[test]
fn scripted_session_reproduces_table2() {
    let (mut s, truth) = table2_session();
    let r = s.finalize(&truth).unwrap();
    assert_eq!((r.paired.tp_tp, r.paired.tp_fn, r.paired.fn_tp, r.paired.fn_fn), (25, 0, 6, 44));
    assert_eq!(r.p_value, 0.03125);
    assert_eq!((r.blind.counts.tp, r.blind.counts.fp, r.blind.counts.fn_), (25, 16, 50));
    assert_eq!((r.disclosed.counts.tp, r.disclosed.counts.fp, r.disclosed.counts.fn_), (31, 19, 44));
    assert_eq!(r.blind.metrics.sensitivity, 25.0 / 75.0);
    assert_eq!(r.disclosed.metrics.sensitivity, 31.0 / 75.0);
}

#[test]
fn replay_reproduces_report_bytes() {
    let (s, truth) = table2_session();
    let a = finalize_report(s.state(), &truth).unwrap().to_json();
    let b = finalize_report(replayed(&s).state(), &truth).unwrap().to_json();
    assert_eq!(a, b);
}

#[test]
fn log_lines_have_event_shape() {
    let mut s = session(1, vec![]);
    s.add_mark("case_0000", b(0, 1.0, 2.0)).unwrap();
    let mut buf = Vec::new();
    s.write_log(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let second = text.lines().nth(1).unwrap();
    assert_eq!(second, r#"{"t":"1970-01-01T00:00:02Z","event":"mark_added","payload":{"case":"case_0000","mark_id":1,"box":{"z":0,"x_min":1.0,"y_min":2.0,"x_max":11.0,"y_max":12.0}}}"#);
    let bad = text.replace("mark_added", "mark_wiped");
    assert!(matches!(Session::read_log(bad.as_bytes()), Err(ReaderError::Log { line: 2, .. })));
}

#[test]
fn tampered_log_is_rejected_on_replay() {
    let mut s = session(1, vec![]);
    let id = s.add_mark("case_0000", b(0, 1.0, 2.0)).unwrap();
    s.disclose("case_0000").unwrap();
    let mut entries = s.events().to_vec();
    entries.push(LogEntry { t: "1970-01-01T00:01:00Z".into(), event: Event::MarkRemoved { case: "case_0000".into(), mark_id: id } });
    assert!(matches!(Session::replay(entries, Box::new(SystemClock)), Err(ReaderError::Log { line: 4, .. })));
}

#[test]
fn persisted_session_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.jsonl");
    let mut s = session(2, vec![]);
    s.add_mark("case_0000", b(0, 0.0, 0.0)).unwrap();
    s.persist_to(&path).unwrap();
    s.disclose("case_0000").unwrap();
    let hash = s.state().hash();
    drop(s);
    let mut r = Session::resume(&path, Box::new(LogicalClock::default())).unwrap();
    assert_eq!(r.state().hash(), hash);
    r.add_mark("case_0001", b(0, 0.0, 0.0)).unwrap();
    let again = Session::resume(&path, Box::new(LogicalClock::default())).unwrap();
    assert_eq!(again.state(), r.state());
}

#[test]
fn no_deletion_rule_rules_out_lost_lesions() {
    let mut rng = aisdet::rng::stream(11, 0, "sessions");
    for _ in 0..1000 {
        let n = rng.random_range(1..5);
        let cases = ids(n);
        let truth: Vec<_> = cases.iter().map(|c| gt(c, rng.random_range(0..4))).collect();
        let mut s = Session::create("p", "r", cases.clone(), vec![], Box::new(LogicalClock::default())).unwrap();
        let near = |rng: &mut rand_chacha::ChaCha8Rng, a: &CaseAnnotation| {
            if !a.lesions.is_empty() && rng.random_bool(0.6) {
                let g = a.lesions[rng.random_range(0..a.lesions.len())].boxes[0];
                let (dx, dy) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
                BoundingBox2D::new(g.z, g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy)
            } else {
                b(rng.random_range(0..4), rng.random_range(0.0..40.0), rng.random_range(0.0..40.0))
            }
        };
        for (c, a) in cases.iter().zip(&truth) {
            for _ in 0..rng.random_range(0..4) {
                let id = s.add_mark(c, near(&mut rng, a)).unwrap();
                if rng.random_bool(0.2) {
                    s.remove_mark(c, id).unwrap();
                }
            }
            s.disclose(c).unwrap();
            let marks: Vec<(u64, EntryPhase)> = s.case(c).unwrap().marks.iter().map(|m| (m.id, m.phase)).collect();
            for (id, phase) in marks {
                if rng.random_bool(0.5) {
                    assert_eq!(phase, EntryPhase::Blind);
                    assert!(matches!(s.remove_mark(c, id), Err(ReaderError::ImmutableMark { .. })));
                }
            }
            for _ in 0..rng.random_range(0..4) {
                let id = s.add_mark(c, near(&mut rng, a)).unwrap();
                if rng.random_bool(0.3) {
                    s.remove_mark(c, id).unwrap();
                }
            }
            s.done(c).unwrap();
        }
        let has_lesions = truth.iter().any(|a| !a.lesions.is_empty());
        match s.finalize(&truth) {
            Ok(r) => {
                assert_eq!(r.paired.tp_fn, 0);
                assert!(r.disclosed.counts.tp >= r.blind.counts.tp);
            }
            Err(e) => assert!(!has_lesions, "{e}"),
        }
    }
}
