use std::cmp::Ordering;

use crate::candidate::Candidate;
use crate::volume::{BoundingBox2D, Lesion};

use super::{EvalError, MatchCounts};

/// IoU threshold shared by grouping, matching and mining ("more than 0.3").
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

/// Intersection over union of two half-open boxes. The `z` fields are ignored.
pub fn iou(a: &BoundingBox2D, b: &BoundingBox2D) -> Result<f64, EvalError> {
    if !a.is_valid() || !b.is_valid() {
        return Err(EvalError::DegenerateBox);
    }
    Ok(iou_unchecked(a, b))
}

#[inline]
pub(crate) fn iou_unchecked(a: &BoundingBox2D, b: &BoundingBox2D) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A group of candidate boxes that represent one 3D detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub case_id: String,
    /// Members sorted by slice, then position.
    pub members: Vec<Candidate>,
    /// Highest member probability.
    pub probability: f64,
}

impl Finding {
    pub fn single(candidate: Candidate) -> Self {
        Self { case_id: candidate.case_id.clone(), probability: candidate.probability, members: vec![candidate] }
    }

    /// Builds a finding from a non-empty connected group.
    pub(crate) fn from_members(mut members: Vec<Candidate>) -> Self {
        members.sort_by(|a, b| box_order(&a.bbox, &b.bbox).then(b.probability.total_cmp(&a.probability)));
        let probability = members.iter().map(|m| m.probability).fold(f64::NEG_INFINITY, f64::max);
        Self { case_id: members[0].case_id.clone(), members, probability }
    }

    pub fn slices(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().map(|m| m.bbox.z)
    }
}

pub(crate) struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub(crate) fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Returns false when `a` and `b` were already connected.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
        ra != rb
    }
}

fn box_order(a: &BoundingBox2D, b: &BoundingBox2D) -> Ordering {
    a.z.cmp(&b.z)
        .then(a.x_min.total_cmp(&b.x_min))
        .then(a.y_min.total_cmp(&b.y_min))
        .then(a.x_max.total_cmp(&b.x_max))
        .then(a.y_max.total_cmp(&b.y_max))
}

/// Connects candidates of one case that overlap (IoU > 0.3) on the same or an
/// adjacent slice; each connected component becomes one [`Finding`].
pub fn group_findings(candidates: &[Candidate]) -> Vec<Finding> {
    let n = candidates.len();
    let mut sets = DisjointSet::new(n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&candidates[i].bbox, &candidates[j].bbox);
            if a.z.abs_diff(b.z) <= 1 && iou_unchecked(a, b) > DEFAULT_IOU_THRESHOLD {
                sets.union(i, j);
            }
        }
    }
    let mut groups: Vec<Vec<Candidate>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = sets.find(i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(candidates[i].clone());
    }
    let mut findings: Vec<Finding> = groups.into_iter().map(Finding::from_members).collect();
    findings.sort_by(|a, b| finding_order(a, b));
    findings
}

/// Descending probability; ties broken by geometry so the order never depends on
/// input order.
fn finding_order(a: &Finding, b: &Finding) -> Ordering {
    b.probability.total_cmp(&a.probability).then_with(|| {
        for (ma, mb) in a.members.iter().zip(&b.members) {
            let o = box_order(&ma.bbox, &mb.bbox);
            if o != Ordering::Equal {
                return o;
            }
        }
        a.members.len().cmp(&b.members.len())
    })
}

/// Best same-slice IoU between a finding and a lesion (0 when no shared slice).
pub fn finding_lesion_iou(finding: &Finding, lesion: &Lesion) -> f64 {
    let mut best = 0.0f64;
    for m in &finding.members {
        for g in lesion.boxes.iter().filter(|g| g.z == m.bbox.z) {
            best = best.max(iou_unchecked(&m.bbox, g));
        }
    }
    best
}

/// Per-case outcome of greedy matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseMatch {
    /// For each lesion (input order), the index of the finding that claimed it.
    pub lesion_matched_by: Vec<Option<usize>>,
    /// For each finding (input order), the lesion it claimed.
    pub finding_matched: Vec<Option<usize>>,
}

impl CaseMatch {
    pub fn tp(&self) -> usize {
        self.lesion_matched_by.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.finding_matched.iter().filter(|m| m.is_none()).count()
    }

    pub fn fn_(&self) -> usize {
        self.lesion_matched_by.len() - self.tp()
    }
}

/// Greedy assignment within one case: findings in descending probability each
/// claim the unclaimed lesion they overlap best (same-slice IoU > threshold).
pub fn match_case(findings: &[Finding], lesions: &[Lesion], iou_threshold: f64) -> CaseMatch {
    let mut order: Vec<usize> = (0..findings.len()).collect();
    order.sort_by(|&a, &b| finding_order(&findings[a], &findings[b]));
    let mut lesion_matched_by = vec![None; lesions.len()];
    let mut finding_matched = vec![None; findings.len()];
    for fi in order {
        let mut best: Option<(usize, f64)> = None;
        for (li, lesion) in lesions.iter().enumerate() {
            if lesion_matched_by[li].is_some() {
                continue;
            }
            let v = finding_lesion_iou(&findings[fi], lesion);
            if v > iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((li, v));
            }
        }
        if let Some((li, _)) = best {
            lesion_matched_by[li] = Some(fi);
            finding_matched[fi] = Some(li);
        }
    }
    CaseMatch { lesion_matched_by, finding_matched }
}

/// Findings and lesions of one evaluated case.
#[derive(Debug, Clone, Copy)]
pub struct CaseFindings<'a> {
    pub findings: &'a [Finding],
    pub lesions: &'a [Lesion],
}

/// Aggregates greedy per-case matching over a case set.
pub fn match_lesions(cases: &[CaseFindings<'_>], iou_threshold: f64) -> MatchCounts {
    let mut counts = MatchCounts { tp: 0, fp: 0, fn_: 0, n_cases: cases.len() };
    for case in cases {
        let m = match_case(case.findings, case.lesions, iou_threshold);
        counts.tp += m.tp();
        counts.fp += m.fp();
        counts.fn_ += m.fn_();
    }
    counts
}

/// Case-level detection rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientMetrics {
    pub cases_with_lesions: usize,
    pub detected_cases: usize,
    pub sensitivity: f64,
}

impl PatientMetrics {
    pub fn from_counts(cases_with_lesions: usize, detected_cases: usize) -> Self {
        let sensitivity = if cases_with_lesions == 0 { 0.0 } else { detected_cases as f64 / cases_with_lesions as f64 };
        Self { cases_with_lesions, detected_cases, sensitivity }
    }
}

/// A case counts as detected when at least one of its lesions is matched;
/// lesion-free cases are left out of the denominator.
pub fn compute_patient_metrics(cases: &[CaseFindings<'_>], iou_threshold: f64) -> PatientMetrics {
    let mut with_lesions = 0;
    let mut detected = 0;
    for case in cases.iter().filter(|c| !c.lesions.is_empty()) {
        with_lesions += 1;
        if match_case(case.findings, case.lesions, iou_threshold).tp() > 0 {
            detected += 1;
        }
    }
    PatientMetrics::from_counts(with_lesions, detected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidate::Stage;

    fn cand(z: usize, b: [f64; 4], p: f64) -> Candidate {
        Candidate {
            case_id: "c".into(),
            bbox: BoundingBox2D::new(z, b[0], b[1], b[2], b[3]),
            probability: p,
            stage: Stage::OneStage,
            model_id: None,
        }
    }

    fn lesion(id: &str, z: usize, b: [f64; 4]) -> Lesion {
        Lesion { id: id.into(), boxes: vec![BoundingBox2D::new(z, b[0], b[1], b[2], b[3])] }
    }

    #[test]
    fn iou_hand_values() {
        let a = BoundingBox2D::new(0, 0.0, 0.0, 10.0, 10.0);
        let b = BoundingBox2D::new(0, 5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = BoundingBox2D::new(0, 10.0, 0.0, 20.0, 10.0);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        let flat = BoundingBox2D::new(0, 0.0, 0.0, 0.0, 10.0);
        assert!(matches!(iou(&a, &flat), Err(EvalError::DegenerateBox)));
    }

    #[test]
    fn grouping_rules() {
        assert_eq!(group_findings(&[cand(2, [0.0, 0.0, 10.0, 10.0], 0.5)]).len(), 1);
        let stack: Vec<_> = (3..6).map(|z| cand(z, [0.0, 0.0, 10.0, 10.0], 0.1 * z as f64)).collect();
        let g = group_findings(&stack);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].members.len(), 3);
        assert!((g[0].probability - 0.5).abs() < 1e-12);
        // IoU 0.2 between adjacent slices stays split.
        let a = cand(3, [0.0, 0.0, 10.0, 10.0], 0.9);
        let b = cand(4, [0.0, 0.0, 10.0, 2.0], 0.8);
        assert!((iou(&a.bbox, &b.bbox).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(group_findings(&[a, b]).len(), 2);
        // Two slices apart never merge.
        assert_eq!(group_findings(&[cand(1, [0.0, 0.0, 9.0, 9.0], 0.4), cand(3, [0.0, 0.0, 9.0, 9.0], 0.4)]).len(), 2);
    }

    #[test]
    fn matching_examples() {
        let lesions: Vec<Lesion> = (0..75).map(|i| lesion(&i.to_string(), 0, [0.0, 0.0, 5.0, 5.0])).collect();
        let counts = match_lesions(&[CaseFindings { findings: &[], lesions: &lesions }], 0.3);
        assert_eq!((counts.tp, counts.fp, counts.fn_), (0, 0, 75));

        let two = [lesion("a", 2, [0.0, 0.0, 10.0, 10.0]), lesion("b", 5, [30.0, 30.0, 40.0, 40.0])];
        let f = [Finding::single(cand(2, [0.0, 0.0, 10.0, 10.0], 0.7))];
        let counts = match_lesions(&[CaseFindings { findings: &f, lesions: &two }], 0.3);
        assert_eq!((counts.tp, counts.fp, counts.fn_), (1, 0, 1));

        let one = [lesion("a", 2, [0.0, 0.0, 10.0, 10.0])];
        let f = [
            Finding::single(cand(2, [1.0, 0.0, 11.0, 10.0], 0.8)),
            Finding::single(cand(2, [0.0, 1.0, 10.0, 11.0], 0.9)),
        ];
        let m = match_case(&f, &one, 0.3);
        assert_eq!(m.lesion_matched_by[0], Some(1));
        assert_eq!((m.tp(), m.fp(), m.fn_()), (1, 1, 0));
    }

    #[test]
    fn match_requires_same_slice() {
        let one = [lesion("a", 2, [0.0, 0.0, 10.0, 10.0])];
        let f = [Finding::single(cand(3, [0.0, 0.0, 10.0, 10.0], 0.9))];
        assert_eq!(match_case(&f, &one, 0.3).tp(), 0);
    }

    #[test]
    fn patient_metrics_skip_lesion_free_cases() {
        let three = [
            lesion("a", 0, [0.0, 0.0, 10.0, 10.0]),
            lesion("b", 4, [0.0, 0.0, 10.0, 10.0]),
            lesion("c", 8, [0.0, 0.0, 10.0, 10.0]),
        ];
        let f = [Finding::single(cand(4, [0.0, 0.0, 10.0, 10.0], 0.9))];
        let cases = [
            CaseFindings { findings: &f, lesions: &three },
            CaseFindings { findings: &f, lesions: &[] },
        ];
        let pm = compute_patient_metrics(&cases, 0.3);
        assert_eq!((pm.cases_with_lesions, pm.detected_cases), (1, 1));
        assert_eq!(pm.sensitivity, 1.0);
    }
}
