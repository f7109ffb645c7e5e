use serde::{Deserialize, Serialize};

use crate::candidate::Candidate;
use crate::volume::Lesion;

use super::matching::{group_findings, iou_unchecked, match_case, match_lesions, CaseFindings, DisjointSet, Finding, DEFAULT_IOU_THRESHOLD};
use super::metrics::{compute_metrics, MatchCounts, MetricsRow};
use super::EvalError;

/// Scored candidates and ground truth of one test case.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub case_id: String,
    pub candidates: Vec<Candidate>,
    pub lesions: Vec<Lesion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub counts: MatchCounts,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Candidates strictly above this probability are kept.
    pub threshold: f64,
    pub counts: MatchCounts,
    pub metrics: MetricsRow,
    pub curve: Vec<SweepPoint>,
}

/// Groups and matches the candidates whose probability is strictly above `threshold`.
pub fn evaluate_at(cases: &[EvalCase], threshold: f64) -> MatchCounts {
    let findings: Vec<Vec<Finding>> = cases
        .iter()
        .map(|c| {
            let kept: Vec<Candidate> = c.candidates.iter().filter(|x| x.probability > threshold).cloned().collect();
            group_findings(&kept)
        })
        .collect();
    let views: Vec<CaseFindings<'_>> = cases
        .iter()
        .zip(&findings)
        .map(|(c, f)| CaseFindings { findings: f, lesions: &c.lesions })
        .collect();
    match_lesions(&views, DEFAULT_IOU_THRESHOLD)
}

/// Every distinct candidate probability as a strict cut, plus 0 (keep all).
pub fn cut_points(cases: &[EvalCase]) -> Vec<f64> {
    let mut cuts: Vec<f64> = cases.iter().flat_map(|c| c.candidates.iter().map(|x| x.probability)).collect();
    cuts.push(0.0);
    cuts.retain(|p| p.is_finite() && *p >= 0.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts
}

/// Counts of one case as a step function of the threshold.
struct CaseSteps {
    /// Distinct kept probabilities, descending.
    levels: Vec<f64>,
    /// `counts[k]` keeps every candidate with probability >= `levels[k]`.
    counts: Vec<MatchCounts>,
    empty: MatchCounts,
}

impl CaseSteps {
    /// Same result as [`evaluate_at`] on this case alone, for every threshold at once.
    /// Candidates enter in descending probability and are grouped incrementally;
    /// only groups touching a lesion go through the matcher.
    fn new(case: &EvalCase) -> Self {
        let mut cands: Vec<&Candidate> = case.candidates.iter().filter(|c| c.probability > 0.0).collect();
        cands.sort_by(|a, b| b.probability.total_cmp(&a.probability));
        let n = cands.len();
        let mut by_slice: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, c) in cands.iter().enumerate() {
            by_slice.entry(c.bbox.z).or_default().push(i);
        }
        let relevant: Vec<bool> = cands
            .iter()
            .map(|c| {
                let b = &c.bbox;
                case.lesions.iter().flat_map(|l| &l.boxes).any(|g| g.z == b.z && iou_unchecked(b, g) > DEFAULT_IOU_THRESHOLD)
            })
            .collect();

        let empty = MatchCounts { tp: 0, fp: 0, fn_: case.lesions.len(), n_cases: 1 };
        let mut sets = DisjointSet::new(n);
        let mut groups = 0usize;
        let mut relevant_added = Vec::new();
        let (mut levels, mut counts) = (Vec::new(), Vec::new());
        let mut i = 0;
        while i < n {
            let p = cands[i].probability;
            while i < n && cands[i].probability == p {
                groups += 1;
                let b = &cands[i].bbox;
                for z in b.z.saturating_sub(1)..=b.z + 1 {
                    for &j in by_slice.get(&z).into_iter().flatten().take_while(|&&j| j < i) {
                        if iou_unchecked(b, &cands[j].bbox) > DEFAULT_IOU_THRESHOLD && sets.union(i, j) {
                            groups -= 1;
                        }
                    }
                }
                if relevant[i] {
                    relevant_added.push(i);
                }
                i += 1;
            }
            let mut roots: Vec<usize> = relevant_added.iter().map(|&k| sets.find(k)).collect();
            roots.sort_unstable();
            roots.dedup();
            let mut members: Vec<Vec<Candidate>> = vec![Vec::new(); roots.len()];
            if !roots.is_empty() {
                for k in 0..i {
                    if let Ok(slot) = roots.binary_search(&sets.find(k)) {
                        members[slot].push(cands[k].clone());
                    }
                }
            }
            let findings: Vec<Finding> = members.into_iter().map(Finding::from_members).collect();
            let m = match_case(&findings, &case.lesions, DEFAULT_IOU_THRESHOLD);
            levels.push(p);
            counts.push(MatchCounts { tp: m.tp(), fp: groups - (findings.len() - m.fp()), fn_: m.fn_(), n_cases: 1 });
        }
        Self { levels, counts, empty }
    }

    fn at(&self, threshold: f64) -> MatchCounts {
        match self.levels.partition_point(|&l| l > threshold) {
            0 => self.empty,
            k => self.counts[k - 1],
        }
    }
}

/// F1-maximizing cut; ties go to the largest threshold.
pub fn sweep_threshold(cases: &[EvalCase]) -> Result<SweepResult, EvalError> {
    let steps: Vec<CaseSteps> = cases.iter().map(CaseSteps::new).collect();
    let mut curve = Vec::new();
    let mut best: Option<(f64, MatchCounts, MetricsRow)> = None;
    for t in cut_points(cases) {
        let mut counts = MatchCounts { tp: 0, fp: 0, fn_: 0, n_cases: cases.len() };
        for s in &steps {
            let c = s.at(t);
            counts.tp += c.tp;
            counts.fp += c.fp;
            counts.fn_ += c.fn_;
        }
        let metrics = compute_metrics(&counts)?;
        curve.push(SweepPoint { threshold: t, counts, f1: metrics.f1 });
        if best.as_ref().is_none_or(|(_, _, m)| metrics.f1 >= m.f1) {
            best = Some((t, counts, metrics));
        }
    }
    let (threshold, counts, metrics) = best.expect("cut points always include 0");
    Ok(SweepResult { threshold, counts, metrics, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidate::Stage;
    use crate::volume::BoundingBox2D;

    fn cand(z: usize, b: [f64; 4], p: f64) -> Candidate {
        Candidate {
            case_id: "c".into(),
            bbox: BoundingBox2D::new(z, b[0], b[1], b[2], b[3]),
            probability: p,
            stage: Stage::TwoStage,
            model_id: None,
        }
    }

    fn lesion(z: usize, b: [f64; 4]) -> Lesion {
        Lesion { id: format!("{z}"), boxes: vec![BoundingBox2D::new(z, b[0], b[1], b[2], b[3])] }
    }

    #[test]
    fn two_cut_example() {
        let case = EvalCase {
            case_id: "c".into(),
            candidates: vec![cand(1, [0.0, 0.0, 10.0, 10.0], 0.9), cand(7, [30.0, 30.0, 40.0, 40.0], 0.1)],
            lesions: vec![lesion(1, [0.0, 0.0, 10.0, 10.0])],
        };
        let r = sweep_threshold(&[case]).unwrap();
        assert!(r.threshold >= 0.1 && r.threshold < 0.9);
        assert_eq!(r.metrics.f1, 1.0);
    }

    #[test]
    fn perfect_candidates_keep_everything() {
        let case = EvalCase {
            case_id: "c".into(),
            candidates: vec![cand(1, [0.0, 0.0, 10.0, 10.0], 0.8), cand(5, [20.0, 20.0, 30.0, 30.0], 0.6)],
            lesions: vec![lesion(1, [0.0, 0.0, 10.0, 10.0]), lesion(5, [20.0, 20.0, 30.0, 30.0])],
        };
        let r = sweep_threshold(&[case]).unwrap();
        assert_eq!(r.metrics.f1, 1.0);
        assert!(r.threshold < 0.6);
    }

    #[test]
    fn low_scoring_distractor_does_not_move_the_cut() {
        let mut case = EvalCase {
            case_id: "c".into(),
            candidates: vec![
                cand(1, [0.0, 0.0, 10.0, 10.0], 0.9),
                cand(3, [40.0, 40.0, 50.0, 50.0], 0.5),
                cand(8, [20.0, 0.0, 30.0, 10.0], 0.3),
            ],
            lesions: vec![lesion(1, [0.0, 0.0, 10.0, 10.0])],
        };
        let before = sweep_threshold(std::slice::from_ref(&case)).unwrap();
        case.candidates.push(cand(9, [0.0, 40.0, 10.0, 50.0], before.threshold / 2.0));
        let after = sweep_threshold(&[case]).unwrap();
        assert_eq!((before.threshold, before.counts), (after.threshold, after.counts));
    }

    #[test]
    fn curve_matches_per_threshold_evaluation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let cases: Vec<EvalCase> = (0..rng.random_range(1..4))
                .map(|_| {
                    let pt = |rng: &mut rand_chacha::ChaCha8Rng| {
                        let (x, y, z) = (rng.random_range(0..6) as f64 * 4.0, rng.random_range(0..6) as f64 * 4.0, rng.random_range(0..4));
                        let (w, h) = (rng.random_range(4..12) as f64, rng.random_range(4..12) as f64);
                        (z, [x, y, x + w, y + h])
                    };
                    let candidates = (0..rng.random_range(0..30))
                        .map(|_| {
                            let (z, b) = pt(&mut rng);
                            // Coarse probabilities force ties.
                            cand(z, b, rng.random_range(0..8) as f64 / 8.0)
                        })
                        .collect();
                    let lesions = (0..rng.random_range(0..4))
                        .map(|_| {
                            let (z, b) = pt(&mut rng);
                            lesion(z, b)
                        })
                        .collect();
                    EvalCase { case_id: "c".into(), candidates, lesions }
                })
                .collect();
            if cases.iter().all(|c| c.lesions.is_empty()) {
                continue;
            }
            let r = sweep_threshold(&cases).unwrap();
            for point in &r.curve {
                assert_eq!(point.counts, evaluate_at(&cases, point.threshold), "cut {}", point.threshold);
            }
        }
    }
}
