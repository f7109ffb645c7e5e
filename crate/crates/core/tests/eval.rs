use aisdet::candidate::{Candidate, Stage};
use aisdet::eval::*;
use aisdet::volume::{BoundingBox2D, Lesion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integer-corner boxes so the oracle can count unit cells.
fn random_box(rng: &mut ChaCha8Rng, z: usize, span: i32) -> BoundingBox2D {
    let x0 = rng.random_range(0..span);
    let y0 = rng.random_range(0..span);
    let w = rng.random_range(1..=12);
    let h = rng.random_range(1..=12);
    BoundingBox2D::new(z, x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64)
}

fn cell_count_iou(a: &BoundingBox2D, b: &BoundingBox2D) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    let inside = |r: &BoundingBox2D, x: i32, y: i32| (x as f64) >= r.x_min && (x as f64) < r.x_max && (y as f64) >= r.y_min && (y as f64) < r.y_max;
    for x in 0..64 {
        for y in 0..64 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_properties_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let a = random_box(&mut rng, 0, 40);
        let b = random_box(&mut rng, 0, 40);
        let ab = iou(&a, &b).unwrap();
        assert_eq!(ab, iou(&b, &a).unwrap());
        assert!((0.0..=1.0).contains(&ab));
        assert!((ab - cell_count_iou(&a, &b)).abs() < 1e-12, "{a:?} {b:?}");
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn iou_rejects_degenerate_boxes() {
    let ok = BoundingBox2D::new(0, 0.0, 0.0, 4.0, 4.0);
    for bad in [BoundingBox2D::new(0, 2.0, 0.0, 2.0, 4.0), BoundingBox2D::new(0, 0.0, 5.0, 4.0, 1.0)] {
        assert_eq!(iou(&ok, &bad), Err(EvalError::DegenerateBox));
        assert_eq!(iou(&bad, &ok), Err(EvalError::DegenerateBox));
    }
}

fn finding(z: usize, b: BoundingBox2D, p: f64) -> Finding {
    Finding::single(Candidate { case_id: "c".into(), bbox: BoundingBox2D { z, ..b }, probability: p, stage: Stage::OneStage, model_id: None })
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Finding>, Vec<Lesion>) {
    let n_l = rng.random_range(0..5);
    let n_f = rng.random_range(0..8);
    let lesions: Vec<Lesion> = (0..n_l)
        .map(|i| {
            let n_boxes = rng.random_range(1..=3);
            let z0 = rng.random_range(0..3);
            Lesion { id: format!("l{i}"), boxes: (0..n_boxes).map(|k| random_box(rng, z0 + k, 20)).collect() }
        })
        .collect();
    // Distinct probabilities keep the greedy order independent of input order.
    let mut probs: Vec<u32> = (1..=1000).collect();
    probs.shuffle(rng);
    let findings = (0..n_f)
        .map(|i| {
            let z = rng.random_range(0..5);
            finding(z, random_box(rng, z, 20), probs[i] as f64 / 1000.0)
        })
        .collect();
    (findings, lesions)
}

#[test]
fn matching_invariants_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let (mut findings, mut lesions) = random_instance(&mut rng);
        let counts = match_lesions(&[CaseFindings { findings: &findings, lesions: &lesions }], DEFAULT_IOU_THRESHOLD);
        assert_eq!(counts.tp + counts.fn_, lesions.len());
        assert_eq!(counts.tp + counts.fp, findings.len());
        assert_eq!(counts.n_cases, 1);
        findings.shuffle(&mut rng);
        lesions.shuffle(&mut rng);
        let again = match_lesions(&[CaseFindings { findings: &findings, lesions: &lesions }], DEFAULT_IOU_THRESHOLD);
        assert_eq!(counts, again);
    }
}

fn can_match(f: &Finding, l: &Lesion) -> bool {
    f.members.iter().any(|m| l.boxes.iter().any(|g| g.z == m.bbox.z && cell_count_iou(&m.bbox, g) > 0.3))
}

/// Maximum bipartite matching by exhaustive search.
fn optimal_tp(edges: &[Vec<bool>], fi: usize, used: &mut Vec<bool>) -> usize {
    if fi == edges.len() {
        return 0;
    }
    let mut best = optimal_tp(edges, fi + 1, used);
    for li in 0..used.len() {
        if edges[fi][li] && !used[li] {
            used[li] = true;
            best = best.max(1 + optimal_tp(edges, fi + 1, used));
            used[li] = false;
        }
    }
    best
}

#[test]
fn greedy_never_beats_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let (mut findings, lesions) = random_instance(&mut rng);
        findings.truncate(6);
        let edges: Vec<Vec<bool>> = findings.iter().map(|f| lesions.iter().map(|l| can_match(f, l)).collect()).collect();
        let greedy = match_case(&findings, &lesions, DEFAULT_IOU_THRESHOLD).tp();
        assert!(greedy <= optimal_tp(&edges, 0, &mut vec![false; lesions.len()]));
    }
}

#[test]
fn greedy_equals_bipartite_when_each_finding_reaches_one_lesion() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut nontrivial = 0;
    for _ in 0..1000 {
        // Lesions sit on a coarse grid so no box can overlap two of them.
        let n_l = rng.random_range(1..=4);
        let lesions: Vec<Lesion> = (0..n_l)
            .map(|i| {
                let (cx, cy) = ((i % 2) as f64 * 30.0 + 10.0, (i / 2) as f64 * 30.0 + 10.0);
                Lesion { id: format!("l{i}"), boxes: vec![BoundingBox2D::new(0, cx, cy, cx + 10.0, cy + 10.0)] }
            })
            .collect();
        let n_f = rng.random_range(0..=6);
        let mut probs: Vec<u32> = (1..=1000).collect();
        probs.shuffle(&mut rng);
        let findings: Vec<Finding> = (0..n_f)
            .map(|i| {
                let l = &lesions[rng.random_range(0..n_l)].boxes[0];
                let dx = rng.random_range(-6..=6) as f64;
                let dy = rng.random_range(-6..=6) as f64;
                let b = BoundingBox2D::new(0, l.x_min + dx, l.y_min + dy, l.x_max + dx, l.y_max + dy);
                finding(rng.random_range(0..2), b, probs[i] as f64 / 1000.0)
            })
            .collect();
        let edges: Vec<Vec<bool>> = findings.iter().map(|f| lesions.iter().map(|l| can_match(f, l)).collect()).collect();
        assert!(edges.iter().all(|row| row.iter().filter(|e| **e).count() <= 1));
        let opt = optimal_tp(&edges, 0, &mut vec![false; n_l]);
        nontrivial += (opt > 0) as usize;
        assert_eq!(match_case(&findings, &lesions, DEFAULT_IOU_THRESHOLD).tp(), opt);
    }
    assert!(nontrivial > 300);
}

#[test]
fn mcnemar_against_exact_integer_tail() {
    // Pascal's triangle in integers; the p-value is 2 * sum / 2^n, capped at 1.
    let mut row: Vec<u128> = vec![1];
    for n in 1..=40u64 {
        let mut next = vec![1u128; n as usize + 1];
        for i in 1..n as usize {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
        for b in 0..=n {
            let c = n - b;
            let k = b.min(c) as usize;
            let sum: u128 = row[..=k].iter().sum();
            let expected = ((2 * sum) as f64 / 2f64.powi(n as i32)).min(1.0);
            let got = mcnemar_exact(McNemarInput { b, c });
            assert!((got - expected).abs() <= 1e-12 * expected.max(1e-300), "({b},{c}): {got} vs {expected}");
        }
    }
    assert_eq!(mcnemar_exact(McNemarInput { b: 0, c: 0 }), 1.0);
}
