use aisdet::detector::*;
use aisdet::nnet::{grad_check, AugmentConfig, OptimizerConfig, Phase, Tensor, TrainSchedule, Objective};
use aisdet::phantom::{generate_case, PhantomConfig};
use aisdet::volume::{apply_window, BoundingBox2D, HuVolume, WindowSettings};
use aisdet::{Candidate, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> DetectorConfig {
    DetectorConfig::default()
}

fn iou(a: &BoundingBox2D, b: &BoundingBox2D) -> f64 {
    aisdet::eval::iou(a, b).unwrap()
}

fn prediction_from_targets(t: &DetTarget, neg_logit: f32, pos_logit: f32) -> GridPrediction {
    // Layout [A, 5, S, S]: objectness is channel 4 of each anchor block.
    let scales = t
        .scales
        .iter()
        .zip(cfg().scales)
        .map(|(v, s)| {
            let cells = s * s;
            v.iter()
                .enumerate()
                .map(|(i, &x)| if (i / cells) % 5 == 4 { if x > 0.5 { pos_logit } else { neg_logit } } else { x })
                .collect()
        })
        .collect();
    GridPrediction { scales }
}

#[test]
fn empty_boxes_encode_to_zero_objectness() {
    let t = encode_targets(&[], &cfg()).unwrap();
    assert!(t.scales.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn anchor_sized_box_on_cell_center_encodes_to_zero() {
    let c = cfg();
    // Fine scale stride 8; cell (3, 2) center is (28, 20); anchor 10x10.
    let b = BoundingBox2D::from_center(0, 28.0, 20.0, 10.0, 10.0);
    let t = encode_targets(&[b], &c).unwrap();
    let s = 8;
    let a = 1;
    let at = |k: usize| t.scales[0][((a * 5 + k) * s + 2) * s + 3];
    assert_eq!(at(4), 1.0);
    for k in 0..4 {
        assert!(at(k).abs() < 1e-6, "k={k} {}", at(k));
    }
    assert_eq!(t.scales[0].iter().filter(|&&v| v == 1.0).count(), 1);
}

#[test]
fn degenerate_box_is_rejected() {
    let b = BoundingBox2D::new(0, 3.0, 3.0, 3.5, 9.0);
    assert!(matches!(encode_targets(&[b], &cfg()), Err(DetectorError::DegenerateBox(_))));
}

#[test]
fn decode_encode_round_trip() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(4.0..30.0), rng.random_range(4.0..30.0));
        let (cx, cy) = (rng.random_range(w / 2.0..64.0 - w / 2.0), rng.random_range(h / 2.0..64.0 - h / 2.0));
        let b = BoundingBox2D::from_center(5, cx, cy, w, h);
        let t = encode_targets(&[b], &c).unwrap();
        let got = decode_predictions(&prediction_from_targets(&t, -100.0, 100.0), &c, "x", 5, 0.5);
        assert_eq!(got.len(), 1);
        assert!(iou(&got[0].bbox, &b) >= 0.99, "{b:?} -> {:?}", got[0].bbox);
    }
}

#[test]
fn decode_hand_example() {
    let c = DetectorConfig { anchors: vec![vec![(16.0, 16.0)], vec![(20.0, 20.0)]], ..cfg() };
    let mut scales = vec![vec![-100.0f32; 5 * 64], vec![-100.0f32; 5 * 16]];
    for k in 0..4 {
        scales[0][(k * 8 + 2) * 8 + 3] = 0.0;
    }
    scales[0][(4 * 8 + 2) * 8 + 3] = 3.0;
    let got = decode_predictions(&GridPrediction { scales }, &c, "x", 0, 0.5);
    assert_eq!(got.len(), 1);
    let b = got[0].bbox;
    assert_eq!(b.center(), (28.0, 20.0));
    assert_eq!((b.width(), b.height()), (16.0, 16.0));
}

#[test]
fn very_negative_logits_decode_to_nothing() {
    let c = cfg();
    let scales = c.scales.iter().zip(&c.anchors).map(|(s, a)| vec![-100.0f32; a.len() * 5 * s * s]).collect();
    assert!(decode_predictions(&GridPrediction { scales }, &c, "x", 0, 1e-9).is_empty());
}

fn cand(b: BoundingBox2D, p: f64) -> Candidate {
    Candidate { case_id: "c".into(), bbox: b, probability: p, stage: Stage::OneStage, model_id: None }
}

#[test]
fn nms_examples() {
    let b = BoundingBox2D::new(0, 0.0, 0.0, 10.0, 10.0);
    let kept = nms(vec![cand(b, 0.8), cand(b, 0.9)], 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].probability, 0.9);

    let far = BoundingBox2D::new(0, 30.0, 30.0, 40.0, 40.0);
    assert_eq!(nms(vec![cand(b, 0.8), cand(far, 0.9)], 0.5).len(), 2);

}

#[test]
fn nms_chain_keeps_both_ends() {
    // A-B and B-C overlap with IoU 1/3 while A and C only touch.
    let a = BoundingBox2D::new(0, 0.0, 0.0, 10.0, 10.0);
    let b = BoundingBox2D::new(0, 5.0, 0.0, 15.0, 10.0);
    let c = BoundingBox2D::new(0, 10.0, 0.0, 20.0, 10.0);
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12 && (iou(&b, &c) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(iou(&a, &c), 0.0);
    let kept = nms(vec![cand(c, 0.7), cand(a, 0.9), cand(b, 0.8)], 0.3);
    let got: Vec<BoundingBox2D> = kept.iter().map(|k| k.bbox).collect();
    assert_eq!(got, vec![a, c]);
    // Different slices never suppress each other.
    let mut other = b;
    other.z = 1;
    assert_eq!(nms(vec![cand(a, 0.9), cand(other, 0.8)], 0.3).len(), 2);
}

#[test]
fn nms_output_is_sorted_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let cs: Vec<Candidate> = (0..rng.random_range(0..15))
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
                let b = BoundingBox2D::new(rng.random_range(0..2), x, y, x + rng.random_range(2.0..14.0), y + rng.random_range(2.0..14.0));
                cand(b, rng.random_range(0.0..1.0))
            })
            .collect();
        let kept = nms(cs.clone(), 0.5);
        assert!(kept.iter().all(|k| cs.contains(k)));
        assert!(kept.windows(2).all(|w| w[0].probability >= w[1].probability));
    }
}

#[test]
fn loss_examples() {
    let c = cfg();
    let loss = DetectorLoss::from_config(&c);
    let t = encode_targets(&[], &c).unwrap();
    let zeros: Vec<Vec<f32>> = t.scales.iter().map(|v| vec![0.0; v.len()]).collect();
    let refs: Vec<&[f32]> = zeros.iter().map(|v| v.as_slice()).collect();
    let l = loss.sample_loss(&refs, &t, None);
    let anchors_cells: usize = c.scales.iter().zip(&c.anchors).map(|(s, a)| s * s * a.len()).sum();
    assert!((l - 0.5 * anchors_cells as f64 * std::f64::consts::LN_2).abs() < 1e-9);

    let boxes = [BoundingBox2D::new(0, 10.0, 12.0, 17.0, 19.0), BoundingBox2D::new(0, 30.0, 30.0, 48.0, 50.0)];
    let t = encode_targets(&boxes, &c).unwrap();
    let pred = prediction_from_targets(&t, -20.0, 20.0);
    let refs: Vec<&[f32]> = pred.scales.iter().map(|v| v.as_slice()).collect();
    let l = loss.sample_loss(&refs, &t, None);
    assert!((0.0..1e-6).contains(&l), "{l}");
}

fn micro_cfg() -> DetectorConfig {
    DetectorConfig {
        input_size: 16,
        scales: vec![4, 2],
        anchors: vec![vec![(3.0, 3.0), (5.0, 5.0)], vec![(8.0, 8.0)]],
        trunk_channels: vec![2, 3],
        head_channels: 3,
        ..cfg()
    }
}

#[test]
fn detector_loss_passes_grad_check() {
    let c = micro_cfg();
    let loss = DetectorLoss::from_config(&c);
    for seed in 0..10u64 {
        let net = c.build_network(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let x: Vec<f32> = (0..2 * 256).map(|_| rng.random_range(0.0..1.0)).collect();
        let targets: Vec<DetTarget> = (0..2)
            .map(|_| {
                let (cx, cy) = (rng.random_range(3.0..13.0), rng.random_range(3.0..13.0));
                encode_targets(&[BoundingBox2D::from_center(0, cx, cy, rng.random_range(2.0..9.0), rng.random_range(2.0..9.0))], &c).unwrap()
            })
            .collect();
        let refs: Vec<&DetTarget> = targets.iter().collect();
        let r = grad_check(&net, &loss, &Tensor::new(vec![2, 1, 16, 16], x).unwrap(), &refs, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn splits_follow_ratio_and_are_deterministic() {
    assert_eq!(split_sizes(10), (9, 1));
    assert_eq!(split_sizes(189), (169, 20));
    assert_eq!(split_sizes(60), (54, 6));
    let a = make_splits(10, 10, 3);
    assert_eq!(a, make_splits(10, 10, 3));
    for s in &a {
        assert_eq!((s.train.len(), s.val.len()), (9, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
    assert_ne!(a, make_splits(10, 10, 4));
}

fn tiny_schedule() -> TrainSchedule {
    TrainSchedule {
        phases: vec![Phase { optimizer: OptimizerConfig::nadam(3e-3), max_epochs: 1 }, Phase { optimizer: OptimizerConfig::rmsprop(1e-3), max_epochs: 2 }],
        early_stop_patience: Some(2),
        plateau_patience: Some(1),
        decay_factor: 0.1,
        batch_size: 16,
        augment: AugmentConfig::default(),
    }
}

fn phantom_cases(n: usize, seed: u64) -> Vec<DetCase> {
    let p = PhantomConfig { seed, ..Default::default() };
    (0..n)
        .map(|i| {
            let c = generate_case(&p, i).unwrap();
            DetCase::new(&c.volume, c.annotation(), WindowSettings::default())
        })
        .collect()
}

#[test]
fn best_split_is_argmin_and_training_is_deterministic() {
    let cases = phantom_cases(30, 1);
    let c = cfg();
    let a = train_detector(&cases, &c, &tiny_schedule(), 10, 7).unwrap();
    let mut losses: Vec<f64> = a.runs.iter().map(|r| r.final_val_loss).collect();
    let best = losses[a.best];
    losses.sort_by(f64::total_cmp);
    assert!(best <= losses[4] && best == losses[0]);
    let b = train_detector(&cases, &c, &tiny_schedule(), 10, 7).unwrap();
    assert_eq!(a.best, b.best);
    assert!(a.runs.iter().zip(&b.runs).all(|(x, y)| x.split == y.split && x.history == y.history && x.detector == y.detector));
}

#[test]
fn inference_threshold_behaviour() {
    let c = cfg();
    let det = Detector { network: c.build_network(3).unwrap(), config: c.clone() };
    let case = generate_case(&PhantomConfig { seed: 2, ..Default::default() }, 0).unwrap();
    assert!(infer_one_stage(&det, &case.volume, "x", 1.0).unwrap().is_empty());
    let all = infer_one_stage(&det, &case.volume, "x", 0.0).unwrap();
    let norm = apply_window(&case.volume, c.window);
    let expected: usize = det
        .predict(&norm)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(z, p)| nms(decode_predictions(p, &c, "x", z, 0.0), c.nms_iou).len())
        .sum();
    assert_eq!(all.len(), expected);
    assert_eq!(all, infer_one_stage(&det, &case.volume, "x", 0.0).unwrap());
    // Lowering the emission threshold never removes a pre-suppression candidate.
    for (z, p) in det.predict(&norm).unwrap().iter().enumerate() {
        let hi = decode_predictions(p, &c, "x", z, 0.6);
        let lo = decode_predictions(p, &c, "x", z, 0.3);
        assert!(hi.iter().all(|h| lo.contains(h)));
    }
    let air = HuVolume::filled([64, 64, 4], [1.0; 3], -1000).unwrap();
    assert!(infer_one_stage(&det, &air, "air", 1.0).unwrap().is_empty());
}
