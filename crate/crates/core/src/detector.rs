//! Stage one: a small grid-cell detector with anchor boxes at two scales.
//!
//! Each scale predicts `(tx, ty, tw, th, objectness logit)` per anchor and cell.
//! Boxes decode as `((cx + σ(tx))·stride, (cy + σ(ty))·stride, aw·e^tw, ah·e^th)`
//! and the candidate probability is `σ(objectness)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::{Candidate, Stage};
use crate::eval::iou_unchecked;
use crate::nnet::{self, Architecture, Augmentation, Dataset, LayerSpec, Network, NnetError, Objective, Real, Tensor, TrainHistory, TrainSchedule};
use crate::rng;
use crate::volume::{apply_window, BoundingBox2D, CaseAnnotation, HuVolume, NormalizedVolume, WindowSettings};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("degenerate box {0:?}: width and height must be at least 1 px")]
    DegenerateBox(BoundingBox2D),
    #[error("volume slices are {got:?}, detector expects {expected}x{expected}")]
    InputSize { expected: usize, got: [usize; 2] },
    #[error("at least {0} cases are required")]
    TooFewCases(usize),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input side in pixels (single channel).
    pub input_size: usize,
    /// Grid side per scale, finest first.
    pub scales: Vec<usize>,
    /// (width, height) anchors per scale.
    pub anchors: Vec<Vec<(f64, f64)>>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    /// Output channels of the conv / pool stages down to the finest grid.
    pub trunk_channels: Vec<usize>,
    pub head_channels: usize,
    pub window: WindowSettings,
    /// Share of slices without lesions or confounders used in training and validation.
    pub empty_slice_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            scales: vec![8, 4],
            anchors: vec![vec![(6.0, 6.0), (10.0, 10.0)], vec![(14.0, 14.0), (20.0, 20.0)]],
            conf_threshold: 0.02,
            nms_iou: 0.5,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            trunk_channels: vec![4, 8, 16],
            head_channels: 16,
            window: WindowSettings::default(),
            empty_slice_fraction: 0.15,
        }
    }
}

fn log2_exact(n: usize) -> Option<u32> {
    (n.is_power_of_two()).then(|| n.trailing_zeros())
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidConfig(m));
        if self.scales.is_empty() || self.scales.len() != self.anchors.len() {
            return bad("one anchor list per scale is required".into());
        }
        for (s, anchors) in self.scales.iter().zip(&self.anchors) {
            if *s == 0 || self.input_size % s != 0 {
                return bad(format!("scale {s} does not divide input size {}", self.input_size));
            }
            if anchors.is_empty() || anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
                return bad(format!("scale {s} needs at least one positive anchor"));
            }
        }
        if self.scales.windows(2).any(|w| w[1] >= w[0]) {
            return bad("scales must be listed finest first".into());
        }
        let pools = log2_exact(self.input_size / self.scales[0]);
        if pools != Some(self.trunk_channels.len() as u32) {
            return bad(format!("trunk needs log2(input/finest) = {:?} stages, got {}", pools, self.trunk_channels.len()));
        }
        if self.scales.iter().any(|&s| log2_exact(self.scales[0] / s).is_none() || self.scales[0] % s != 0) {
            return bad("every scale must be the finest grid divided by a power of two".into());
        }
        if !(self.conf_threshold >= 0.0 && self.conf_threshold <= 1.0) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("thresholds must lie in [0, 1]".into());
        }
        if !(self.lambda_coord > 0.0 && self.lambda_noobj > 0.0) {
            return bad("loss weights must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.empty_slice_fraction) {
            return bad("empty slice fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn stride(&self, scale: usize) -> f64 {
        self.input_size as f64 / self.scales[scale] as f64
    }

    pub fn architecture(&self) -> Architecture {
        let mut trunk = Vec::new();
        for &c in &self.trunk_channels {
            trunk.extend([LayerSpec::Conv { kernel: 3, stride: 1, out_channels: c }, LayerSpec::LeakyRelu, LayerSpec::MaxPool]);
        }
        let heads = self
            .scales
            .iter()
            .zip(&self.anchors)
            .map(|(&s, anchors)| {
                let mut head = vec![LayerSpec::MaxPool; log2_exact(self.scales[0] / s).unwrap_or(0) as usize];
                head.extend([
                    LayerSpec::Conv { kernel: 3, stride: 1, out_channels: self.head_channels },
                    LayerSpec::LeakyRelu,
                    LayerSpec::Conv { kernel: 1, stride: 1, out_channels: anchors.len() * 5 },
                ]);
                head
            })
            .collect();
        Architecture { input_shape: vec![1, self.input_size, self.input_size], trunk, heads }
    }

    pub fn build_network(&self, seed: u64) -> Result<Network<f32>, DetectorError> {
        self.validate()?;
        Ok(Network::from_architecture(&self.architecture(), seed)?)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Keeps in-cell offsets away from 0 and 1 so their logits stay finite.
const OFFSET_EPS: f64 = 1e-3;

/// Per-scale target tensors laid out like the network output `[A*5, S, S]`;
/// the objectness channel is 1 at positive anchors and 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct DetTarget {
    pub scales: Vec<Vec<f32>>,
}

#[inline]
fn slot(s: usize, a: usize, k: usize, cy: usize, cx: usize) -> usize {
    ((a * 5 + k) * s + cy) * s + cx
}

fn anchor_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    inter / (w * h + aw * ah - inter)
}

/// Assigns each box to the anchor (over all scales) with the best shape IoU.
pub fn encode_targets(boxes: &[BoundingBox2D], cfg: &DetectorConfig) -> Result<DetTarget, DetectorError> {
    let mut scales: Vec<Vec<f32>> = cfg.scales.iter().zip(&cfg.anchors).map(|(&s, a)| vec![0.0; a.len() * 5 * s * s]).collect();
    for b in boxes {
        let (w, h) = (b.width(), b.height());
        if !(w >= 1.0 && h >= 1.0) {
            return Err(DetectorError::DegenerateBox(*b));
        }
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (si, anchors) in cfg.anchors.iter().enumerate() {
            for (ai, &(aw, ah)) in anchors.iter().enumerate() {
                let v = anchor_iou(w, h, aw, ah);
                if v > best.0 {
                    best = (v, si, ai);
                }
            }
        }
        let (_, si, ai) = best;
        let s = cfg.scales[si];
        let stride = cfg.stride(si);
        let (cx, cy) = b.center();
        let (gx, gy) = (cx / stride, cy / stride);
        let (col, row) = ((gx.floor().max(0.0) as usize).min(s - 1), (gy.floor().max(0.0) as usize).min(s - 1));
        let (aw, ah) = cfg.anchors[si][ai];
        let t = &mut scales[si];
        t[slot(s, ai, 0, row, col)] = logit((gx - col as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS)) as f32;
        t[slot(s, ai, 1, row, col)] = logit((gy - row as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS)) as f32;
        t[slot(s, ai, 2, row, col)] = (w / aw).ln() as f32;
        t[slot(s, ai, 3, row, col)] = (h / ah).ln() as f32;
        t[slot(s, ai, 4, row, col)] = 1.0;
    }
    Ok(DetTarget { scales })
}

/// Raw per-scale predictions of one slice, `[A*5, S, S]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub scales: Vec<Vec<f32>>,
}

/// Decodes every anchor whose probability exceeds `conf_threshold`, merged over
/// scales. Boxes are clipped to the image; anything clipped away is dropped.
pub fn decode_predictions(pred: &GridPrediction, cfg: &DetectorConfig, case_id: &str, z: usize, conf_threshold: f64) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (si, values) in pred.scales.iter().enumerate() {
        let s = cfg.scales[si];
        let stride = cfg.stride(si);
        for (ai, &(aw, ah)) in cfg.anchors[si].iter().enumerate() {
            for cy in 0..s {
                for cx in 0..s {
                    let v = |k| values[slot(s, ai, k, cy, cx)] as f64;
                    let p = sigmoid(v(4));
                    if !(p > conf_threshold) {
                        continue;
                    }
                    let bx = (cx as f64 + sigmoid(v(0))) * stride;
                    let by = (cy as f64 + sigmoid(v(1))) * stride;
                    let (bw, bh) = (aw * v(2).clamp(-10.0, 10.0).exp(), ah * v(3).clamp(-10.0, 10.0).exp());
                    if let Some(bbox) = BoundingBox2D::from_center(z, bx, by, bw, bh).clip(cfg.input_size, cfg.input_size) {
                        out.push(Candidate { case_id: case_id.to_string(), bbox, probability: p, stage: Stage::OneStage, model_id: None });
                    }
                }
            }
        }
    }
    out
}

/// Greedy suppression by descending probability, per slice. Ties keep input order.
pub fn nms(candidates: Vec<Candidate>, iou_threshold: f64) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].probability.total_cmp(&candidates[a].probability).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &candidates[k];
            o.case_id == c.case_id && o.bbox.z == c.bbox.z && iou_unchecked(&o.bbox, &c.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    let mut slots: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    kept.into_iter().map(|i| slots[i].take().expect("each index kept once")).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Squared error on the box terms at positive anchors (weight λ_coord) plus
/// objectness cross-entropy everywhere, negatives weighted λ_noobj. Summed over
/// anchors and cells of every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorLoss {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    /// (anchors, grid side) per scale.
    pub layout: Vec<(usize, usize)>,
}

impl DetectorLoss {
    pub fn from_config(cfg: &DetectorConfig) -> Self {
        Self {
            lambda_coord: cfg.lambda_coord,
            lambda_noobj: cfg.lambda_noobj,
            layout: cfg.anchors.iter().zip(&cfg.scales).map(|(a, &s)| (a.len(), s)).collect(),
        }
    }

    fn scale_loss<T: Real>(&self, n_anchor: usize, cells: usize, out: &[T], tgt: &[f32], mut grad: Option<&mut [T]>) -> f64 {
        let mut loss = 0.0;
        for a in 0..n_anchor {
            for c in 0..cells {
                let idx = |k: usize| (a * 5 + k) * cells + c;
                let o = out[idx(4)].as_f64();
                if tgt[idx(4)] > 0.5 {
                    loss += softplus(-o);
                    if let Some(g) = grad.as_deref_mut() {
                        g[idx(4)] = T::from_f64_lossy(sigmoid(o) - 1.0);
                    }
                    for k in 0..4 {
                        let d = out[idx(k)].as_f64() - tgt[idx(k)] as f64;
                        loss += self.lambda_coord * d * d;
                        if let Some(g) = grad.as_deref_mut() {
                            g[idx(k)] = T::from_f64_lossy(2.0 * self.lambda_coord * d);
                        }
                    }
                } else {
                    loss += self.lambda_noobj * softplus(o);
                    if let Some(g) = grad.as_deref_mut() {
                        g[idx(4)] = T::from_f64_lossy(self.lambda_noobj * sigmoid(o));
                    }
                }
            }
        }
        loss
    }
}

impl Objective for DetectorLoss {
    type Target = DetTarget;

    fn sample_loss<T: Real>(&self, outputs: &[&[T]], target: &DetTarget, mut grads: Option<&mut [&mut [T]]>) -> f64 {
        assert_eq!(outputs.len(), self.layout.len(), "one output per scale");
        assert_eq!(target.scales.len(), self.layout.len(), "one target per scale");
        let mut loss = 0.0;
        for (si, &(n_anchor, s)) in self.layout.iter().enumerate() {
            let (out, tgt) = (outputs[si], &target.scales[si]);
            assert!(out.len() == n_anchor * 5 * s * s && tgt.len() == out.len(), "scale {si} has the wrong size");
            let g = grads.as_mut().map(|g| &mut *g[si]);
            loss += self.scale_loss(n_anchor, s * s, out, tgt, g);
        }
        loss
    }
}

/// A detector network together with the config it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub network: Network<f32>,
}

impl Detector {
    /// Raw grid predictions for every slice of `vol`.
    pub fn predict(&self, vol: &NormalizedVolume) -> Result<Vec<GridPrediction>, DetectorError> {
        let [nx, ny, nz] = vol.dims();
        let size = self.config.input_size;
        if nx != size || ny != size {
            return Err(DetectorError::InputSize { expected: size, got: [nx, ny] });
        }
        let x = Tensor::new(vec![nz, 1, size, size], vol.voxels().to_vec()).map_err(DetectorError::Nnet)?;
        let outputs = self.network.forward(&x)?;
        Ok((0..nz).map(|z| GridPrediction { scales: outputs.iter().map(|o| o.item(z).to_vec()).collect() }).collect())
    }

    /// Per slice: forward, decode above `conf_threshold`, suppress overlaps.
    pub fn detect(&self, vol: &NormalizedVolume, case_id: &str, conf_threshold: f64) -> Result<Vec<Candidate>, DetectorError> {
        let mut out = Vec::new();
        for (z, pred) in self.predict(vol)?.iter().enumerate() {
            out.extend(nms(decode_predictions(pred, &self.config, case_id, z, conf_threshold), self.config.nms_iou));
        }
        Ok(out)
    }
}

/// One-stage inference on a raw HU volume: window, then [`Detector::detect`].
pub fn infer_one_stage(detector: &Detector, volume: &HuVolume, case_id: &str, conf_threshold: f64) -> Result<Vec<Candidate>, DetectorError> {
    detector.detect(&apply_window(volume, detector.config.window), case_id, conf_threshold)
}

/// A windowed training case.
#[derive(Debug, Clone, PartialEq)]
pub struct DetCase {
    pub volume: NormalizedVolume,
    pub annotation: CaseAnnotation,
}

impl DetCase {
    pub fn new(volume: &HuVolume, annotation: CaseAnnotation, window: WindowSettings) -> Self {
        Self { volume: apply_window(volume, window), annotation }
    }
}

/// Slices used for training: every slice with a lesion plus a seeded share of
/// the remaining ones.
pub fn select_slices(case: &DetCase, empty_fraction: f64, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, 0, &format!("slices/{}", case.annotation.case_id));
    (0..case.volume.nz())
        .filter(|&z| {
            let keep_empty = r.random_bool(empty_fraction);
            case.annotation.boxes_on_slice(z).next().is_some() || keep_empty
        })
        .collect()
}

pub struct SliceDataset<'a> {
    cases: &'a [DetCase],
    items: Vec<(usize, usize)>,
    config: &'a DetectorConfig,
}

impl<'a> SliceDataset<'a> {
    pub fn new(cases: &'a [DetCase], case_indices: &[usize], config: &'a DetectorConfig, seed: u64) -> Self {
        let items = case_indices
            .iter()
            .flat_map(|&ci| select_slices(&cases[ci], config.empty_slice_fraction, seed).into_iter().map(move |z| (ci, z)))
            .collect();
        Self { cases, items, config }
    }
}

impl Dataset for SliceDataset<'_> {
    type Target = DetTarget;

    fn len(&self) -> usize {
        self.items.len()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![1, self.config.input_size, self.config.input_size]
    }

    fn sample(&self, index: usize, aug: Option<&Augmentation>, input: &mut [f32]) -> DetTarget {
        let (ci, z) = self.items[index];
        let case = &self.cases[ci];
        let slice = case.volume.slice(z);
        let boxes: Vec<BoundingBox2D> = match aug {
            Some(a) if !a.is_identity() => {
                input.copy_from_slice(&a.apply_image(slice.data, slice.width, slice.height));
                case.annotation.boxes_on_slice(z).filter_map(|b| a.apply_box(b, slice.width, slice.height)).collect()
            }
            _ => {
                input.copy_from_slice(slice.data);
                case.annotation.boxes_on_slice(z).copied().collect()
            }
        };
        let boxes: Vec<BoundingBox2D> = boxes.into_iter().filter(|b| b.width() >= 1.0 && b.height() >= 1.0).collect();
        encode_targets(&boxes, self.config).expect("degenerate boxes filtered above")
    }
}

pub const N_SPLITS: usize = 10;

/// Validation share of each split (20 of 189 cases).
pub fn split_sizes(n_cases: usize) -> (usize, usize) {
    let val = ((n_cases as f64 * 20.0 / 189.0).round() as usize).clamp(1, n_cases.saturating_sub(1).max(1));
    (n_cases - val, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn make_splits(n_cases: usize, n_splits: usize, master_seed: u64) -> Vec<Split> {
    let (_, n_val) = split_sizes(n_cases);
    (0..n_splits)
        .map(|k| {
            let mut perm: Vec<usize> = (0..n_cases).collect();
            perm.shuffle(&mut rng::stream(master_seed, k as u64, "detector-split"));
            let mut val = perm[..n_val].to_vec();
            let mut train = perm[n_val..].to_vec();
            val.sort_unstable();
            train.sort_unstable();
            Split { train, val }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SplitRun {
    pub split: Split,
    pub detector: Detector,
    pub history: TrainHistory,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct DetectorTraining {
    pub runs: Vec<SplitRun>,
    /// Index of the run with the lowest final validation loss.
    pub best: usize,
}

impl DetectorTraining {
    pub fn best_detector(&self) -> &Detector {
        &self.runs[self.best].detector
    }

    pub fn detectors(&self) -> Vec<&Detector> {
        self.runs.iter().map(|r| &r.detector).collect()
    }
}

fn train_split(cases: &[DetCase], cfg: &DetectorConfig, schedule: &TrainSchedule, master_seed: u64, k: usize, split: Split) -> Result<SplitRun, DetectorError> {
    let data_seed = rng::derive_seed(master_seed, 0, "detector-slices");
    let train_set = SliceDataset::new(cases, &split.train, cfg, data_seed);
    let val_set = SliceDataset::new(cases, &split.val, cfg, data_seed);
    let mut network = cfg.build_network(rng::derive_seed(master_seed, k as u64, "detector-init"))?;
    let loss = DetectorLoss::from_config(cfg);
    let history = nnet::train(&mut network, &loss, schedule, &train_set, &val_set, rng::derive_seed(master_seed, k as u64, "detector-train"))?;
    let final_val_loss = history.final_val_loss().unwrap_or(f64::INFINITY);
    let final_train_loss = history.final_train_loss().unwrap_or(f64::INFINITY);
    Ok(SplitRun { split, detector: Detector { config: cfg.clone(), network }, history, final_train_loss, final_val_loss })
}

/// Trains one detector per random split with identical hyperparameters and
/// picks the one with the lowest final validation loss.
pub fn train_detector(cases: &[DetCase], cfg: &DetectorConfig, schedule: &TrainSchedule, n_splits: usize, master_seed: u64) -> Result<DetectorTraining, DetectorError> {
    cfg.validate()?;
    if cases.len() < 2 {
        return Err(DetectorError::TooFewCases(2));
    }
    if n_splits == 0 {
        return Err(DetectorError::InvalidConfig("at least one split is required".into()));
    }
    for c in cases {
        let [nx, ny, _] = c.volume.dims();
        if nx != cfg.input_size || ny != cfg.input_size {
            return Err(DetectorError::InputSize { expected: cfg.input_size, got: [nx, ny] });
        }
    }
    let splits = make_splits(cases.len(), n_splits, master_seed);
    let jobs: Vec<(usize, Split)> = splits.into_iter().enumerate().collect();
    #[cfg(feature = "parallel")]
    let runs: Result<Vec<SplitRun>, DetectorError> = {
        use rayon::prelude::*;
        jobs.into_par_iter().map(|(k, s)| train_split(cases, cfg, schedule, master_seed, k, s)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Result<Vec<SplitRun>, DetectorError> = jobs.into_iter().map(|(k, s)| train_split(cases, cfg, schedule, master_seed, k, s)).collect();
    let runs = runs?;
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.final_val_loss.total_cmp(&b.1.final_val_loss).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one split");
    Ok(DetectorTraining { runs, best })
}
