//! Stage two: false-positive reduction.
//!
//! Detector output on the training cases is mined into a labeled TP/FP set
//! (plus every ground-truth box as a TP), a patch classifier is trained with
//! case-level 4-fold cross-validation, and the four fold models are averaged
//! to re-score stage-one candidates.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::{Candidate, Stage};
use crate::detector::{Detector, DetectorError};
use crate::eval::iou_unchecked;
use crate::nnet::{self, Architecture, AugmentConfig, Augmentation, BinaryTarget, Dataset, LayerSpec, Network, NnetError, OptimizerConfig, Phase, Tensor, TrainHistory, TrainSchedule, WeightedBce};
use crate::rng;
use crate::volume::{build_patch, BoundingBox2D, CaseAnnotation, InputMode, NormalizedVolume, Patch, VolumeError, PATCH_SIZE};

#[derive(Debug, Error)]
pub enum FprError {
    #[error("no annotation for case {0}")]
    MissingAnnotation(String),
    #[error("no volume for case {0}")]
    MissingVolume(String),
    #[error("dataset contains a single class")]
    SingleClassDataset,
    #[error("need at least {needed} cases for {needed}-fold cross-validation, got {got}")]
    TooFewCases { needed: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    /// Detections are kept when their probability is strictly above this.
    pub probability_threshold: f64,
    /// A detection is a TP when its IoU with a same-slice GT box is strictly above this.
    pub iou_tp_threshold: f64,
    pub include_gt_as_tp: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { probability_threshold: 0.02, iou_tp_threshold: 0.3, include_gt_as_tp: true }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), FprError> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if open(self.probability_threshold) && open(self.iou_tp_threshold) {
            Ok(())
        } else {
            Err(FprError::InvalidConfig(format!("mining thresholds must lie in (0, 1): {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleSource {
    Detector(usize),
    GroundTruth,
}

impl SampleSource {
    pub fn as_string(&self) -> String {
        match self {
            Self::Detector(k) => format!("detector_{k}"),
            Self::GroundTruth => "ground_truth".to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "ground_truth" {
            return Some(Self::GroundTruth);
        }
        s.strip_prefix("detector_")?.parse().ok().map(Self::Detector)
    }
}

/// A labeled box; its patch is built on demand from the case volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FprSample {
    pub case_id: String,
    pub bbox: BoundingBox2D,
    pub is_tp: bool,
    pub source: SampleSource,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FprDataset {
    pub samples: Vec<FprSample>,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    case: String,
    z: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
    source: String,
}

impl FprDataset {
    pub fn n_tp(&self) -> usize {
        self.samples.iter().filter(|s| s.is_tp).count()
    }

    pub fn n_fp(&self) -> usize {
        self.samples.len() - self.n_tp()
    }

    pub fn case_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.case_id.as_str()).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.samples {
            let line = SampleLine {
                case: s.case_id.clone(),
                z: s.bbox.z,
                bbox: s.bbox.to_array(),
                label: if s.is_tp { "TP" } else { "FP" }.to_string(),
                source: s.source.as_string(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, FprError> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| FprError::Parse { line: i + 1, message };
            let l: SampleLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let is_tp = match l.label.as_str() {
                "TP" => true,
                "FP" => false,
                other => return Err(bad(format!("unknown label {other:?}"))),
            };
            let source = SampleSource::parse(&l.source).ok_or_else(|| bad(format!("unknown source {:?}", l.source)))?;
            let [x0, y0, x1, y1] = l.bbox;
            samples.push(FprSample { case_id: l.case, bbox: BoundingBox2D::new(l.z, x0, y0, x1, y1), is_tp, source });
        }
        Ok(Self { samples })
    }
}

/// Labels detections against ground truth with strict thresholds and appends
/// every GT box as a TP. Detections are expected in (model, case) order.
pub fn label_detections(detections: &[Candidate], annotations: &[CaseAnnotation], cfg: &MiningConfig) -> Result<FprDataset, FprError> {
    cfg.validate()?;
    let by_case: BTreeMap<&str, &CaseAnnotation> = annotations.iter().map(|a| (a.case_id.as_str(), a)).collect();
    let mut samples = Vec::new();
    for d in detections {
        let ann = by_case.get(d.case_id.as_str()).ok_or_else(|| FprError::MissingAnnotation(d.case_id.clone()))?;
        if !(d.probability > cfg.probability_threshold) {
            continue;
        }
        let is_tp = ann.boxes_on_slice(d.bbox.z).any(|g| iou_unchecked(&d.bbox, g) > cfg.iou_tp_threshold);
        samples.push(FprSample { case_id: d.case_id.clone(), bbox: d.bbox, is_tp, source: SampleSource::Detector(d.model_id.unwrap_or(0)) });
    }
    if cfg.include_gt_as_tp {
        for ann in annotations {
            for b in ann.all_boxes() {
                samples.push(FprSample { case_id: ann.case_id.clone(), bbox: *b, is_tp: true, source: SampleSource::GroundTruth });
            }
        }
    }
    Ok(FprDataset { samples })
}

/// Windowed volume plus annotation of a training case.
#[derive(Debug, Clone, Copy)]
pub struct MiningCase<'a> {
    pub volume: &'a NormalizedVolume,
    pub annotation: &'a CaseAnnotation,
}

/// Runs every detector over every case and labels the detections.
pub fn mine_candidates(detectors: &[&Detector], cases: &[MiningCase<'_>], cfg: &MiningConfig) -> Result<FprDataset, FprError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..detectors.len()).flat_map(|m| (0..cases.len()).map(move |c| (m, c))).collect();
    let run = |&(m, c): &(usize, usize)| -> Result<Vec<Candidate>, FprError> {
        let case = &cases[c];
        let mut found = detectors[m].detect(case.volume, &case.annotation.case_id, cfg.probability_threshold)?;
        for f in &mut found {
            f.model_id = Some(m);
        }
        Ok(found)
    };
    #[cfg(feature = "parallel")]
    let per_job: Vec<Result<Vec<Candidate>, FprError>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_job: Vec<Result<Vec<Candidate>, FprError>> = jobs.iter().map(run).collect();
    let mut detections = Vec::new();
    for r in per_job {
        detections.extend(r?);
    }
    let annotations: Vec<CaseAnnotation> = cases.iter().map(|c| c.annotation.clone()).collect();
    label_detections(&detections, &annotations, cfg)
}

pub fn build_fpr_input(volume: &NormalizedVolume, bbox: &BoundingBox2D, case_id: &str, mode: InputMode) -> Result<Patch, FprError> {
    Ok(build_patch(volume, bbox, case_id, mode)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FprConfig {
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 2x2 max-pools applied to the 128x128 patch before the classifier body.
    pub input_pools: usize,
    pub augment: AugmentConfig,
    /// FP samples beyond this count are dropped (seeded, uniformly) before training.
    pub max_negatives: Option<usize>,
    /// Final-probability cut used when a hard decision is needed.
    pub decision_threshold: f64,
}

impl Default for FprConfig {
    fn default() -> Self {
        Self { folds: 4, epochs: 20, batch_size: 100, learning_rate: 2e-3, input_pools: 2, augment: AugmentConfig::default(), max_negatives: Some(2000), decision_threshold: 0.5 }
    }
}

impl FprConfig {
    pub fn validate(&self) -> Result<(), FprError> {
        let ok = self.folds >= 2
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.learning_rate > 0.0
            && self.max_negatives != Some(0)
            && PATCH_SIZE >> self.input_pools >= 8
            && (0.0..=1.0).contains(&self.decision_threshold);
        if ok {
            Ok(())
        } else {
            Err(FprError::InvalidConfig(format!("{self:?}")))
        }
    }

    pub fn architecture(&self) -> Architecture {
        let mut trunk = vec![LayerSpec::MaxPool; self.input_pools];
        trunk.extend([
            LayerSpec::Conv { kernel: 3, stride: 1, out_channels: 8 },
            LayerSpec::LeakyRelu,
            LayerSpec::MaxPool,
            LayerSpec::Conv { kernel: 3, stride: 1, out_channels: 16 },
            LayerSpec::LeakyRelu,
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 32 },
            LayerSpec::LeakyRelu,
            LayerSpec::Dense { out_features: 1 },
            LayerSpec::Sigmoid,
        ]);
        Architecture { input_shape: vec![Patch::CHANNELS, PATCH_SIZE, PATCH_SIZE], trunk, heads: vec![] }
    }

    pub fn schedule(&self, n_train: usize) -> TrainSchedule {
        TrainSchedule {
            phases: vec![Phase { optimizer: OptimizerConfig::nadam(self.learning_rate), max_epochs: self.epochs }],
            early_stop_patience: None,
            plateau_patience: None,
            decay_factor: 0.1,
            batch_size: self.batch_size.min(n_train.max(1)),
            augment: self.augment,
        }
    }
}

/// Source of windowed volumes by case id.
pub trait VolumeLookup: Sync {
    fn volume(&self, case_id: &str) -> Option<&NormalizedVolume>;
}

impl VolumeLookup for BTreeMap<String, NormalizedVolume> {
    fn volume(&self, case_id: &str) -> Option<&NormalizedVolume> {
        self.get(case_id)
    }
}

/// Samples of one fold with class weights, materializing patches lazily.
pub struct PatchDataset<'a, V: VolumeLookup> {
    samples: Vec<&'a FprSample>,
    volumes: &'a V,
    mode: InputMode,
    weights: (f64, f64),
}

impl<'a, V: VolumeLookup> PatchDataset<'a, V> {
    /// `weights` are (TP weight, FP weight).
    pub fn new(samples: Vec<&'a FprSample>, volumes: &'a V, mode: InputMode, weights: (f64, f64)) -> Self {
        Self { samples, volumes, mode, weights }
    }
}

/// Inverse-frequency class weights `N / (2 N_class)`.
pub fn class_weights(samples: &[&FprSample]) -> (f64, f64) {
    let n = samples.len() as f64;
    let tp = samples.iter().filter(|s| s.is_tp).count() as f64;
    let fp = n - tp;
    let w = |k: f64| if k > 0.0 { n / (2.0 * k) } else { 0.0 };
    (w(tp), w(fp))
}

impl<V: VolumeLookup> Dataset for PatchDataset<'_, V> {
    type Target = BinaryTarget;

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![Patch::CHANNELS, PATCH_SIZE, PATCH_SIZE]
    }

    fn sample(&self, index: usize, aug: Option<&Augmentation>, input: &mut [f32]) -> BinaryTarget {
        let s = self.samples[index];
        let vol = self.volumes.volume(&s.case_id).expect("volumes checked before training");
        let patch = build_patch(vol, &s.bbox, &s.case_id, self.mode).expect("sample boxes lie inside their volume");
        match aug {
            Some(a) if !a.is_identity() => input.copy_from_slice(&a.apply_image(patch.pixels(), PATCH_SIZE, PATCH_SIZE)),
            _ => input.copy_from_slice(patch.pixels()),
        }
        BinaryTarget { label: if s.is_tp { 1.0 } else { 0.0 }, weight: if s.is_tp { self.weights.0 } else { self.weights.1 } }
    }
}

/// Case-level fold assignment: sorted case ids are shuffled and dealt round-robin.
pub fn assign_folds(case_ids: &BTreeSet<&str>, folds: usize, seed: u64) -> BTreeMap<String, usize> {
    let mut ids: Vec<&str> = case_ids.iter().copied().collect();
    ids.shuffle(&mut rng::stream(seed, 0, "fpr-folds"));
    ids.into_iter().enumerate().map(|(i, id)| (id.to_string(), i % folds)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FprEnsemble {
    pub members: Vec<Network<f32>>,
    pub mode: InputMode,
    pub decision_threshold: f64,
}

impl FprEnsemble {
    /// Mean member probability for each patch.
    pub fn predict_batch(&self, patches: &[Patch]) -> Result<Vec<f64>, FprError> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(patches.len() * patches[0].pixels().len());
        for p in patches {
            data.extend_from_slice(p.pixels());
        }
        let x = Tensor::new(vec![patches.len(), Patch::CHANNELS, PATCH_SIZE, PATCH_SIZE], data)?;
        let mut sums = vec![0.0f64; patches.len()];
        for m in &self.members {
            let out = m.forward(&x)?;
            for (s, v) in sums.iter_mut().zip(out[0].data()) {
                *s += *v as f64;
            }
        }
        Ok(sums.into_iter().map(|s| s / self.members.len() as f64).collect())
    }
}

pub fn ensemble_predict(ensemble: &FprEnsemble, patch: &Patch) -> Result<f64, FprError> {
    Ok(ensemble.predict_batch(std::slice::from_ref(patch))?[0])
}

#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub held_out_cases: Vec<String>,
    pub n_train: usize,
    pub n_held_out: usize,
    pub held_out_accuracy: f64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct FprTraining {
    pub ensemble: FprEnsemble,
    pub folds: Vec<FoldReport>,
}

fn accuracy<V: VolumeLookup>(net: &Network<f32>, data: &PatchDataset<'_, V>, threshold: f64) -> Result<f64, FprError> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let item = Patch::CHANNELS * PATCH_SIZE * PATCH_SIZE;
        let mut buf = vec![0.0f32; chunk.len() * item];
        let mut labels = Vec::with_capacity(chunk.len());
        for (k, &i) in chunk.iter().enumerate() {
            labels.push(data.sample(i, None, &mut buf[k * item..(k + 1) * item]).label > 0.5);
        }
        let out = net.forward(&Tensor::new(vec![chunk.len(), Patch::CHANNELS, PATCH_SIZE, PATCH_SIZE], buf)?)?;
        correct += out[0].data().iter().zip(&labels).filter(|(p, &l)| (**p as f64 > threshold) == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Keeps every TP and at most `max_negatives` FPs, in dataset order.
pub fn subsample_negatives(dataset: &FprDataset, max_negatives: Option<usize>, seed: u64) -> FprDataset {
    let fp: Vec<usize> = (0..dataset.samples.len()).filter(|&i| !dataset.samples[i].is_tp).collect();
    let limit = match max_negatives {
        Some(m) if m < fp.len() => m,
        _ => return dataset.clone(),
    };
    let mut keep = vec![true; dataset.samples.len()];
    for &i in &fp {
        keep[i] = false;
    }
    for k in rand::seq::index::sample(&mut rng::stream(seed, 0, "fpr-negatives"), fp.len(), limit) {
        keep[fp[k]] = true;
    }
    FprDataset { samples: dataset.samples.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.clone()).collect() }
}

/// Case-level k-fold training; fold models form the ensemble.
pub fn train_fpr_cv<V: VolumeLookup>(dataset: &FprDataset, volumes: &V, mode: InputMode, cfg: &FprConfig, seed: u64) -> Result<FprTraining, FprError> {
    cfg.validate()?;
    let subset = subsample_negatives(dataset, cfg.max_negatives, seed);
    let dataset = &subset;
    if dataset.n_tp() == 0 || dataset.n_fp() == 0 {
        return Err(FprError::SingleClassDataset);
    }
    let case_ids = dataset.case_ids();
    if case_ids.len() < cfg.folds {
        return Err(FprError::TooFewCases { needed: cfg.folds, got: case_ids.len() });
    }
    if let Some(missing) = case_ids.iter().find(|id| volumes.volume(id).is_none()) {
        return Err(FprError::MissingVolume(missing.to_string()));
    }
    let fold_of = assign_folds(&case_ids, cfg.folds, seed);
    let arch = cfg.architecture();
    let run_fold = |k: usize| -> Result<(Network<f32>, FoldReport), FprError> {
        let train: Vec<&FprSample> = dataset.samples.iter().filter(|s| fold_of[&s.case_id] != k).collect();
        let held: Vec<&FprSample> = dataset.samples.iter().filter(|s| fold_of[&s.case_id] == k).collect();
        let weights = class_weights(&train);
        let n_train = train.len();
        let n_held_out = held.len();
        let train_set = PatchDataset::new(train, volumes, mode, weights);
        let held_set = PatchDataset::new(held, volumes, mode, weights);
        let empty = PatchDataset::new(Vec::new(), volumes, mode, weights);
        let mut net = Network::<f32>::from_architecture(&arch, rng::derive_seed(seed, k as u64, "fpr-init"))?;
        let history = nnet::train(&mut net, &WeightedBce, &cfg.schedule(n_train), &train_set, &empty, rng::derive_seed(seed, k as u64, "fpr-train"))?;
        let held_out_accuracy = accuracy(&net, &held_set, cfg.decision_threshold)?;
        let held_out_cases = fold_of.iter().filter(|(_, &f)| f == k).map(|(id, _)| id.clone()).collect();
        Ok((net, FoldReport { fold: k, held_out_cases, n_train, n_held_out, held_out_accuracy, history }))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(Network<f32>, FoldReport), FprError>> = {
        use rayon::prelude::*;
        (0..cfg.folds).into_par_iter().map(run_fold).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(Network<f32>, FoldReport), FprError>> = (0..cfg.folds).map(run_fold).collect();
    let mut members = Vec::with_capacity(cfg.folds);
    let mut folds = Vec::with_capacity(cfg.folds);
    for r in results {
        let (net, report) = r?;
        members.push(net);
        folds.push(report);
    }
    Ok(FprTraining { ensemble: FprEnsemble { members, mode, decision_threshold: cfg.decision_threshold }, folds })
}

/// Stage-one candidates above `stage1_threshold`, re-scored by the ensemble.
pub fn infer_two_stage(detector: &Detector, ensemble: &FprEnsemble, volume: &NormalizedVolume, case_id: &str, stage1_threshold: f64) -> Result<Vec<Candidate>, FprError> {
    let stage1 = detector.detect(volume, case_id, stage1_threshold)?;
    rescore(stage1, ensemble, volume)
}

/// Replaces each candidate's probability with the ensemble score.
pub fn rescore(candidates: Vec<Candidate>, ensemble: &FprEnsemble, volume: &NormalizedVolume) -> Result<Vec<Candidate>, FprError> {
    let mut out = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(64) {
        let patches = chunk.iter().map(|c| build_fpr_input(volume, &c.bbox, &c.case_id, ensemble.mode)).collect::<Result<Vec<_>, _>>()?;
        let scores = ensemble.predict_batch(&patches)?;
        for (c, p) in chunk.iter().zip(scores) {
            out.push(Candidate { probability: p, stage: Stage::TwoStage, ..c.clone() });
        }
    }
    Ok(out)
}
