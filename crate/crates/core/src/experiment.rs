//! Desk-scale end-to-end protocol on phantoms: split-trained detectors,
//! candidate mining, fold-trained FPR ensembles for both input modes, and an
//! F1 threshold sweep for each of the three system variants.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::Candidate;
use crate::detector::{train_detector, DetCase, Detector, DetectorConfig, DetectorError, DetectorTraining, N_SPLITS};
use crate::eval::{sweep_threshold, EvalCase, EvalError, SweepResult};
use crate::fpr::{mine_candidates, rescore, train_fpr_cv, FprConfig, FprDataset, FprEnsemble, FprError, MiningCase, MiningConfig};
use crate::nnet::{AugmentConfig, OptimizerConfig, Phase, TrainSchedule};
use crate::phantom::{generate_case, PhantomConfig, PhantomError};
use crate::volume::{apply_window, CaseAnnotation, HuVolume, InputMode, NormalizedVolume};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Fpr(#[from] FprError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Seeds shipped with the experiment; the first is the default.
pub const SHIPPED_SEEDS: [u64; 3] = [20240611, 7, 1234];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub phantom: PhantomConfig,
    pub detector: DetectorConfig,
    pub detector_schedule: TrainSchedule,
    pub n_splits: usize,
    pub mining: MiningConfig,
    pub fpr: FprConfig,
    pub stage1_threshold: f64,
}

/// Three detector steps with epochs and patience cut to desk scale.
pub fn scaled_detector_schedule() -> TrainSchedule {
    TrainSchedule {
        phases: vec![
            Phase { optimizer: OptimizerConfig::nadam(1e-3), max_epochs: 16 },
            Phase { optimizer: OptimizerConfig::rmsprop(1e-4), max_epochs: 8 },
            Phase { optimizer: OptimizerConfig::rmsprop(1e-5), max_epochs: 12 },
        ],
        early_stop_patience: Some(4),
        plateau_patience: Some(2),
        decay_factor: 0.1,
        batch_size: 8,
        augment: AugmentConfig::default(),
    }
}

/// Shorter classifier training over a capped negative pool.
pub fn scaled_fpr_config() -> FprConfig {
    FprConfig { epochs: 12, max_negatives: Some(1200), ..FprConfig::default() }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::with_seed(SHIPPED_SEEDS[0])
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            n_train: 60,
            n_test: 15,
            phantom: PhantomConfig { seed, ..PhantomConfig::default() },
            detector: DetectorConfig::default(),
            detector_schedule: scaled_detector_schedule(),
            n_splits: N_SPLITS,
            mining: MiningConfig::default(),
            fpr: scaled_fpr_config(),
            stage1_threshold: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.n_train < 2 || self.n_test == 0 {
            return bad(format!("need at least 2 training and 1 test case, got {} and {}", self.n_train, self.n_test));
        }
        if self.n_splits == 0 {
            return bad("n_splits must be positive".into());
        }
        if !(0.0..1.0).contains(&self.stage1_threshold) {
            return bad(format!("stage1_threshold {} outside [0, 1)", self.stage1_threshold));
        }
        let [nx, ny, _] = self.phantom.dims;
        if nx != self.detector.input_size || ny != self.detector.input_size {
            return bad(format!("phantom slices are {nx}x{ny} but the detector expects {0}x{0}", self.detector.input_size));
        }
        self.phantom.validate()?;
        self.detector.validate()?;
        self.detector_schedule.validate().map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        self.mining.validate()?;
        self.fpr.validate()?;
        Ok(())
    }
}

/// Windowed volumes and annotations of one generated split.
#[derive(Debug, Clone)]
pub struct CaseSet {
    pub volumes: BTreeMap<String, NormalizedVolume>,
    pub annotations: Vec<CaseAnnotation>,
    pub raw: Vec<HuVolume>,
}

impl CaseSet {
    pub fn generate(cfg: &ExperimentConfig, first_index: usize, n: usize) -> Result<Self, ExperimentError> {
        let mut set = Self { volumes: BTreeMap::new(), annotations: Vec::new(), raw: Vec::new() };
        for i in first_index..first_index + n {
            let case = generate_case(&cfg.phantom, i)?;
            let annotation = case.annotation();
            set.push(case.volume, annotation, cfg);
        }
        Ok(set)
    }

    pub fn from_cases(cases: Vec<(HuVolume, CaseAnnotation)>, cfg: &ExperimentConfig) -> Self {
        let mut set = Self { volumes: BTreeMap::new(), annotations: Vec::new(), raw: Vec::new() };
        for (v, a) in cases {
            set.push(v, a, cfg);
        }
        set
    }

    fn push(&mut self, volume: HuVolume, annotation: CaseAnnotation, cfg: &ExperimentConfig) {
        self.volumes.insert(annotation.case_id.clone(), apply_window(&volume, cfg.detector.window));
        self.annotations.push(annotation);
        self.raw.push(volume);
    }

    pub fn det_cases(&self, cfg: &ExperimentConfig) -> Vec<DetCase> {
        self.raw.iter().zip(&self.annotations).map(|(v, a)| DetCase::new(v, a.clone(), cfg.detector.window)).collect()
    }

    pub fn mining_cases(&self) -> Vec<MiningCase<'_>> {
        self.annotations.iter().map(|a| MiningCase { volume: &self.volumes[&a.case_id], annotation: a }).collect()
    }
}

/// The three evaluated systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    OneStage,
    TwoStage1slice,
    TwoStage3slice,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::OneStage, Variant::TwoStage1slice, Variant::TwoStage3slice];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::OneStage => "one-stage",
            Variant::TwoStage1slice => "two-stage-1slice",
            Variant::TwoStage3slice => "two-stage-3slice",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn input_mode(&self) -> Option<InputMode> {
        match self {
            Variant::OneStage => None,
            Variant::TwoStage1slice => Some(InputMode::OneSlice),
            Variant::TwoStage3slice => Some(InputMode::ThreeSlice),
        }
    }
}

/// Test-set candidates of one variant.
pub fn infer_variant(detector: &Detector, ensemble: Option<&FprEnsemble>, test: &CaseSet, stage1_threshold: f64) -> Result<Vec<Candidate>, ExperimentError> {
    let mut out = Vec::new();
    for a in &test.annotations {
        let vol = &test.volumes[&a.case_id];
        let stage1 = detector.detect(vol, &a.case_id, stage1_threshold)?;
        match ensemble {
            None => out.extend(stage1),
            Some(e) => out.extend(rescore(stage1, e, vol)?),
        }
    }
    Ok(out)
}

pub fn eval_cases(candidates: &[Candidate], test: &CaseSet) -> Vec<EvalCase> {
    test.annotations
        .iter()
        .map(|a| EvalCase { case_id: a.case_id.clone(), candidates: candidates.iter().filter(|c| c.case_id == a.case_id).cloned().collect(), lesions: a.lesions.clone() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub n_candidates: usize,
    pub sweep: SweepResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Orderings {
    pub fpc_3slice_below_one_stage: bool,
    pub f1_3slice_above_one_stage: bool,
    pub f1_3slice_at_least_1slice: bool,
}

impl Orderings {
    pub fn all(&self) -> bool {
        self.fpc_3slice_below_one_stage && self.f1_3slice_above_one_stage && self.f1_3slice_at_least_1slice
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FprSummary {
    pub mode: InputMode,
    pub fold_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub best_split: usize,
    pub split_val_losses: Vec<f64>,
    pub mined_tp: usize,
    pub mined_fp: usize,
    pub fpr: Vec<FprSummary>,
    pub variants: Vec<VariantResult>,
    pub orderings: Orderings,
}

impl ExperimentReport {
    pub fn variant(&self, v: Variant) -> &VariantResult {
        self.variants.iter().find(|r| r.variant == v).expect("all variants are evaluated")
    }
}

/// Everything the protocol produces.
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub detectors: DetectorTraining,
    pub mined: FprDataset,
    pub ensembles: Vec<FprEnsemble>,
    pub candidates: BTreeMap<Variant, Vec<Candidate>>,
    pub timings: Vec<(String, f64)>,
}

pub fn compare(variants: &[VariantResult]) -> Orderings {
    let get = |v: Variant| &variants.iter().find(|r| r.variant == v).expect("all variants are evaluated").sweep;
    let (one, s1, s3) = (get(Variant::OneStage), get(Variant::TwoStage1slice), get(Variant::TwoStage3slice));
    Orderings {
        fpc_3slice_below_one_stage: s3.metrics.fpc < one.metrics.fpc,
        f1_3slice_above_one_stage: s3.metrics.f1 > one.metrics.f1,
        f1_3slice_at_least_1slice: s3.metrics.f1 >= s1.metrics.f1,
    }
}

/// Runs the full protocol; `progress` receives one line per stage.
pub fn run_experiment(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<ExperimentRun, ExperimentError> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>, progress: &mut dyn FnMut(&str)| {
        let s = clock.elapsed().as_secs_f64();
        clock = Instant::now();
        progress(&format!("{name}: {s:.1}s"));
        timings.push((name.to_string(), s));
    };

    let train = CaseSet::generate(cfg, 0, cfg.n_train)?;
    let test = CaseSet::generate(cfg, cfg.n_train, cfg.n_test)?;
    lap("phantoms", &mut timings, &mut progress);

    let detectors = train_detector(&train.det_cases(cfg), &cfg.detector, &cfg.detector_schedule, cfg.n_splits, cfg.seed)?;
    lap("detector", &mut timings, &mut progress);

    let mined = mine_candidates(&detectors.detectors(), &train.mining_cases(), &cfg.mining)?;
    lap(&format!("mining ({} TP, {} FP)", mined.n_tp(), mined.n_fp()), &mut timings, &mut progress);

    let mut ensembles = Vec::new();
    let mut fpr = Vec::new();
    for mode in [InputMode::OneSlice, InputMode::ThreeSlice] {
        let t = train_fpr_cv(&mined, &train.volumes, mode, &cfg.fpr, cfg.seed)?;
        fpr.push(FprSummary { mode, fold_accuracy: t.folds.iter().map(|f| f.held_out_accuracy).collect() });
        ensembles.push(t.ensemble);
        lap(&format!("fpr {}", mode.as_str()), &mut timings, &mut progress);
    }

    let best = detectors.best_detector();
    let mut variants = Vec::new();
    let mut candidates = BTreeMap::new();
    for v in Variant::ALL {
        let ens = v.input_mode().map(|m| ensembles.iter().find(|e| e.mode == m).expect("both modes trained"));
        let cands = infer_variant(best, ens, &test, cfg.stage1_threshold)?;
        let sweep = sweep_threshold(&eval_cases(&cands, &test))?;
        variants.push(VariantResult { variant: v, n_candidates: cands.len(), sweep });
        candidates.insert(v, cands);
    }
    lap("inference and sweep", &mut timings, &mut progress);

    let report = ExperimentReport {
        seed: cfg.seed,
        best_split: detectors.best,
        split_val_losses: detectors.runs.iter().map(|r| r.final_val_loss).collect(),
        mined_tp: mined.n_tp(),
        mined_fp: mined.n_fp(),
        fpr,
        orderings: compare(&variants),
        variants,
    };
    Ok(ExperimentRun { report, detectors, mined, ensembles, candidates, timings })
}
