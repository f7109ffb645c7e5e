use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use aisdet::candidate::{self, Candidate};
use aisdet::detector::{train_detector, Detector, DetectorConfig, Split};
use aisdet::eval::{check_published, published_counts, sweep_threshold, table1_report, Table1Report};
use aisdet::experiment::{eval_cases, infer_variant, run_experiment, CaseSet, ExperimentConfig, Variant};
use aisdet::fpr::{mine_candidates, train_fpr_cv, FprDataset, FprEnsemble};
use aisdet::nnet::{load_checkpoint, save_checkpoint};
use aisdet::phantom::{generate_dataset, Manifest, MANIFEST_FILE};
use aisdet::readerstudy::{Session, SystemClock};
use aisdet::volume::InputMode;
use serde::{Deserialize, Serialize};

use crate::server::{router, AppState};
use crate::{require, write_json, CliError, Result, RunDir};

pub const DETECTORS_FILE: &str = "detectors.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const MINED_FILE: &str = "fpr_dataset.jsonl";

pub fn load_cases(data: &Path, cfg: &ExperimentConfig) -> Result<CaseSet> {
    let manifest = Manifest::load(require(&data.join(MANIFEST_FILE))?)?;
    Ok(CaseSet::from_cases(manifest.load_cases(data)?, cfg))
}

fn read_candidates(path: &Path) -> Result<Vec<Candidate>> {
    Ok(candidate::read_jsonl(BufReader::new(File::open(require(path)?)?))?)
}

fn candidates_bytes(c: &[Candidate]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    candidate::write_jsonl(&mut buf, c)?;
    Ok(buf)
}

pub fn phantom(cfg: &ExperimentConfig, cases: usize, first_index: usize, out: &Path) -> Result<()> {
    if cases == 0 {
        return Err(CliError::Config("--cases must be at least 1".into()));
    }
    let mut run = RunDir::create(out, "phantom", cfg)?;
    let (manifest, _) = generate_dataset(&cfg.phantom, first_index, cases, out)?;
    run.track(MANIFEST_FILE);
    for e in &manifest.cases {
        for rel in [&e.volume, &e.annotation] {
            run.track(rel);
            if rel.ends_with(".vol.json") {
                run.track(&rel.replace(".vol.json", ".vol.raw"));
            }
        }
    }
    run.finish()?;
    eprintln!("wrote {cases} cases to {}", out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct DetectorRunRecord {
    pub split: Split,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub checkpoint: String,
}

#[derive(Serialize, Deserialize)]
pub struct DetectorsIndex {
    pub best: usize,
    pub runs: Vec<DetectorRunRecord>,
}

pub fn train_detector_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let cases = load_cases(data, cfg)?;
    let training = train_detector(&cases.det_cases(cfg), &cfg.detector, &cfg.detector_schedule, cfg.n_splits, cfg.seed)?;
    let mut run = RunDir::create(out, "train-detector", cfg)?;
    let fingerprint = cfg.detector_schedule.fingerprint();
    let mut runs = Vec::new();
    for (k, r) in training.runs.iter().enumerate() {
        let name = format!("split_{k:02}.json");
        save_checkpoint(&r.detector.network, &fingerprint, serde_json::to_value(&r.detector.config)?, &run.path(&name))?;
        run.track(&name);
        run.track(&name.replace(".json", ".bin"));
        runs.push(DetectorRunRecord { split: r.split.clone(), final_train_loss: r.final_train_loss, final_val_loss: r.final_val_loss, checkpoint: name });
        eprintln!("split {k}: final val loss {:.4}", r.final_val_loss);
    }
    run.json(DETECTORS_FILE, &DetectorsIndex { best: training.best, runs })?;
    run.finish()?;
    eprintln!("best split {}", training.best);
    Ok(())
}

pub fn load_detectors(dir: &Path) -> Result<(Vec<Detector>, usize)> {
    let index: DetectorsIndex = serde_json::from_reader(BufReader::new(File::open(require(&dir.join(DETECTORS_FILE))?)?))?;
    let mut out = Vec::new();
    for r in &index.runs {
        let (network, header) = load_checkpoint(require(&dir.join(&r.checkpoint))?)?;
        let config: DetectorConfig = serde_json::from_value(header.meta)?;
        out.push(Detector { config, network });
    }
    if index.best >= out.len() {
        return Err(CliError::Failed(format!("best split {} out of range", index.best)));
    }
    Ok((out, index.best))
}

pub fn mine(cfg: &ExperimentConfig, data: &Path, detectors: &Path, out: &Path) -> Result<()> {
    let cases = load_cases(data, cfg)?;
    let (dets, _) = load_detectors(detectors)?;
    let refs: Vec<&Detector> = dets.iter().collect();
    let mined = mine_candidates(&refs, &cases.mining_cases(), &cfg.mining)?;
    let mut run = RunDir::create(out, "mine", cfg)?;
    let mut buf = Vec::new();
    mined.write_jsonl(&mut buf)?;
    run.bytes(MINED_FILE, &buf)?;
    run.finish()?;
    eprintln!("mined {} TP, {} FP", mined.n_tp(), mined.n_fp());
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub held_out_cases: Vec<String>,
    pub held_out_accuracy: f64,
    pub checkpoint: String,
}

#[derive(Serialize, Deserialize)]
pub struct EnsembleIndex {
    pub mode: InputMode,
    pub decision_threshold: f64,
    pub folds: Vec<FoldRecord>,
}

pub fn parse_mode(s: &str) -> Result<InputMode> {
    match s {
        "one-slice" | "one_slice" => Ok(InputMode::OneSlice),
        "three-slice" | "three_slice" => Ok(InputMode::ThreeSlice),
        other => Err(CliError::Config(format!("unknown input mode {other:?}"))),
    }
}

pub fn train_fpr(cfg: &ExperimentConfig, data: &Path, dataset: &Path, mode: InputMode, out: &Path) -> Result<()> {
    let cases = load_cases(data, cfg)?;
    let mined = FprDataset::read_jsonl(BufReader::new(File::open(require(dataset)?)?))?;
    let t = train_fpr_cv(&mined, &cases.volumes, mode, &cfg.fpr, cfg.seed)?;
    let mut run = RunDir::create(out, "train-fpr", cfg)?;
    let fingerprint = cfg.fpr.schedule(mined.samples.len()).fingerprint();
    let mut folds = Vec::new();
    for (f, net) in t.folds.iter().zip(&t.ensemble.members) {
        let name = format!("fold_{}.json", f.fold);
        save_checkpoint(net, &fingerprint, serde_json::to_value(&cfg.fpr)?, &run.path(&name))?;
        run.track(&name);
        run.track(&name.replace(".json", ".bin"));
        eprintln!("fold {}: held-out accuracy {:.3}", f.fold, f.held_out_accuracy);
        folds.push(FoldRecord { fold: f.fold, held_out_cases: f.held_out_cases.clone(), held_out_accuracy: f.held_out_accuracy, checkpoint: name });
    }
    run.json(ENSEMBLE_FILE, &EnsembleIndex { mode, decision_threshold: t.ensemble.decision_threshold, folds })?;
    run.finish()?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<FprEnsemble> {
    let index: EnsembleIndex = serde_json::from_reader(BufReader::new(File::open(require(&dir.join(ENSEMBLE_FILE))?)?))?;
    let mut members = Vec::new();
    for f in &index.folds {
        members.push(load_checkpoint(require(&dir.join(&f.checkpoint))?)?.0);
    }
    Ok(FprEnsemble { members, mode: index.mode, decision_threshold: index.decision_threshold })
}

pub fn infer(cfg: &ExperimentConfig, data: &Path, detectors: &Path, fpr: Option<&Path>, variant: Variant, out: &Path) -> Result<()> {
    let cases = load_cases(data, cfg)?;
    let (dets, best) = load_detectors(detectors)?;
    let ensemble = match (variant.input_mode(), fpr) {
        (None, _) => None,
        (Some(_), None) => return Err(CliError::Config(format!("--fpr is required for {}", variant.as_str()))),
        (Some(mode), Some(dir)) => {
            let e = load_ensemble(dir)?;
            if e.mode != mode {
                return Err(CliError::Config(format!("ensemble in {} was trained on {} inputs", dir.display(), e.mode.as_str())));
            }
            Some(e)
        }
    };
    let cands = infer_variant(&dets[best], ensemble.as_ref(), &cases, cfg.stage1_threshold)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, candidates_bytes(&cands)?)?;
    eprintln!("{} candidates", cands.len());
    Ok(())
}

fn write_table(run: &mut RunDir, rows: &[(String, aisdet::eval::MatchCounts)]) -> Result<Table1Report> {
    let (report, csv) = table1_report(rows)?;
    run.json("table1.json", &report)?;
    run.bytes("table1.csv", csv.as_bytes())?;
    print!("{csv}");
    Ok(report)
}

pub fn eval(cfg: &ExperimentConfig, data: &Path, candidates: &Path, threshold: f64, name: &str, out: &Path) -> Result<()> {
    let cases = load_cases(data, cfg)?;
    let cands = read_candidates(candidates)?;
    let counts = aisdet::eval::evaluate_at(&eval_cases(&cands, &cases), threshold);
    let mut run = RunDir::create(out, "eval", cfg)?;
    write_table(&mut run, &[(name.to_string(), counts)])?;
    run.finish()?;
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, data: &Path, candidates: &Path, name: &str, out: &Path) -> Result<()> {
    let cases = load_cases(data, cfg)?;
    let cands = read_candidates(candidates)?;
    let result = sweep_threshold(&eval_cases(&cands, &cases))?;
    let mut run = RunDir::create(out, "sweep", cfg)?;
    run.json("sweep.json", &result)?;
    write_table(&mut run, &[(name.to_string(), result.counts)])?;
    run.finish()?;
    eprintln!("F1-optimal threshold {}", result.threshold);
    Ok(())
}

/// Prints the published summary recomputed from counts; fails on any mismatch.
pub fn report_paper(out: Option<&Path>) -> Result<()> {
    let check = check_published()?;
    let (report, csv) = table1_report(&published_counts())?;
    print!("{csv}");
    println!("mcnemar_p,{}", check.cells.last().map(|c| c.computed.as_str()).unwrap_or(""));
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("table1.json"), &report)?;
        fs::write(dir.join("table1.csv"), &csv)?;
        write_json(&dir.join("check.json"), &check)?;
    }
    let bad = check.mismatches();
    if bad.is_empty() {
        eprintln!("all {} published values reproduced", check.cells.len());
        Ok(())
    } else {
        let lines: Vec<String> = bad.iter().map(|c| format!("{} {}: computed {} published {}", c.row, c.column, c.computed, c.published)).collect();
        Err(CliError::Failed(lines.join("\n")))
    }
}

pub fn experiment(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let mut run = RunDir::create(out, "experiment", cfg)?;
    let result = run_experiment(cfg, |line| eprintln!("{line}"))?;
    for (v, cands) in &result.candidates {
        run.bytes(&format!("candidates/{}.jsonl", v.as_str()), &candidates_bytes(cands)?)?;
    }
    let mut buf = Vec::new();
    result.mined.write_jsonl(&mut buf)?;
    run.bytes(MINED_FILE, &buf)?;
    run.json("report.json", &result.report)?;
    let rows: Vec<(String, aisdet::eval::MatchCounts)> = result.report.variants.iter().map(|v| (v.variant.as_str().to_string(), v.sweep.counts)).collect();
    write_table(&mut run, &rows)?;
    run.finish()?;
    let o = &result.report.orderings;
    eprintln!(
        "orderings: fpc(3slice) < fpc(one-stage): {}, f1(3slice) > f1(one-stage): {}, f1(3slice) >= f1(1slice): {}",
        o.fpc_3slice_below_one_stage, o.f1_3slice_above_one_stage, o.f1_3slice_at_least_1slice
    );
    Ok(o.all())
}

/// Re-evaluates stored candidate files of an experiment directory.
pub struct ServeOptions {
    pub data: PathBuf,
    pub candidates: PathBuf,
    pub session: PathBuf,
    pub port: u16,
    pub reader_id: String,
}

pub fn reader_serve(cfg: &ExperimentConfig, opts: &ServeOptions) -> Result<()> {
    let cases = load_cases(&opts.data, cfg)?;
    let session = if opts.session.exists() {
        eprintln!("resuming {}", opts.session.display());
        Session::resume(&opts.session, Box::new(SystemClock))?
    } else {
        let software = read_candidates(&opts.candidates)?;
        let ids = cases.annotations.iter().map(|a| a.case_id.clone()).collect();
        let session_id = opts.session.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "session".into());
        let mut s = Session::create(&session_id, &opts.reader_id, ids, software, Box::new(SystemClock))?;
        s.persist_to(&opts.session)?;
        s
    };
    let state = Arc::new(AppState { session: Mutex::new(session), volumes: cases.volumes.clone(), ground_truth: cases.annotations.clone() });
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(("127.0.0.1", opts.port)).await {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => return Err(CliError::PortInUse(opts.port)),
            Err(e) => return Err(e.into()),
        };
        eprintln!("serving on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        eprintln!("event log flushed to {}", opts.session.display());
        Ok(())
    })
}
