//! Subcommand implementations. Each writes its outputs under `out` and
//! embeds the config digest and seed in every JSON file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use cxr_core::dataset::{load_manifest, stratified_kfold, Manifest, Source, Split};
use cxr_core::imageio::{decode_image, jpeg_normalize, resize_bilinear};
use cxr_core::metrics::{cross_validate, CvReport, EvalReport, FoldOutcome, ScoredSample};
use cxr_core::optim::{DirStore, EpochRecord, MemoryStore};
use cxr_core::snapshot::{load_checkpoint, Checkpoint};
use cxr_core::{canonical_json, hex_digest, write_atomic, Error};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{FamilyKind, RunConfig};
use crate::pipeline::{derive_seed, resolve, Context, Fit};
use crate::CliError;

fn base_dir(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e }.into())
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    Ok(write_atomic(path, canonical_json(value).as_bytes())?)
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') { c } else { '_' }).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepFailure {
    pub id: String,
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub processed: usize,
    pub skipped: usize,
    pub failed: Vec<PrepFailure>,
}

enum PrepOutcome {
    Done(String),
    Skipped(String),
    Passthrough,
    Failed(PrepFailure),
}

/// Decode, optionally JPEG-normalize, resize and cache every image record
/// as PNG; write `manifest.json` pointing at the cache. Entries whose cache
/// file already exists are skipped.
pub fn prep(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<PrepSummary, CliError> {
    let mut m = load_manifest(manifest)?;
    let base = base_dir(manifest);
    let cache = out.join("cache");
    mkdir(&cache)?;
    let p = &cfg.preprocess;
    let outcomes = cxr_core::exec::map(&m.records, |r| {
        let Source::Path(src) = &r.source else {
            return PrepOutcome::Passthrough;
        };
        let path = resolve(&base, src);
        let fail = |error: String| {
            PrepOutcome::Failed(PrepFailure { id: r.id.clone(), path: path.display().to_string(), error })
        };
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => return fail(e.to_string()),
        };
        let normalize = p.normalize_splits.contains(&r.split);
        let mut keyed = bytes.clone();
        keyed.extend(format!("|size={}|quality={}|normalize={normalize}", p.size, p.jpeg_quality).bytes());
        let name = format!("{}-{}.png", safe_name(&r.id), hex_digest(&keyed, 16));
        let rel = format!("cache/{name}");
        if cache.join(&name).is_file() {
            return PrepOutcome::Skipped(rel);
        }
        let run = || -> cxr_core::Result<()> {
            let bytes = if normalize { jpeg_normalize(&bytes, p.jpeg_quality)? } else { bytes };
            let img = decode_image(&bytes)?;
            let img = resize_bilinear(&img, p.size, p.size)?;
            write_atomic(&cache.join(&name), &img.to_png()?)
        };
        match run() {
            Ok(()) => PrepOutcome::Done(rel),
            Err(e) => fail(e.to_string()),
        }
    });
    let mut summary = PrepSummary { processed: 0, skipped: 0, failed: Vec::new() };
    for (r, o) in m.records.iter_mut().zip(outcomes) {
        match o {
            PrepOutcome::Done(rel) => {
                summary.processed += 1;
                r.source = Source::Path(rel);
            }
            PrepOutcome::Skipped(rel) => {
                summary.skipped += 1;
                r.source = Source::Path(rel);
            }
            PrepOutcome::Passthrough => {}
            PrepOutcome::Failed(f) => summary.failed.push(f),
        }
    }
    let mut report = serde_json::to_value(&summary).expect("summary serializes");
    report["config_digest"] = json!(cfg.digest());
    report["seed"] = json!(cfg.seed);
    write_json(&out.join("prep.json"), &report)?;
    eprintln!("prep: {} processed, {} skipped, {} failed", summary.processed, summary.skipped, summary.failed.len());
    if !summary.failed.is_empty() {
        let names: Vec<String> = summary.failed.iter().map(|f| format!("{} ({})", f.path, f.error)).collect();
        return Err(CliError::Incomplete(format!("could not preprocess: {}", names.join("; "))));
    }
    m.save(&out.join("manifest.json"))?;
    Ok(summary)
}

fn relative_to(path: &str, base: &Path) -> String {
    Path::new(path).strip_prefix(base).map(|p| p.to_string_lossy().into_owned()).unwrap_or_else(|_| path.to_owned())
}

fn header(cfg: &RunConfig) -> serde_json::Map<String, Value> {
    let mut h = serde_json::Map::new();
    h.insert("config_digest".into(), json!(cfg.digest()));
    h.insert("seed".into(), json!(cfg.seed));
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub family: usize,
    pub epoch: usize,
    /// Relative to the ensemble file.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub config_digest: String,
    pub seed: u64,
    pub threshold: f64,
    pub members: Vec<EnsembleMember>,
}

/// Train every family on the manifest's train records (unassigned records
/// count as train) and write histories, checkpoints, the selected snapshot
/// epochs and `ensemble.json`.
pub fn train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<EnsembleFile, CliError> {
    let m = load_manifest(manifest)?;
    let train_m = Manifest {
        seed: m.seed,
        records: m.records.iter().filter(|r| matches!(r.split, Split::Train | Split::Unassigned)).cloned().collect(),
    };
    if train_m.is_empty() {
        return Err(CliError::Input(format!("{}: no train records", manifest.display())));
    }
    let ctx = Context::load(cfg, &train_m, &base_dir(manifest))?;
    mkdir(out)?;
    let mut members = Vec::new();
    let mut snapshots = Vec::new();
    for i in 0..cfg.families.len() {
        let name = cfg.family_name(i);
        let dir = out.join(&name);
        let mut store = DirStore::new(dir.join("checkpoints"), None)?;
        let seed = derive_seed(cfg.seed, i as u64);
        let fit = ctx.fit(i, &train_m, seed, &mut store)?;
        let history: Vec<EpochRecord> = fit
            .history
            .iter()
            .map(|r| EpochRecord { checkpoint: relative_to(&r.checkpoint, out), ..r.clone() })
            .collect();
        let mut h = header(cfg);
        h.insert("family".into(), json!(name));
        h.insert("history".into(), serde_json::to_value(&history).expect("history serializes"));
        h.insert("val_ids".into(), json!(fit.val_ids));
        write_json(&dir.join("history.json"), &Value::Object(h))?;
        for &e in &fit.selected {
            members.push(EnsembleMember { family: i, epoch: e, checkpoint: history[e - 1].checkpoint.clone() });
        }
        snapshots.push(json!({"family": name, "epochs": fit.selected}));
        eprintln!("train: {name} selected epochs {:?}", fit.selected);
    }
    let mut s = header(cfg);
    s.insert("families".into(), Value::Array(snapshots));
    write_json(&out.join("snapshots.json"), &Value::Object(s))?;
    let ens = EnsembleFile { config_digest: cfg.digest(), seed: cfg.seed, threshold: cfg.threshold, members };
    write_json(&out.join("ensemble.json"), &serde_json::to_value(&ens).expect("ensemble serializes"))?;
    Ok(ens)
}

struct FoldDetail {
    train_ids: Vec<String>,
    families: Vec<Value>,
}

fn fold_outcome(
    ctx: &Context<'_>,
    fold_seed: u64,
    train: &Manifest,
    test: &Manifest,
) -> cxr_core::Result<(FoldOutcome, FoldDetail)> {
    let cfg = ctx.cfg;
    let mut members = Vec::new();
    let mut train_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut families = Vec::new();
    for i in 0..cfg.families.len() {
        let mut store = MemoryStore::unbounded();
        let Fit { history, selected, train_ids: ids, val_ids } =
            ctx.fit(i, train, derive_seed(fold_seed, i as u64), &mut store)?;
        for e in &selected {
            let cp = store.get(*e).ok_or_else(|| Error::State(format!("no checkpoint for epoch {e}")))?;
            members.push((i, cp.clone()));
        }
        for id in ids {
            if seen.insert(id.clone()) {
                train_ids.push(id);
            }
        }
        families.push(json!({
            "family": cfg.family_name(i),
            "selected": selected,
            "history": history,
            "val_ids": val_ids,
        }));
    }
    let test_ids: Vec<String> = test.records.iter().map(|r| r.id.clone()).collect();
    let mean = ctx.score(&members, &test_ids)?;
    let scores = test
        .records
        .iter()
        .zip(mean)
        .map(|(r, score)| ScoredSample { id: r.id.clone(), score, label: r.label })
        .collect();
    Ok((FoldOutcome { train_ids: train_ids.clone(), scores }, FoldDetail { train_ids, families }))
}

/// Stratified k-fold cross-validation of the full ensemble recipe. Writes
/// `plan.json`, one report and one training record per fold, `pooled.json`
/// and `summary.json`.
pub fn cv(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<CvReport, CliError> {
    let m = load_manifest(manifest)?;
    let ctx = Context::load(cfg, &m, &base_dir(manifest))?;
    let plan = stratified_kfold(&m, cfg.cv.k, cfg.seed)?;
    let details: Mutex<Vec<Option<FoldDetail>>> = Mutex::new((0..plan.k).map(|_| None).collect());
    let digest = cfg.digest();
    let report = cross_validate(&m, &plan, cfg.threshold, &digest, |f, train, test| {
        let (outcome, detail) = fold_outcome(&ctx, derive_seed(cfg.seed, 1000 + f as u64), train, test)?;
        eprintln!("cv: fold {f} done");
        details.lock().expect("fold details lock")[f] = Some(detail);
        Ok(outcome)
    })?;
    let details = details.into_inner().expect("fold details lock");
    let folds_dir = out.join("folds");
    mkdir(&folds_dir)?;
    let mut p = header(cfg);
    p.insert("plan".into(), serde_json::to_value(&plan).expect("plan serializes"));
    write_json(&out.join("plan.json"), &Value::Object(p))?;
    for (f, (rep, detail)) in report.folds.iter().zip(details).enumerate() {
        let detail = detail.ok_or_else(|| Error::State(format!("fold {f} left no record")))?;
        write_atomic(&folds_dir.join(format!("fold_{f:02}.json")), rep.to_json().as_bytes())?;
        let mut t = header(cfg);
        t.insert("fold".into(), json!(f));
        t.insert("train_ids".into(), json!(detail.train_ids));
        t.insert("test_ids".into(), json!(plan.folds[f].test));
        t.insert("families".into(), Value::Array(detail.families));
        write_json(&folds_dir.join(format!("fold_{f:02}_train.json")), &Value::Object(t))?;
    }
    write_atomic(&out.join("pooled.json"), report.pooled.to_json().as_bytes())?;
    let mut s = header(cfg);
    s.insert("k".into(), json!(plan.k));
    s.insert("macro_average".into(), serde_json::to_value(&report.macro_average).expect("macro serializes"));
    s.insert(
        "pooled".into(),
        json!({
            "accuracy": report.pooled.accuracy,
            "tpr": report.pooled.tpr,
            "tnr": report.pooled.tnr,
            "fpr": report.pooled.fpr,
            "auc": report.pooled.auc,
            "confusion": report.pooled.confusion,
        }),
    );
    s.insert(
        "folds".into(),
        Value::Array(
            report
                .folds
                .iter()
                .enumerate()
                .map(|(f, r)| json!({"fold": f, "n_test": r.scores.len(), "accuracy": r.accuracy, "auc": r.auc}))
                .collect(),
        ),
    );
    write_json(&out.join("summary.json"), &Value::Object(s))?;
    eprintln!("cv: pooled accuracy {:.4}", report.pooled.accuracy);
    Ok(report)
}

/// Score every manifest record with the ensemble named by `ensemble`;
/// writes `scores.json`.
pub fn predict(cfg: &RunConfig, manifest: &Path, ensemble: &Path, out: &Path) -> Result<Vec<ScoredSample>, CliError> {
    let ens: EnsembleFile = serde_json::from_value(read_json(ensemble)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", ensemble.display())))?;
    let m = load_manifest(manifest)?;
    let ens_base = base_dir(ensemble);
    let mut members = Vec::with_capacity(ens.members.len());
    for mem in &ens.members {
        let family = cfg.families.get(mem.family).ok_or_else(|| {
            CliError::Input(format!(
                "ensemble member uses family {} but the config has {}",
                mem.family,
                cfg.families.len()
            ))
        })?;
        let cp: Checkpoint = load_checkpoint(&resolve(&ens_base, &mem.checkpoint))?;
        let expected = match family.kind {
            FamilyKind::SmallCnn => cxr_core::nn::InputKind::Image,
            FamilyKind::FeatureHead => cxr_core::nn::InputKind::Features,
        };
        if cp.input_kind != expected {
            return Err(Error::Compat(format!("{} does not match family {}", mem.checkpoint, mem.family)).into());
        }
        members.push((mem.family, cp));
    }
    let ctx = Context::load(cfg, &m, &base_dir(manifest))?;
    let ids: Vec<String> = m.records.iter().map(|r| r.id.clone()).collect();
    let mean = ctx.score(&members, &ids)?;
    let scores: Vec<ScoredSample> =
        m.records.iter().zip(mean).map(|(r, score)| ScoredSample { id: r.id.clone(), score, label: r.label }).collect();
    mkdir(out)?;
    let mut h = header(cfg);
    h.insert("members".into(), json!(members.len()));
    h.insert("scores".into(), serde_json::to_value(&scores).expect("scores serialize"));
    write_json(&out.join("scores.json"), &Value::Object(h))?;
    Ok(scores)
}

/// Build an EvalReport from a scores file (as written by `predict`);
/// writes `report.json`.
pub fn eval(cfg: &RunConfig, scores: &Path, out: &Path) -> Result<EvalReport, CliError> {
    let v = read_json(scores)?;
    let list = v.get("scores").cloned().unwrap_or(v);
    let samples: Vec<ScoredSample> =
        serde_json::from_value(list).map_err(|e| CliError::Input(format!("{}: {e}", scores.display())))?;
    if samples.is_empty() {
        return Err(CliError::Input(format!("{}: no scores", scores.display())));
    }
    let report = EvalReport::from_scores(samples, cfg.threshold, &cfg.digest(), vec![cfg.seed])?;
    mkdir(out)?;
    write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
    Ok(report)
}
