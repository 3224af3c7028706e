//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs as a plain binary so the lines always print.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cxr_core::dataset::{
    stratified_kfold, write_feature_file, FeatureSet, Manifest, SampleRecord, Source, Split, Subtype, FLIP_SUFFIX,
};
use cxr_core::gradcheck;
use cxr_core::imageio::GrayImage;
use cxr_core::metrics::{rates, roc_auc, ConfusionMatrix};
use cxr_core::optim::{clr_lr, ClrSchedule, EpochRecord};
use cxr_core::snapshot::{select_snapshots, Direction, SnapshotPolicy, TriggerMetric};
use cxr_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Outcome + 'a>);

/// Fails unless `cond` holds; a NaN comparison counts as failure.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const RATE_TOL: f64 = 5e-4;
const AUC_TOL: f64 = 1e-12;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const AUC_BUDGET: Duration = Duration::from_secs(60);
const E2E_BUDGET: Duration = Duration::from_secs(600);
const E2E_MIN_ACCURACY: f64 = 0.95;
const HEAD_MIN_VAL_ACCURACY: f64 = 0.9;

fn close(got: Option<f64>, want: f64, what: &str) -> Result<(), String> {
    let g = got.ok_or_else(|| format!("{what} undefined"))?;
    ensure!((g - want).abs() <= RATE_TOL, "{what} = {g:.6}, want {want} ± {RATE_TOL}");
    Ok(())
}

fn c1_metric_reproduction() -> Outcome {
    let a = rates(&ConfusionMatrix { tp: 26, fn_: 7, tn: 203, fp: 15 }).map_err(|e| e.to_string())?;
    close(Some(a.accuracy), 0.9124, "accuracy")?;
    close(a.tpr, 0.7879, "tpr")?;
    close(a.tnr, 0.9312, "tnr")?;
    close(a.fpr, 0.0688, "fpr")?;
    let b = rates(&ConfusionMatrix { tp: 82, fn_: 20, tn: 101, fp: 1 }).map_err(|e| e.to_string())?;
    close(b.tpr, 0.8039, "tpr (cv)")?;
    close(b.tnr, 0.9902, "tnr (cv)")?;
    Ok(format!(
        "acc {:.4} tpr {:.4} tnr {:.4} fpr {:.4}; cv tpr {:.4} tnr {:.4}",
        a.accuracy,
        a.tpr.unwrap(),
        a.tnr.unwrap(),
        a.fpr.unwrap(),
        b.tpr.unwrap(),
        b.tnr.unwrap()
    ))
}

fn c2_gradient_suite() -> Outcome {
    let start = Instant::now();
    let checks = gradcheck::full_suite(2024).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    for c in &checks {
        ensure!(c.passed(), "{}: max rel err {:.3e}, {} of {} skipped", c.name, c.max_rel_err, c.skipped, c.checked);
    }
    ensure!(took < GRAD_BUDGET, "took {took:?}");
    let skipped: usize = checks.iter().map(|c| c.skipped).sum();
    let checked: usize = checks.iter().map(|c| c.checked).sum();
    Ok(format!(
        "{} checks, worst rel err {worst:.2e} < {:e}, {skipped}/{checked} kink-crossing coordinates skipped, {:.1}s",
        checks.len(),
        gradcheck::TOL,
        took.as_secs_f64()
    ))
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &s) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &t) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if s > t {
                wins += 1.0;
            } else if s == t {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn c3_auc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut tied_sets = 0;
    for set in 0..1000 {
        let n = rng.random_range(2..=200);
        let coarse = set % 2 == 0;
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> =
            (0..n).map(|_| if coarse { rng.random_range(0..8) as f64 / 8.0 } else { rng.random::<f64>() }).collect();
        let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        if distinct.len() < n {
            tied_sets += 1;
        }
        let (_, auc) = roc_auc(&scores, &labels).map_err(|e| format!("set {set}: {e}"))?;
        let oracle = pairwise_auc(&scores, &labels);
        worst = worst.max((auc - oracle).abs());
        ensure!((auc - oracle).abs() <= AUC_TOL, "set {set}: trapezoid {auc} vs pairwise {oracle}");
    }
    let took = start.elapsed();
    ensure!(tied_sets >= 450, "only {tied_sets} sets had ties");
    ensure!(took < AUC_BUDGET, "took {took:?}");
    Ok(format!("1000 sets ({tied_sets} with ties), max |diff| {worst:.1e}, {:.2}s", took.as_secs_f64()))
}

#[derive(Debug, PartialEq)]
enum Expected {
    Epochs(Vec<usize>),
    ThresholdNotMet,
    Insufficient,
}

/// Walk the history directly: find the anchor, then collect every epoch
/// congruent to it modulo the gap in the policy's direction.
fn enumerate(history: &[EpochRecord], p: &SnapshotPolicy) -> Expected {
    let value = |r: &EpochRecord| match p.trigger_metric {
        TriggerMetric::TrainAccuracy => Some(r.train_accuracy),
        TriggerMetric::ValAccuracy => r.val_accuracy,
    };
    let hits: Vec<usize> =
        history.iter().filter(|r| value(r).is_some_and(|v| v > p.threshold)).map(|r| r.epoch).collect();
    let Some(&first) = hits.first() else {
        return Expected::ThresholdNotMet;
    };
    let mut picked = Vec::new();
    match p.direction {
        Direction::BackwardFromLast => {
            let last = history.last().unwrap().epoch;
            for r in history.iter().rev() {
                if (last - r.epoch).is_multiple_of(p.gap) && picked.len() < p.count {
                    picked.push(r.epoch);
                }
            }
        }
        Direction::ForwardFromTrigger => {
            for r in history {
                if r.epoch >= first && (r.epoch - first).is_multiple_of(p.gap) && picked.len() < p.count {
                    picked.push(r.epoch);
                }
            }
        }
    }
    if picked.len() < p.count {
        Expected::Insufficient
    } else {
        Expected::Epochs(picked)
    }
}

fn c4_snapshot_policies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tally: HashMap<&str, usize> = HashMap::new();
    for case in 0..50 {
        let epochs = rng.random_range(1..=120);
        let ceiling = match case % 5 {
            0 => 0.75,
            _ => 1.0,
        };
        let history: Vec<EpochRecord> = (1..=epochs)
            .map(|e| {
                let ramp = (e as f64 / epochs as f64).min(1.0);
                EpochRecord {
                    epoch: e,
                    train_loss: 1.0 - ramp,
                    train_accuracy: (0.5 + 0.5 * ramp * rng.random_range(0.8..1.0f64)).min(ceiling),
                    val_accuracy: Some((0.45 + 0.5 * ramp * rng.random_range(0.7..1.0f64)).min(ceiling)),
                    checkpoint: format!("mem:{e}"),
                }
            })
            .collect();
        let policy = SnapshotPolicy {
            direction: if case % 2 == 0 { Direction::BackwardFromLast } else { Direction::ForwardFromTrigger },
            trigger_metric: if case % 3 == 0 { TriggerMetric::ValAccuracy } else { TriggerMetric::TrainAccuracy },
            threshold: if case % 2 == 0 { 0.9 } else { 0.8 },
            gap: rng.random_range(1..=12),
            count: rng.random_range(1..=8),
        };
        let want = enumerate(&history, &policy);
        let got = match select_snapshots(&history, &policy) {
            Ok(v) => Expected::Epochs(v),
            Err(Error::Selection(m)) if m.starts_with("threshold not met") => Expected::ThresholdNotMet,
            Err(Error::Selection(m)) if m.starts_with("insufficient epochs") => Expected::Insufficient,
            Err(e) => return Err(format!("case {case}: unexpected error {e}")),
        };
        ensure!(got == want, "case {case} ({policy:?}, {epochs} epochs): got {got:?}, enumeration {want:?}");
        *tally
            .entry(match want {
                Expected::Epochs(_) => "selected",
                Expected::ThresholdNotMet => "threshold not met",
                Expected::Insufficient => "insufficient",
            })
            .or_default() += 1;
    }
    for kind in ["selected", "threshold not met", "insufficient"] {
        ensure!(tally.get(kind).copied().unwrap_or(0) > 0, "no case exercised {kind:?}");
    }
    Ok(format!(
        "50 histories: {} selected, {} threshold not met, {} insufficient",
        tally["selected"], tally["threshold not met"], tally["insufficient"]
    ))
}

fn c5_clr() -> Outcome {
    let s = ClrSchedule::default();
    let step = s.step_size as u64;
    ensure!(clr_lr(0, &s) == 1e-4, "lr(0) = {}", clr_lr(0, &s));
    ensure!(clr_lr(step, &s) == 1e-3, "lr(step) = {}", clr_lr(step, &s));
    ensure!(clr_lr(2 * step, &s) == 1e-4, "lr(2 step) = {}", clr_lr(2 * step, &s));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_shape = 0.0f64;
    let mut worst_period = 0.0f64;
    for _ in 0..100_000 {
        let it: u64 = rng.random_range(0..10_000_000);
        let lr = clr_lr(it, &s);
        ensure!((1e-4..=1e-3).contains(&lr), "lr({it}) = {lr} out of range");
        let pos = it % (2 * step);
        let t = if pos <= step { pos as f64 / step as f64 } else { (2 * step - pos) as f64 / step as f64 };
        worst_shape = worst_shape.max((lr - (1e-4 + 9e-4 * t)).abs());
        worst_period = worst_period.max((clr_lr(it + 2 * step, &s) - lr).abs());
    }
    ensure!(worst_shape <= 1e-15, "triangle deviates by {worst_shape:e}");
    ensure!(worst_period <= 1e-15, "period 2·step deviates by {worst_period:e}");
    Ok(format!("endpoints exact; 1e5 samples in range; triangle err {worst_shape:.1e}, period err {worst_period:.1e}"))
}

fn random_manifest(rng: &mut ChaCha8Rng, pos: usize, neg: usize) -> Manifest {
    let mut records = Vec::new();
    for i in 0..pos + neg {
        let positive = i < pos;
        records.push(SampleRecord {
            id: format!("r{i:04}"),
            source: Source::FeatureRow(i as u64),
            label: u8::from(positive),
            subtype: if positive {
                Subtype::Covid
            } else {
                [Subtype::Viral, Subtype::Bacterial, Subtype::Other][rng.random_range(0..3)]
            },
            split: Split::Unassigned,
        });
    }
    let mut ix: Vec<usize> = (0..records.len()).collect();
    use rand::seq::SliceRandom;
    ix.shuffle(rng);
    Manifest::new(rng.random(), ix.into_iter().map(|i| records[i].clone()).collect()).expect("valid manifest")
}

fn c6_split_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..200 {
        let k = rng.random_range(2..=10);
        let (pos, neg) = (rng.random_range(k..=60), rng.random_range(k..=60));
        let m = random_manifest(&mut rng, pos, neg);
        let seed: u64 = rng.random();
        let plan = stratified_kfold(&m, k, seed).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(plan == stratified_kfold(&m, k, seed).unwrap(), "case {case}: not deterministic");
        ensure!(plan.folds.len() == k, "case {case}: {} folds", plan.folds.len());
        let all: HashSet<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
        let mut seen = HashSet::new();
        let label: HashMap<&str, u8> = m.records.iter().map(|r| (r.id.as_str(), r.label)).collect();
        let mut per_class = [Vec::new(), Vec::new()];
        for f in &plan.folds {
            let test: HashSet<&str> = f.test.iter().map(String::as_str).collect();
            let train: HashSet<&str> = f.train.iter().map(String::as_str).collect();
            ensure!(test.is_disjoint(&train), "case {case}: train/test overlap");
            ensure!(test.union(&train).count() == all.len(), "case {case}: fold does not cover the manifest");
            for id in &f.test {
                ensure!(seen.insert(id.as_str()), "case {case}: {id} tested twice");
            }
            for c in [0u8, 1] {
                per_class[c as usize].push(f.test.iter().filter(|id| label[id.as_str()] == c).count());
            }
        }
        ensure!(seen == all, "case {case}: test sets do not partition the manifest");
        for counts in &per_class {
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            ensure!(hi - lo <= 1, "case {case}: class fold sizes {counts:?}");
        }
    }
    let m = random_manifest(&mut rng, 102, 102);
    let plan = stratified_kfold(&m, 10, 42).map_err(|e| e.to_string())?;
    for c in [0u8, 1] {
        let mut sizes: Vec<usize> =
            plan.folds.iter().map(|f| f.test.iter().filter(|id| m.get(id).unwrap().label == c).count()).collect();
        sizes.sort_unstable();
        ensure!(sizes == [10, 10, 10, 10, 10, 10, 10, 10, 11, 11], "class {c} sizes {sizes:?}");
    }
    Ok("200 manifests partition and balance; 102+102, k=10 gives 8×10 + 2×11 per class".into())
}

/// 204 gray images, 102 per class, separated only by mean intensity.
fn synthetic_images(dir: &Path) -> std::io::Result<()> {
    let raw = dir.join("raw");
    std::fs::create_dir_all(&raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut records = Vec::new();
    for i in 0..204 {
        let positive = i % 2 == 1;
        let mean: f64 = if positive { rng.random_range(140.0..170.0) } else { rng.random_range(85.0..115.0) };
        let side = 40;
        let pixels: Vec<u8> =
            (0..side * side).map(|_| (mean + rng.random_range(-60.0..60.0f64)).clamp(0.0, 255.0) as u8).collect();
        let img = GrayImage::new(side, side, pixels).expect("sized buffer");
        let name = format!("raw/img{i:03}.png");
        std::fs::write(dir.join(&name), img.to_png().expect("png encodes"))?;
        records.push(SampleRecord {
            id: format!("img{i:03}"),
            source: Source::Path(name),
            label: u8::from(positive),
            subtype: if positive {
                Subtype::Covid
            } else if i % 4 == 0 {
                Subtype::Viral
            } else {
                Subtype::Bacterial
            },
            split: Split::Unassigned,
        });
    }
    Manifest::new(77, records).expect("valid manifest").save(&dir.join("manifest.json")).expect("manifest saves");
    std::fs::write(
        dir.join("config.json"),
        r#"{
  "seed": 7,
  "preprocess": {"size": 32, "jpeg_quality": 90, "normalize_splits": ["unassigned"]},
  "train": {
    "epochs": 8,
    "batch_size": 8,
    "schedule": {"base_lr": 0.0001, "max_lr": 0.001, "step_size": 92},
    "dropout": 0.5
  },
  "snapshot": {
    "direction": "backward_from_last",
    "trigger_metric": "train_accuracy",
    "threshold": 0.9,
    "gap": 2,
    "count": 3
  },
  "families": [{"kind": "small_cnn"}],
  "cv": {"k": 10},
  "threshold": 0.5
}
"#,
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let code = cxr_cli::run(std::iter::once("cxr").chain(args.iter().copied()));
    ensure!(code == 0, "`cxr {}` exited {code}", args.join(" "));
    Ok(())
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// `prep` then `cv` in `work`; returns the elapsed time.
fn end_to_end(work: &Path) -> Result<Duration, String> {
    synthetic_images(work).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let s = |p: &str| work.join(p).to_string_lossy().into_owned();
    cli(&["prep", "--config", &s("config.json"), "--manifest", &s("manifest.json"), "--out", &s("prep")])?;
    cli(&["cv", "--config", &s("config.json"), "--manifest", &s("prep/manifest.json"), "--out", &s("cv")])?;
    Ok(start.elapsed())
}

fn c7_end_to_end(work: &Path) -> Outcome {
    let took = end_to_end(work)?;
    let pooled = read_json(&work.join("cv/pooled.json"))?;
    let acc = pooled["accuracy"].as_f64().ok_or("pooled accuracy missing")?;
    ensure!(pooled["scores"].as_array().map(Vec::len) == Some(204), "pooled report does not cover 204 samples");
    for f in 0..10 {
        ensure!(work.join(format!("cv/folds/fold_{f:02}.json")).is_file(), "fold {f} report missing");
        let t = read_json(&work.join(format!("cv/folds/fold_{f:02}_train.json")))?;
        let members = t["families"][0]["selected"].as_array().map(Vec::len);
        ensure!(members == Some(3), "fold {f}: ensemble has {members:?} members");
    }
    ensure!(acc >= E2E_MIN_ACCURACY, "pooled accuracy {acc:.4} < {E2E_MIN_ACCURACY}");
    ensure!(took < E2E_BUDGET, "took {took:?}");
    Ok(format!(
        "pooled accuracy {acc:.4} (auc {}), 10 folds × 3-member ensembles, {:.0}s",
        pooled["auc"],
        took.as_secs_f64()
    ))
}

fn c8_transfer_head(work: &Path) -> Outcome {
    let dim = 2048;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let direction: Vec<f32> = (0..dim).map(|_| if rng.random::<bool>() { 0.06 } else { -0.06 }).collect();
    let (mut ids, mut data, mut records) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..204 {
        let positive = i < 102;
        let sign = if positive { 1.0 } else { -1.0 };
        let id = format!("f{i:03}");
        data.extend(direction.iter().map(|&d| sign * d + noise.sample(&mut rng) as f32));
        records.push(SampleRecord {
            id: id.clone(),
            source: Source::FeatureRow(i as u64),
            label: u8::from(positive),
            subtype: if positive { Subtype::Covid } else { Subtype::Bacterial },
            split: Split::Train,
        });
        ids.push(id);
    }
    let fs = FeatureSet::flat(ids, dim, data, "synthetic").map_err(|e| e.to_string())?;
    write_feature_file(&fs, &work.join("synthetic.fvec")).map_err(|e| e.to_string())?;
    Manifest::new(8, records)
        .map_err(|e| e.to_string())?
        .save(&work.join("manifest.json"))
        .map_err(|e| e.to_string())?;
    std::fs::write(
        work.join("config.json"),
        r#"{
  "seed": 8,
  "train": {"epochs": 30, "batch_size": 8, "schedule": {"base_lr": 0.0001, "max_lr": 0.001, "step_size": 42}},
  "families": [{
    "kind": "feature_head",
    "feature_file": "synthetic.fvec",
    "holdout": 18,
    "snapshot": {
      "direction": "forward_from_trigger",
      "trigger_metric": "val_accuracy",
      "threshold": 0.8,
      "gap": 3,
      "count": 5
    }
  }]
}
"#,
    )
    .map_err(|e| e.to_string())?;
    let s = |p: &str| work.join(p).to_string_lossy().into_owned();
    cli(&["train", "--config", &s("config.json"), "--manifest", &s("manifest.json"), "--out", &s("out")])?;
    let h = read_json(&work.join("out/0_feature_head/history.json"))?;
    let history: Vec<EpochRecord> = serde_json::from_value(h["history"].clone()).map_err(|e| e.to_string())?;
    let val_ids = h["val_ids"].as_array().map(Vec::len).unwrap_or(0);
    ensure!(val_ids == 36, "holdout has {val_ids} records, want 18 per class");
    let last = history.last().and_then(|r| r.val_accuracy).ok_or("no validation accuracy")?;
    ensure!(last >= HEAD_MIN_VAL_ACCURACY, "final val accuracy {last:.4} < {HEAD_MIN_VAL_ACCURACY}");
    let trigger = history
        .iter()
        .find(|r| r.val_accuracy.is_some_and(|v| v > 0.8))
        .map(|r| r.epoch)
        .ok_or("val accuracy never exceeded 0.8")?;
    let snaps = read_json(&work.join("out/snapshots.json"))?;
    let picked: Vec<usize> =
        serde_json::from_value(snaps["families"][0]["epochs"].clone()).map_err(|e| e.to_string())?;
    let want: Vec<usize> = (0..5).map(|i| trigger + 3 * i).collect();
    ensure!(picked == want, "forward selection {picked:?}, want {want:?}");
    let ens = read_json(&work.join("out/ensemble.json"))?;
    ensure!(ens["members"].as_array().map(Vec::len) == Some(5), "ensemble.json does not list 5 members");
    Ok(format!("final val accuracy {last:.4}; trigger at epoch {trigger}; forward snapshots {picked:?}"))
}

fn c9_reproducibility(first: &Path, second: &Path) -> Outcome {
    end_to_end(second)?;
    let mut compared = 0;
    for name in ["cv/pooled.json", "cv/summary.json", "cv/plan.json", "prep/manifest.json"] {
        let a = std::fs::read(first.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(second.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(a == b, "{name} differs between runs");
        compared += a.len();
    }
    for f in 0..10 {
        let name = format!("cv/folds/fold_{f:02}.json");
        ensure!(
            std::fs::read(first.join(&name)).ok() == std::fs::read(second.join(&name)).ok(),
            "{name} differs between runs"
        );
    }
    Ok(format!(
        "pooled, summary, plan, manifest and 10 fold reports byte-identical ({compared} bytes in the first four)"
    ))
}

fn c10_flip_hygiene(work: &Path) -> Outcome {
    let mut flips = 0;
    for f in 0..10 {
        let t = read_json(&work.join(format!("cv/folds/fold_{f:02}_train.json")))?;
        let ids = |key: &str| -> Vec<String> { serde_json::from_value(t[key].clone()).unwrap_or_default() };
        let test: HashSet<String> = ids("test_ids").into_iter().collect();
        let train = ids("train_ids");
        ensure!(!test.is_empty() && !train.is_empty(), "fold {f}: empty id lists");
        for id in &train {
            let base = id.split_once(FLIP_SUFFIX).map_or(id.as_str(), |(b, _)| b);
            ensure!(!test.contains(base), "fold {f}: training id {id} leaks test sample {base}");
            flips += usize::from(id.ends_with(FLIP_SUFFIX));
        }
    }
    ensure!(flips > 0, "no flipped copies were trained on; audit is vacuous");
    Ok(format!("10 folds clean; {flips} flipped training ids audited"))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let (run_a, run_b, head) = (root.path().join("e2e_a"), root.path().join("e2e_b"), root.path().join("head"));
    for d in [&run_a, &run_b, &head] {
        std::fs::create_dir_all(d).expect("work dir");
    }
    let criteria: Vec<Criterion> = vec![
        (1, "metric reproduction", Box::new(c1_metric_reproduction)),
        (2, "gradient suite", Box::new(c2_gradient_suite)),
        (3, "AUC oracle equivalence", Box::new(c3_auc_oracle)),
        (4, "snapshot policies", Box::new(c4_snapshot_policies)),
        (5, "CLR schedule", Box::new(c5_clr)),
        (6, "split properties", Box::new(c6_split_properties)),
        (7, "end-to-end prep -> cv", Box::new(|| c7_end_to_end(&run_a))),
        (8, "transfer head", Box::new(|| c8_transfer_head(&head))),
        (9, "reproducibility", Box::new(|| c9_reproducibility(&run_a, &run_b))),
        (10, "flip hygiene", Box::new(|| c10_flip_hygiene(&run_a))),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if only.is_some_and(|o| o != *n && !(o >= 9 && *n == 7)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
