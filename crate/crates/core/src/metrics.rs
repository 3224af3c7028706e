//! Confusion statistics, ROC/AUC and the cross-validation driver.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Split, SplitPlan, FLIP_SUFFIX};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Argument(format!("label {y} not in {{0,1}}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("NaN score".into()));
    }
    Ok(())
}

/// Predicted positive iff `score > threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_binary(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > threshold, y == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Rates derived from a confusion matrix. A rate whose denominator class is
/// absent is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn rates(cm: &ConfusionMatrix) -> Result<Rates> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Argument("empty confusion matrix".into()));
    }
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    Ok(Rates {
        accuracy: (cm.tp + cm.tn) as f64 / n as f64,
        tpr: ratio(cm.tp, cm.positives()),
        tnr: ratio(cm.tn, cm.negatives()),
        fpr: ratio(cm.fp, cm.negatives()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score cutoff for each point (predict positive iff `score >= cutoff`);
    /// the first is `+inf`.
    pub thresholds: Vec<f64>,
}

/// ROC swept over every distinct score, with trapezoidal AUC. Tied scores
/// move both coordinates at once, which gives them half credit.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(RocCurve, f64)> {
    check_binary(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument("ROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one positive-negative pair.
    let mut area2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok((RocCurve { points, thresholds }, auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fpr: Option<f64>,
    pub auc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
    pub scores: Vec<ScoredSample>,
    pub config_digest: String,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn from_scores(
        scores: Vec<ScoredSample>,
        threshold: f64,
        config_digest: &str,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        let s: Vec<f64> = scores.iter().map(|x| x.score).collect();
        let y: Vec<u8> = scores.iter().map(|x| x.label).collect();
        let cm = confusion(&s, &y, threshold)?;
        let r = rates(&cm)?;
        let (roc, auc) = match roc_auc(&s, &y) {
            Ok((curve, auc)) => (curve.points, Some(auc)),
            Err(_) => (Vec::new(), None),
        };
        Ok(Self {
            confusion: cm,
            accuracy: r.accuracy,
            tpr: r.tpr,
            tnr: r.tnr,
            fpr: r.fpr,
            auc,
            roc,
            scores,
            config_digest: config_digest.to_owned(),
            seeds,
        })
    }

    pub fn to_json(&self) -> String {
        crate::canonical_json(&serde_json::to_value(self).expect("report serializes"))
    }
}

/// What a fold runner reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    /// Every id actually trained on, including augmented copies.
    pub train_ids: Vec<String>,
    /// One score per test id.
    pub scores: Vec<ScoredSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub accuracy: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: Vec<EvalReport>,
    pub pooled: EvalReport,
    pub macro_average: MacroAverage,
}

/// Reject a fold whose training ids include a test id or a flipped copy of
/// one.
pub fn audit_flip_hygiene(train_ids: &[String], test_ids: &[String]) -> Result<()> {
    let test: HashSet<&str> = test_ids.iter().map(String::as_str).collect();
    for id in train_ids {
        let base = id.strip_suffix(FLIP_SUFFIX).unwrap_or(id);
        if test.contains(base) {
            return Err(Error::Validation(format!("training id {id:?} leaks test sample {base:?}")));
        }
    }
    Ok(())
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Run every fold of `plan` through `runner` (concurrently when built with
/// `parallel`), audit it, and pool the test scores in fold order.
///
/// The runner receives the fold's records tagged `Train` and `Test`; it owns
/// augmentation, training and ensembling.
pub fn cross_validate<F>(
    m: &Manifest,
    plan: &SplitPlan,
    threshold: f64,
    config_digest: &str,
    runner: F,
) -> Result<CvReport>
where
    F: Fn(usize, &Manifest, &Manifest) -> Result<FoldOutcome> + Sync + Send,
{
    plan.validate(m)?;
    let run_fold = |f: usize| -> Result<EvalReport> {
        let fold = &plan.folds[f];
        let tag = |ids: &[String], split: Split| {
            let mut sub = m.subset(ids.iter().map(String::as_str));
            for r in &mut sub.records {
                r.split = split;
            }
            sub
        };
        let train = tag(&fold.train, Split::Train);
        let test = tag(&fold.test, Split::Test);
        let outcome = runner(f, &train, &test)?;
        audit_flip_hygiene(&outcome.train_ids, &fold.test)?;
        let expected: HashSet<&str> = fold.test.iter().map(String::as_str).collect();
        let got: HashSet<&str> = outcome.scores.iter().map(|s| s.id.as_str()).collect();
        if got != expected || outcome.scores.len() != fold.test.len() {
            return Err(Error::Validation(format!("fold {f}: scores do not cover the test ids exactly")));
        }
        EvalReport::from_scores(outcome.scores, threshold, config_digest, vec![plan.seed, f as u64])
    };
    let folds: Vec<EvalReport> =
        exec::map_range(plan.folds.len(), |f| run_fold(f).map_err(|e| Error::Fold { fold: f, source: Box::new(e) }))
            .into_iter()
            .collect::<Result<_>>()?;
    let pooled_scores: Vec<ScoredSample> = folds.iter().flat_map(|r| r.scores.iter().cloned()).collect();
    let pooled = EvalReport::from_scores(pooled_scores, threshold, config_digest, vec![plan.seed])?;
    let macro_average = MacroAverage {
        accuracy: folds.iter().map(|r| r.accuracy).sum::<f64>() / folds.len() as f64,
        tpr: mean_of(folds.iter().map(|r| r.tpr)),
        tnr: mean_of(folds.iter().map(|r| r.tnr)),
        auc: mean_of(folds.iter().map(|r| r.auc)),
    };
    Ok(CvReport { folds, pooled, macro_average })
}
