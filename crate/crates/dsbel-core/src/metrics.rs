//! Confusion-matrix metrics, ROC/PR curves and AUC. Malware is the
//! positive class throughout.

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Percentage fields are in [0, 100]; `mcc` in [-1, 1]; `auc` in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub auc: f64,
}

pub fn confusion(preds: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, l) in preds.iter().zip(labels) {
        match (p, l) {
            (Label::Malware, Label::Malware) => cm.tp += 1,
            (Label::Benign, Label::Benign) => cm.tn += 1,
            (Label::Malware, Label::Benign) => cm.fp += 1,
            (Label::Benign, Label::Malware) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Fills everything except `auc` (set to NaN; supplied by the caller when
/// scores are available).
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsRecord> {
    if cm.total() == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let (tp, tn, fp, fn_) = (cm.tp as f64, cm.tn as f64, cm.fp as f64, cm.fn_ as f64);
    let accuracy = 100.0 * (tp + tn) / (tp + tn + fp + fn_);
    let precision = if tp + fp == 0.0 { 0.0 } else { 100.0 * tp / (tp + fp) };
    let recall = if tp + fn_ == 0.0 { 0.0 } else { 100.0 * tp / (tp + fn_) };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if denom == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / denom.sqrt()
    };
    Ok(MetricsRecord {
        accuracy,
        precision,
        recall,
        f1,
        mcc,
        auc: f64::NAN,
    })
}

#[derive(Clone, Debug)]
pub struct RocCurve {
    /// (FPR, TPR) from (0,0) to (1,1)
    pub points: Vec<(f64, f64)>,
    /// threshold introducing each point after the first
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PrCurve {
    /// (recall, precision)
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

fn sorted_by_score_desc(scores: &[f64], labels: &[Label]) -> Result<Vec<(f64, bool)>> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores/labels length mismatch".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    let pos = labels.iter().filter(|l| **l == Label::Malware).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Data("AUC undefined with a single class".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(s, l)| (*s, *l == Label::Malware))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    Ok(pairs)
}

/// ROC sweep over descending unique scores (ties grouped) plus trapezoid AUC.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<(RocCurve, f64)> {
    let pairs = sorted_by_score_desc(scores, labels)?;
    let p = pairs.iter().filter(|(_, m)| *m).count() as f64;
    let n = pairs.len() as f64 - p;
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < pairs.len() {
        let thr = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == thr {
            if pairs[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / n, tp / p));
        thresholds.push(thr);
    }
    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
    }
    Ok((RocCurve { points, thresholds }, auc))
}

/// Pair-counting AUC estimator (ties credit 1/2); the oracle for `roc_auc`.
pub fn auc_pair_counting(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let pairs = sorted_by_score_desc(scores, labels)?;
    let mut wins = 0.0;
    let mut total = 0.0;
    for (si, mi) in &pairs {
        if !mi {
            continue;
        }
        for (sj, mj) in &pairs {
            if *mj {
                continue;
            }
            total += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    Ok(wins / total)
}

/// Precision/recall sweep over the same descending unique thresholds.
pub fn pr_curve(scores: &[f64], labels: &[Label]) -> Result<PrCurve> {
    let pairs = sorted_by_score_desc(scores, labels)?;
    let p = pairs.iter().filter(|(_, m)| *m).count() as f64;
    let mut points = Vec::new();
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < pairs.len() {
        let thr = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == thr {
            if pairs[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((tp / p, tp / (tp + fp)));
        thresholds.push(thr);
    }
    Ok(PrCurve { points, thresholds })
}
