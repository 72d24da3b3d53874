//! Slide-level evaluation: ROC AUC, Youden thresholding, F1 and accuracy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HagError, Result};

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(HagError::ShapeMismatch {
            op: "auc",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(HagError::NonFinite { op: "auc" });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(HagError::InvalidArgument("auc needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum, so tied groups stay integral.
    let mut rank2_sum_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled: (i + j + 2).
        let r2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if labels[k] {
                rank2_sum_pos += r2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    // Pairwise wins + ties/2, doubled.
    let u2 = rank2_sum_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Macro one-vs-rest AUC over `probs[i][c]`.
pub fn auc_macro(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let per: Vec<f64> = (0..classes)
        .map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            auc(&s, &l)
        })
        .collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / classes as f64, per))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Positive when the score is at least 0.5.
    #[default]
    Fixed,
    /// Threshold maximizing `TPR - FPR`; ties go to the lower threshold.
    Youden,
}

impl FromStr for ThresholdMode {
    type Err = HagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "youden" => Ok(Self::Youden),
            other => Err(HagError::Config(format!("unknown threshold mode {other:?}"))),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Youden => "youden",
        })
    }
}

/// Youden-optimal threshold among the observed scores. A sample is
/// predicted positive when `score >= threshold`.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count() as i64;
    let neg = labels.len() as i64 - pos;
    if scores.len() != labels.len() || pos == 0 || neg == 0 {
        return Err(HagError::InvalidArgument("youden threshold needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0i64, 0i64);
    let mut best: Option<(i64, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // (TPR - FPR) scaled by pos·neg keeps comparisons exact.
        let j = tp * neg - fp * pos;
        // Descending sweep: `>=` lets later (lower) thresholds win ties.
        if best.is_none_or(|(b, _)| j >= b) {
            best = Some((j, t));
        }
    }
    Ok(best.expect("non-empty").1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        (self.tp + self.tn) as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub auc: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Decision threshold on the positive-class probability (binary only).
    pub threshold: Option<f64>,
    pub n: usize,
    pub per_class: Vec<ClassMetrics>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn with_digest(mut self, digest: String) -> Self {
        self.config_digest = digest;
        self
    }
}

/// Binary metrics over positive-class scores.
pub fn binary_metrics(scores: &[f64], labels: &[bool], mode: ThresholdMode) -> Result<EvalReport> {
    let area = auc(scores, labels)?;
    let threshold = match mode {
        ThresholdMode::Fixed => 0.5,
        ThresholdMode::Youden => youden_threshold(scores, labels)?,
    };
    let c = Confusion::at(scores, labels, threshold);
    Ok(EvalReport {
        auc: area,
        f1: c.f1(),
        accuracy: c.accuracy(),
        threshold: Some(threshold),
        n: scores.len(),
        per_class: Vec::new(),
        config_digest: String::new(),
    })
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Metrics from class probabilities. Binary problems threshold `probs[1]`;
/// more classes use argmax predictions with macro AUC and macro F1.
pub fn classify_metrics(probs: &[Vec<f64>], labels: &[usize], mode: ThresholdMode) -> Result<EvalReport> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(HagError::InvalidArgument("need one probability vector per label".into()));
    }
    let classes = probs[0].len();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(HagError::LabelOutOfRange { label: y, classes });
    }
    if classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return binary_metrics(&s, &l, mode);
    }
    let (macro_auc, per_auc) = auc_macro(probs, labels, classes)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let mut conf = Confusion {
                tp: 0,
                fp: 0,
                tn: 0,
                fn_: 0,
            };
            for (&p, &y) in preds.iter().zip(labels) {
                match (p == c, y == c) {
                    (true, true) => conf.tp += 1,
                    (true, false) => conf.fp += 1,
                    (false, false) => conf.tn += 1,
                    (false, true) => conf.fn_ += 1,
                }
            }
            ClassMetrics {
                class: c,
                auc: per_auc[c],
                f1: conf.f1(),
                support: labels.iter().filter(|&&y| y == c).count(),
            }
        })
        .collect();
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(EvalReport {
        auc: macro_auc,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64,
        accuracy: correct as f64 / labels.len() as f64,
        threshold: None,
        n: labels.len(),
        per_class,
        config_digest: String::new(),
    })
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
