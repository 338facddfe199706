//! Discrimination and classification metrics on a scored test set.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const BOOTSTRAP_RESAMPLES: usize = 2000;
pub const DECISION_THRESHOLD: f64 = 0.5;
/// Bootstrap runs with more than this share of one-class resamples are rejected.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

/// Parallel patient ids, predicted probabilities and 0/1 labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub patient_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(patient_ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if patient_ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "scored set columns differ in length ({}, {}, {})",
                patient_ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Shape("labels must be 0 or 1".into()));
        }
        Ok(ScoredSet {
            patient_ids,
            scores,
            labels,
        })
    }

    /// Unnamed set, ids are positional.
    pub fn from_scores(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::new(ids, scores, labels)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Predict positive iff `score >= threshold`; the first point uses `+inf`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    // integer staircase, kept for exact area computation
    counts: Vec<(u64, u64)>,
    positives: u64,
    negatives: u64,
}

impl RocCurve {
    /// Trapezoidal area, accumulated in integers and divided once.
    pub fn area(&self) -> f64 {
        let twice: u128 = self
            .counts
            .windows(2)
            .map(|w| {
                let (fp0, tp0) = w[0];
                let (fp1, tp1) = w[1];
                u128::from(fp1 - fp0) * u128::from(tp0 + tp1)
            })
            .sum();
        twice as f64 / (2 * u128::from(self.positives) * u128::from(self.negatives)) as f64
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn class_counts(labels: &[u8]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::OneClass);
    }
    Ok((pos, neg))
}

fn roc_from(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (positives, negatives) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut counts = vec![(0u64, 0u64)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        counts.push((fp, tp));
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    Ok(RocCurve {
        points,
        counts,
        positives,
        negatives,
    })
}

/// ROC staircase through every distinct score, descending, starting at (0, 0).
pub fn roc_points(s: &ScoredSet) -> Result<RocCurve> {
    roc_from(&s.scores, &s.labels)
}

pub fn auc_trapezoid(s: &ScoredSet) -> Result<f64> {
    roc_points(s).map(|c| c.area())
}

/// Mann-Whitney form: share of (positive, negative) pairs ranked correctly,
/// ties counting one half. Quadratic; used as an independent check.
pub fn auc_pairwise(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = class_counts(&s.labels)?;
    let mut twice_wins: u128 = 0;
    for (sp, _) in s.scores.iter().zip(&s.labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in s.scores.iter().zip(&s.labels).filter(|(_, &l)| l == 0) {
            if sp > sn {
                twice_wins += 2;
            } else if sp == sn {
                twice_wins += 1;
            }
        }
    }
    Ok(twice_wins as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64)
}

/// Linear-interpolation quantile of sorted data (the usual "type 7").
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Row indices of bootstrap resample `b`; the same `(seed, b)` always draws
/// the same patients, so AUC and confusion intervals share resamples.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = rng::seeded(rng::index_seed(seed, b as u64));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// Resamples drawn.
    pub resamples: usize,
    /// Resamples without both classes, excluded from the percentiles.
    pub skipped: usize,
}

impl BootstrapCi {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Percentile 95% interval for AUC over patient-level resamples.
pub fn bootstrap_auc_ci(s: &ScoredSet, resamples: usize, seed: u64) -> Result<BootstrapCi> {
    let point = auc_trapezoid(s)?;
    if resamples == 0 {
        return Err(Error::Config(
            "bootstrap needs at least one resample".into(),
        ));
    }
    let n = s.len();
    let aucs: Vec<Option<f64>> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(n, seed, b);
            let scores: Vec<f64> = idx.iter().map(|&i| s.scores[i]).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| s.labels[i]).collect();
            roc_from(&scores, &labels).ok().map(|c| c.area())
        })
        .collect();
    let mut kept: Vec<f64> = aucs.into_iter().flatten().collect();
    let skipped = resamples - kept.len();
    if kept.is_empty() || skipped as f64 > MAX_SKIPPED_FRACTION * resamples as f64 {
        return Err(Error::TooManySkipped { skipped, resamples });
    }
    kept.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        point,
        lo: quantile_sorted(&kept, 0.025),
        hi: quantile_sorted(&kept, 0.975),
        resamples,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountInterval {
    pub lo: u64,
    pub hi: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellIntervals {
    pub tp: CountInterval,
    pub fp: CountInterval,
    pub tn: CountInterval,
    #[serde(rename = "fn")]
    pub fn_: CountInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub ci: CellIntervals,
    pub resamples: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// `[tp, fp, tn, fn]`, predicting positive iff `score >= threshold`.
pub fn confusion_counts(scores: &[f64], labels: &[u8], threshold: f64) -> [u64; 4] {
    let mut c = [0u64; 4];
    for (&s, &l) in scores.iter().zip(labels) {
        let cell = match (s >= threshold, l == 1) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        c[cell] += 1;
    }
    c
}

/// Confusion matrix with percentile 95% intervals per cell (floor of the
/// lower, ceiling of the upper percentile).
pub fn confusion_at(
    s: &ScoredSet,
    threshold: f64,
    resamples: usize,
    seed: u64,
) -> Result<ConfusionMatrix> {
    if s.is_empty() {
        return Err(Error::Shape("confusion matrix of an empty set".into()));
    }
    let [tp, fp, tn, fn_] = confusion_counts(&s.scores, &s.labels, threshold);
    let n = s.len();
    let boot: Vec<[u64; 4]> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices(n, seed, b);
            let scores: Vec<f64> = idx.iter().map(|&i| s.scores[i]).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| s.labels[i]).collect();
            confusion_counts(&scores, &labels, threshold)
        })
        .collect();
    let interval = |cell: usize, point: u64| {
        if boot.is_empty() {
            return CountInterval {
                lo: point,
                hi: point,
            };
        }
        let mut v: Vec<f64> = boot.iter().map(|c| c[cell] as f64).collect();
        v.sort_by(f64::total_cmp);
        CountInterval {
            lo: quantile_sorted(&v, 0.025).floor() as u64,
            hi: quantile_sorted(&v, 0.975).ceil() as u64,
        }
    };
    Ok(ConfusionMatrix {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        ci: CellIntervals {
            tp: interval(0, tp),
            fp: interval(1, fp),
            tn: interval(2, tn),
            fn_: interval(3, fn_),
        },
        resamples,
    })
}
