//! Detection metrics: AUROC, F1, accuracy and the optimal-F1 threshold.
//!
//! Samples with `score ≥ threshold` are predicted anomalous.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Image,
    Pixel,
}

/// Scores with binary labels (`true` = anomalous).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
    pub granularity: Granularity,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, granularity: Granularity) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("ScoredSet", scores.len(), labels.len()));
        }
        if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
            return Err(Error::InvalidParameter(format!("scores must not be NaN, found {bad}")));
        }
        Ok(Self {
            scores,
            labels,
            granularity,
        })
    }

    /// Labels given as 0/1 reals.
    pub fn from_f64(scores: Vec<f64>, labels: &[f64], granularity: Granularity) -> Result<Self> {
        let labels = labels
            .iter()
            .map(|&l| match l {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::InvalidParameter(format!("labels must be 0 or 1, found {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scores, labels, granularity)
    }

    pub fn empty(granularity: Granularity) -> Self {
        Self {
            scores: Vec::new(),
            labels: Vec::new(),
            granularity,
        }
    }

    /// Appends another set, e.g. one image's pixels into a pooled pixel set.
    pub fn merge(&mut self, other: &ScoredSet) -> Result<()> {
        if other.granularity != self.granularity {
            return Err(Error::InvalidParameter("cannot merge sets of different granularity".into()));
        }
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn push(&mut self, score: f64, label: bool) -> Result<()> {
        if score.is_nan() {
            return Err(Error::InvalidParameter("score must not be NaN".into()));
        }
        self.scores.push(score);
        self.labels.push(label);
        Ok(())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(positives, negatives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let p = self.labels.iter().filter(|&&l| l).count();
        (p, self.labels.len() - p)
    }

    fn require_both_classes(&self, metric: &str) -> Result<(usize, usize)> {
        let (p, n) = self.class_counts();
        if p == 0 || n == 0 {
            return Err(Error::UndefinedMetric(format!(
                "{metric} needs both classes ({p} anomalous, {n} normal)"
            )));
        }
        Ok((p, n))
    }

    /// Indices sorted by score, ascending.
    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[a].partial_cmp(&self.scores[b]).unwrap_or(Ordering::Equal));
        idx
    }

    /// Groups of tied scores in ascending order as `(score, positives, negatives)`.
    fn tie_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for i in self.order() {
            let s = self.scores[i];
            match groups.last_mut() {
                Some(last) if last.0 == s => {}
                _ => groups.push((s, 0, 0)),
            }
            let last = groups.last_mut().expect("just pushed");
            if self.labels[i] {
                last.1 += 1;
            } else {
                last.2 += 1;
            }
        }
        groups
    }
}

/// Mann–Whitney statistic `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` by one sort.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (p, n) = set.require_both_classes("AUROC")?;
    // Twice the statistic in integers: 2·(negatives below) + (negatives tied).
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    for (_, pos, neg) in set.tie_groups() {
        twice += pos as u128 * (2 * neg_below + neg as u128);
        neg_below += neg as u128;
    }
    Ok(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

impl Confusion {
    pub fn at(set: &ScoredSet, threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in set.scores.iter().zip(&set.labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.r#fn += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.tn + self.r#fn;
        if total == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / total as f64
    }

    /// `2TP / (2TP + FP + FN)`; zero when nothing is positive or predicted positive.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.r#fn;
        if denom == 0 {
            return 0.0;
        }
        (2 * self.tp) as f64 / denom as f64
    }
}

pub fn acc_f1(set: &ScoredSet, threshold: f64) -> (f64, f64) {
    let c = Confusion::at(set, threshold);
    (c.accuracy(), c.f1())
}

/// Best F1 over all distinct score values as thresholds; ties go to the
/// lowest threshold.
pub fn optimal_f1_threshold(set: &ScoredSet) -> Result<(f64, f64)> {
    let (p, _) = set.require_both_classes("optimal F1")?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::NAN, -1.0);
    // Walking thresholds downward, each group joins the predicted positives.
    for (score, pos, neg) in set.tie_groups().into_iter().rev() {
        tp += pos;
        fp += neg;
        let f1 = (2 * tp) as f64 / (2 * tp + fp + (p - tp)) as f64;
        if f1 >= best.1 {
            best = (score, f1);
        }
    }
    Ok(best)
}

/// Summary emitted into results documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub f1: f64,
    pub acc: f64,
    pub threshold: f64,
}

pub fn detection_metrics(set: &ScoredSet) -> Result<DetectionMetrics> {
    let auroc = auroc(set)?;
    let (threshold, _) = optimal_f1_threshold(set)?;
    let (acc, f1) = acc_f1(set, threshold);
    Ok(DetectionMetrics {
        auroc,
        f1,
        acc,
        threshold,
    })
}
