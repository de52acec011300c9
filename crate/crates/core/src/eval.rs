//! Pixel-level ROC/AUC and maximal-Dice threshold sweeps over pooled
//! in-mask scores.

use crate::data::GroundTruth;
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Per-pixel non-negative anomaly score aligned with a slice.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMap {
    pub scores: Array2<f64>,
    pub mask: Array2<bool>,
    pub source: String,
}

impl DifferenceMap {
    pub fn new(scores: Array2<f64>, mask: Array2<bool>, source: impl Into<String>) -> Result<Self> {
        if scores.dim() != mask.dim() {
            return Err(Error::shape(mask.shape(), scores.shape()));
        }
        if let Some(v) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!("difference map score {v} is negative or non-finite")));
        }
        Ok(Self { scores, mask, source: source.into() })
    }

    /// Scores zeroed outside the mask.
    pub fn masked(scores: Array2<f64>, mask: &Array2<bool>, source: impl Into<String>) -> Result<Self> {
        let mut scores = scores;
        scores.zip_mut_with(mask, |v, &m| {
            if !m {
                *v = 0.0
            }
        });
        Self::new(scores, mask.clone(), source)
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

/// Concatenate in-mask scores and labels in the given order.
pub fn pool<'a>(items: impl IntoIterator<Item = (&'a DifferenceMap, &'a GroundTruth)>) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, gt) in items {
        if gt.labels.dim() != map.scores.dim() {
            return Err(Error::shape(map.scores.shape(), gt.labels.shape()));
        }
        for ((&s, &m), &l) in map.scores.iter().zip(map.mask.iter()).zip(gt.labels.iter()) {
            if m {
                scores.push(s);
                labels.push(l);
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::EmptyDataset("nothing to pool: no in-mask pixels".into()));
    }
    Ok((scores, labels))
}

/// ROC points from threshold `+inf` down through every distinct score.
/// A pixel is predicted positive when `score >= threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub positives: u64,
    pub negatives: u64,
}

impl RocCurve {
    pub fn len(&self) -> usize {
        self.tp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tp.is_empty()
    }

    pub fn fpr(&self, i: usize) -> f64 {
        self.fp[i] as f64 / self.negatives as f64
    }

    pub fn tpr(&self, i: usize) -> f64 {
        self.tp[i] as f64 / self.positives as f64
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| (self.fpr(i), self.tpr(i))).collect()
    }
}

fn class_counts(labels: &[bool]) -> Result<(u64, u64)> {
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc(format!("{p} positive and {n} negative labels")));
    }
    Ok((p, n))
}

/// Indices sorted by descending score.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape(&[labels.len()], &[scores.len()]));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite score {v}")));
    }
    let (positives, negatives) = class_counts(labels)?;
    let idx = order_desc(scores);
    let mut curve = RocCurve { thresholds: vec![f64::INFINITY], tp: vec![0], fp: vec![0], positives, negatives };
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(t);
        curve.tp.push(tp);
        curve.fp.push(fp);
    }
    Ok(curve)
}

/// Trapezoidal area under the curve, accumulated in integer counts.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut twice_area: u128 = 0;
    for i in 1..curve.len() {
        let dfp = (curve.fp[i] - curve.fp[i - 1]) as u128;
        twice_area += dfp * (curve.tp[i] + curve.tp[i - 1]) as u128;
    }
    twice_area as f64 / (2.0 * curve.positives as f64 * curve.negatives as f64)
}

/// Mann-Whitney statistic from mid-ranks; an implementation independent of
/// the ROC construction.
pub fn auc_rank_sum(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(&[labels.len()], &[scores.len()]));
    }
    let (p, n) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// `2|pred & gt| / (|pred| + |gt|)` over in-mask pixels; 1 when both are empty.
pub fn dice(pred: &Array2<bool>, gt: &Array2<bool>, mask: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() || pred.dim() != mask.dim() {
        return Err(Error::shape(mask.shape(), pred.shape()));
    }
    let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
    for ((&p, &g), &m) in pred.iter().zip(gt.iter()).zip(mask.iter()) {
        if m {
            inter += (p && g) as u64;
            np += p as u64;
            ng += g as u64;
        }
    }
    Ok(dice_from_counts(inter, np, ng))
}

pub fn dice_from_counts(intersection: u64, predicted: u64, actual: u64) -> f64 {
    if predicted + actual == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (predicted + actual) as f64
    }
}

/// Threshold grid `t_k = lo + (hi - lo) * k / (points - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridSpec {
    /// 1001 points over [0, 6].
    Difference,
    /// 401 points over [0, 1].
    Probability,
    Custom { lo: f64, hi: f64, points: usize },
}

impl GridSpec {
    pub fn bounds(&self) -> (f64, f64, usize) {
        match *self {
            GridSpec::Difference => (0.0, 6.0, 1001),
            GridSpec::Probability => (0.0, 1.0, 401),
            GridSpec::Custom { lo, hi, points } => (lo, hi, points),
        }
    }

    pub fn thresholds(&self) -> Result<Vec<f64>> {
        let (lo, hi, n) = self.bounds();
        if n == 0 || !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::Config(format!("bad grid [{lo}, {hi}] with {n} points")));
        }
        if n == 1 {
            return Ok(vec![lo]);
        }
        Ok((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub thresholds: Vec<f64>,
    pub dice_per_threshold: Vec<f64>,
    pub best_threshold: f64,
    pub mdsc: f64,
}

/// Dice of `score > t` for every grid `t`; ties pick the smallest `t`.
pub fn max_dice_sweep(scores: &[f64], labels: &[bool], grid: &GridSpec) -> Result<SweepResult> {
    if scores.len() != labels.len() {
        return Err(Error::shape(&[labels.len()], &[scores.len()]));
    }
    let thresholds = grid.thresholds()?;
    let actual = labels.iter().filter(|&&l| l).count() as u64;
    // ascending order with a prefix count of positives
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let sorted: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let mut pos_prefix = Vec::with_capacity(idx.len() + 1);
    pos_prefix.push(0u64);
    for &i in &idx {
        pos_prefix.push(pos_prefix.last().unwrap() + labels[i] as u64);
    }
    let total = idx.len() as u64;
    let dice_per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            let k = sorted.partition_point(|&s| s <= t);
            let predicted = total - k as u64;
            let inter = actual - pos_prefix[k];
            dice_from_counts(inter, predicted, actual)
        })
        .collect();
    let mut best = 0;
    for (i, &d) in dice_per_threshold.iter().enumerate() {
        if d > dice_per_threshold[best] {
            best = i;
        }
    }
    Ok(SweepResult { best_threshold: thresholds[best], mdsc: dice_per_threshold[best], thresholds, dice_per_threshold })
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub detector: String,
    pub dataset: String,
    pub auc: f64,
    pub mdsc: f64,
    pub threshold: f64,
    pub checkpoint_hash: String,
    pub config_hash: String,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_metrics_json(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(rows)?)?;
    Ok(())
}

/// ROC points as `fpr,tpr,threshold`, thinned to at most `max_points` rows
/// (endpoints always kept).
pub fn write_roc_csv(path: &Path, curve: &RocCurve, max_points: usize) -> Result<()> {
    let n = curve.len();
    let keep: Vec<usize> = if n <= max_points || max_points < 2 {
        (0..n).collect()
    } else {
        let mut v: Vec<usize> = (0..max_points).map(|k| k * (n - 1) / (max_points - 1)).collect();
        v.dedup();
        v
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "fpr,tpr,threshold")?;
    for i in keep {
        writeln!(out, "{},{},{}", curve.fpr(i), curve.tpr(i), curve.thresholds[i])?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
