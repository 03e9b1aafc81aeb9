//! Pixel metrics, confusion matrices and fold planning.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::nn::{bce_value, derive_seed};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// CSV with the actual class on rows and the predicted class on columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual,predicted_negative,predicted_positive\n");
        let _ = writeln!(s, "negative,{},{}", self.tn, self.fp);
        let _ = writeln!(s, "positive,{},{}", self.fn_, self.tp);
        s
    }
}

fn check_pair(pred: &Tensor, mask: &Tensor) -> Result<()> {
    if pred.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and mask {:?} differ in shape",
            pred.shape(),
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::shape("mask must be binary"));
    }
    Ok(())
}

/// Tallies pixels; a pixel is predicted positive iff `pred >= threshold`.
pub fn confusion(pred: &Tensor, mask: &Tensor, threshold: f32) -> Result<ConfusionMatrix> {
    check_pair(pred, mask)?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &m) in pred.data().iter().zip(mask.data()) {
        match (p >= threshold, m == 1.0) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bce: f64,
}

/// `num / den`, with `0/0` resolved to 1 (nothing to find, nothing found).
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Count-based metrics plus a precomputed mean BCE.
    ///
    /// Degenerate cases: when prediction and mask are both empty every
    /// overlap metric is 1; when exactly one is empty they are 0.
    pub fn from_counts(cm: &ConfusionMatrix, bce: f64) -> Self {
        let ConfusionMatrix { tp, fp, fn_, tn } = *cm;
        MetricsReport {
            iou: ratio(tp, tp + fp + fn_),
            accuracy: ratio(tp + tn, cm.total()),
            precision: if tp + fp == 0 && fn_ > 0 { 0.0 } else { ratio(tp, tp + fp) },
            recall: if tp + fn_ == 0 && fp > 0 { 0.0 } else { ratio(tp, tp + fn_) },
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            bce,
        }
    }
}

pub fn metrics(cm: &ConfusionMatrix, pred: &Tensor, mask: &Tensor) -> Result<MetricsReport> {
    check_pair(pred, mask)?;
    Ok(MetricsReport::from_counts(cm, bce_value(pred.data(), mask.data())))
}

/// Merges counts and pixel-weighted BCE across batches or folds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub confusion: ConfusionMatrix,
    pub bce_sum: f64,
    pub pixels: u64,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &Tensor, mask: &Tensor, threshold: f32) -> Result<()> {
        let cm = confusion(pred, mask, threshold)?;
        self.confusion.merge(&cm);
        self.bce_sum += bce_value(pred.data(), mask.data()) * pred.len() as f64;
        self.pixels += pred.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.confusion.merge(&other.confusion);
        self.bce_sum += other.bce_sum;
        self.pixels += other.pixels;
    }

    pub fn report(&self) -> MetricsReport {
        let bce = if self.pixels == 0 { 0.0 } else { self.bce_sum / self.pixels as f64 };
        MetricsReport::from_counts(&self.confusion, bce)
    }
}

/// Assignment of manifest records to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub subject_wise: bool,
    /// Subject to fold; empty for record-wise plans, where a subject may span
    /// several folds.
    pub assignments: BTreeMap<String, usize>,
    /// Fold of each manifest record, in manifest order.
    pub record_folds: Vec<usize>,
}

impl FoldPlan {
    pub fn fold_records(&self, fold: usize) -> Vec<usize> {
        (0..self.record_folds.len()).filter(|&i| self.record_folds[i] == fold).collect()
    }

    pub fn records_outside(&self, folds: &[usize]) -> Vec<usize> {
        (0..self.record_folds.len())
            .filter(|&i| !folds.contains(&self.record_folds[i]))
            .collect()
    }

    /// Number of subjects (subject-wise) or records per fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        if self.subject_wise {
            for &f in self.assignments.values() {
                sizes[f] += 1;
            }
        } else {
            for &f in &self.record_folds {
                sizes[f] += 1;
            }
        }
        sizes
    }
}

fn shuffled<T>(mut items: Vec<T>, seed: u64, label: &str) -> Vec<T> {
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, label)));
    items
}

/// Shuffles subjects (or records) by `seed` and deals them round-robin.
pub fn kfold_plan(manifest: &Manifest, k: usize, seed: u64, subject_wise: bool) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Folds(format!("k must be at least 2, got {k}")));
    }
    if subject_wise {
        let subjects = manifest.subjects();
        if subjects.len() < k {
            return Err(Error::Folds(format!("k = {k} exceeds the {} distinct subjects", subjects.len())));
        }
        let assignments: BTreeMap<String, usize> = shuffled(subjects, seed, "folds/subjects")
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i % k))
            .collect();
        let record_folds = manifest.records.iter().map(|r| assignments[&r.subject_id]).collect();
        Ok(FoldPlan {
            k,
            subject_wise,
            assignments,
            record_folds,
        })
    } else {
        let n = manifest.len();
        if n < k {
            return Err(Error::Folds(format!("k = {k} exceeds the {n} records")));
        }
        let mut record_folds = vec![0; n];
        for (i, r) in shuffled((0..n).collect(), seed, "folds/records").into_iter().enumerate() {
            record_folds[r] = i % k;
        }
        Ok(FoldPlan {
            k,
            subject_wise,
            assignments: BTreeMap::new(),
            record_folds,
        })
    }
}

/// Record indices of a train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Subjects dealt into ten portions: six train, two validation, two test.
pub fn split_622(manifest: &Manifest, seed: u64) -> Result<Split> {
    let subjects = manifest.subjects().len();
    if subjects < 10 {
        return Err(Error::Folds(format!("a 6/2/2 split needs at least 10 subjects, found {subjects}")));
    }
    let plan = kfold_plan(manifest, 10, seed, true)?;
    let pick = |range: std::ops::Range<usize>| -> Vec<usize> {
        (0..manifest.len()).filter(|&i| range.contains(&plan.record_folds[i])).collect()
    };
    Ok(Split {
        train: pick(0..6),
        val: pick(6..8),
        test: pick(8..10),
    })
}
