//! Pixel confusion counts and the metrics derived from them.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Negative,
    Positive,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        *self += *other;
    }

    /// Swaps the roles of prediction and target.
    pub fn transposed(&self) -> Self {
        ConfusionMatrix { tp: self.tp, fp: self.fn_, fn_: self.fp, tn: self.tn }
    }

    pub fn accuracy(&self) -> Result<f64> {
        ratio(self.tp + self.tn, self.total(), "accuracy")
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionMatrix { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn ratio(num: u64, den: u64, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric(format!("{what}: zero denominator")));
    }
    Ok(num as f64 / den as f64)
}

fn binary(v: f64) -> Result<bool> {
    match v {
        0.0 => Ok(false),
        1.0 => Ok(true),
        _ => Err(Error::NonBinary(v)),
    }
}

/// Exact per-pixel counts of two equally shaped binary masks.
pub fn confusion(pred: &Tensor, target: &Tensor) -> Result<ConfusionMatrix> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("confusion", pred.shape(), target.shape()));
    }
    confusion_slices(pred.data(), target.data())
}

pub fn confusion_slices(pred: &[f64], target: &[f64]) -> Result<ConfusionMatrix> {
    if pred.len() != target.len() {
        return Err(Error::shape("confusion", &[pred.len()], &[target.len()]));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (binary(p)?, binary(t)?) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

pub fn recall(cm: &ConfusionMatrix, cls: Class) -> Result<f64> {
    match cls {
        Class::Positive => ratio(cm.tp, cm.tp + cm.fn_, "positive recall"),
        Class::Negative => ratio(cm.tn, cm.tn + cm.fp, "negative recall"),
    }
}

pub fn iou(cm: &ConfusionMatrix, cls: Class) -> Result<f64> {
    match cls {
        Class::Positive => ratio(cm.tp, cm.tp + cm.fp + cm.fn_, "positive IoU"),
        Class::Negative => ratio(cm.tn, cm.tn + cm.fn_ + cm.fp, "negative IoU"),
    }
}

/// Mean of the two per-class recalls.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok((recall(cm, Class::Positive)? + recall(cm, Class::Negative)?) / 2.0)
}

/// Pixel counts of one labeled split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub images: u64,
    pub background_pixels: u64,
    pub target_pixels: u64,
    pub target_ratio: f64,
}

impl SplitStats {
    pub fn from_counts(images: u64, background_pixels: u64, target_pixels: u64) -> Self {
        let total = background_pixels + target_pixels;
        let target_ratio = if total == 0 { 0.0 } else { target_pixels as f64 / total as f64 };
        SplitStats { images, background_pixels, target_pixels, target_ratio }
    }
}

/// Counts over binary label masks; `None` marks an unlabeled sample.
pub fn dataset_stats<'a>(labels: impl IntoIterator<Item = Option<&'a Tensor>>) -> Result<SplitStats> {
    let (mut images, mut bg, mut fg) = (0u64, 0u64, 0u64);
    for (i, label) in labels.into_iter().enumerate() {
        let label = label.ok_or_else(|| Error::Contract(format!("sample {i} has no label")))?;
        images += 1;
        for &v in label.data() {
            if binary(v)? {
                fg += 1;
            } else {
                bg += 1;
            }
        }
    }
    Ok(SplitStats::from_counts(images, bg, fg))
}

/// Arithmetic mean, shifted by the first value so identical inputs give
/// that value exactly.
pub fn mean(values: &[f64]) -> Option<f64> {
    let x0 = *values.first()?;
    Some(x0 + values.iter().map(|v| v - x0).sum::<f64>() / values.len() as f64)
}

/// Standard deviation with the n − 1 denominator; `None` below two values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let x0 = values[0];
    let n = values.len() as f64;
    let (s, ss) = values.iter().fold((0.0, 0.0), |(s, ss), v| (s + (v - x0), ss + (v - x0) * (v - x0)));
    Some(((ss - s * s / n) / (n - 1.0)).max(0.0).sqrt())
}
