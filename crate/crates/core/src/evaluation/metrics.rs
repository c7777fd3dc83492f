use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::stats::{mean, sample_std};
use crate::synthgen::SizeClass;

/// 2×2 counts indexed `[truth][prediction]` with Small = 0, Large = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn add(&mut self, truth: SizeClass, pred: SizeClass) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn f1(&self, class: usize) -> f64 {
        let other = 1 - class;
        let tp = self.counts[class][class] as f64;
        let fp = self.counts[other][class] as f64;
        let fn_ = self.counts[class][other] as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }
}

pub fn confusion(truth: &[SizeClass], pred: &[SizeClass]) -> Result<Confusion, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = Confusion::default();
    for (&t, &p) in truth.iter().zip(pred) {
        c.add(t, p);
    }
    Ok(c)
}

/// Unweighted mean of the two per-class F1 scores. A class with no true and
/// no predicted members scores 0.
pub fn macro_f1(c: &Confusion) -> f64 {
    0.5 * (c.f1(0) + c.f1(1))
}

/// True-positive rate of the Large class.
pub fn recall_large(c: &Confusion) -> Result<f64, EvalError> {
    let [ls, ll] = c.counts[1];
    if ls + ll == 0 {
        return Err(EvalError::Undefined(
            "recall of Large without Large ground truth",
        ));
    }
    Ok(ll as f64 / (ls + ll) as f64)
}

/// Mean and sample standard deviation.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.len() < 2 {
        return Err(EvalError::Undefined(
            "aggregation needs at least two values",
        ));
    }
    Ok((mean(values), sample_std(values)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub macro_f1: f64,
    pub recall_large: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub recall_large_mean: f64,
    pub recall_large_std: f64,
    pub per_fold: Vec<FoldMetrics>,
}

impl MetricsSummary {
    pub fn from_folds(mut per_fold: Vec<FoldMetrics>) -> Result<Self, EvalError> {
        per_fold.sort_by_key(|f| f.fold);
        let f1: Vec<f64> = per_fold.iter().map(|f| f.macro_f1).collect();
        let rec: Vec<f64> = per_fold.iter().map(|f| f.recall_large).collect();
        let (macro_f1_mean, macro_f1_std) = aggregate_folds(&f1)?;
        let (recall_large_mean, recall_large_std) = aggregate_folds(&rec)?;
        Ok(Self {
            macro_f1_mean,
            macro_f1_std,
            recall_large_mean,
            recall_large_std,
            per_fold,
        })
    }
}
