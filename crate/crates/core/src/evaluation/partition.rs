use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{confusion, macro_f1, EvalError};
use crate::stats::lower_median;
use crate::synthgen::{FrameId, SizeClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartitionGroup {
    /// Apparent size agrees with the true class.
    Consistent,
    /// Apparent size contradicts the true class.
    Inconsistent,
}

/// Splits a fold's test frames at the median apparent area fraction.
///
/// Frames at or above the median count as apparently large; a frame is
/// consistent when that agrees with its label.
pub fn shortcut_partition(
    frames: &[(FrameId, f64, SizeClass)],
) -> Result<BTreeMap<FrameId, PartitionGroup>, EvalError> {
    let areas: Vec<f64> = frames.iter().map(|f| f.1).collect();
    let m = lower_median(&areas).ok_or(EvalError::Empty)?;
    Ok(frames
        .iter()
        .map(|&(id, area, label)| {
            let looks_large = area >= m;
            let group = if looks_large == (label == SizeClass::Large) {
                PartitionGroup::Consistent
            } else {
                PartitionGroup::Inconsistent
            };
            (id, group)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScores {
    pub consistent: f64,
    pub inconsistent: f64,
    pub n_consistent: usize,
    pub n_inconsistent: usize,
}

/// Macro-F1 within each group over `(group, truth, prediction)` triples.
pub fn partition_macro_f1(
    rows: &[(PartitionGroup, SizeClass, SizeClass)],
) -> Result<PartitionScores, EvalError> {
    let score = |g: PartitionGroup| -> Result<(f64, usize), EvalError> {
        let (t, p): (Vec<SizeClass>, Vec<SizeClass>) =
            rows.iter().filter(|r| r.0 == g).map(|r| (r.1, r.2)).unzip();
        Ok((macro_f1(&confusion(&t, &p)?), t.len()))
    };
    let (consistent, n_consistent) = score(PartitionGroup::Consistent)?;
    let (inconsistent, n_inconsistent) = score(PartitionGroup::Inconsistent)?;
    Ok(PartitionScores {
        consistent,
        inconsistent,
        n_consistent,
        n_inconsistent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub baseline: PartitionScores,
    pub intervened: PartitionScores,
    /// Percentage points, intervened minus baseline.
    pub delta_consistent_pp: f64,
    pub delta_inconsistent_pp: f64,
}

impl PartitionReport {
    pub fn new(baseline: PartitionScores, intervened: PartitionScores) -> Self {
        Self {
            baseline,
            intervened,
            delta_consistent_pp: 100.0 * (intervened.consistent - baseline.consistent),
            delta_inconsistent_pp: 100.0 * (intervened.inconsistent - baseline.inconsistent),
        }
    }
}
