use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::rng::{domain, keyed};
use crate::synthgen::{PatientId, PolypInstance, SizeClass};

const MAX_SWAP_ROUNDS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<PatientId, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, patient: PatientId) -> Option<usize> {
        self.assignment.get(&patient).copied()
    }

    /// Number of patients per fold.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

#[derive(Clone, Copy)]
struct PatientCounts {
    polyps: f64,
    large: f64,
}

/// Patient-level k-fold split.
///
/// Patients are shuffled and dealt round-robin, so fold sizes differ by at
/// most one. A greedy pass then swaps patients between folds (sizes stay put)
/// while that lowers the squared deviation of the per-fold Large fraction
/// from the cohort fraction.
pub fn stratified_folds(
    cohort: &[PolypInstance],
    k: usize,
    seed: u64,
) -> Result<FoldSplit, EvalError> {
    if k < 2 {
        return Err(EvalError::Config(format!("k = {k}, need at least 2 folds")));
    }
    let mut per_patient: BTreeMap<PatientId, PatientCounts> = BTreeMap::new();
    for p in cohort {
        let e = per_patient.entry(p.patient_id).or_insert(PatientCounts {
            polyps: 0.0,
            large: 0.0,
        });
        e.polyps += 1.0;
        if p.size_class == SizeClass::Large {
            e.large += 1.0;
        }
    }
    if per_patient.len() < k {
        return Err(EvalError::Config(format!(
            "{} patients cannot fill {k} folds",
            per_patient.len()
        )));
    }
    let patients: Vec<PatientId> = per_patient.keys().copied().collect();
    let counts: Vec<PatientCounts> = per_patient.values().copied().collect();
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut keyed(seed, domain::FOLDS, 0));
    let mut fold = vec![0usize; patients.len()];
    for (slot, &i) in order.iter().enumerate() {
        fold[i] = slot % k;
    }

    let total_polyps: f64 = counts.iter().map(|c| c.polyps).sum();
    let total_large: f64 = counts.iter().map(|c| c.large).sum();
    let global = total_large / total_polyps;
    let mut polyps = vec![0.0; k];
    let mut large = vec![0.0; k];
    for (i, c) in counts.iter().enumerate() {
        polyps[fold[i]] += c.polyps;
        large[fold[i]] += c.large;
    }
    let dev = |n: f64, l: f64| {
        let d = if n > 0.0 { l / n - global } else { 0.0 };
        d * d
    };

    for _ in 0..MAX_SWAP_ROUNDS {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..patients.len() {
            for b in a + 1..patients.len() {
                let (fa, fb) = (fold[a], fold[b]);
                if fa == fb {
                    continue;
                }
                let (ca, cb) = (counts[a], counts[b]);
                if ca.polyps == cb.polyps && ca.large == cb.large {
                    continue;
                }
                let before = dev(polyps[fa], large[fa]) + dev(polyps[fb], large[fb]);
                let after = dev(
                    polyps[fa] - ca.polyps + cb.polyps,
                    large[fa] - ca.large + cb.large,
                ) + dev(
                    polyps[fb] - cb.polyps + ca.polyps,
                    large[fb] - cb.large + ca.large,
                );
                let gain = before - after;
                if gain > 1e-12 && best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let (fa, fb) = (fold[a], fold[b]);
        polyps[fa] += counts[b].polyps - counts[a].polyps;
        large[fa] += counts[b].large - counts[a].large;
        polyps[fb] += counts[a].polyps - counts[b].polyps;
        large[fb] += counts[a].large - counts[b].large;
        fold.swap(a, b);
    }

    Ok(FoldSplit {
        k,
        assignment: patients.into_iter().zip(fold).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::sample_cohort;

    #[test]
    fn fold_sizes_follow_pigeonhole() {
        let cohort = sample_cohort(159, 232, 85.0 / 232.0, 4).unwrap();
        let split = stratified_folds(&cohort, 5, 1).unwrap();
        let mut sizes = split.sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![32, 32, 32, 32, 31]);
    }

    #[test]
    fn deterministic_and_patient_exclusive() {
        let cohort = sample_cohort(10, 14, 0.4, 2).unwrap();
        let a = stratified_folds(&cohort, 5, 9).unwrap();
        assert_eq!(a, stratified_folds(&cohort, 5, 9).unwrap());
        for p in &cohort {
            assert!(a.fold_of(p.patient_id).unwrap() < 5);
        }
    }

    #[test]
    fn too_few_patients() {
        let cohort = sample_cohort(3, 3, 0.5, 0).unwrap();
        assert!(matches!(
            stratified_folds(&cohort, 5, 0),
            Err(EvalError::Config(_))
        ));
        assert!(stratified_folds(&cohort, 1, 0).is_err());
    }
}
