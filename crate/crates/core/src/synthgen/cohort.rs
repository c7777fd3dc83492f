use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    CohortConfig, PatientId, PolypId, PolypInstance, SizeClass, SizeDistribution, SynthError,
};
use crate::rng::{domain, keyed};

const MAX_POLYPS_PER_PATIENT: usize = 3;
const MIN_DIAMETER_MM: f64 = 1.0;
const MAX_DIAMETER_MM: f64 = 25.0;

/// Cohort with the default size distribution.
pub fn sample_cohort(
    n_patients: usize,
    n_polyps: usize,
    large_fraction: f64,
    seed: u64,
) -> Result<Vec<PolypInstance>, SynthError> {
    sample_cohort_with(
        &CohortConfig {
            n_patients,
            n_polyps,
            large_fraction,
            sizes: SizeDistribution::default(),
        },
        seed,
    )
}

/// Every patient gets one polyp, the remainder is scattered uniformly over
/// patients that still have room (at most three each). Exactly
/// `round(large_fraction · n_polyps)` polyps are Large.
pub fn sample_cohort_with(cfg: &CohortConfig, seed: u64) -> Result<Vec<PolypInstance>, SynthError> {
    let CohortConfig {
        n_patients,
        n_polyps,
        large_fraction,
        ref sizes,
    } = *cfg;
    if n_patients == 0 {
        return Err(SynthError::Config(
            "cohort.n_patients must be at least 1".into(),
        ));
    }
    if n_polyps < n_patients {
        return Err(SynthError::Config(format!(
            "cohort.n_polyps ({n_polyps}) must be at least cohort.n_patients ({n_patients})"
        )));
    }
    if n_polyps > MAX_POLYPS_PER_PATIENT * n_patients {
        return Err(SynthError::Config(format!(
            "cohort.n_polyps ({n_polyps}) exceeds {MAX_POLYPS_PER_PATIENT} per patient for {n_patients} patients"
        )));
    }
    if !(large_fraction > 0.0 && large_fraction < 1.0) {
        return Err(SynthError::Config(format!(
            "cohort.large_fraction must lie in (0, 1), got {large_fraction}"
        )));
    }
    for (name, v) in [
        ("cohort.sizes.small_median_mm", sizes.small_median_mm),
        ("cohort.sizes.large_median_mm", sizes.large_median_mm),
        ("cohort.sizes.small_log_sigma", sizes.small_log_sigma),
        ("cohort.sizes.large_log_sigma", sizes.large_log_sigma),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SynthError::Config(format!("{name} must be positive")));
        }
    }

    let mut rng = keyed(seed, domain::COHORT, 0);

    let mut counts = vec![1usize; n_patients];
    for _ in n_patients..n_polyps {
        let open: Vec<usize> = (0..n_patients)
            .filter(|&p| counts[p] < MAX_POLYPS_PER_PATIENT)
            .collect();
        counts[open[rng.gen_range(0..open.len())]] += 1;
    }

    let n_large = ((large_fraction * n_polyps as f64).round() as usize).clamp(0, n_polyps);
    let mut classes: Vec<SizeClass> = (0..n_polyps)
        .map(|i| {
            if i < n_large {
                SizeClass::Large
            } else {
                SizeClass::Small
            }
        })
        .collect();
    classes.shuffle(&mut rng);

    let small = Normal::new(sizes.small_median_mm.ln(), sizes.small_log_sigma).expect("validated");
    let large = Normal::new(sizes.large_median_mm.ln(), sizes.large_log_sigma).expect("validated");

    let mut cohort = Vec::with_capacity(n_polyps);
    let mut next = 0usize;
    for (patient, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let class = classes[next];
            let (dist, lo, hi) = match class {
                SizeClass::Small => (&small, MIN_DIAMETER_MM, SizeClass::THRESHOLD_MM),
                SizeClass::Large => (&large, SizeClass::THRESHOLD_MM, MAX_DIAMETER_MM),
            };
            let diameter = truncated_draw(dist, lo, hi, class, &mut rng);
            cohort.push(PolypInstance {
                polyp_id: PolypId(next as u32),
                patient_id: PatientId(patient as u32),
                true_diameter_mm: diameter,
                size_class: class,
                center: 0,
            });
            next += 1;
        }
    }
    Ok(cohort)
}

/// Rejection sampling inside the class range; falls back to a uniform draw
/// in log space when the component has almost no mass there.
fn truncated_draw(
    dist: &Normal<f64>,
    lo: f64,
    hi: f64,
    class: SizeClass,
    rng: &mut impl Rng,
) -> f64 {
    let inside = |d: f64| match class {
        SizeClass::Small => d >= lo && d <= hi,
        SizeClass::Large => d > lo && d <= hi,
    };
    for _ in 0..1000 {
        let d = dist.sample(rng).exp();
        if inside(d) {
            return d;
        }
    }
    loop {
        let d = rng.gen_range(lo.ln()..hi.ln()).exp();
        if inside(d) {
            return d;
        }
    }
}
