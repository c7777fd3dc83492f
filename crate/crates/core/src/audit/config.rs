use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AuditError;
use crate::interventions::{InterventionPlan, ScaleRegime};
use crate::probes::features::FeatureGroup;
use crate::probes::{ProbeKind, TrainConfig};
use crate::synthgen::{DatasetConfig, MaskSource};

/// Everything a run needs, read from one TOML file.
///
/// ```toml
/// seed = 7                      # dataset generation
/// seeds = [0, 1, 2, 3, 4]       # audit: folds, initialization, noise draws
/// folds = 5
/// probes = ["depth_cnn3", "feature_mlp"]
/// output_dir = "out"
///
/// [dataset.cohort]
/// n_patients = 137
///
/// [train]
/// epochs = 30
///
/// [[plans]]
/// scale = "none"
///
/// [[plans]]
/// scale = "oracle_frame"
/// mask = { degraded = 0.3 }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub probes: Vec<ProbeKind>,
    pub plans: Vec<PlanEntry>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Re-run regime None with hidden distances zeroed and compare predictions.
    pub guard: bool,
    pub mi_bins: usize,
    pub output_dir: Option<String>,
}

/// An intervention plan, optionally restricted to some probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawPlan", into = "RawPlan")]
pub struct PlanEntry {
    pub plan: InterventionPlan,
    pub probes: Option<Vec<ProbeKind>>,
}

// Flat TOML form of a plan entry. `serde(flatten)` would lose
// `deny_unknown_fields`, so the fields are spelled out.
#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    scale: ScaleRegime,
    #[serde(default = "ground_truth")]
    mask: MaskSource,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "crate::interventions::exponent_or_flag"
    )]
    photometric_correction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_ablation: Option<FeatureGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probes: Option<Vec<ProbeKind>>,
}

fn ground_truth() -> MaskSource {
    MaskSource::GroundTruth
}

impl From<RawPlan> for PlanEntry {
    fn from(r: RawPlan) -> Self {
        Self {
            plan: InterventionPlan {
                scale: r.scale,
                mask: r.mask,
                photometric_correction: r.photometric_correction,
                feature_ablation: r.feature_ablation,
            },
            probes: r.probes,
        }
    }
}

impl From<PlanEntry> for RawPlan {
    fn from(e: PlanEntry) -> Self {
        Self {
            scale: e.plan.scale,
            mask: e.plan.mask,
            photometric_correction: e.plan.photometric_correction,
            feature_ablation: e.plan.feature_ablation,
            probes: e.probes,
        }
    }
}

impl From<InterventionPlan> for PlanEntry {
    fn from(plan: InterventionPlan) -> Self {
        Self { plan, probes: None }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0],
            folds: 5,
            probes: vec![ProbeKind::DepthCnn3],
            plans: Vec::new(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            guard: false,
            mi_bins: crate::evaluation::DEFAULT_BINS,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, AuditError> {
        toml::from_str(text).map_err(|e| AuditError::Config(e.to_string()))
    }

    /// `(probe, plan index)` pairs of the grid, in config order.
    pub fn jobs(&self) -> Vec<(ProbeKind, usize)> {
        let mut out = Vec::new();
        for &probe in &self.probes {
            for (i, entry) in self.plans.iter().enumerate() {
                if entry.probes.as_ref().map_or(true, |p| p.contains(&probe)) {
                    out.push((probe, i));
                }
            }
        }
        out
    }

    /// Checks that don't need the dataset. Every probe/plan combination of
    /// the grid is checked here, before any training starts.
    pub fn validate_audit(&self) -> Result<(), AuditError> {
        let cfg = |m: String| Err(AuditError::Config(m));
        if self.plans.is_empty() {
            return cfg("no plans".into());
        }
        if self.probes.is_empty() {
            return cfg("probes: no probes".into());
        }
        if self.seeds.is_empty() {
            return cfg("seeds: no seeds".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return cfg("seeds: duplicate seed".into());
        }
        if self.folds < 2 {
            return cfg(format!("folds = {}, need at least 2", self.folds));
        }
        if self.mi_bins < 2 {
            return cfg(format!("mi_bins = {}, need at least 2", self.mi_bins));
        }
        self.train
            .validate()
            .map_err(|e| AuditError::Config(format!("train: {e}")))?;
        for (i, entry) in self.plans.iter().enumerate() {
            entry
                .plan
                .validate()
                .map_err(|e| AuditError::Config(format!("plans[{i}]: {e}")))?;
            if let Some(p) = &entry.probes {
                if let Some(missing) = p.iter().find(|k| !self.probes.contains(k)) {
                    return cfg(format!(
                        "plans[{i}].probes: {} is not in probes",
                        missing.name()
                    ));
                }
            }
        }
        let jobs = self.jobs();
        if jobs.is_empty() {
            return cfg("no plans apply to the configured probes".into());
        }
        for (probe, i) in jobs {
            let plan = &self.plans[i].plan;
            let depth_free = match probe {
                ProbeKind::FeatureMlp => plan.feature_ablation == Some(FeatureGroup::Geometric),
                ProbeKind::DepthCnn3 | ProbeKind::HeuristicPhysics => false,
                ProbeKind::AppearanceCnn | ProbeKind::HeuristicApparent => true,
            };
            if plan.scale != ScaleRegime::None && depth_free {
                return cfg(format!(
                    "plans[{i}]: scale {} requested for {} whose input has no depth",
                    plan.scale.label(),
                    probe.name()
                ));
            }
            if probe != ProbeKind::FeatureMlp
                && (plan.feature_ablation.is_some() || plan.photometric_correction.is_some())
            {
                return cfg(format!(
                    "plans[{i}]: feature options apply to feature_mlp only, not {}",
                    probe.name()
                ));
            }
        }
        Ok(())
    }
}

/// SHA-256 of the exact config text, plus the seed override when given.
pub fn config_hash(text: &str, seed_override: Option<u64>) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    if let Some(s) = seed_override {
        h.update(format!("\n--seed {s}\n").as_bytes());
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
        seed = 3
        seeds = [1, 0]
        folds = 5
        probes = ["depth_cnn3", "feature_mlp"]

        [dataset.cohort]
        n_patients = 20
        n_polyps = 30

        [train]
        epochs = 2

        [[plans]]
        scale = "none"

        [[plans]]
        scale = "oracle_frame"
        mask = { scaled = 0.8 }

        [[plans]]
        scale = "none"
        feature_ablation = "geometric"
        probes = ["feature_mlp"]
    "#;

    #[test]
    fn parses_and_expands_the_grid() {
        let cfg = RunConfig::from_toml(TEXT).unwrap();
        assert_eq!(cfg.dataset.cohort.n_polyps, 30);
        assert_eq!(cfg.dataset.confound.rho, 0.7);
        assert_eq!(cfg.plans[1].plan.mask, MaskSource::Scaled(0.8));
        cfg.validate_audit().unwrap();
        assert_eq!(
            cfg.jobs(),
            vec![
                (ProbeKind::DepthCnn3, 0),
                (ProbeKind::DepthCnn3, 1),
                (ProbeKind::FeatureMlp, 0),
                (ProbeKind::FeatureMlp, 1),
                (ProbeKind::FeatureMlp, 2),
            ]
        );
    }

    #[test]
    fn correction_flag_means_default_exponent() {
        let plan = |v: &str| {
            let text = format!("[[plans]]\nscale = \"none\"\nphotometric_correction = {v}\n");
            RunConfig::from_toml(&text).unwrap().plans[0]
                .plan
                .photometric_correction
        };
        assert_eq!(plan("true"), Some(1.0));
        assert_eq!(plan("false"), None);
        assert_eq!(plan("0.5"), Some(0.5));
        assert_eq!(plan("2"), Some(2.0));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("sede = 3").unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err = RunConfig::from_toml("[dataset.confound]\nrhoo = 0.2").unwrap_err();
        assert!(err.to_string().contains("rhoo"), "{err}");
    }

    #[test]
    fn grid_mismatches_fail_before_training() {
        let mut cfg = RunConfig::from_toml(TEXT).unwrap();
        cfg.plans[2].probes = None;
        cfg.plans[2].plan.scale = ScaleRegime::OracleFrame;
        let err = cfg.validate_audit().unwrap_err().to_string();
        assert!(err.contains("plans[2]"), "{err}");
        cfg.plans.clear();
        assert!(cfg
            .validate_audit()
            .unwrap_err()
            .to_string()
            .contains("no plans"));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            config_hash("abc", None),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_ne!(config_hash("abc", Some(1)), config_hash("abc", None));
    }
}
