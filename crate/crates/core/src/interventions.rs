//! Controlled interventions applied to a split before probing: the metric
//! scale regime of the depth maps, the source of the active bounding box,
//! the photometric size correction, and removal of a feature group.

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::geometry::{
    apply_scale, global_factor, oracle_frame_factor, oracle_polyp_factor, GeometryError,
};
use crate::grid::Grid;
use crate::probes::features::{depth_anchor, FeatureGroup, FeatureVector, CORRECTED_SIZE_FEATURE};
use crate::rng::{domain, keyed};
use crate::stats::lower_median;
use crate::synthgen::{degrade_mask, FrameSample, MaskSource, PolypId, SynthError};

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("frame {frame}: substituted bounding box is degenerate")]
    DegenerateMask { frame: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRegime {
    /// Relative depth as produced, normalized per frame.
    None,
    /// One factor fitted on the training frames.
    Global,
    /// One oracle factor per clip.
    OraclePolyp,
    /// One oracle factor per frame.
    OracleFrame,
    /// Oracle frame factor times `scale_bias · exp(N(0, σ²))`: a miscalibrated
    /// metric-depth estimator.
    MetricEstimate {
        scale_bias: f64,
        scale_noise_sigma: f64,
    },
}

impl ScaleRegime {
    pub fn label(&self) -> String {
        match self {
            ScaleRegime::None => "none".into(),
            ScaleRegime::Global => "global".into(),
            ScaleRegime::OraclePolyp => "oracle_polyp".into(),
            ScaleRegime::OracleFrame => "oracle_frame".into(),
            ScaleRegime::MetricEstimate {
                scale_bias,
                scale_noise_sigma,
            } => format!("metric_estimate(bias={scale_bias},sigma={scale_noise_sigma})"),
        }
    }

    pub fn validate(&self) -> Result<(), InterventionError> {
        if let ScaleRegime::MetricEstimate {
            scale_bias,
            scale_noise_sigma,
        } = *self
        {
            if !(scale_bias > 0.0
                && scale_bias.is_finite()
                && scale_noise_sigma >= 0.0
                && scale_noise_sigma.is_finite())
            {
                return Err(InterventionError::Config(format!(
                    "metric estimate needs bias > 0 and sigma ≥ 0, got {scale_bias} and {scale_noise_sigma}"
                )));
            }
        }
        Ok(())
    }
}

/// One point of the intervention grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    pub scale: ScaleRegime,
    #[serde(default = "ground_truth")]
    pub mask: MaskSource,
    /// Exponent `q` of the `A / P^q` feature, when added. In config files
    /// `true` stands for [`DEFAULT_PHOTOMETRIC_EXPONENT`].
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "exponent_or_flag"
    )]
    pub photometric_correction: Option<f64>,
    /// Feature group removed from the MLP schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_ablation: Option<FeatureGroup>,
}

/// `q` used when a config enables the correction without naming one: the
/// `A / P` form. `q = 0.5` is the value under which distance cancels.
pub const DEFAULT_PHOTOMETRIC_EXPONENT: f64 = 1.0;

pub(crate) fn exponent_or_flag<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Flag(bool),
        Exponent(f64),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::Flag(true) => Some(DEFAULT_PHOTOMETRIC_EXPONENT),
        Raw::Flag(false) => None,
        Raw::Exponent(q) => Some(q),
    })
}

fn ground_truth() -> MaskSource {
    MaskSource::GroundTruth
}

impl InterventionPlan {
    pub fn new(scale: ScaleRegime, mask: MaskSource) -> Self {
        Self {
            scale,
            mask,
            photometric_correction: None,
            feature_ablation: None,
        }
    }

    pub fn validate(&self) -> Result<(), InterventionError> {
        self.scale.validate()?;
        self.mask.validate()?;
        if let Some(q) = self.photometric_correction {
            if !(q >= 0.0 && q.is_finite()) {
                return Err(InterventionError::Config(format!(
                    "photometric exponent {q} must be ≥ 0"
                )));
            }
        }
        Ok(())
    }

    /// Mask column of the reports.
    pub fn mask_label(&self) -> String {
        self.mask.label()
    }

    /// Scale column of the reports, with feature-level options appended.
    pub fn scale_label(&self) -> String {
        let mut s = self.scale.label();
        if let Some(g) = self.feature_ablation {
            s.push_str(match g {
                FeatureGroup::Geometric => "+no_geometric",
                FeatureGroup::Photometric => "+no_photometric",
            });
        }
        if let Some(q) = self.photometric_correction {
            s.push_str(&format!("+a_over_p^{q}"));
        }
        s
    }
}

/// Oracle factor of one frame: hidden distance over the relative-depth anchor
/// of the ground-truth box.
pub fn frame_oracle_factor(frame: &FrameSample) -> Result<f64, InterventionError> {
    let anchor = depth_anchor(
        &frame.relative_depth,
        &frame.intrinsics,
        &frame.gt_mask_bbox,
    );
    Ok(oracle_frame_factor(anchor, frame.hidden_true_z_mm)?.value())
}

/// Depth multiplier of every frame under `regime`.
///
/// `train` marks the frames the Global factor may be fitted on; the regimes
/// None and Global never read the hidden distance of any other frame.
/// MetricEstimate noise is drawn per frame from `(seed, frame_id)`.
pub fn regime_factors(
    frames: &[FrameSample],
    train: &[bool],
    regime: &ScaleRegime,
    seed: u64,
) -> Result<Vec<f64>, InterventionError> {
    regime.validate()?;
    if train.len() != frames.len() {
        return Err(InterventionError::Config(
            "training mask length differs from frame count".into(),
        ));
    }
    match *regime {
        ScaleRegime::None => Ok(vec![1.0; frames.len()]),
        ScaleRegime::Global => {
            let fitted: Vec<f64> = frames
                .iter()
                .zip(train)
                .filter(|(_, &t)| t)
                .map(|(f, _)| frame_oracle_factor(f))
                .collect::<Result<_, _>>()?;
            if fitted.is_empty() {
                return Err(InterventionError::Config(
                    "global scale needs training frames".into(),
                ));
            }
            Ok(vec![global_factor(&fitted)?.value(); frames.len()])
        }
        ScaleRegime::OracleFrame => frames.iter().map(frame_oracle_factor).collect(),
        ScaleRegime::OraclePolyp => {
            let per_frame: Vec<f64> = frames
                .iter()
                .map(frame_oracle_factor)
                .collect::<Result<_, _>>()?;
            let mut clips: HashMap<PolypId, Vec<f64>> = HashMap::new();
            for (f, &a) in frames.iter().zip(&per_frame) {
                clips.entry(f.polyp_id).or_default().push(a);
            }
            let per_clip: HashMap<PolypId, f64> = clips
                .into_iter()
                .map(|(id, v)| Ok((id, oracle_polyp_factor(&v)?.value())))
                .collect::<Result<_, GeometryError>>()?;
            Ok(frames.iter().map(|f| per_clip[&f.polyp_id]).collect())
        }
        ScaleRegime::MetricEstimate {
            scale_bias,
            scale_noise_sigma,
        } => frames
            .iter()
            .map(|f| {
                let mut rng = keyed(seed, domain::METRIC_ESTIMATE, u64::from(f.frame_id.0));
                let eps: f64 = StandardNormal.sample(&mut rng);
                Ok(frame_oracle_factor(f)? * scale_bias * (scale_noise_sigma * eps).exp())
            })
            .collect(),
    }
}

/// Depth maps of `frames` under `regime`; regime None returns the input
/// maps unchanged.
pub fn apply_scale_regime(
    frames: &[FrameSample],
    train: &[bool],
    regime: &ScaleRegime,
    seed: u64,
) -> Result<Vec<Grid<f32>>, InterventionError> {
    if *regime == ScaleRegime::None {
        return Ok(frames.iter().map(|f| f.relative_depth.clone()).collect());
    }
    let factors = regime_factors(frames, train, regime, seed)?;
    frames
        .iter()
        .zip(factors)
        .map(|(f, a)| scaled_depth(&f.relative_depth, a))
        .collect()
}

pub fn scaled_depth(rel: &Grid<f32>, factor: f64) -> Result<Grid<f32>, InterventionError> {
    let alpha = crate::geometry::ScaleFactor::new(factor, crate::geometry::Granularity::Frame)?;
    Ok(apply_scale(rel, alpha)?.map(|v| v as f32))
}

/// Relative depth divided by its own full-map median: invariant to the
/// unknown per-frame normalizer.
pub fn normalize_per_frame(rel: &Grid<f32>) -> Grid<f32> {
    let values: Vec<f64> = rel.as_slice().iter().map(|&v| f64::from(v)).collect();
    let m = lower_median(&values).unwrap_or(1.0);
    rel.map(|v| (f64::from(v) / m) as f32)
}

/// Active box of `frame` under `source`. Degraded boxes are drawn per frame
/// from `(seed, frame_id)`.
pub fn substitute_mask(
    frame: &FrameSample,
    source: &MaskSource,
    seed: u64,
) -> Result<BBox, InterventionError> {
    source.validate()?;
    let gt = frame.gt_mask_bbox;
    let (w, h) = (frame.intrinsics.width(), frame.intrinsics.height());
    let out = match *source {
        MaskSource::GroundTruth => gt,
        MaskSource::Scaled(c) if c == 1.0 => gt,
        MaskSource::Scaled(c) => gt.scaled(c).clip_to(w, h),
        MaskSource::Degraded(t) => {
            let mut rng = keyed(seed, domain::MASK, u64::from(frame.frame_id.0));
            degrade_mask(&gt, t, w, h, &mut rng)?
        }
    };
    if out.is_degenerate() {
        return Err(InterventionError::DegenerateMask {
            frame: frame.frame_id.0,
        });
    }
    Ok(out)
}

/// `A / P^q`. With `P = k/Z²` and `q = 1/2` the distance cancels.
pub fn photometric_correction(
    apparent: f64,
    luminance: f64,
    q: f64,
) -> Result<f64, InterventionError> {
    if !(luminance > 0.0 && luminance.is_finite()) {
        return Err(GeometryError::NonPositive {
            name: "background luminance",
            value: luminance,
        }
        .into());
    }
    Ok(if q == 0.0 {
        apparent
    } else if q == 0.5 {
        apparent / luminance.sqrt()
    } else {
        apparent / luminance.powf(q)
    })
}

/// Removes every feature of `group` from the vector (the schema shrinks).
pub fn ablate_features(
    fv: &FeatureVector,
    group: &str,
) -> Result<FeatureVector, InterventionError> {
    let g = FeatureGroup::parse(group)
        .ok_or_else(|| InterventionError::Config(format!("unknown feature group {group:?}")))?;
    Ok(ablate_group(fv, g))
}

pub fn ablate_group(fv: &FeatureVector, group: FeatureGroup) -> FeatureVector {
    FeatureVector {
        entries: fv
            .entries
            .iter()
            .filter(|f| f.group != group)
            .cloned()
            .collect(),
    }
}

/// Appends the photometric-corrected size `A / P^q` (tagged photometric).
pub fn with_corrected_size(
    fv: &FeatureVector,
    apparent: f64,
    luminance: f64,
    q: f64,
) -> Result<FeatureVector, InterventionError> {
    let mut out = fv.clone();
    out.push(
        CORRECTED_SIZE_FEATURE,
        FeatureGroup::Photometric,
        photometric_correction(apparent, luminance, q)?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::probes::features::{
        extract_features, FrameView, GEOMETRIC_FEATURES, PHOTOMETRIC_FEATURES,
    };
    use crate::synthgen::{generate_dataset, DatasetConfig, FrameId, PatientId};

    fn small_dataset(seed: u64) -> crate::synthgen::Dataset {
        let mut cfg = DatasetConfig::default();
        cfg.cohort.n_patients = 8;
        cfg.cohort.n_polyps = 12;
        cfg.confound.frames_per_polyp = 4;
        generate_dataset(&cfg, seed).unwrap()
    }

    fn frame_with_box(b: BBox) -> FrameSample {
        FrameSample {
            frame_id: FrameId(0),
            polyp_id: PolypId(0),
            patient_id: PatientId(0),
            center: 0,
            intrinsics: CameraIntrinsics::new(500.0, 512, 512).unwrap(),
            hidden_true_z_mm: 20.0,
            apparent_bbox: b,
            gt_mask_bbox: b,
            relative_depth: Grid::filled(8, 8, 1.0),
            background_luminance: 50.0,
            appearance: Grid::filled(8, 8, 1.0),
        }
    }

    #[test]
    fn regime_none_is_bit_identical() {
        let ds = small_dataset(1);
        let train = vec![true; ds.frames.len()];
        let maps = apply_scale_regime(&ds.frames, &train, &ScaleRegime::None, 0).unwrap();
        for (m, f) in maps.iter().zip(&ds.frames) {
            assert_eq!(m, &f.relative_depth);
        }
    }

    #[test]
    fn oracle_frame_recovers_hidden_distance() {
        let ds = small_dataset(2);
        let train = vec![true; ds.frames.len()];
        let factors = regime_factors(&ds.frames, &train, &ScaleRegime::OracleFrame, 0).unwrap();
        for (f, a) in ds.frames.iter().zip(factors) {
            let metric = apply_scale(
                &f.relative_depth,
                crate::geometry::ScaleFactor::new(a, crate::geometry::Granularity::Frame).unwrap(),
            )
            .unwrap();
            let frame = crate::bbox::MapFrame::new(64.0, 64.0, metric.width(), metric.height());
            let v: Vec<f64> = frame
                .interior_cells(&f.gt_mask_bbox)
                .iter()
                .map(|&i| metric.as_slice()[i])
                .collect();
            let anchor = lower_median(&v).unwrap();
            assert!((anchor / f.hidden_true_z_mm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn oracle_factors_vary_within_a_clip() {
        let ds = small_dataset(3);
        let train = vec![true; ds.frames.len()];
        let frame = regime_factors(&ds.frames, &train, &ScaleRegime::OracleFrame, 0).unwrap();
        let clip = regime_factors(&ds.frames, &train, &ScaleRegime::OraclePolyp, 0).unwrap();
        let first: Vec<usize> = (0..ds.frames.len())
            .filter(|&i| ds.frames[i].polyp_id == ds.frames[0].polyp_id)
            .collect();
        assert!(first.iter().any(|&i| frame[i] != frame[first[0]]));
        assert!(first.iter().all(|&i| clip[i] == clip[first[0]]));
        assert!(first.iter().any(|&i| clip[i] == frame[i]));
    }

    #[test]
    fn global_factor_ignores_test_distances() {
        let ds = small_dataset(4);
        let train: Vec<bool> = (0..ds.frames.len()).map(|i| i % 3 != 0).collect();
        let a = regime_factors(&ds.frames, &train, &ScaleRegime::Global, 0).unwrap();
        let mut blind = ds.frames.clone();
        for (f, &t) in blind.iter_mut().zip(&train) {
            if !t {
                f.hidden_true_z_mm = 0.0;
            }
        }
        assert_eq!(
            a,
            regime_factors(&blind, &train, &ScaleRegime::Global, 0).unwrap()
        );
        assert!(matches!(
            regime_factors(
                &ds.frames,
                &vec![false; ds.frames.len()],
                &ScaleRegime::Global,
                0
            ),
            Err(InterventionError::Config(_))
        ));
    }

    #[test]
    fn metric_estimate_without_noise_is_the_oracle() {
        let ds = small_dataset(5);
        let train = vec![true; ds.frames.len()];
        let oracle = regime_factors(&ds.frames, &train, &ScaleRegime::OracleFrame, 0).unwrap();
        let est = ScaleRegime::MetricEstimate {
            scale_bias: 1.0,
            scale_noise_sigma: 0.0,
        };
        assert_eq!(regime_factors(&ds.frames, &train, &est, 9).unwrap(), oracle);
        let noisy = ScaleRegime::MetricEstimate {
            scale_bias: 1.0,
            scale_noise_sigma: 2.0,
        };
        let a = regime_factors(&ds.frames, &train, &noisy, 9).unwrap();
        assert_eq!(a, regime_factors(&ds.frames, &train, &noisy, 9).unwrap());
        assert_ne!(a, oracle);
    }

    #[test]
    fn scaled_masks() {
        let f = frame_with_box(BBox::new(100.0, 100.0, 50.0, 40.0));
        assert_eq!(
            substitute_mask(&f, &MaskSource::Scaled(0.8), 0).unwrap(),
            BBox::new(100.0, 100.0, 40.0, 32.0)
        );
        assert_eq!(
            substitute_mask(&f, &MaskSource::Scaled(1.0), 0).unwrap(),
            f.gt_mask_bbox
        );
        assert_eq!(
            substitute_mask(&f, &MaskSource::GroundTruth, 0).unwrap(),
            f.gt_mask_bbox
        );
        let edge = frame_with_box(BBox::new(510.0, 100.0, 4.0, 4.0));
        let grown = substitute_mask(&edge, &MaskSource::Scaled(1.2), 0).unwrap();
        assert!(grown.fits_in(512.0, 512.0));
    }

    #[test]
    fn degraded_masks_hit_target_and_leave_payloads_alone() {
        let ds = small_dataset(6);
        for f in &ds.frames {
            let b = substitute_mask(f, &MaskSource::Degraded(0.3), 11).unwrap();
            let iou = b.iou(&f.gt_mask_bbox);
            assert!((0.28..=0.32).contains(&iou), "{iou}");
        }
        let before = ds.frames.clone();
        let _ = substitute_mask(&ds.frames[0], &MaskSource::Degraded(0.5), 0).unwrap();
        assert_eq!(before, ds.frames);
    }

    #[test]
    fn photometric_correction_cases() {
        let (f, k, s) = (500.0, 40_000.0f64, 4.0);
        let reference = f * s / k.sqrt();
        for z in [5.0, 12.5, 20.0, 33.3, 60.0] {
            let a = f * s / z;
            let p = k / (z * z);
            let c = photometric_correction(a, p, 0.5).unwrap();
            assert!((c / reference - 1.0).abs() < 1e-12);
        }
        assert_eq!(photometric_correction(7.0, 3.0, 0.0).unwrap(), 7.0);
        assert_eq!(photometric_correction(6.0, 3.0, 1.0).unwrap(), 2.0);
        assert!(photometric_correction(6.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn feature_ablation() {
        let intr = CameraIntrinsics::default();
        let depth = Grid::filled(16, 16, 2.0f32);
        let app = Grid::filled(16, 16, 1.0f32);
        let fv = extract_features(&FrameView {
            intrinsics: &intr,
            bbox: BBox::new(30.0, 30.0, 10.0, 8.0),
            depth: &depth,
            appearance: &app,
            background_luminance: 40.0,
        })
        .unwrap();
        let no_photo = ablate_features(&fv, "photometric").unwrap();
        assert!(no_photo.get("apparent_area_frac").is_some());
        assert_eq!(no_photo.len(), GEOMETRIC_FEATURES.len());
        let no_geo = ablate_features(&fv, "geometric").unwrap();
        assert_eq!(no_geo.len(), PHOTOMETRIC_FEATURES.len());
        assert!(ablate_features(&no_geo, "photometric").unwrap().is_empty());
        assert!(matches!(
            ablate_features(&fv, "texture"),
            Err(InterventionError::Config(_))
        ));
    }

    #[test]
    fn plans_round_trip_through_toml() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Grid_ {
            plans: Vec<InterventionPlan>,
        }
        let text = r#"
            [[plans]]
            scale = "oracle_frame"
            mask = { degraded = 0.3 }

            [[plans]]
            scale = { metric_estimate = { scale_bias = 1.0, scale_noise_sigma = 2.0 } }
            photometric_correction = 0.5
            feature_ablation = "photometric"

            [[plans]]
            scale = "none"
        "#;
        let g: Grid_ = toml::from_str(text).unwrap();
        assert_eq!(g.plans[0].mask, MaskSource::Degraded(0.3));
        assert_eq!(g.plans[2].mask, MaskSource::GroundTruth);
        assert_eq!(g.plans[1].feature_ablation, Some(FeatureGroup::Photometric));
        let back: Grid_ = toml::from_str(&toml::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
