//! Synthetic polyp cohorts and rendered frames.
//!
//! The generator follows a small causal model: a polyp's true diameter drives
//! how close the endoscopist approaches it, which fixes the camera distance,
//! which together with the diameter fixes the apparent size in the image.
//! Everything downstream (depth, luminance, boxes) is rendered from that
//! distance, and the distance itself is kept on each frame only for oracle and
//! evaluation code paths.

mod cohort;
mod io;
mod mask;
mod render;

pub use cohort::{sample_cohort, sample_cohort_with};
pub use io::{read_dataset, write_dataset, MANIFEST_FILE, PAYLOAD_FILE};
pub use mask::degrade_mask;
pub use render::{render_frame, sample_behavior_distance};

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::geometry::{CameraIntrinsics, GeometryError};
use crate::grid::Grid;
use crate::rng::{domain, keyed};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("polyp {polyp}: bounding box does not fit the image after {attempts} attempts")]
    BboxDoesNotFit { polyp: u32, attempts: usize },
    #[error("target IoU {0} outside [0.05, 1.0]")]
    TargetIouOutOfRange(f64),
    #[error("could not reach target IoU {target} (best {best})")]
    IouNotReached { target: f64, best: f64 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest at line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("payload dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PolypId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatientId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameId(pub u32);

/// Binary size label at the 5 mm boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeClass {
    /// ≤ 5 mm
    Small,
    /// > 5 mm
    Large,
}

impl SizeClass {
    pub const THRESHOLD_MM: f64 = 5.0;

    pub fn from_diameter(mm: f64) -> Self {
        if mm > Self::THRESHOLD_MM {
            SizeClass::Large
        } else {
            SizeClass::Small
        }
    }

    pub fn index(self) -> usize {
        match self {
            SizeClass::Small => 0,
            SizeClass::Large => 1,
        }
    }
}

/// Where the active bounding box of a frame comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    GroundTruth,
    /// Ground truth with width and height multiplied by the factor.
    Scaled(f64),
    /// Simulated segmentation output at the given IoU with ground truth.
    Degraded(f64),
}

impl MaskSource {
    pub fn validate(&self) -> Result<(), SynthError> {
        match *self {
            MaskSource::GroundTruth => Ok(()),
            MaskSource::Scaled(c) if c > 0.0 && c.is_finite() => Ok(()),
            MaskSource::Scaled(c) => Err(SynthError::Config(format!(
                "mask scale factor {c} must be positive"
            ))),
            MaskSource::Degraded(t) if (0.05..=1.0).contains(&t) => Ok(()),
            MaskSource::Degraded(t) => Err(SynthError::TargetIouOutOfRange(t)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            MaskSource::GroundTruth => "gt".into(),
            MaskSource::Scaled(c) => format!("scaled({c})"),
            MaskSource::Degraded(t) => format!("degraded({t})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolypInstance {
    pub polyp_id: PolypId,
    pub patient_id: PatientId,
    pub true_diameter_mm: f64,
    pub size_class: SizeClass,
    /// Acquisition center (environment) the patient was examined at.
    pub center: u32,
}

/// Log-normal components for the two size classes. Draws are truncated to
/// the class range (`[1, 5]` mm and `(5, 25]` mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeDistribution {
    pub small_median_mm: f64,
    pub small_log_sigma: f64,
    pub large_median_mm: f64,
    pub large_log_sigma: f64,
}

impl Default for SizeDistribution {
    fn default() -> Self {
        Self {
            small_median_mm: 3.0,
            small_log_sigma: 0.25,
            large_median_mm: 9.0,
            large_log_sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub n_polyps: usize,
    pub large_fraction: f64,
    pub sizes: SizeDistribution,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 137,
            n_polyps: 200,
            large_fraction: 0.37,
            sizes: SizeDistribution::default(),
        }
    }
}

/// Examination-behavior law `Z = Z0 · (S/S_ref)^(γρ) · exp(ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfoundConfig {
    /// Confound strength ρ in `[0, 1]`.
    pub rho: f64,
    /// Behavior exponent γ.
    pub gamma: f64,
    pub base_distance_mm: f64,
    pub reference_size_mm: f64,
    /// Log-distance std between frames of one clip.
    pub clip_jitter_sigma: f64,
    pub frames_per_polyp: usize,
    /// Log-distance std between clips.
    pub distance_noise_sigma: f64,
}

impl Default for ConfoundConfig {
    fn default() -> Self {
        Self {
            rho: 0.7,
            gamma: 1.0,
            base_distance_mm: 20.0,
            reference_size_mm: 5.0,
            clip_jitter_sigma: 0.2,
            frames_per_polyp: 20,
            distance_noise_sigma: 0.3,
        }
    }
}

impl ConfoundConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(SynthError::Config(format!(
                "confound.rho must lie in [0, 1], got {}",
                self.rho
            )));
        }
        for (name, v) in [
            ("confound.gamma", self.gamma),
            ("confound.base_distance_mm", self.base_distance_mm),
            ("confound.reference_size_mm", self.reference_size_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("confound.clip_jitter_sigma", self.clip_jitter_sigma),
            ("confound.distance_noise_sigma", self.distance_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.frames_per_polyp == 0 {
            return Err(SynthError::Config(
                "confound.frames_per_polyp must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Inverse-square background luminance and auto-exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometryConfig {
    /// `k` in `P = k / Z²` (luminance · mm²).
    pub source_constant_k: f64,
    pub auto_exposure_enabled: bool,
    pub ae_target_luminance: f64,
    pub ae_tolerance: f64,
    /// Log-normal std of the luminance measurement.
    pub luminance_noise_sigma: f64,
}

impl Default for PhotometryConfig {
    fn default() -> Self {
        Self {
            source_constant_k: 40_000.0,
            auto_exposure_enabled: true,
            ae_target_luminance: 100.0,
            ae_tolerance: 10.0,
            luminance_noise_sigma: 0.05,
        }
    }
}

impl PhotometryConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.source_constant_k > 0.0 && self.source_constant_k.is_finite()) {
            return Err(SynthError::Config(
                "photometry.source_constant_k must be positive".into(),
            ));
        }
        if !(self.ae_target_luminance > 0.0) {
            return Err(SynthError::Config(
                "photometry.ae_target_luminance must be positive".into(),
            ));
        }
        if !(self.ae_tolerance >= 0.0 && self.ae_tolerance < self.ae_target_luminance) {
            return Err(SynthError::Config(
                "photometry.ae_tolerance must be non-negative and below the target".into(),
            ));
        }
        if !(self.luminance_noise_sigma >= 0.0) {
            return Err(SynthError::Config(
                "photometry.luminance_noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Rendering of boxes, depth and appearance maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Side of the square depth/appearance maps.
    pub map_size: usize,
    /// Log-normal std of the box size around `f·S/Z`, truncated at 3σ.
    pub bbox_size_jitter_sigma: f64,
    /// Half-range of the width/height split; leaves the mean extent unchanged.
    pub aspect_jitter: f64,
    /// Per-pixel multiplicative log-normal depth noise.
    pub depth_noise_sigma: f64,
    /// Background lies at `Z · (1 + relief_fraction)`.
    pub relief_fraction: f64,
    /// Max relative depth slope of the background across the image.
    pub background_gradient: f64,
    /// Range of the log-uniform multiplier on the per-frame depth normalizer.
    pub normalizer_range: [f64; 2],
    /// Polyp reflectance relative to the surrounding mucosa.
    pub polyp_albedo: f64,
    pub retry_budget: usize,
    pub retry_jitter_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            map_size: 64,
            bbox_size_jitter_sigma: 0.03,
            aspect_jitter: 0.15,
            depth_noise_sigma: 0.02,
            relief_fraction: 0.25,
            background_gradient: 0.2,
            normalizer_range: [0.5, 2.0],
            polyp_albedo: 1.3,
            retry_budget: 32,
            retry_jitter_sigma: 0.2,
        }
    }
}

impl SceneConfig {
    /// Largest deviation of `mean(w, h)` from `f·S/Z`, relative to `f·S/Z`.
    pub fn jitter_bound(&self) -> f64 {
        (3.0 * self.bbox_size_jitter_sigma).exp() - 1.0
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.map_size < 8 {
            return Err(SynthError::Config(
                "scene.map_size must be at least 8".into(),
            ));
        }
        let [lo, hi] = self.normalizer_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(SynthError::Config(
                "scene.normalizer_range must satisfy 0 < lo <= hi".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.aspect_jitter) {
            return Err(SynthError::Config(
                "scene.aspect_jitter must lie in [0, 1)".into(),
            ));
        }
        for (name, v) in [
            ("scene.bbox_size_jitter_sigma", self.bbox_size_jitter_sigma),
            ("scene.depth_noise_sigma", self.depth_noise_sigma),
            ("scene.relief_fraction", self.relief_fraction),
            ("scene.retry_jitter_sigma", self.retry_jitter_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..0.9).contains(&self.background_gradient) {
            return Err(SynthError::Config(
                "scene.background_gradient must lie in [0, 0.9)".into(),
            ));
        }
        if !(self.polyp_albedo > 0.0) {
            return Err(SynthError::Config(
                "scene.polyp_albedo must be positive".into(),
            ));
        }
        if self.retry_budget == 0 {
            return Err(SynthError::Config(
                "scene.retry_budget must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-center multipliers on distance, light source and focal length; used
/// to build environments that differ in acquisition conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CenterConfig {
    pub distance_scale: f64,
    pub source_scale: f64,
    pub focal_scale: f64,
}

impl Default for CenterConfig {
    fn default() -> Self {
        Self {
            distance_scale: 1.0,
            source_scale: 1.0,
            focal_scale: 1.0,
        }
    }
}

/// Everything needed to generate a dataset from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub cohort: CohortConfig,
    pub confound: ConfoundConfig,
    pub scene: SceneConfig,
    pub photometry: PhotometryConfig,
    pub intrinsics: CameraIntrinsics,
    /// Patients are assigned to centers round-robin by patient index.
    pub centers: Vec<CenterConfig>,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            focal_length_px: 64.0,
            image_width_px: 64,
            image_height_px: 64,
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            cohort: CohortConfig::default(),
            confound: ConfoundConfig::default(),
            scene: SceneConfig::default(),
            photometry: PhotometryConfig::default(),
            intrinsics: CameraIntrinsics::default(),
            centers: vec![CenterConfig::default()],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.confound.validate()?;
        self.scene.validate()?;
        self.photometry.validate()?;
        self.intrinsics.validate()?;
        if self.centers.is_empty() {
            return Err(SynthError::Config(
                "centers must list at least one center".into(),
            ));
        }
        for c in &self.centers {
            if !(c.distance_scale > 0.0 && c.source_scale > 0.0 && c.focal_scale > 0.0) {
                return Err(SynthError::Config("center scales must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One rendered observation of a polyp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    pub frame_id: FrameId,
    pub polyp_id: PolypId,
    pub patient_id: PatientId,
    pub center: u32,
    pub intrinsics: CameraIntrinsics,
    /// Ground-truth camera distance. Only oracle and evaluation code may read it.
    pub hidden_true_z_mm: f64,
    /// Rendered extent of the polyp.
    pub apparent_bbox: BBox,
    /// Annotated box; the default active box for probes.
    pub gt_mask_bbox: BBox,
    /// Metric depth divided by an unknown per-frame normalizer.
    pub relative_depth: Grid<f32>,
    pub background_luminance: f64,
    pub appearance: Grid<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cohort: Vec<PolypInstance>,
    pub frames: Vec<FrameSample>,
    index: HashMap<PolypId, usize>,
}

impl Dataset {
    pub fn new(cohort: Vec<PolypInstance>, frames: Vec<FrameSample>) -> Result<Self, SynthError> {
        let mut index = HashMap::with_capacity(cohort.len());
        for (i, p) in cohort.iter().enumerate() {
            if index.insert(p.polyp_id, i).is_some() {
                return Err(SynthError::Config(format!(
                    "duplicate polyp id {}",
                    p.polyp_id.0
                )));
            }
        }
        for f in &frames {
            if !index.contains_key(&f.polyp_id) {
                return Err(SynthError::Config(format!(
                    "frame {} references unknown polyp {}",
                    f.frame_id.0, f.polyp_id.0
                )));
            }
        }
        Ok(Self {
            cohort,
            frames,
            index,
        })
    }

    pub fn polyp(&self, id: PolypId) -> &PolypInstance {
        &self.cohort[self.index[&id]]
    }

    pub fn label(&self, frame: &FrameSample) -> SizeClass {
        self.polyp(frame.polyp_id).size_class
    }

    pub fn labels(&self) -> Vec<SizeClass> {
        self.frames.iter().map(|f| self.label(f)).collect()
    }

    /// Copy with every hidden distance overwritten by zero.
    pub fn with_hidden_z_zeroed(&self) -> Dataset {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.hidden_true_z_mm = 0.0;
        }
        out
    }
}

/// Cohort plus every clip, rendered polyp by polyp on independent streams.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let mut cohort = sample_cohort_with(&cfg.cohort, seed)?;
    let n_centers = cfg.centers.len() as u32;
    for p in &mut cohort {
        p.center = p.patient_id.0 % n_centers;
    }
    let clips: Vec<Vec<FrameSample>> = cohort
        .par_iter()
        .enumerate()
        .map(|(i, p)| generate_clip(p, i, cfg, seed))
        .collect::<Result<_, _>>()?;
    Dataset::new(cohort, clips.into_iter().flatten().collect())
}

fn generate_clip(
    polyp: &PolypInstance,
    index: usize,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Vec<FrameSample>, SynthError> {
    use rand_distr::{Distribution, Normal};

    let center = &cfg.centers[polyp.center as usize];
    let mut confound = cfg.confound.clone();
    confound.base_distance_mm *= center.distance_scale;
    let mut photometry = cfg.photometry.clone();
    photometry.source_constant_k *= center.source_scale;
    let mut intrinsics = cfg.intrinsics;
    intrinsics.focal_length_px *= center.focal_scale;

    let mut rng = keyed(seed, domain::POLYP, u64::from(polyp.polyp_id.0));
    let z_clip = sample_behavior_distance(polyp.true_diameter_mm, &confound, &mut rng)?;
    let jitter = Normal::new(0.0, confound.clip_jitter_sigma).expect("validated sigma");
    let per_clip = confound.frames_per_polyp;
    (0..per_clip)
        .map(|k| {
            let z = z_clip * jitter.sample(&mut rng).exp();
            let frame_id = FrameId((index * per_clip + k) as u32);
            render_frame(
                polyp,
                frame_id,
                z,
                &intrinsics,
                &cfg.scene,
                &photometry,
                &mut rng,
            )
        })
        .collect()
}
