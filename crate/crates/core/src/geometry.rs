//! Pinhole-camera size geometry and oracle metric-scale factors.
//!
//! Apparent diameter `A` (pixels) of an object of true diameter `S` (mm) at
//! distance `Z` (mm) seen through focal length `f` (pixels) is `A = f·S/Z`.
//! `S` and `Z` enter only through their ratio, so `S` cannot be recovered from
//! `A` without a metric reference for `Z`. The oracle factors below supply
//! that reference at three granularities by converting scale-free relative
//! depth into millimetres.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::stats::lower_median;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be non-negative and finite, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("image dimensions must be at least 16 px, got {width}x{height}")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("cannot fit a scale factor to an empty sequence")]
    EmptyFactors,
    #[error("depth map contains a non-positive entry at index {index}")]
    NonPositiveDepth { index: usize },
}

fn positive(name: &'static str, value: f64) -> Result<f64, GeometryError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(GeometryError::NonPositive { name, value })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<f64, GeometryError> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(GeometryError::Negative { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_length_px: f64,
    pub image_width_px: u32,
    pub image_height_px: u32,
}

impl CameraIntrinsics {
    pub fn new(
        focal_length_px: f64,
        image_width_px: u32,
        image_height_px: u32,
    ) -> Result<Self, GeometryError> {
        let intrinsics = Self {
            focal_length_px,
            image_width_px,
            image_height_px,
        };
        intrinsics.validate()?;
        Ok(intrinsics)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        positive("focal_length_px", self.focal_length_px)?;
        if self.image_width_px < 16 || self.image_height_px < 16 {
            return Err(GeometryError::ImageTooSmall {
                width: self.image_width_px,
                height: self.image_height_px,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        f64::from(self.image_width_px)
    }

    pub fn height(&self) -> f64 {
        f64::from(self.image_height_px)
    }

    pub fn image_area(&self) -> f64 {
        self.width() * self.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    Frame,
    Polyp,
    Global,
}

/// Millimetres per relative-depth unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactor {
    value: f64,
    granularity: Granularity,
}

impl ScaleFactor {
    pub fn new(value: f64, granularity: Granularity) -> Result<Self, GeometryError> {
        positive("scale factor", value)?;
        Ok(Self { value, granularity })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }
}

/// `A = f·S/Z`.
pub fn project_apparent_diameter(f: f64, s: f64, z: f64) -> Result<f64, GeometryError> {
    positive("focal length", f)?;
    non_negative("true diameter", s)?;
    positive("distance", z)?;
    Ok(f * s / z)
}

/// `S = A·Z/f`.
pub fn invert_size(f: f64, a: f64, z: f64) -> Result<f64, GeometryError> {
    positive("focal length", f)?;
    non_negative("apparent diameter", a)?;
    positive("distance", z)?;
    Ok(a * z / f)
}

/// Factor that maps the frame's relative-depth anchor statistic onto its true
/// distance.
pub fn oracle_frame_factor(rel_depth_stat: f64, true_z: f64) -> Result<ScaleFactor, GeometryError> {
    positive("relative depth statistic", rel_depth_stat)?;
    positive("true distance", true_z)?;
    ScaleFactor::new(true_z / rel_depth_stat, Granularity::Frame)
}

fn median_factor(factors: &[f64], granularity: Granularity) -> Result<ScaleFactor, GeometryError> {
    for &f in factors {
        positive("frame factor", f)?;
    }
    let m = lower_median(factors).ok_or(GeometryError::EmptyFactors)?;
    ScaleFactor::new(m, granularity)
}

/// One factor per clip: the lower median of its per-frame factors.
pub fn oracle_polyp_factor(frame_factors: &[f64]) -> Result<ScaleFactor, GeometryError> {
    median_factor(frame_factors, Granularity::Polyp)
}

/// One factor for a whole population, fitted on training frames only.
pub fn global_factor(training_frame_factors: &[f64]) -> Result<ScaleFactor, GeometryError> {
    median_factor(training_frame_factors, Granularity::Global)
}

/// Elementwise `alpha · depth`.
pub fn apply_scale<T>(rel_depth: &Grid<T>, alpha: ScaleFactor) -> Result<Grid<f64>, GeometryError>
where
    T: Copy + Into<f64>,
{
    let a = alpha.value();
    if let Some(index) = rel_depth
        .as_slice()
        .iter()
        .position(|&v| !(v.into() > 0.0 && v.into().is_finite()))
    {
        return Err(GeometryError::NonPositiveDepth { index });
    }
    Ok(rel_depth.map(|v| v.into() * a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_apparent_diameter(500.0, 5.0, 25.0).unwrap(), 100.0);
        assert_eq!(project_apparent_diameter(500.0, 0.0, 25.0).unwrap(), 0.0);
        assert_eq!(project_apparent_diameter(700.0, 6.0, 20.0).unwrap(), 210.0);
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(invert_size(500.0, 100.0, 25.0).unwrap(), 5.0);
        assert_eq!(invert_size(500.0, 0.0, 25.0).unwrap(), 0.0);
        assert_eq!(invert_size(700.0, 210.0, 20.0).unwrap(), 6.0);
    }

    #[test]
    fn domain_errors() {
        assert!(project_apparent_diameter(500.0, 5.0, 0.0).is_err());
        assert!(project_apparent_diameter(-1.0, 5.0, 3.0).is_err());
        assert!(invert_size(0.0, 5.0, 3.0).is_err());
        assert!(invert_size(1.0, 5.0, -3.0).is_err());
        assert!(oracle_frame_factor(0.0, 1.0).is_err());
        assert!(oracle_frame_factor(1.0, -1.0).is_err());
        assert_eq!(oracle_polyp_factor(&[]), Err(GeometryError::EmptyFactors));
        assert_eq!(global_factor(&[]), Err(GeometryError::EmptyFactors));
        assert!(CameraIntrinsics::new(100.0, 8, 64).is_err());
    }

    #[test]
    fn oracle_factor_examples() {
        assert_eq!(oracle_frame_factor(0.5, 30.0).unwrap().value(), 60.0);
        assert_eq!(oracle_frame_factor(1.0, 1.0).unwrap().value(), 1.0);
        assert_eq!(oracle_frame_factor(0.25, 10.0).unwrap().value(), 40.0);
        assert_eq!(
            oracle_polyp_factor(&[40.0, 60.0, 80.0]).unwrap().value(),
            60.0
        );
        assert_eq!(oracle_polyp_factor(&[5.0]).unwrap().value(), 5.0);
        assert_eq!(
            oracle_polyp_factor(&[10.0, 10.0, 1000.0]).unwrap().value(),
            10.0
        );
        assert_eq!(global_factor(&[2.0, 4.0, 6.0]).unwrap().value(), 4.0);
        assert_eq!(global_factor(&[7.0, 7.0, 7.0]).unwrap().value(), 7.0);
        let g = global_factor(&[1.0, 100.0]).unwrap();
        assert_eq!(g.value(), 1.0);
        assert_eq!(g.granularity(), Granularity::Global);
    }

    #[test]
    fn apply_scale_examples() {
        let map = Grid::from_vec(2, 2, vec![0.3f32, 1.0, 2.5, 0.7]).unwrap();
        let one = ScaleFactor::new(1.0, Granularity::Global).unwrap();
        assert_eq!(apply_scale(&map, one).unwrap(), map.to_f64());

        let constant = Grid::filled(3, 3, 0.5f64);
        let alpha = oracle_frame_factor(0.5, 30.0).unwrap();
        let out = apply_scale(&constant, alpha).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 30.0));

        let bad = Grid::from_vec(2, 1, vec![1.0f64, 0.0]).unwrap();
        assert_eq!(
            apply_scale(&bad, one),
            Err(GeometryError::NonPositiveDepth { index: 1 })
        );
    }

    proptest! {
        #[test]
        fn round_trip(f in 1.0f64..5000.0, s in 0.01f64..50.0, z in 0.5f64..500.0) {
            let a = project_apparent_diameter(f, s, z).unwrap();
            let back = invert_size(f, a, z).unwrap();
            prop_assert!(((back - s) / s).abs() <= 1e-9);
        }

        #[test]
        fn common_rescaling_of_size_and_distance_is_invisible(f in 1.0f64..5000.0, s in 0.01f64..50.0, z in 0.5f64..500.0, c in 1e-3f64..1e3) {
            let a = project_apparent_diameter(f, s, z).unwrap();
            let b = project_apparent_diameter(f, c * s, c * z).unwrap();
            prop_assert!(((b - a) / a).abs() <= 1e-9);
        }

        #[test]
        fn monotone_in_size_and_distance(f in 1.0f64..5000.0, s in 0.01f64..50.0, z in 0.5f64..500.0, d in 1e-3f64..10.0) {
            let a = project_apparent_diameter(f, s, z).unwrap();
            prop_assert!(project_apparent_diameter(f, s + d, z).unwrap() > a);
            prop_assert!(project_apparent_diameter(f, s, z + d).unwrap() < a);
        }
    }
}
