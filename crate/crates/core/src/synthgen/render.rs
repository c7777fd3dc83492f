use rand::Rng;
use rand_distr::StandardNormal;

use super::{FrameId, FrameSample, PhotometryConfig, PolypInstance, SceneConfig, SynthError};
use crate::bbox::{BBox, MapFrame};
use crate::geometry::{project_apparent_diameter, CameraIntrinsics, GeometryError};
use crate::grid::Grid;
use crate::stats::lower_median;

fn std_normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn log_uniform(lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    if hi > lo {
        rng.gen_range(lo.ln()..hi.ln()).exp()
    } else {
        lo
    }
}

/// Camera distance chosen by examination behavior for a polyp of diameter `s`.
pub fn sample_behavior_distance(
    s: f64,
    cfg: &super::ConfoundConfig,
    rng: &mut impl Rng,
) -> Result<f64, SynthError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(GeometryError::NonPositive {
            name: "true diameter",
            value: s,
        }
        .into());
    }
    let law = cfg.base_distance_mm * (s / cfg.reference_size_mm).powf(cfg.gamma * cfg.rho);
    Ok(law * (cfg.distance_noise_sigma * std_normal(rng)).exp())
}

/// Renders one frame of `polyp` seen from distance `z`.
///
/// When the projected box would not fit the image (or falls under 2 px) the
/// distance is re-jittered, up to `scene.retry_budget` attempts.
pub fn render_frame(
    polyp: &PolypInstance,
    frame_id: FrameId,
    z: f64,
    intrinsics: &CameraIntrinsics,
    scene: &SceneConfig,
    photometry: &PhotometryConfig,
    rng: &mut impl Rng,
) -> Result<FrameSample, SynthError> {
    intrinsics.validate()?;
    let (width, height) = (intrinsics.width(), intrinsics.height());

    let mut placed = None;
    for attempt in 0..scene.retry_budget {
        let z_try = if attempt == 0 {
            z
        } else {
            z * (scene.retry_jitter_sigma * std_normal(rng)).exp()
        };
        let a =
            project_apparent_diameter(intrinsics.focal_length_px, polyp.true_diameter_mm, z_try)?;
        let size = (scene.bbox_size_jitter_sigma * std_normal(rng).clamp(-3.0, 3.0)).exp();
        let split = if scene.aspect_jitter > 0.0 {
            rng.gen_range(-scene.aspect_jitter..=scene.aspect_jitter)
        } else {
            0.0
        };
        let w = a * size * (1.0 + split);
        let h = a * size * (1.0 - split);
        if w < 2.0 || h < 2.0 || w > width || h > height {
            continue;
        }
        let cx = if w < width {
            rng.gen_range(0.5 * w..=width - 0.5 * w)
        } else {
            0.5 * width
        };
        let cy = if h < height {
            rng.gen_range(0.5 * h..=height - 0.5 * h)
        } else {
            0.5 * height
        };
        placed = Some((z_try, BBox::new(cx, cy, w, h)));
        break;
    }
    let (z, bbox) = placed.ok_or(SynthError::BboxDoesNotFit {
        polyp: polyp.polyp_id.0,
        attempts: scene.retry_budget,
    })?;

    let n = scene.map_size;
    let frame = MapFrame::new(width, height, n, n);
    let gx = scene.background_gradient * rng.gen_range(-1.0..=1.0);
    let gy = scene.background_gradient * rng.gen_range(-1.0..=1.0);
    let background = z * (1.0 + scene.relief_fraction);
    let mut metric = Vec::with_capacity(n * n);
    let mut inside = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = frame.cell_center(row, col);
            let bg = background * (1.0 + gx * (x / width - 0.5) + gy * (y / height - 0.5));
            let u = (x - bbox.cx) / (0.5 * bbox.w);
            let v = (y - bbox.cy) / (0.5 * bbox.h);
            let r2 = u * u + v * v;
            let (d, on_polyp) = if r2 < 1.0 {
                let dome = z * (1.0 + scene.relief_fraction * (1.0 - (1.0 - r2).sqrt()));
                (dome.min(bg), true)
            } else {
                (bg, false)
            };
            let noise = if scene.depth_noise_sigma > 0.0 {
                (scene.depth_noise_sigma * std_normal(rng)).exp()
            } else {
                1.0
            };
            metric.push(d * noise);
            inside.push(on_polyp);
        }
    }

    // Scale-free output of a monocular estimator: the scene normalized by its
    // own median depth, times an unknown log-uniform multiplier.
    let [lo, hi] = scene.normalizer_range;
    let normalizer = lower_median(&metric).expect("non-empty map") * log_uniform(lo, hi, rng);
    let relative: Vec<f32> = metric.iter().map(|&d| (d / normalizer) as f32).collect();

    let p_raw = photometry.source_constant_k / (z * z)
        * (photometry.luminance_noise_sigma * std_normal(rng)).exp();
    let (p, gain) = if photometry.auto_exposure_enabled {
        let p = if photometry.ae_tolerance > 0.0 {
            photometry.ae_target_luminance
                + rng.gen_range(-photometry.ae_tolerance..=photometry.ae_tolerance)
        } else {
            photometry.ae_target_luminance
        };
        (p, p / p_raw)
    } else {
        (p_raw, 1.0)
    };
    let appearance: Vec<f32> = metric
        .iter()
        .zip(&inside)
        .map(|(&d, &on_polyp)| {
            let albedo = if on_polyp { scene.polyp_albedo } else { 1.0 };
            let noise = if photometry.luminance_noise_sigma > 0.0 {
                (photometry.luminance_noise_sigma * std_normal(rng)).exp()
            } else {
                1.0
            };
            (gain * photometry.source_constant_k * albedo / (d * d) * noise) as f32
        })
        .collect();

    Ok(FrameSample {
        frame_id,
        polyp_id: polyp.polyp_id,
        patient_id: polyp.patient_id,
        center: polyp.center,
        intrinsics: *intrinsics,
        hidden_true_z_mm: z,
        apparent_bbox: bbox,
        gt_mask_bbox: bbox,
        relative_depth: Grid::from_vec(n, n, relative).expect("n*n entries"),
        background_luminance: p,
        appearance: Grid::from_vec(n, n, appearance).expect("n*n entries"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, keyed};
    use crate::stats::{pearson, spearman};
    use crate::synthgen::{ConfoundConfig, PatientId, PolypId, SizeClass};

    fn polyp(d: f64) -> PolypInstance {
        PolypInstance {
            polyp_id: PolypId(0),
            patient_id: PatientId(0),
            true_diameter_mm: d,
            size_class: SizeClass::from_diameter(d),
            center: 0,
        }
    }

    #[test]
    fn confound_off_gives_base_distance() {
        let cfg = ConfoundConfig {
            rho: 0.0,
            distance_noise_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = keyed(1, domain::POLYP, 0);
        for s in [1.0, 4.0, 12.0, 25.0] {
            assert_eq!(
                sample_behavior_distance(s, &cfg, &mut rng).unwrap(),
                cfg.base_distance_mm
            );
        }
    }

    #[test]
    fn full_confound_doubles_distance_with_size() {
        let cfg = ConfoundConfig {
            rho: 1.0,
            gamma: 1.0,
            distance_noise_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = keyed(1, domain::POLYP, 0);
        let z8 = sample_behavior_distance(8.0, &cfg, &mut rng).unwrap();
        let z4 = sample_behavior_distance(4.0, &cfg, &mut rng).unwrap();
        assert!((z8 / z4 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn independence_without_confound() {
        use rand::Rng;
        let cfg = ConfoundConfig {
            rho: 0.0,
            distance_noise_sigma: 0.3,
            ..Default::default()
        };
        let mut rng = keyed(2, domain::POLYP, 0);
        let (s, z): (Vec<f64>, Vec<f64>) = (0..10_000)
            .map(|_| {
                let s = rng.gen_range(1.0..25.0);
                (s, sample_behavior_distance(s, &cfg, &mut rng).unwrap())
            })
            .unzip();
        let r = pearson(&s, &z);
        assert!(r.abs() <= 0.05, "corr = {r}");
    }

    #[test]
    fn strong_confound_ranks_distance_by_size() {
        use rand::Rng;
        let cfg = ConfoundConfig {
            rho: 1.0,
            distance_noise_sigma: 0.1,
            ..Default::default()
        };
        let mut rng = keyed(3, domain::POLYP, 0);
        let (s, z): (Vec<f64>, Vec<f64>) = (0..10_000)
            .map(|_| {
                let s = rng.gen_range(1.0..25.0);
                (s, sample_behavior_distance(s, &cfg, &mut rng).unwrap())
            })
            .unzip();
        assert!(spearman(&s, &z) > 0.8);
    }

    #[test]
    fn rejects_non_positive_size() {
        let mut rng = keyed(1, domain::POLYP, 0);
        assert!(sample_behavior_distance(0.0, &ConfoundConfig::default(), &mut rng).is_err());
    }

    fn quiet_scene() -> SceneConfig {
        SceneConfig {
            bbox_size_jitter_sigma: 0.0,
            depth_noise_sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn inverse_square_without_auto_exposure() {
        let photometry = PhotometryConfig {
            auto_exposure_enabled: false,
            luminance_noise_sigma: 0.0,
            ..Default::default()
        };
        let mut rng = keyed(4, domain::POLYP, 0);
        for z in [10.0, 17.0, 33.0] {
            let f = render_frame(
                &polyp(4.0),
                FrameId(0),
                z,
                &CameraIntrinsics::default(),
                &quiet_scene(),
                &photometry,
                &mut rng,
            )
            .unwrap();
            let pz2 = f.background_luminance * f.hidden_true_z_mm.powi(2);
            assert!(
                (pz2 - photometry.source_constant_k).abs() <= 1e-9 * photometry.source_constant_k
            );
        }
    }

    #[test]
    fn apparent_extent_follows_projection_without_jitter() {
        let intrinsics = CameraIntrinsics::default();
        let mut rng = keyed(5, domain::POLYP, 0);
        for (s, z) in [(3.0, 12.0), (7.5, 25.0), (20.0, 40.0)] {
            let f = render_frame(
                &polyp(s),
                FrameId(0),
                z,
                &intrinsics,
                &quiet_scene(),
                &PhotometryConfig::default(),
                &mut rng,
            )
            .unwrap();
            let expected = intrinsics.focal_length_px * s / z;
            assert!((f.apparent_bbox.mean_extent() - expected).abs() <= 1e-12 * expected);
        }
    }

    #[test]
    fn auto_exposure_decouples_luminance_from_distance() {
        use rand_distr::{Distribution, Normal};
        let mut rng = keyed(6, domain::POLYP, 0);
        let z_dist = Normal::new(20f64.ln(), 0.4).unwrap();
        let photometry = PhotometryConfig::default();
        assert!(photometry.auto_exposure_enabled);
        let scene = SceneConfig {
            map_size: 8,
            ..Default::default()
        };
        let (p, z): (Vec<f64>, Vec<f64>) = (0..1000)
            .map(|_| {
                let z = z_dist.sample(&mut rng).exp();
                let f = render_frame(
                    &polyp(4.0),
                    FrameId(0),
                    z,
                    &CameraIntrinsics::default(),
                    &scene,
                    &photometry,
                    &mut rng,
                )
                .unwrap();
                (f.background_luminance, f.hidden_true_z_mm)
            })
            .unzip();
        let r = pearson(&p, &z);
        assert!(r.abs() <= 0.1, "corr = {r}");
    }

    #[test]
    fn oversized_polyp_fails_after_retries() {
        let mut rng = keyed(7, domain::POLYP, 0);
        let scene = SceneConfig {
            retry_jitter_sigma: 0.0,
            ..Default::default()
        };
        let err = render_frame(
            &polyp(25.0),
            FrameId(0),
            5.0,
            &CameraIntrinsics::default(),
            &scene,
            &PhotometryConfig::default(),
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, SynthError::BboxDoesNotFit { polyp: 0, .. }));
    }
}
