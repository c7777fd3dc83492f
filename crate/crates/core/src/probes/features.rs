//! Hand-crafted per-frame features and the masked map input of the CNNs.

use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::bbox::{BBox, MapFrame};
use crate::geometry::CameraIntrinsics;
use crate::grid::Grid;
use crate::stats::{lower_median, mean, population_variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Geometric,
    Photometric,
}

impl FeatureGroup {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "geometric" => Some(Self::Geometric),
            "photometric" => Some(Self::Photometric),
            _ => None,
        }
    }
}

pub const GEOMETRIC_FEATURES: [&str; 11] = [
    "apparent_area_frac",
    "aspect_ratio",
    "center_offset_x",
    "center_offset_y",
    "log_bbox_diagonal",
    "depth_mean",
    "depth_median",
    "depth_std",
    "depth_min",
    "depth_max",
    "depth_contrast",
];

pub const PHOTOMETRIC_FEATURES: [&str; 5] = [
    "background_luminance",
    "log_background_luminance",
    "bbox_luminance_mean",
    "bbox_luminance_std",
    "luminance_gradient",
];

pub const CORRECTED_SIZE_FEATURE: &str = "photometric_corrected_size";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub group: FeatureGroup,
    pub value: f64,
}

/// Named, group-tagged feature values in schema order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub entries: Vec<Feature>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|f| f.name == name)
            .map(|f| f.value)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|f| f.name.clone()).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|f| f.value).collect()
    }

    pub fn push(&mut self, name: &str, group: FeatureGroup, value: f64) {
        self.entries.push(Feature {
            name: name.to_string(),
            group,
            value,
        });
    }
}

/// Observable content of one frame as a probe sees it: the active box, the
/// (possibly rescaled) depth map, the appearance map and the luminance summary.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub intrinsics: &'a CameraIntrinsics,
    pub bbox: BBox,
    pub depth: &'a Grid<f32>,
    pub appearance: &'a Grid<f32>,
    pub background_luminance: f64,
}

impl FrameView<'_> {
    fn map_frame(&self) -> MapFrame {
        MapFrame::new(
            self.intrinsics.width(),
            self.intrinsics.height(),
            self.depth.width(),
            self.depth.height(),
        )
    }
}

/// Robust depth of the box: lower median of the map over the cells whose
/// centers fall inside it.
pub fn depth_anchor(depth: &Grid<f32>, intrinsics: &CameraIntrinsics, bbox: &BBox) -> f64 {
    let frame = MapFrame::new(
        intrinsics.width(),
        intrinsics.height(),
        depth.width(),
        depth.height(),
    );
    let values: Vec<f64> = frame
        .interior_cells(bbox)
        .into_iter()
        .map(|i| f64::from(depth.as_slice()[i]))
        .collect();
    lower_median(&values).unwrap_or(f64::NAN)
}

pub fn extract_features(view: &FrameView<'_>) -> Result<FeatureVector, ProbeError> {
    let b = view.bbox;
    if b.is_degenerate() || !b.area().is_finite() {
        return Err(ProbeError::Extraction("degenerate bounding box".into()));
    }
    if view.depth.width() != view.appearance.width()
        || view.depth.height() != view.appearance.height()
    {
        return Err(ProbeError::Extraction(
            "depth and appearance maps differ in shape".into(),
        ));
    }
    let (w, h) = (view.intrinsics.width(), view.intrinsics.height());
    let frame = view.map_frame();
    let interior = frame.interior_cells(&b);
    let mut outside = vec![true; view.depth.len()];
    for &i in &interior {
        outside[i] = false;
    }
    let pick = |map: &Grid<f32>, cells: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
        cells.map(|i| f64::from(map.as_slice()[i])).collect()
    };
    let d_in = pick(view.depth, &mut interior.iter().copied());
    let d_out = pick(view.depth, &mut (0..outside.len()).filter(|&i| outside[i]));
    let l_in = pick(view.appearance, &mut interior.iter().copied());

    let d_median = lower_median(&d_in).unwrap_or(f64::NAN);
    let contrast = match lower_median(&d_out) {
        Some(bg) if bg > 0.0 => d_median / bg,
        _ => 1.0,
    };
    let p = view.background_luminance;
    if !(p > 0.0) {
        return Err(ProbeError::Extraction(format!(
            "background luminance {p} is not positive"
        )));
    }

    let mut fv = FeatureVector::default();
    let g = FeatureGroup::Geometric;
    fv.push("apparent_area_frac", g, (b.area() / (w * h)).min(1.0));
    fv.push("aspect_ratio", g, b.w / b.h);
    fv.push("center_offset_x", g, b.cx / w - 0.5);
    fv.push("center_offset_y", g, b.cy / h - 0.5);
    fv.push("log_bbox_diagonal", g, b.diagonal().ln());
    fv.push("depth_mean", g, mean(&d_in));
    fv.push("depth_median", g, d_median);
    fv.push("depth_std", g, population_variance(&d_in).sqrt());
    fv.push(
        "depth_min",
        g,
        d_in.iter().copied().fold(f64::INFINITY, f64::min),
    );
    fv.push(
        "depth_max",
        g,
        d_in.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    fv.push("depth_contrast", g, contrast);

    let ph = FeatureGroup::Photometric;
    fv.push("background_luminance", ph, p);
    fv.push("log_background_luminance", ph, p.ln());
    fv.push("bbox_luminance_mean", ph, mean(&l_in));
    fv.push("bbox_luminance_std", ph, population_variance(&l_in).sqrt());
    fv.push(
        "luminance_gradient",
        ph,
        gradient_magnitude(view.appearance, &interior),
    );

    if let Some(bad) = fv.entries.iter().find(|f| !f.value.is_finite()) {
        return Err(ProbeError::Extraction(format!(
            "feature {} is not finite",
            bad.name
        )));
    }
    Ok(fv)
}

/// Mean forward-difference gradient magnitude over the given cells.
fn gradient_magnitude(map: &Grid<f32>, cells: &[usize]) -> f64 {
    let (w, h) = (map.width(), map.height());
    let v = |r: usize, c: usize| f64::from(map.get(r, c));
    let mags: Vec<f64> = cells
        .iter()
        .map(|&i| {
            let (r, c) = (i / w, i % w);
            let gx = if c + 1 < w {
                v(r, c + 1) - v(r, c)
            } else {
                0.0
            };
            let gy = if r + 1 < h {
                v(r + 1, c) - v(r, c)
            } else {
                0.0
            };
            gx.hypot(gy)
        })
        .collect();
    mean(&mags)
}

/// Full-frame map weighted by the box's per-cell coverage (zero outside the
/// box), area-resampled to `side × side`. Resampling averages, so the mean of
/// the resized coverage equals the box's area fraction.
pub fn masked_map_input(
    map: &Grid<f32>,
    intrinsics: &CameraIntrinsics,
    bbox: &BBox,
    side: usize,
) -> Vec<f32> {
    let frame = MapFrame::new(
        intrinsics.width(),
        intrinsics.height(),
        map.width(),
        map.height(),
    );
    let coverage = frame.coverage(bbox);
    let masked: Vec<f64> = map
        .as_slice()
        .iter()
        .zip(&coverage)
        .map(|(&v, &c)| f64::from(v) * c)
        .collect();
    area_resize(&masked, map.width(), map.height(), side)
        .into_iter()
        .map(|v| v as f32)
        .collect()
}

/// Box-filter resampling of a `w × h` grid onto `side × side` cells.
pub fn area_resize(src: &[f64], w: usize, h: usize, side: usize) -> Vec<f64> {
    let weights = |n: usize| -> Vec<Vec<(usize, f64)>> {
        // Source cell j covers [j, j+1) in source units; target cell i covers
        // [i·n/side, (i+1)·n/side).
        let scale = n as f64 / side as f64;
        (0..side)
            .map(|i| {
                let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
                (lo.floor() as usize..(hi.ceil() as usize).min(n))
                    .filter_map(|j| {
                        let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                        (overlap > 0.0).then_some((j, overlap / scale))
                    })
                    .collect()
            })
            .collect()
    };
    let (wx, wy) = (weights(w), weights(h));
    let mut out = vec![0.0; side * side];
    for (r, row_w) in wy.iter().enumerate() {
        for (c, col_w) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sr, fr) in row_w {
                for &(sc, fc) in col_w {
                    acc += fr * fc * src[sr * w + sc];
                }
            }
            out[r * side + c] = acc;
        }
    }
    out
}
