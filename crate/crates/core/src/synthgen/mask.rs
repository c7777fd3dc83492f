use std::f64::consts::TAU;

use rand::Rng;

use super::SynthError;
use crate::bbox::BBox;

const IOU_TOLERANCE: f64 = 0.02;
const DIRECTION_ATTEMPTS: usize = 64;

/// Simulated segmentation output with a prescribed overlap with `gt`.
///
/// Draws a random direction in (translation, log-scale) space and bisects on
/// the step length until the clipped box's IoU with `gt` is within 0.02 of
/// `target_iou`. Directions that cannot reach the target inside the image are
/// redrawn.
pub fn degrade_mask(
    gt: &BBox,
    target_iou: f64,
    image_width: f64,
    image_height: f64,
    rng: &mut impl Rng,
) -> Result<BBox, SynthError> {
    if !(0.05..=1.0).contains(&target_iou) {
        return Err(SynthError::TargetIouOutOfRange(target_iou));
    }
    if target_iou >= 1.0 {
        return Ok(*gt);
    }
    let mut best = 0.0f64;
    for _ in 0..DIRECTION_ATTEMPTS {
        let theta = rng.gen_range(0.0..TAU);
        let share = rng.gen_range(0.0..1.0);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (dx, dy, ds) = (
            theta.cos() * (1.0 - share),
            theta.sin() * (1.0 - share),
            sign * share,
        );
        let at = |t: f64| {
            let grow = (t * ds).exp();
            BBox::new(
                gt.cx + t * dx * gt.w,
                gt.cy + t * dy * gt.h,
                gt.w * grow,
                gt.h * grow,
            )
            .clip_to(image_width, image_height)
        };
        let iou = |t: f64| {
            let b = at(t);
            if b.is_degenerate() {
                0.0
            } else {
                b.iou(gt)
            }
        };

        let mut hi = 0.25;
        while iou(hi) >= target_iou && hi < 64.0 {
            hi *= 2.0;
        }
        if iou(hi) >= target_iou {
            continue;
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if iou(mid) >= target_iou {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let out = at(lo);
        let achieved = iou(lo);
        if !out.is_degenerate() && (achieved - target_iou).abs() <= IOU_TOLERANCE {
            return Ok(out);
        }
        best = best.max(achieved);
    }
    Err(SynthError::IouNotReached {
        target: target_iou,
        best,
    })
}
