//! Axis-aligned boxes in image pixel coordinates and their rasterization onto
//! map grids.
//!
//! Image coordinates are continuous: the image spans `[0, width] × [0, height]`
//! and a map of `cols × rows` cells tiles that rectangle uniformly.

use serde::{Deserialize, Serialize};

/// Center/size parameterized box, all values in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Mean of width and height: the apparent diameter `A`.
    pub fn mean_extent(&self) -> f64 {
        0.5 * (self.w + self.h)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite())
    }

    pub fn fits_in(&self, width: f64, height: f64) -> bool {
        self.x0() >= 0.0 && self.y0() >= 0.0 && self.x1() <= width && self.y1() <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let ix = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let iy = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        ix * iy
    }

    /// Intersection over union; zero when both boxes are empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Intersects with the image rectangle. The result may be degenerate.
    pub fn clip_to(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x0().clamp(0.0, width);
        let x1 = self.x1().clamp(0.0, width);
        let y0 = self.y0().clamp(0.0, height);
        let y1 = self.y1().clamp(0.0, height);
        BBox::from_corners(x0, y0, x1, y1)
    }

    /// Scales width and height by `factor` about the center.
    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(self.cx, self.cy, self.w * factor, self.h * factor)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }
}

/// Mapping between image pixel coordinates and a map grid covering the image.
#[derive(Debug, Clone, Copy)]
pub struct MapFrame {
    pub image_width: f64,
    pub image_height: f64,
    pub cols: usize,
    pub rows: usize,
}

impl MapFrame {
    pub fn new(image_width: f64, image_height: f64, cols: usize, rows: usize) -> Self {
        Self {
            image_width,
            image_height,
            cols,
            rows,
        }
    }

    pub fn cell_width(&self) -> f64 {
        self.image_width / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.image_height / self.rows as f64
    }

    /// Image coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.cell_width(),
            (row as f64 + 0.5) * self.cell_height(),
        )
    }

    /// Cells whose centers lie inside `bbox` (row-major flat indices). Falls
    /// back to the single cell containing the box center when the box is too
    /// small to cover any center.
    pub fn interior_cells(&self, bbox: &BBox) -> Vec<usize> {
        let mut cells = Vec::new();
        for row in 0..self.rows {
            let (_, y) = self.cell_center(row, 0);
            if y < bbox.y0() || y > bbox.y1() {
                continue;
            }
            for col in 0..self.cols {
                let (x, _) = self.cell_center(row, col);
                if x >= bbox.x0() && x <= bbox.x1() {
                    cells.push(row * self.cols + col);
                }
            }
        }
        if cells.is_empty() {
            let col =
                ((bbox.cx / self.cell_width()).floor() as isize).clamp(0, self.cols as isize - 1);
            let row =
                ((bbox.cy / self.cell_height()).floor() as isize).clamp(0, self.rows as isize - 1);
            cells.push(row as usize * self.cols + col as usize);
        }
        cells
    }

    /// Fraction of each cell's area covered by `bbox`, row-major.
    pub fn coverage(&self, bbox: &BBox) -> Vec<f64> {
        let cw = self.cell_width();
        let ch = self.cell_height();
        let overlap = |lo: f64, hi: f64, a: f64, b: f64| (hi.min(b) - lo.max(a)).max(0.0);
        let col_cover: Vec<f64> = (0..self.cols)
            .map(|c| overlap(c as f64 * cw, (c + 1) as f64 * cw, bbox.x0(), bbox.x1()) / cw)
            .collect();
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let ry = overlap(r as f64 * ch, (r + 1) as f64 * ch, bbox.y0(), bbox.y1()) / ch;
            out.extend(col_cover.iter().map(|cx| cx * ry));
        }
        out
    }
}
