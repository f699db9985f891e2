//! Axis-aligned boxes in center form and the pairwise spatial descriptor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box stored as center, width and height (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr")]
pub struct BoundingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Deserialize)]
struct BoxRepr {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<BoxRepr> for BoundingBox {
    type Error = Error;

    fn try_from(r: BoxRepr) -> Result<Self> {
        Self::new(r.x, r.y, r.w, r.h)
    }
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite box [{x}, {y}, {w}, {h}]"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!(
                "degenerate box: width {w}, height {h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from corner form `(xmin, ymin, xmax, ymax)`.
    pub fn from_corners(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        Self::new(
            0.5 * (xmin + xmax),
            0.5 * (ymin + ymax),
            xmax - xmin,
            ymax - ymin,
        )
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `[xmin, ymin, xmax, ymax]`
    pub fn corners(&self) -> [f64; 4] {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [self.x - hw, self.y - hh, self.x + hw, self.y + hh]
    }

    /// Scales position and size by `factor` about the origin.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.x * factor,
            self.y * factor,
            self.w * factor,
            self.h * factor,
        )
    }
}

fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    if iw <= 0.0 || ih <= 0.0 {
        0.0
    } else {
        iw * ih
    }
}

/// Intersection over union. Boxes touching along an edge have IoU 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Tightest axis-aligned box enclosing both inputs.
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let (x0, y0, x1, y1) = (ax0.min(bx0), ay0.min(by0), ax1.max(bx1), ay1.max(by1));
    // Both inputs have positive extent, so the enclosing box does too.
    BoundingBox {
        x: 0.5 * (x0 + x1),
        y: 0.5 * (y0 + y1),
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Number of entries in [`spatial_vector`].
pub const SPATIAL_DIM: usize = 6;

/// Six-dimensional configuration of an ordered (subject, object) box pair:
/// translation normalized by the subject scale, relative size, overlap, and
/// the two aspect ratios. Every entry is invariant to uniform rescaling.
pub fn spatial_vector(subject: &BoundingBox, object: &BoundingBox) -> [f64; SPATIAL_DIM] {
    let scale = subject.area().sqrt();
    [
        (object.x - subject.x) / scale,
        (object.y - subject.y) / scale,
        (object.area() / subject.area()).sqrt(),
        iou(subject, object),
        subject.w / subject.h,
        object.w / object.h,
    ]
}
