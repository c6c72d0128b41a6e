//! Axis-aligned box arithmetic in continuous pixel coordinates.
//!
//! Boxes are closed intervals `[x_min, x_max] × [y_min, y_max]` with the
//! origin at the top-left corner of the image. All functions are pure.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Default distance, in pixels, under which a box side counts as touching
/// the image border.
pub const DEFAULT_EDGE_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a box from corner coordinates, rejecting inverted or
    /// non-finite boxes.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite(coords));
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::Inverted(coords));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from COCO `[x, y, width, height]` form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite([x, y, w, h]));
        }
        if w < 0.0 || h < 0.0 {
            return Err(GeometryError::NegativeExtent([x, y, w, h]));
        }
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn aspect(&self) -> f64 {
        aspect(self.width(), self.height())
    }

    /// Area of the intersection with `other`; zero when disjoint.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// Geometry of the whole image a set of detections belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
}

impl ImageMeta {
    pub fn new(image_id: u64, width: f64, height: f64) -> Result<Self, GeometryError> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(GeometryError::InvalidImageSize { width, height });
        }
        Ok(Self {
            image_id,
            width,
            height,
        })
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn aspect(&self) -> f64 {
        aspect(self.width, self.height)
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    b.width() * b.height()
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU together with the intersection measured against each box's own area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapRatios {
    pub iou: f64,
    pub inter_over_a: f64,
    pub inter_over_b: f64,
}

pub fn overlap_ratios(a: &BoundingBox, b: &BoundingBox) -> OverlapRatios {
    let inter = a.intersection_area(b);
    let (area_a, area_b) = (a.area(), b.area());
    let union = area_a + area_b - inter;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    OverlapRatios {
        iou: ratio(inter, union),
        inter_over_a: ratio(inter, area_a),
        inter_over_b: ratio(inter, area_b),
    }
}

/// Euclidean distance between the centers and the direction from the center
/// of `a` to the center of `b`, in `(-π, π]`. Coincident centers give angle 0.
pub fn distance_angle(a: &BoundingBox, b: &BoundingBox) -> (f64, f64) {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (dx, dy) = (bx - ax, by - ay);
    if dx == 0.0 && dy == 0.0 {
        return (0.0, 0.0);
    }
    let angle = dy.atan2(dx);
    // atan2(-0.0, negative) lands on -π, which is outside the half-open range.
    let angle = if angle <= -PI { PI } else { angle };
    (dx.hypot(dy), angle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EdgeFlags {
    pub left: bool,
    pub right: bool,
    pub top: bool,
    pub bottom: bool,
}

impl EdgeFlags {
    pub fn as_array(&self) -> [bool; 4] {
        [self.left, self.right, self.top, self.bottom]
    }
}

/// Which image borders the box lies within `tol` pixels of.
pub fn edge_flags(b: &BoundingBox, img: &ImageMeta, tol: f64) -> EdgeFlags {
    EdgeFlags {
        left: b.x_min <= tol,
        right: img.width - b.x_max <= tol,
        top: b.y_min <= tol,
        bottom: img.height - b.y_max <= tol,
    }
}

/// `width / (width + height)`, bounded in `[0, 1]`; 0.5 for an empty extent.
pub fn aspect(width: f64, height: f64) -> f64 {
    let total = width + height;
    if total > 0.0 {
        width / total
    } else {
        0.5
    }
}
