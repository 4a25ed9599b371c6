//! Coordinate-space primitives: boxes, points, IoU and frame conversions.
//!
//! All coordinates are continuous `f64` values. Pixel values are only rounded
//! when actual raster data is sliced (see [`crate::imaging`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: corners out of order or non-finite")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
}

/// Width and height of an image in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn w(&self) -> f64 {
        f64::from(self.width)
    }

    pub fn h(&self) -> f64 {
        f64::from(self.height)
    }

    /// The box covering the whole image.
    pub fn full_box(&self) -> PixelBox {
        PixelBox {
            x1: 0.0,
            y1: 0.0,
            x2: self.w(),
            y2: self.h(),
        }
    }
}

/// A point in pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A point in normalized image coordinates, both axes in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormPoint {
    pub x: f64,
    pub y: f64,
}

impl NormPoint {
    /// Builds a point, clamping each axis into `[0, 1]`.
    pub fn clamped(x: f64, y: f64) -> Self {
        Self {
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
        }
    }

    pub fn to_pixel(&self, dims: ImageDims) -> PixelPoint {
        PixelPoint::new(self.x * dims.w(), self.y * dims.h())
    }
}

/// Axis-aligned box `[x1, y1, x2, y2]`. Zero-extent boxes are legal and stand
/// for point predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let all_finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !all_finite || x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from two arbitrary corners, reordering them as needed.
    pub fn from_corners(ax: f64, ay: f64, bx: f64, by: f64) -> Result<Self, GeometryError> {
        Self::new(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))
    }

    /// Zero-extent box at a point.
    pub fn point(x: f64, y: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x, y)
    }

    /// Box of the given size centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        let (hw, hh) = (width.max(0.0) / 2.0, height.max(0.0) / 2.0);
        Self::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> PixelPoint {
        center(self)
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: &PixelPoint) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn contains_box(&self, other: &PixelBox) -> bool {
        other.x1 >= self.x1 && other.x2 <= self.x2 && other.y1 >= self.y1 && other.y2 <= self.y2
    }

    pub fn intersection(&self, other: &PixelBox) -> Option<PixelBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 <= x2 && y1 <= y2).then_some(PixelBox { x1, y1, x2, y2 })
    }

    /// Clamps every coordinate into `[0, W] x [0, H]`.
    pub fn clamp_to(&self, dims: ImageDims) -> PixelBox {
        let (w, h) = (dims.w(), dims.h());
        PixelBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> PixelBox {
        PixelBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> PixelBox {
        PixelBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for PixelBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        PixelBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        b.as_array()
    }
}

/// Center of a box; this is the click location a box stands for.
pub fn center(b: &PixelBox) -> PixelPoint {
    PixelPoint::new((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)
}

/// Intersection over union. Zero union area (two point boxes, even coincident
/// ones) yields 0 so pure point predictions never count as agreeing.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn to_norm_point(p: PixelPoint, dims: ImageDims) -> NormPoint {
    NormPoint::clamped(p.x / dims.w(), p.y / dims.h())
}
