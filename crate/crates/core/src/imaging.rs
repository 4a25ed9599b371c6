//! Screenshot rasters: decoding, cropping, resizing, PNG encoding and
//! case-study overlays.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crop::Axes;
use crate::geometry::{ImageDims, PixelBox, PixelPoint};

/// Default pixel budget for images sent to the model (16384 * 28 * 28, the
/// usual `max_pixels` of Qwen2.5-VL style processors).
pub const DEFAULT_MAX_PIXELS: u64 = 12_845_056;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image not found: {0}")]
    NotFound(String),
    #[error("failed to read image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode image {path}: {message}")]
    Decode { path: String, message: String },
    #[error("failed to encode image: {0}")]
    Encode(String),
    #[error("crop window does not overlap the image")]
    EmptyWindow,
}

impl ImagingError {
    pub fn code(&self) -> &'static str {
        match self {
            ImagingError::NotFound(_) => "io.image_not_found",
            ImagingError::Io { .. } => "io.image_read",
            ImagingError::Decode { .. } => "io.image_decode",
            ImagingError::Encode(_) => "io.image_encode",
            ImagingError::EmptyWindow => "imaging.empty_window",
        }
    }
}

/// An 8-bit RGB screenshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Screenshot {
    pub dims: ImageDims,
    pub raster: RgbImage,
    pub source_path: Option<String>,
}

impl Screenshot {
    pub fn from_rgb(raster: RgbImage) -> Self {
        let dims = ImageDims {
            width: raster.width().max(1),
            height: raster.height().max(1),
        };
        Self {
            dims,
            raster,
            source_path: None,
        }
    }

    /// Decodes a PNG or JPEG file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ImagingError::NotFound(shown.clone()),
            _ => ImagingError::Io {
                path: shown.clone(),
                source: e,
            },
        })?;
        let mut shot = Self::decode(&bytes).map_err(|e| match e {
            ImagingError::Decode { message, .. } => ImagingError::Decode {
                path: shown.clone(),
                message,
            },
            other => other,
        })?;
        shot.source_path = Some(shown);
        Ok(shot)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ImagingError> {
        let img = image::load_from_memory(bytes).map_err(|e| ImagingError::Decode {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        if img.width() == 0 || img.height() == 0 {
            return Err(ImagingError::Decode {
                path: "<memory>".into(),
                message: "zero-sized image".into(),
            });
        }
        Ok(Self::from_rgb(img.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let mut buf = Cursor::new(Vec::new());
        self.raster
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        self.raster
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| ImagingError::Encode(e.to_string()))
    }
}

/// Integer pixel rectangle `[x, x + width) x [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRegion {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRegion {
    pub fn as_box(&self) -> PixelBox {
        PixelBox {
            x1: f64::from(self.x),
            y1: f64::from(self.y),
            x2: f64::from(self.x + self.width),
            y2: f64::from(self.y + self.height),
        }
    }
}

/// Rounds a continuous window half away from zero and intersects it with the
/// image. `None` when nothing is left.
pub fn pixel_region(window: &PixelBox, dims: ImageDims) -> Option<PixelRegion> {
    let x0 = window.x1.round().max(0.0);
    let y0 = window.y1.round().max(0.0);
    let x1 = window.x2.round().min(dims.w());
    let y1 = window.y2.round().min(dims.h());
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(PixelRegion {
        x: x0 as u32,
        y: y0 as u32,
        width: (x1 - x0) as u32,
        height: (y1 - y0) as u32,
    })
}

/// Sub-raster under `window`; returns the image and the integer region used.
pub fn crop(img: &Screenshot, window: &PixelBox) -> Result<(Screenshot, PixelRegion), ImagingError> {
    let region = pixel_region(window, img.dims).ok_or(ImagingError::EmptyWindow)?;
    let raster = image::imageops::crop_imm(&img.raster, region.x, region.y, region.width, region.height).to_image();
    let mut out = Screenshot::from_rgb(raster);
    out.source_path = img.source_path.clone();
    Ok((out, region))
}

/// Resolution policy applied before an image is sent to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ResizePolicy {
    None,
    MaxPixels { pixels: u64 },
    MaxSide { side: u32 },
}

impl Default for ResizePolicy {
    fn default() -> Self {
        ResizePolicy::MaxPixels {
            pixels: DEFAULT_MAX_PIXELS,
        }
    }
}

impl std::str::FromStr for ResizePolicy {
    type Err = String;

    /// `none`, `max_pixels:N` or `max_side:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mode, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |a: &str| -> Result<u64, String> {
            a.parse::<u64>()
                .ok()
                .filter(|v| *v > 0)
                .ok_or_else(|| format!("resize policy `{s}` needs a positive integer"))
        };
        match mode {
            "none" => Ok(Self::None),
            "max_pixels" => Ok(Self::MaxPixels { pixels: num(arg)? }),
            "max_side" => Ok(Self::MaxSide {
                side: u32::try_from(num(arg)?).map_err(|e| e.to_string())?,
            }),
            _ => Err(format!("unknown resize policy `{s}` (none|max_pixels:N|max_side:N)")),
        }
    }
}

/// Target dimensions under `policy`, never upscaling.
pub fn resized_dims(dims: ImageDims, policy: ResizePolicy) -> ImageDims {
    let (w, h) = (u64::from(dims.width), u64::from(dims.height));
    match policy {
        ResizePolicy::None => dims,
        ResizePolicy::MaxSide { side } => {
            let longer = w.max(h);
            if longer <= u64::from(side) {
                return dims;
            }
            let scale = f64::from(side) / longer as f64;
            ImageDims {
                width: ((w as f64 * scale).round() as u32).clamp(1, side),
                height: ((h as f64 * scale).round() as u32).clamp(1, side),
            }
        }
        ResizePolicy::MaxPixels { pixels } => {
            if w * h <= pixels {
                return dims;
            }
            let scale = (pixels as f64 / (w * h) as f64).sqrt();
            let mut nw = ((w as f64 * scale).floor() as u64).max(1);
            let mut nh = ((h as f64 * scale).floor() as u64).max(1);
            while nw * nh > pixels && (nw > 1 || nh > 1) {
                if nw >= nh {
                    nw -= 1;
                } else {
                    nh -= 1;
                }
            }
            ImageDims {
                width: nw as u32,
                height: nh as u32,
            }
        }
    }
}

/// Bilinear resize. The returned scale factors are `new / old` per axis.
pub fn resize(img: &Screenshot, policy: ResizePolicy) -> (Screenshot, Axes) {
    let target = resized_dims(img.dims, policy);
    if target == img.dims {
        return (img.clone(), Axes::new(1.0, 1.0));
    }
    let raster = image::imageops::resize(&img.raster, target.width, target.height, FilterType::Triangle);
    let mut out = Screenshot::from_rgb(raster);
    out.source_path = img.source_path.clone();
    let scale = Axes::new(target.w() / img.dims.w(), target.h() / img.dims.h());
    (out, scale)
}

/// Overlay layers, drawn in the case-study color scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Sampled candidate boxes (blue).
    Candidate,
    /// Zoom-in crop window (red).
    CropRegion,
    /// Ground-truth element (green).
    GroundTruth,
    /// Final click (yellow).
    FinalPoint,
}

impl LayerKind {
    pub fn color(&self) -> Rgb<u8> {
        match self {
            LayerKind::Candidate => Rgb([30, 100, 255]),
            LayerKind::CropRegion => Rgb([230, 30, 30]),
            LayerKind::GroundTruth => Rgb([20, 180, 60]),
            LayerKind::FinalPoint => Rgb([255, 215, 0]),
        }
    }
}

/// Stroke width scaled to the image, at least 2 px.
pub fn default_thickness(dims: ImageDims) -> u32 {
    (dims.width.min(dims.height) / 400).max(2)
}

pub fn annotate(img: &Screenshot, layers: &[(PixelBox, LayerKind)]) -> Screenshot {
    annotate_with(img, layers, default_thickness(img.dims))
}

/// Draws each layer in order. Boxes get an inner border of `thickness`
/// pixels; final points and zero-area boxes get a cross marker.
pub fn annotate_with(img: &Screenshot, layers: &[(PixelBox, LayerKind)], thickness: u32) -> Screenshot {
    let mut out = img.clone();
    let t = thickness.max(1);
    for (b, kind) in layers {
        let color = kind.color();
        let region = pixel_region(b, img.dims);
        match (kind, region) {
            (LayerKind::FinalPoint, _) | (_, None) => draw_cross(&mut out.raster, b.center(), 4 * t, t, color),
            (_, Some(r)) => draw_border(&mut out.raster, r, t, color),
        }
    }
    out
}

fn draw_border(raster: &mut RgbImage, r: PixelRegion, t: u32, color: Rgb<u8>) {
    for y in r.y..r.y + r.height {
        for x in r.x..r.x + r.width {
            let edge = x < r.x + t || y < r.y + t || x + t >= r.x + r.width || y + t >= r.y + r.height;
            if edge {
                raster.put_pixel(x, y, color);
            }
        }
    }
}

fn draw_cross(raster: &mut RgbImage, c: PixelPoint, arm: u32, t: u32, color: Rgb<u8>) {
    let (w, h) = (i64::from(raster.width()), i64::from(raster.height()));
    let (cx, cy) = (c.x.floor() as i64, c.y.floor() as i64);
    let (arm, half) = (i64::from(arm), i64::from(t / 2));
    for d in -arm..=arm {
        for o in -half..=(i64::from(t) - 1 - half) {
            for (x, y) in [(cx + d, cy + o), (cx + o, cy + d)] {
                if (0..w).contains(&x) && (0..h).contains(&y) {
                    raster.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}
