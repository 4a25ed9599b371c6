//! Adaptive crop planning for the zoom-in branch.
//!
//! Candidates far from the median center are dropped, the remaining spread is
//! split into positional disagreement (variance of centers) and element scale
//! (each box read as a Gaussian spanning ±2σ of its extent), and the crop
//! window is sized as `γσ` around the mean center with a minimum side.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{center, to_norm_point, ImageDims, NormPoint, PixelBox, PixelPoint};
use crate::parsing::Candidate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CropError {
    #[error("crop window has zero width or height")]
    DegenerateWindow,
    #[error("no candidates to plan a crop from")]
    NoCandidates,
    #[error("invalid crop config: {0}")]
    InvalidConfig(String),
}

/// A per-axis pair of values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Axes {
    pub x: f64,
    pub y: f64,
}

impl Axes {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// What to do when the planned window leaves the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryStrategy {
    /// Translate inward, keeping the size.
    #[default]
    Shift,
    /// Intersect with the image.
    Clip,
    /// Shrink isotropically about the center until it fits.
    Shrink,
}

impl std::str::FromStr for BoundaryStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shift" => Ok(Self::Shift),
            "clip" => Ok(Self::Clip),
            "shrink" => Ok(Self::Shrink),
            other => Err(format!("unknown boundary strategy `{other}` (shift|clip|shrink)")),
        }
    }
}

/// Which variance terms size the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    #[default]
    Total,
    InterOnly,
    IntraOnly,
}

impl std::str::FromStr for VarianceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "total" => Ok(Self::Total),
            "inter_only" | "inter" => Ok(Self::InterOnly),
            "intra_only" | "intra" => Ok(Self::IntraOnly),
            other => Err(format!("unknown variance mode `{other}` (total|inter_only|intra_only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Window radius in units of σ.
    pub gamma: f64,
    /// Minimum window side, in original-image pixels.
    pub min_side: f64,
    /// Fraction of candidates kept by the outlier filter.
    pub keep_fraction: f64,
    pub boundary: BoundaryStrategy,
    pub square: bool,
    pub variance_mode: VarianceMode,
    /// Fixed-ratio baseline: side = ratio * max(W, H), overriding the
    /// variance-derived size.
    #[serde(default)]
    pub fixed_ratio: Option<f64>,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            gamma: 2.5,
            min_side: 512.0,
            keep_fraction: 0.75,
            boundary: BoundaryStrategy::Shift,
            square: true,
            variance_mode: VarianceMode::Total,
            fixed_ratio: None,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<(), CropError> {
        let bad = |m: &str| Err(CropError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.min_side >= 0.0 && self.min_side.is_finite()) {
            return bad("min_side must be non-negative");
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad("keep_fraction must be in (0, 1]");
        }
        if let Some(r) = self.fixed_ratio {
            if !(r > 0.0 && r.is_finite()) {
                return bad("fixed_ratio must be positive");
            }
        }
        Ok(())
    }
}

/// Spread statistics of the kept candidates, in pixels / pixels².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadStats {
    pub mu: Axes,
    pub v_inter: Axes,
    pub v_intra: Axes,
}

impl SpreadStats {
    /// Variance selected by `mode`; `Total` is exactly `v_inter + v_intra`.
    pub fn variance(&self, mode: VarianceMode) -> Axes {
        match mode {
            VarianceMode::Total => Axes::new(self.v_inter.x + self.v_intra.x, self.v_inter.y + self.v_intra.y),
            VarianceMode::InterOnly => self.v_inter,
            VarianceMode::IntraOnly => self.v_intra,
        }
    }
}

/// Window geometry before and after boundary handling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub ideal: PixelBox,
    pub window: PixelBox,
    /// Planned side length (the longer side for non-square windows).
    pub side: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub kept_indices: Vec<usize>,
    pub mu: Axes,
    pub v_inter: Axes,
    pub v_intra: Axes,
    /// σ² per axis under `variance_mode`.
    pub variance: Axes,
    pub sigma: Axes,
    pub ideal_window: PixelBox,
    pub window: PixelBox,
    pub side: f64,
    pub strategy: BoundaryStrategy,
    pub square: bool,
    pub variance_mode: VarianceMode,
    pub fixed_ratio: Option<f64>,
}

/// Number of candidates kept out of `n`: `max(1, floor(keep_fraction * n))`.
pub fn kept_count(n: usize, keep_fraction: f64) -> usize {
    // the epsilon absorbs products like 0.29 * 100 = 28.999999999999996
    let k = (keep_fraction * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n.max(1))
}

/// Coordinate-wise median of the candidate centers.
pub fn median_center(points: &[PixelPoint]) -> PixelPoint {
    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    }
    PixelPoint::new(
        median(points.iter().map(|p| p.x).collect()),
        median(points.iter().map(|p| p.y).collect()),
    )
}

/// Indices of the `K` candidates whose centers are closest to the median
/// center, ties going to the lower index. Returned in ascending order.
pub fn filter_outliers(cands: &[Candidate], keep_fraction: f64) -> Vec<usize> {
    if cands.is_empty() {
        return Vec::new();
    }
    let centers: Vec<PixelPoint> = cands.iter().map(|c| center(&c.bbox)).collect();
    let med = median_center(&centers);
    let mut order: Vec<(f64, usize)> = centers.iter().map(|z| z.distance(&med)).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order
        .into_iter()
        .take(kept_count(cands.len(), keep_fraction))
        .map(|(_, i)| i)
        .collect();
    kept.sort_unstable();
    kept
}

/// Mean center, population variance of centers, and mean quarter-extent
/// squared of the given candidates.
pub fn variance_decompose<'a>(kept: impl IntoIterator<Item = &'a Candidate>) -> Result<SpreadStats, CropError> {
    // Welford accumulation for the center moments
    let mut n = 0.0;
    let (mut mean_x, mut mean_y, mut m2_x, mut m2_y) = (0.0, 0.0, 0.0, 0.0);
    let (mut intra_x, mut intra_y) = (0.0, 0.0);
    for c in kept {
        n += 1.0;
        let z = center(&c.bbox);
        let (dx, dy) = (z.x - mean_x, z.y - mean_y);
        mean_x += dx / n;
        mean_y += dy / n;
        m2_x += dx * (z.x - mean_x);
        m2_y += dy * (z.y - mean_y);
        let (qx, qy) = (c.bbox.width() / 4.0, c.bbox.height() / 4.0);
        intra_x += qx * qx;
        intra_y += qy * qy;
    }
    if n == 0.0 {
        return Err(CropError::NoCandidates);
    }
    Ok(SpreadStats {
        mu: Axes::new(mean_x, mean_y),
        v_inter: Axes::new(m2_x / n, m2_y / n),
        v_intra: Axes::new(intra_x / n, intra_y / n),
    })
}

/// Sizes the window around `mu` and fits it to the image.
pub fn plan_crop(mu: Axes, sigma: Axes, dims: ImageDims, cfg: &CropConfig) -> CropWindow {
    let (hx, hy, side) = if let Some(ratio) = cfg.fixed_ratio {
        let s = ratio * dims.w().max(dims.h());
        (s / 2.0, s / 2.0, s)
    } else {
        let (rx, ry) = (cfg.gamma * sigma.x, cfg.gamma * sigma.y);
        if cfg.square {
            let s = (2.0 * rx).max(2.0 * ry).max(cfg.min_side);
            (s / 2.0, s / 2.0, s)
        } else {
            let hx = rx.max(cfg.min_side / 2.0);
            let hy = ry.max(cfg.min_side / 2.0);
            (hx, hy, 2.0 * hx.max(hy))
        }
    };
    let ideal = PixelBox {
        x1: mu.x - hx,
        y1: mu.y - hy,
        x2: mu.x + hx,
        y2: mu.y + hy,
    };
    CropWindow {
        ideal,
        window: fit_to_image(&ideal, dims, cfg.boundary),
        side,
    }
}

fn fit_to_image(ideal: &PixelBox, dims: ImageDims, strategy: BoundaryStrategy) -> PixelBox {
    let (w, h) = (dims.w(), dims.h());
    let over_x = ideal.width() > w;
    let over_y = ideal.height() > h;
    let (x1, x2, y1, y2) = match strategy {
        BoundaryStrategy::Shift => {
            let (x1, x2) = shift_axis(ideal.x1, ideal.x2, w);
            let (y1, y2) = shift_axis(ideal.y1, ideal.y2, h);
            (x1, x2, y1, y2)
        }
        // plain intersection; an oversized axis can only shrink to the image extent
        BoundaryStrategy::Clip => (ideal.x1.max(0.0), ideal.x2.min(w), ideal.y1.max(0.0), ideal.y2.min(h)),
        BoundaryStrategy::Shrink => {
            let cx = ((ideal.x1 + ideal.x2) / 2.0).clamp(0.0, w);
            let cy = ((ideal.y1 + ideal.y2) / 2.0).clamp(0.0, h);
            let (hx, hy) = (ideal.width() / 2.0, ideal.height() / 2.0);
            // common scale over the axes that can still fit
            let axis_scale = |c: f64, half: f64, extent: f64| {
                if half > 0.0 {
                    (c.min(extent - c) / half).min(1.0)
                } else {
                    1.0
                }
            };
            let mut k: f64 = 1.0;
            if !over_x {
                k = k.min(axis_scale(cx, hx, w));
            }
            if !over_y {
                k = k.min(axis_scale(cy, hy, h));
            }
            let (x1, x2) = if over_x { (0.0, w) } else { (cx - hx * k, cx + hx * k) };
            let (y1, y2) = if over_y { (0.0, h) } else { (cy - hy * k, cy + hy * k) };
            (x1, x2, y1, y2)
        }
    };
    // guard against rounding drift past the edges
    PixelBox {
        x1: x1.clamp(0.0, w),
        y1: y1.clamp(0.0, h),
        x2: x2.clamp(0.0, w),
        y2: y2.clamp(0.0, h),
    }
}

fn shift_axis(lo: f64, hi: f64, extent: f64) -> (f64, f64) {
    let len = hi - lo;
    if len > extent {
        (0.0, extent)
    } else if lo < 0.0 {
        (0.0, len)
    } else if hi > extent {
        (extent - len, extent)
    } else {
        (lo, hi)
    }
}

/// Full crop planning for a candidate set: filter, decompose, size, fit.
pub fn plan(cands: &[Candidate], dims: ImageDims, cfg: &CropConfig) -> Result<CropPlan, CropError> {
    cfg.validate()?;
    if cands.is_empty() {
        return Err(CropError::NoCandidates);
    }
    let kept_indices = filter_outliers(cands, cfg.keep_fraction);
    let stats = variance_decompose(kept_indices.iter().map(|&i| &cands[i]))?;
    let variance = stats.variance(cfg.variance_mode);
    let sigma = Axes::new(variance.x.sqrt(), variance.y.sqrt());
    let w = plan_crop(stats.mu, sigma, dims, cfg);
    Ok(CropPlan {
        kept_indices,
        mu: stats.mu,
        v_inter: stats.v_inter,
        v_intra: stats.v_intra,
        variance,
        sigma,
        ideal_window: w.ideal,
        window: w.window,
        side: w.side,
        strategy: cfg.boundary,
        square: cfg.square,
        variance_mode: cfg.variance_mode,
        fixed_ratio: cfg.fixed_ratio,
    })
}

/// Maps a box predicted in the crop's pixel frame to global normalized
/// coordinates via its center.
pub fn map_back(refined: &PixelBox, window: &PixelBox, dims: ImageDims) -> Result<NormPoint, CropError> {
    let (wc, hc) = (window.width(), window.height());
    if wc <= 0.0 || hc <= 0.0 {
        return Err(CropError::DegenerateWindow);
    }
    let c = center(refined);
    // fraction of the crop, then back to global pixels
    let (fx, fy) = (c.x / wc, c.y / hc);
    let global = PixelPoint::new(window.x1 + fx * wc, window.y1 + fy * hc);
    Ok(to_norm_point(global, dims))
}

/// Expresses a global pixel point in the crop's pixel frame.
pub fn to_crop_frame(p: PixelPoint, window: &PixelBox) -> PixelPoint {
    PixelPoint::new(p.x - window.x1, p.y - window.y1)
}
