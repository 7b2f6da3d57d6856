//! Fundus enhancement: crop the fundus disc, stretch the dynamic range with
//! percentile clipping, then CLAHE on each RGB channel independently.

use std::collections::VecDeque;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::par::Execution;

/// Rec. 601 luma.
#[inline]
pub fn luminance(px: &image::Rgb<u8>) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

/// Fundus circle and the crop rectangle around it.
///
/// The circle is in source-image coordinates. `crop_box` is half-open
/// `(x0, y0, x1, y1)` and always lies inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundusGeometry {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub crop_box: (u32, u32, u32, u32),
}

impl FundusGeometry {
    fn full_frame(w: u32, h: u32) -> Self {
        FundusGeometry {
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            r: (w as f64).hypot(h as f64) / 2.0,
            crop_box: (0, 0, w, h),
        }
    }

    /// Circle centre relative to the crop box origin.
    pub fn center_in_crop(&self) -> (f64, f64) {
        (self.cx - self.crop_box.0 as f64, self.cy - self.crop_box.1 as f64)
    }

    /// Whether pixel `(x, y)` (source coordinates) has its centre in the circle.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// Locates the fundus without cropping.
pub fn fundus_geometry(image: &RgbImage) -> FundusGeometry {
    let (w, h) = image.dimensions();
    let lum: Vec<f64> = image.pixels().map(luminance).collect();
    let max = lum.iter().copied().fold(0.0, f64::max);
    let threshold = 5.0f64.max(0.02 * max);
    let fg: Vec<bool> = lum.iter().map(|&l| l > threshold).collect();

    let Some((count, (bx0, by0, bx1, by1))) = largest_component(&fg, w as usize, h as usize) else {
        return FundusGeometry::full_frame(w, h);
    };
    if (count as f64) < 0.01 * (w as f64 * h as f64) {
        return FundusGeometry::full_frame(w, h);
    }
    // Square around the component's bounding box, centred on it.
    let bw = (bx1 - bx0 + 1) as f64;
    let bh = (by1 - by0 + 1) as f64;
    let side = bw.max(bh);
    let cx = bx0 as f64 + bw / 2.0;
    let cy = by0 as f64 + bh / 2.0;
    let clip = |v: f64, hi: u32| v.round().clamp(0.0, hi as f64) as u32;
    let crop_box =
        (clip(cx - side / 2.0, w), clip(cy - side / 2.0, h), clip(cx + side / 2.0, w), clip(cy + side / 2.0, h));
    FundusGeometry { cx, cy, r: side / 2.0, crop_box }
}

/// 4-connected components of `mask`; returns the size and inclusive bounding
/// box of the largest. Ties go to the component found first in row-major order.
fn largest_component(mask: &[bool], w: usize, h: usize) -> Option<(usize, (usize, usize, usize, usize))> {
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut count = 0;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, (x0, y0, x1, y1)));
        }
    }
    best
}

/// Crops the fundus; degenerate inputs come back whole with full-frame geometry.
pub fn crop_fundus(image: &RgbImage) -> (RgbImage, FundusGeometry) {
    let g = fundus_geometry(image);
    let (x0, y0, x1, y1) = g.crop_box;
    let cropped = image::imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image();
    (cropped, g)
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[u8], pct: f64) -> u8 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Percentile stretch using every pixel.
pub fn stretch_range(image: &RgbImage, lo_pct: f64, hi_pct: f64) -> RgbImage {
    stretch_range_masked(image, lo_pct, hi_pct, |_, _| true)
}

/// Percentile stretch with percentiles taken over the pooled channel values
/// of pixels selected by `in_fundus`; the resulting map is applied to all pixels.
pub fn stretch_range_masked<F>(image: &RgbImage, lo_pct: f64, hi_pct: f64, in_fundus: F) -> RgbImage
where
    F: Fn(u32, u32) -> bool,
{
    assert!(lo_pct < hi_pct, "lower percentile must be below upper percentile");
    let mut hist = [0usize; 256];
    let mut n = 0usize;
    for (x, y, px) in image.enumerate_pixels() {
        if in_fundus(x, y) {
            for c in 0..3 {
                hist[px[c] as usize] += 1;
            }
            n += 3;
        }
    }
    if n == 0 {
        return image.clone();
    }
    let value_at_rank = |pct: f64| -> u8 {
        let rank = (((pct / 100.0) * n as f64).ceil() as usize).clamp(1, n);
        let mut acc = 0;
        for (v, &c) in hist.iter().enumerate() {
            acc += c;
            if acc >= rank {
                return v as u8;
            }
        }
        255
    };
    let lo = value_at_rank(lo_pct) as f64;
    let hi = value_at_rank(hi_pct) as f64;
    if lo >= hi {
        return image.clone();
    }
    let lut: Vec<u8> =
        (0..256).map(|v| ((v as f64).clamp(lo, hi) - lo) * 255.0 / (hi - lo)).map(|v| v.round() as u8).collect();
    let mut out = image.clone();
    for px in out.pixels_mut() {
        for c in 0..3 {
            px[c] = lut[px[c] as usize];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    /// `(rows, cols)` of the tile grid.
    pub tiles: (u32, u32),
    /// Histogram clip factor relative to a flat histogram.
    pub clip: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { tiles: (8, 8), clip: 2.0 }
    }
}

impl ClaheParams {
    pub fn is_valid(&self) -> bool {
        self.tiles.0 >= 1 && self.tiles.1 >= 1 && self.clip >= 1.0
    }
}

pub fn apply_clahe(image: &RgbImage, params: &ClaheParams) -> RgbImage {
    apply_clahe_with(image, params, Execution::default())
}

/// CLAHE on each channel independently; channels may run in parallel.
pub fn apply_clahe_with(image: &RgbImage, params: &ClaheParams, exec: Execution) -> RgbImage {
    assert!(params.is_valid(), "invalid CLAHE parameters {params:?}");
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return image.clone();
    }
    let raw = image.as_raw();
    let channels = exec.map(&[0usize, 1, 2], |&c| {
        let plane: Vec<u8> = raw.iter().skip(c).step_by(3).copied().collect();
        clahe_plane(&plane, w as usize, h as usize, params)
    });
    let mut out = RgbImage::new(w, h);
    for (i, px) in out.pixels_mut().enumerate() {
        *px = image::Rgb([channels[0][i], channels[1][i], channels[2][i]]);
    }
    out
}

fn clahe_plane(src: &[u8], w: usize, h: usize, params: &ClaheParams) -> Vec<u8> {
    let rows = (params.tiles.0 as usize).min(h);
    let cols = (params.tiles.1 as usize).min(w);
    let ys: Vec<usize> = (0..=rows).map(|k| k * h / rows).collect();
    let xs: Vec<usize> = (0..=cols).map(|k| k * w / cols).collect();

    let mut luts = vec![[0u8; 256]; rows * cols];
    for ty in 0..rows {
        for tx in 0..cols {
            let mut hist = [0.0f64; 256];
            for y in ys[ty]..ys[ty + 1] {
                for &v in &src[y * w + xs[tx]..y * w + xs[tx + 1]] {
                    hist[v as usize] += 1.0;
                }
            }
            let n = ((ys[ty + 1] - ys[ty]) * (xs[tx + 1] - xs[tx])) as f64;
            let limit = params.clip * n / 256.0;
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let bonus = excess / 256.0;
            let lut = &mut luts[ty * cols + tx];
            let mut cdf = 0.0;
            for (v, b) in hist.iter().enumerate() {
                cdf += b + bonus;
                lut[v] = (cdf * 255.0 / n).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    // Tile centres in pixel coordinates, for bilinear blending.
    let centers =
        |bounds: &[usize]| -> Vec<f64> { bounds.windows(2).map(|b| (b[0] + b[1]) as f64 / 2.0 - 0.5).collect() };
    let cy = centers(&ys);
    let cx = centers(&xs);
    let locate = |centers: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= centers[0] {
            return (0, 0, 0.0);
        }
        let last = centers.len() - 1;
        if p >= centers[last] {
            return (last, last, 0.0);
        }
        let k = centers.partition_point(|&c| c <= p) - 1;
        (k, k + 1, (p - centers[k]) / (centers[k + 1] - centers[k]))
    };

    let xcoords: Vec<(usize, usize, f64)> = (0..w).map(|x| locate(&cx, x as f64)).collect();
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        let (r0, r1, fy) = locate(&cy, y as f64);
        for x in 0..w {
            let (c0, c1, fx) = xcoords[x];
            let v = src[y * w + x] as usize;
            let a = luts[r0 * cols + c0][v] as f64;
            let b = luts[r0 * cols + c1][v] as f64;
            let c = luts[r1 * cols + c0][v] as f64;
            let d = luts[r1 * cols + c1][v] as f64;
            let top = a + (b - a) * fx;
            let bottom = c + (d - c) * fx;
            out[y * w + x] = (top + (bottom - top) * fy).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceParams {
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub clahe: ClaheParams,
}

impl Default for EnhanceParams {
    fn default() -> Self {
        EnhanceParams { lo_pct: 1.0, hi_pct: 99.0, clahe: ClaheParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced {
    pub image: RgbImage,
    pub geometry: FundusGeometry,
}

pub fn enhance(image: &RgbImage) -> Enhanced {
    enhance_with(image, &EnhanceParams::default(), Execution::default())
}

/// Crop, then stretch over fundus pixels, then CLAHE.
pub fn enhance_with(image: &RgbImage, params: &EnhanceParams, exec: Execution) -> Enhanced {
    let (cropped, geometry) = crop_fundus(image);
    let stretched = stretch_in_circle(&cropped, &geometry, params.lo_pct, params.hi_pct);
    Enhanced { image: apply_clahe_with(&stretched, &params.clahe, exec), geometry }
}

/// Stretch of a cropped image using only pixels inside its fundus circle.
pub fn stretch_in_circle(cropped: &RgbImage, geometry: &FundusGeometry, lo: f64, hi: f64) -> RgbImage {
    let (x0, y0, _, _) = geometry.crop_box;
    stretch_range_masked(cropped, lo, hi, |x, y| geometry.contains(x + x0, y + y0))
}

/// RMS contrast: standard deviation of luminance over pixels selected by `mask`.
pub fn rms_contrast<F: Fn(u32, u32) -> bool>(image: &RgbImage, mask: F) -> f64 {
    let mut n = 0.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for (x, y, px) in image.enumerate_pixels() {
        if mask(x, y) {
            let v = luminance(px);
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return 0.0;
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0).sqrt()
}
