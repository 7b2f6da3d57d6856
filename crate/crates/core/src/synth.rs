//! Seeded synthetic fundus renderer used for fixtures, demos and cohort images.
//!
//! The images are crude: a reddish disc on black with vignetting, smooth
//! texture, a few vessels, an optic disc, a macula and optional dark lesions.
//! They exercise the heuristic backend and the enhancement pipeline, nothing more.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where the optic disc sits in the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscPlacement {
    /// Disc displaced laterally, macula at frame centre (macula-centred field).
    Lateral,
    /// Disc at frame centre.
    Centered,
    Up,
    Down,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundusSpec {
    pub size: u32,
    pub disc: DiscPlacement,
    pub lesions: usize,
    /// Gaussian blur sigma in pixels; 0 disables.
    pub blur_sigma: f32,
    /// 1.0 keeps full contrast; smaller values pull pixels toward the mean colour.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for FundusSpec {
    fn default() -> Self {
        FundusSpec { size: 256, disc: DiscPlacement::Lateral, lesions: 0, blur_sigma: 0.0, contrast: 1.0, seed: 0 }
    }
}

const BASE: [f64; 3] = [170.0, 80.0, 40.0];
const DISC: [f64; 3] = [250.0, 230.0, 180.0];
const MACULA: [f64; 3] = [120.0, 50.0, 25.0];
const VESSEL: [f64; 3] = [125.0, 40.0, 22.0];
pub(crate) const LESION: [u8; 3] = [50, 10, 5];

/// Radius of the rendered fundus as a fraction of the image side.
pub const FUNDUS_RADIUS_FRAC: f64 = 0.45;

pub fn render(spec: &FundusSpec) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size as f64;
    let c = s / 2.0;
    let fr = FUNDUS_RADIUS_FRAC * s;
    let disc_r = 0.06 * s;
    let side: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let disc_pos = match spec.disc {
        DiscPlacement::Lateral => Some((c + side * 0.3 * s, c)),
        DiscPlacement::Centered => Some((c, c)),
        DiscPlacement::Up => Some((c, c - 0.3 * s)),
        DiscPlacement::Down => Some((c, c + 0.3 * s)),
        DiscPlacement::Absent => None,
    };
    let macula = match spec.disc {
        DiscPlacement::Centered => (c - side * 0.3 * s, c),
        _ => (c, c),
    };

    // Smooth texture from a handful of random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let f = rng.random_range(2.0..9.0) / s;
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            (f * th.cos(), f * th.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(4.0..8.0))
        })
        .collect();

    // Vessels: arcs leaving the disc (or the frame centre when there is no disc).
    let origin = disc_pos.unwrap_or((c, c));
    let vessels: Vec<(f64, f64)> =
        (0..5).map(|_| (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0015..0.003) * s)).collect();

    let lesions: Vec<(f64, f64, f64)> = {
        let mut out = Vec::new();
        let mut guard = 0;
        while out.len() < spec.lesions && guard < 10_000 {
            guard += 1;
            let r = rng.random_range(0.0..0.75) * fr;
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let (x, y) = (c + r * th.cos(), c + r * th.sin());
            if let Some((dx, dy)) = disc_pos {
                if (x - dx).hypot(y - dy) < disc_r * 2.0 {
                    continue;
                }
            }
            out.push((x, y, 0.02 * s));
        }
        out
    };

    let mut img = RgbImage::from_fn(spec.size, spec.size, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let d = (px - c).hypot(py - c);
        if d > fr {
            return Rgb([0, 0, 0]);
        }
        let vignette = 1.0 - 0.35 * (d / fr).powi(2);
        let tex: f64 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * px + ky * py + ph).sin()).sum();
        let mut col = BASE.map(|b| b * vignette + tex * b / 100.0);

        let md = (px - macula.0).hypot(py - macula.1);
        let mw = (-(md * md) / (2.0 * (0.05 * s).powi(2))).exp();
        for k in 0..3 {
            col[k] = col[k] * (1.0 - mw) + MACULA[k] * mw;
        }
        let (ox, oy) = origin;
        let (vr, vth) = ((px - ox).hypot(py - oy), (py - oy).atan2(px - ox));
        for &(angle, width) in &vessels {
            // A gently curving ray from the origin.
            let curve = angle + 0.6 * (vr / fr);
            let mut diff = (vth - curve).rem_euclid(std::f64::consts::TAU);
            if diff > std::f64::consts::PI {
                diff -= std::f64::consts::TAU;
            }
            if vr > disc_r * 0.5 && (diff * vr).abs() < width {
                col = VESSEL;
            }
        }
        if let Some((dx, dy)) = disc_pos {
            if (px - dx).hypot(py - dy) <= disc_r {
                col = DISC;
            }
        }
        Rgb(col.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });

    for &(lx, ly, lr) in &lesions {
        stamp_lesion(&mut img, lx, ly, lr);
    }
    if spec.contrast < 1.0 {
        reduce_contrast(&mut img, spec.contrast, fr);
    }
    if spec.blur_sigma > 0.0 {
        img = image::imageops::blur(&img, spec.blur_sigma);
    }
    img
}

/// Paints a dark round lesion of radius `r` at `(x, y)`.
pub fn stamp_lesion(img: &mut RgbImage, x: f64, y: f64, r: f64) {
    let (w, h) = img.dimensions();
    let x0 = (x - r).floor().max(0.0) as u32;
    let y0 = (y - r).floor().max(0.0) as u32;
    let x1 = ((x + r).ceil() as u32).min(w.saturating_sub(1));
    let y1 = ((y + r).ceil() as u32).min(h.saturating_sub(1));
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            if (xx as f64 + 0.5 - x).hypot(yy as f64 + 0.5 - y) <= r {
                img.put_pixel(xx, yy, Rgb(LESION));
            }
        }
    }
}

fn reduce_contrast(img: &mut RgbImage, k: f64, fr: f64) {
    let c = img.width() as f64 / 2.0;
    let mut mean = [0.0; 3];
    let mut n = 0.0_f64;
    for (x, y, p) in img.enumerate_pixels() {
        if (x as f64 + 0.5 - c).hypot(y as f64 + 0.5 - c) <= fr {
            for i in 0..3 {
                mean[i] += p[i] as f64;
            }
            n += 1.0;
        }
    }
    let mean = mean.map(|m| m / n.max(1.0));
    for (x, y, p) in img.enumerate_pixels_mut() {
        if (x as f64 + 0.5 - c).hypot(y as f64 + 0.5 - c) <= fr {
            for i in 0..3 {
                p[i] = (mean[i] + k * (p[i] as f64 - mean[i])).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}
