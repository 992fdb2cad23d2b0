//! Photometric jitter and weak homographic warps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::ImageBuffer;
use crate::error::{Error, Result};
use crate::geometry::{Homography, Point2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricConfig {
    /// Multiplicative brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation drawn from `[-hue, hue]` turns.
    pub hue: f64,
    /// Probability that the color jitter above is applied at all.
    pub jitter_probability: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_probability: 0.8,
            grayscale_probability: 0.2,
            blur_probability: 0.3,
        }
    }
}

impl PhotometricConfig {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            jitter_probability: 0.0,
            grayscale_probability: 0.0,
            blur_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometricMode {
    None,
    WeakHomography,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub photometric: PhotometricConfig,
    pub geometric: GeometricMode,
    /// Largest corner displacement of the weak homography, as a fraction of
    /// the view side.
    pub max_corner_fraction: f64,
    /// Minimum positive-pair overlap, measured as intersection over the
    /// smaller crop's area.
    pub overlap_min: f64,
    /// Side of the largest crop in source pixels.
    pub crop_size: usize,
    /// Crops are drawn with sides in `[crop_scale_min, 1] * crop_size`.
    pub crop_scale_min: f64,
    /// Side of the square view that the encoder sees.
    pub view_size: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            photometric: PhotometricConfig::default(),
            geometric: GeometricMode::WeakHomography,
            max_corner_fraction: 0.1,
            overlap_min: 0.5,
            crop_size: 128,
            crop_scale_min: 0.75,
            view_size: 64,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.photometric;
        let ranges = [
            ("brightness", p.brightness),
            ("contrast", p.contrast),
            ("saturation", p.saturation),
            ("hue", p.hue),
            ("max_corner_fraction", self.max_corner_fraction),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("jitter_probability", p.jitter_probability),
            ("grayscale_probability", p.grayscale_probability),
            ("blur_probability", p.blur_probability),
            ("overlap_min", self.overlap_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.max_corner_fraction >= 0.5 {
            return Err(Error::InvalidConfig("max_corner_fraction must be < 0.5".into()));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(Error::InvalidConfig("crop_scale_min must lie in (0, 1]".into()));
        }
        if self.crop_size < 8 || self.view_size < 8 {
            return Err(Error::InvalidConfig("crop_size and view_size must be >= 8".into()));
        }
        Ok(())
    }
}

fn gray(px: [f32; 3]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn jitter_factor<R: Rng>(rng: &mut R, amount: f64) -> f32 {
    if amount <= 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount) as f32
    }
}

/// Rotates chroma about the luminance axis in YIQ space by `turns`.
fn rotate_hue(px: [f32; 3], turns: f32) -> [f32; 3] {
    let [r, g, b] = px;
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let i = 0.596 * r - 0.274 * g - 0.322 * b;
    let q = 0.211 * r - 0.523 * g + 0.312 * b;
    let (s, c) = (turns * std::f32::consts::TAU).sin_cos();
    let (i2, q2) = (i * c - q * s, i * s + q * c);
    [
        y + 0.956 * i2 + 0.621 * q2,
        y - 0.272 * i2 - 0.647 * q2,
        y - 1.106 * i2 + 1.703 * q2,
    ]
}

pub fn box_blur3(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let weights = [1.0f32, 2.0, 1.0];
    let mut out = ImageBuffer::new(w, h, img.id.clone());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            let mut total = 0.0;
            for (dy, wy) in weights.iter().enumerate() {
                for (dx, wx) in weights.iter().enumerate() {
                    let sx = (x as i64 + dx as i64 - 1).clamp(0, w as i64 - 1) as usize;
                    let sy = (y as i64 + dy as i64 - 1).clamp(0, h as i64 - 1) as usize;
                    let p = img.get(sx, sy);
                    let wt = wy * wx;
                    for c in 0..3 {
                        acc[c] += wt * p[c];
                    }
                    total += wt;
                }
            }
            out.set(x, y, acc.map(|v| v / total));
        }
    }
    out
}

/// Color jitter, random grayscale and random blur. Geometry is untouched.
pub fn photometric_augment<R: Rng>(img: &ImageBuffer, cfg: &PhotometricConfig, rng: &mut R) -> ImageBuffer {
    let mut out = img.clone();
    if rng.random_bool(cfg.jitter_probability) {
        let fb = jitter_factor(rng, cfg.brightness);
        let fc = jitter_factor(rng, cfg.contrast);
        let fs = jitter_factor(rng, cfg.saturation);
        let hue = if cfg.hue > 0.0 {
            rng.random_range(-cfg.hue..=cfg.hue) as f32
        } else {
            0.0
        };
        let mean = img.mean_luminance() * fb;
        for y in 0..out.height() {
            for x in 0..out.width() {
                let mut px = out.get(x, y).map(|v| v * fb);
                px = px.map(|v| (v - mean) * fc + mean);
                let g = gray(px);
                px = px.map(|v| g + (v - g) * fs);
                if hue != 0.0 {
                    px = rotate_hue(px, hue);
                }
                out.set(x, y, px);
            }
        }
    }
    if rng.random_bool(cfg.grayscale_probability) {
        for y in 0..out.height() {
            for x in 0..out.width() {
                let g = gray(out.get(x, y));
                out.set(x, y, [g; 3]);
            }
        }
    }
    if rng.random_bool(cfg.blur_probability) {
        out = box_blur3(&out);
    }
    out
}

/// A homography that zooms into a `width x height` frame: each frame corner
/// is pulled inward by up to `max_fraction` of the corresponding side, and
/// the returned transform maps that inner quadrilateral onto the full frame.
/// Every output pixel therefore samples inside the source.
pub fn inward_homography<R: Rng>(width: usize, height: usize, max_fraction: f64, rng: &mut R) -> Result<Homography> {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let dx_max = max_fraction * w;
    let dy_max = max_fraction * h;
    let mut draw = |limit: f64| if limit > 0.0 { rng.random_range(0.0..=limit) } else { 0.0 };
    let quad = [
        Point2::new(draw(dx_max), draw(dy_max)),
        Point2::new(w - draw(dx_max), draw(dy_max)),
        Point2::new(draw(dx_max), h - draw(dy_max)),
        Point2::new(w - draw(dx_max), h - draw(dy_max)),
    ];
    let corners = crate::geometry::image_corners(width, height);
    Homography::from_correspondences(&quad, &corners)
}
