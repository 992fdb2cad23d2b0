//! Procedural scenes and HPatches-layout benchmark generation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::box_blur3;
use crate::data::image::ImageBuffer;
use crate::error::{Error, Result};
use crate::geometry::{image_corners, Homography, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkMode {
    Illumination,
    Viewpoint,
}

impl BenchmarkMode {
    /// HPatches sequence-name prefix.
    pub fn prefix(&self) -> &'static str {
        match self {
            BenchmarkMode::Illumination => "i",
            BenchmarkMode::Viewpoint => "v",
        }
    }
}

enum Shape {
    Polygon(Vec<(f64, f64)>),
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Segment {
        a: (f64, f64),
        b: (f64, f64),
        half_width: f64,
    },
    Checker {
        cx: f64,
        cy: f64,
        half: f64,
        angle: f64,
        period: f64,
        alt: [f32; 3],
    },
}

impl Shape {
    fn color_at(&self, x: f64, y: f64, color: [f32; 3]) -> Option<[f32; 3]> {
        match self {
            Shape::Polygon(v) => {
                let n = v.len();
                let inside = (0..n).all(|i| {
                    let (x0, y0) = v[i];
                    let (x1, y1) = v[(i + 1) % n];
                    (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
                });
                inside.then_some(color)
            }
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                ((u / rx).powi(2) + (v / ry).powi(2) <= 1.0).then_some(color)
            }
            Shape::Segment { a, b, half_width } => {
                let (vx, vy) = (b.0 - a.0, b.1 - a.1);
                let len2 = vx * vx + vy * vy;
                let t = (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0);
                let (px, py) = (a.0 + t * vx, a.1 + t * vy);
                ((x - px).hypot(y - py) <= *half_width).then_some(color)
            }
            Shape::Checker {
                cx,
                cy,
                half,
                angle,
                period,
                alt,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if u.abs() > *half || v.abs() > *half {
                    return None;
                }
                let parity = ((u / period).floor() as i64 + (v / period).floor() as i64).rem_euclid(2);
                Some(if parity == 0 { color } else { *alt })
            }
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]
}

fn random_shape<R: Rng>(rng: &mut R, w: f64, h: f64) -> Shape {
    let cx = rng.random_range(0.0..w);
    let cy = rng.random_range(0.0..h);
    let size = rng.random_range(0.04..0.22) * w.min(h) * 1.5;
    match rng.random_range(0..4) {
        0 => {
            let n = rng.random_range(3..=6);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Shape::Polygon(
                angles
                    .into_iter()
                    .map(|a| {
                        let r = size * rng.random_range(0.5..1.0);
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect(),
            )
        }
        1 => Shape::Ellipse {
            cx,
            cy,
            rx: size * rng.random_range(0.4..1.0),
            ry: size * rng.random_range(0.4..1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
        2 => {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let len = size * rng.random_range(1.0..2.5);
            Shape::Segment {
                a: (cx, cy),
                b: (cx + len * a.cos(), cy + len * a.sin()),
                half_width: rng.random_range(1.0..4.0),
            }
        }
        _ => Shape::Checker {
            cx,
            cy,
            half: size * rng.random_range(0.5..1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            period: rng.random_range(4.0..12.0),
            alt: random_color(rng),
        },
    }
}

/// Renders a random cluttered scene: a smooth color gradient overlaid with
/// polygons, ellipses, thick segments and checker patches, antialiased by
/// 2x2 supersampling and lightly blurred.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e5ce_9e5c);
    let (w, h) = (width as f64, height as f64);
    let corners = [random_color(&mut rng), random_color(&mut rng), random_color(&mut rng), random_color(&mut rng)];
    let n_shapes = rng.random_range(18..32);
    let shapes: Vec<(Shape, [f32; 3])> = (0..n_shapes)
        .map(|_| (random_shape(&mut rng, w, h), random_color(&mut rng)))
        .collect();

    let img = ImageBuffer::from_fn(width, height, format!("scene_{seed:04}"), |x, y| {
        let mut acc = [0.0f32; 3];
        for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let (px, py) = (x as f64 + sx, y as f64 + sy);
            let (u, v) = ((px / w) as f32, (py / h) as f32);
            let mut c = [0.0f32; 3];
            for k in 0..3 {
                let top = corners[0][k] * (1.0 - u) + corners[1][k] * u;
                let bottom = corners[2][k] * (1.0 - u) + corners[3][k] * u;
                c[k] = 0.25 + 0.5 * (top * (1.0 - v) + bottom * v);
            }
            for (shape, color) in &shapes {
                if let Some(sc) = shape.color_at(px, py, *color) {
                    c = sc;
                }
            }
            for k in 0..3 {
                acc[k] += 0.25 * c[k];
            }
        }
        acc
    });
    box_blur3(&img)
}

/// `count` scenes with seeds `seed, seed + 1, ...`.
pub fn synthetic_scenes(count: usize, width: usize, height: usize, seed: u64) -> Vec<ImageBuffer> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| synthetic_scene(width, height, seed.wrapping_add(i as u64)))
        .collect()
}

/// Photometric target for illumination sequences: gamma, contrast,
/// brightness and per-channel gain changes on an identity geometry.
pub fn illumination_change<R: Rng>(img: &ImageBuffer, rng: &mut R) -> ImageBuffer {
    let gamma = rng.random_range(0.55f32..1.7);
    let contrast = rng.random_range(0.7f32..1.3);
    let brightness = rng.random_range(-0.15f32..0.15);
    let gains = [
        rng.random_range(0.9f32..1.1),
        rng.random_range(0.9f32..1.1),
        rng.random_range(0.9f32..1.1),
    ];
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.get(x, y);
            let mut q = [0.0; 3];
            for c in 0..3 {
                let v = px[c].clamp(0.0, 1.0).powf(gamma);
                q[c] = ((v - 0.5) * contrast + 0.5 + brightness) * gains[c];
            }
            out.set(x, y, q);
        }
    }
    out
}

/// Viewpoint change that maps an inner quadrilateral of the reference
/// (corners displaced inward by at most 15% of the respective side, hence
/// at most 15% of the diagonal) onto the full target frame. Zooming in this
/// way means no target pixel samples outside the reference.
pub fn random_viewpoint_homography<R: Rng>(width: usize, height: usize, rng: &mut R) -> Result<Homography> {
    crate::data::augment::inward_homography(width, height, 0.15, rng)
}

/// Writes one HPatches-style sequence per source image: `1.png` is the
/// reference, `2.png ..` the targets, and `H_1_n` the ground-truth
/// reference-to-target homographies.
pub fn generate_synthetic_benchmark(
    images: &[ImageBuffer],
    out: &Path,
    n_targets: usize,
    mode: BenchmarkMode,
    rng_seed: u64,
) -> Result<Vec<PathBuf>> {
    if images.is_empty() {
        return Err(Error::Precondition("no source images for the benchmark".into()));
    }
    if n_targets == 0 {
        return Err(Error::InvalidConfig("n_targets must be >= 1".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut dirs = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let dir = out.join(format!("{}_synth_{i:03}", mode.prefix()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        img.save_png(&dir.join("1.png"))?;
        for n in 2..=n_targets + 1 {
            let (target, h) = match mode {
                BenchmarkMode::Illumination => (illumination_change(img, &mut rng), Homography::identity()),
                BenchmarkMode::Viewpoint => {
                    let h = random_viewpoint_homography(img.width(), img.height(), &mut rng)?;
                    (img.warp(&h, img.width(), img.height())?, h)
                }
            };
            target.save_png(&dir.join(format!("{n}.png")))?;
            h.write(&dir.join(format!("H_1_{n}")))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Largest corner displacement of `h` over a `width x height` frame.
pub fn max_corner_displacement(h: &Homography, width: usize, height: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for c in image_corners(width, height) {
        let p = h.inverse()?.apply(c)?;
        worst = worst.max(p.distance(&Point2::new(c.x, c.y)));
    }
    Ok(worst)
}
