use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer as RawImage, Rgb, Rgb32FImage, RgbImage};
use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{Homography, Point2, Rect};
use crate::tensor::Tensor3;

/// Default evaluation and detection resolution, `(height, width)`.
pub const DEFAULT_RESOLUTION: (usize, usize) = (240, 320);

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "ppm", "bmp"];

/// Interleaved RGB image with values in `[0, 1]`, stored row-major as
/// `height x width x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
    pub id: String,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, id: impl Into<String>) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
            id: id.into(),
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        id: impl Into<String>,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
            id: id.into(),
        }
    }

    /// Values are clamped into `[0, 1]`.
    pub fn from_interleaved(
        width: usize,
        height: usize,
        mut data: Vec<f32>,
        id: impl Into<String>,
    ) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{}x3 image",
                data.len(),
                height,
                width
            )));
        }
        data.iter_mut().for_each(|v| {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }
        });
        Ok(Self {
            width,
            height,
            data,
            id: id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = px[c].clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamping at
    /// the border. `None` when the point lies outside the image.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(x >= -0.5 && y >= -0.5 && x <= max_x + 0.5 && y <= max_y + 0.5) {
            return None;
        }
        Some(self.sample_clamped(x, y))
    }

    pub fn sample_clamped(&self, x: f64, y: f64) -> [f32; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bottom - top) * fy;
        }
        out
    }

    pub fn crop(&self, rect: &Rect) -> Result<ImageBuffer> {
        if !rect.fits_within(self.width, self.height) {
            return Err(Error::ShapeMismatch(format!(
                "crop {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let (x0, y0) = (rect.x0 as usize, rect.y0 as usize);
        let mut data = Vec::with_capacity(rect.area() as usize * 3);
        for y in y0..y0 + rect.h as usize {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + rect.w as usize * 3]);
        }
        Ok(ImageBuffer {
            width: rect.w as usize,
            height: rect.h as usize,
            data,
            id: self.id.clone(),
        })
    }

    /// Resize with a triangle (bilinear, area-aware when shrinking) filter.
    pub fn resize(&self, width: usize, height: usize) -> ImageBuffer {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let raw: Rgb32FImage =
            RawImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length matches dimensions");
        let resized = image::imageops::resize(&raw, width as u32, height as u32, FilterType::Triangle);
        let mut out = ImageBuffer {
            width,
            height,
            data: resized.into_raw(),
            id: self.id.clone(),
        };
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Renders `self` seen through `forward`, which maps source pixels to
    /// output pixels. Output pixels whose preimage falls outside the source
    /// are clamped to the nearest border pixel.
    pub fn warp(&self, forward: &Homography, width: usize, height: usize) -> Result<ImageBuffer> {
        let inverse = forward.inverse()?;
        let mut out = ImageBuffer::new(width, height, self.id.clone());
        for y in 0..height {
            for x in 0..width {
                let px = match inverse.apply(Point2::new(x as f64, y as f64)) {
                    Ok(p) => self.sample_clamped(p.x, p.y),
                    Err(_) => [0.0; 3],
                };
                out.set(x, y, px);
            }
        }
        Ok(out)
    }

    pub fn luminance(&self, x: usize, y: usize) -> f32 {
        let [r, g, b] = self.get(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    pub fn mean_luminance(&self) -> f32 {
        let n = (self.width * self.height) as f32;
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .sum::<f32>()
            / n
    }

    /// Channel-major `3 x H x W` tensor for the encoder.
    pub fn to_tensor(&self) -> Tensor3 {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f64;
            }
        }
        Tensor3::from_vec(3, self.height, self.width, data)
    }

    pub fn from_rgb8(img: &RgbImage, id: impl Into<String>) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
            id: id.into(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RawImage::<Rgb<u8>, Vec<u8>>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Loads any decodable raster file, optionally resized to
    /// `(height, width)`.
    pub fn load(path: &Path, resize_to: Option<(usize, usize)>) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut img = Self::from_rgb8(&decoded.to_rgb8(), id);
        if let Some((h, w)) = resize_to {
            img = img.resize(w, h);
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Result of loading a directory: decoded images plus the per-file failures
/// that were skipped.
#[derive(Debug, Default)]
pub struct LoadedImages {
    pub images: Vec<ImageBuffer>,
    pub errors: Vec<(PathBuf, Error)>,
}

/// Loads every image file in `dir` (sorted by file name), resized to
/// `resize_to = (height, width)`. Unreadable files are skipped and reported.
pub fn load_image_dir(dir: &Path, resize_to: (usize, usize)) -> Result<LoadedImages> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if path.is_file() && is_image {
            paths.push(path);
        }
    }
    paths.sort();

    let mut loaded = LoadedImages::default();
    for path in paths {
        match ImageBuffer::load(&path, Some(resize_to)) {
            Ok(img) => loaded.images.push(img),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                loaded.errors.push((path, e));
            }
        }
    }
    Ok(loaded)
}
