//! Projective geometry shared by sampling, detection and evaluation.
//!
//! Homographies map homogeneous pixel coordinates `(x, y, 1)`. Image corners
//! follow the pixel-center convention: `(0, 0)`, `(W-1, 0)`, `(0, H-1)` and
//! `(W-1, H-1)`.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A 3x3 projective transform, row-major, scaled so that `m[2][2] == 1`
/// whenever that entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let mut m = m;
        let s = m[2][2];
        if s != 0.0 && s != 1.0 {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parse("homography has non-finite entries".into()));
        }
        let h = Self { m };
        let det = h.det();
        if det.abs() <= DET_EPS {
            return Err(Error::SingularHomography { det });
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self {
            m: [[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= DET_EPS {
            return Err(Error::SingularHomography { det });
        }
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        Self::new(inv)
    }

    /// Matrix product `self * other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self::new(out)
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        let m = &self.m;
        let u = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
        let v = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w.abs() < W_EPS {
            return Err(Error::DegeneratePoint { w });
        }
        Ok(Point2::new(u / w, v / w))
    }

    /// Direct linear transform over `n >= 4` correspondences with Hartley
    /// normalization; least squares when `n > 4`.
    pub fn from_correspondences(src: &[Point2], dst: &[Point2]) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} source points vs {} target points",
                src.len(),
                dst.len()
            )));
        }
        if src.len() < 4 {
            return Err(Error::InsufficientMatches(src.len()));
        }
        let (ts, ns) = hartley_normalize(src);
        let (td, nd) = hartley_normalize(dst);

        let rows = (2 * src.len()).max(9);
        let mut a = DMatrix::<f64>::zeros(rows, 9);
        for (i, (p, q)) in ns.iter().zip(nd.iter()).enumerate() {
            let (x, y, u, v) = (p.x, p.y, q.x, q.y);
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        }
        let svd = a.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Parse("svd did not produce right singular vectors".into()))?;
        let (min_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, &s)| {
                if s < best.1 {
                    (i, s)
                } else {
                    best
                }
            });
        let h = v_t.row(min_idx);
        let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
        let td_inv = td
            .try_inverse()
            .ok_or(Error::SingularHomography { det: 0.0 })?;
        let full = td_inv * hn * ts;
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = full[(i, j)];
            }
        }
        Self::new(m)
    }

    /// Parses the HPatches `H_1_n` layout: three lines of three
    /// whitespace-separated decimals.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != 3 {
            return Err(Error::Parse(format!(
                "expected 3 rows in homography, found {}",
                rows.len()
            )));
        }
        let mut m = [[0.0; 3]; 3];
        for (i, line) in rows.iter().enumerate() {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 3 {
                return Err(Error::Parse(format!(
                    "row {} of homography has {} entries",
                    i + 1,
                    vals.len()
                )));
            }
            for (j, v) in vals.iter().enumerate() {
                m[i][j] = v
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad homography entry {v:?}: {e}")))?;
            }
        }
        Self::new(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

/// Emits the shortest decimal that parses back to the same `f64`.
impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.m {
            writeln!(f, "{} {} {}", row[0], row[1], row[2])?;
        }
        Ok(())
    }
}

fn hartley_normalize(points: &[Point2]) -> (Matrix3<f64>, Vec<Point2>) {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let normalized = points
        .iter()
        .map(|p| Point2::new(s * (p.x - cx), s * (p.y - cy)))
        .collect();
    (t, normalized)
}

pub fn apply_homography(h: &Homography, p: Point2) -> Result<Point2> {
    h.apply(p)
}

/// Integer pixel rectangle with top-left `(x0, y0)` and extent `w x h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub w: i64,
    pub h: i64,
}

impl Rect {
    pub fn new(x0: i64, y0: i64, w: i64, h: i64) -> Result<Self> {
        if w < 1 || h < 1 {
            return Err(Error::InvalidRect { w, h });
        }
        Ok(Self { x0, y0, w, h })
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    pub fn x1(&self) -> i64 {
        self.x0 + self.w
    }

    pub fn y1(&self) -> i64 {
        self.y0 + self.h
    }

    pub fn intersection_area(&self, other: &Rect) -> i64 {
        let ix = (self.x1().min(other.x1()) - self.x0.max(other.x0)).max(0);
        let iy = (self.y1().min(other.y1()) - self.y0.max(other.y0)).max(0);
        ix * iy
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1() <= self.x1() && other.y1() <= self.y1()
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1() <= width as i64 && self.y1() <= height as i64
    }
}

/// Intersection area over the smaller rectangle's area.
pub fn rect_overlap_fraction(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / a.area().min(b.area()) as f64
}

pub fn image_corners(width: usize, height: usize) -> [Point2; 4] {
    let (w, h) = ((width as f64) - 1.0, (height as f64) - 1.0);
    [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(0.0, h),
        Point2::new(w, h),
    ]
}

/// Summed distance between the four image corners mapped by each homography.
pub fn corner_transfer_error(
    h_gt: &Homography,
    h_est: &Homography,
    width: usize,
    height: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for c in image_corners(width, height) {
        let a = h_gt.apply(c)?;
        let b = h_est.apply(c)?;
        total += a.distance(&b);
    }
    Ok(total)
}
