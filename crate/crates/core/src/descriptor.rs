//! Local patch description, cosine matching and robust homography fitting.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::sampler::patch_rect;
use crate::data::ImageBuffer;
use crate::detector::KeypointSet;
use crate::error::{Error, Result};
use crate::geometry::{Homography, Point2};
use crate::model::Model;

pub const DEFAULT_PATCH_SIZE: usize = 32;

/// One unit-norm row per keypoint, in keypoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub descriptors: Vec<Vec<f64>>,
    /// Rows whose patch reached past the image border and was filled by
    /// edge replication.
    pub clamped: Vec<bool>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// `patch_size` square centred on `(cx, cy)`; out-of-image pixels repeat
/// the nearest edge pixel.
pub fn extract_patch(image: &ImageBuffer, cx: i64, cy: i64, patch_size: usize) -> (ImageBuffer, bool) {
    let rect = patch_rect(cx, cy, patch_size);
    let clamped = !rect.fits_within(image.width(), image.height());
    let (w, h) = (image.width() as i64, image.height() as i64);
    let patch = ImageBuffer::from_fn(patch_size, patch_size, image.id.clone(), |x, y| {
        let sx = (rect.x0 + x as i64).clamp(0, w - 1) as usize;
        let sy = (rect.y0 + y as i64).clamp(0, h - 1) as usize;
        image.get(sx, sy)
    });
    (patch, clamped)
}

/// Projection `z` of the patch around every keypoint.
pub fn describe(model: &Model, image: &ImageBuffer, keypoints: &KeypointSet, patch_size: usize) -> Result<DescriptorSet> {
    if patch_size == 0 {
        return Err(Error::ShapeMismatch("patch_size must be >= 1".into()));
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::ShapeMismatch("cannot describe an empty image".into()));
    }
    let rows: Vec<(Vec<f64>, bool)> = keypoints
        .points
        .par_iter()
        .map(|kp| {
            let (patch, clamped) = extract_patch(image, kp.x as i64, kp.y as i64, patch_size);
            Ok((model.forward(&patch)?.projection, clamped))
        })
        .collect::<Result<_>>()?;
    let (descriptors, clamped) = rows.into_iter().unzip();
    Ok(DescriptorSet { descriptors, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_ref: usize,
    pub index_tgt: usize,
    pub score: f64,
}

/// Mutual nearest neighbours under cosine similarity, ordered by
/// `index_ref`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn argmax_row(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = j;
        }
    }
    best
}

/// Keeps `(i, j)` when each is the other's most similar row (lowest index
/// on ties) and the cosine is at least `min_score`.
pub fn match_descriptors(a: &DescriptorSet, b: &DescriptorSet, min_score: f64) -> MatchSet {
    if a.is_empty() || b.is_empty() {
        return MatchSet::default();
    }
    let sim: Vec<Vec<f64>> = a
        .descriptors
        .par_iter()
        .map(|ra| b.descriptors.iter().map(|rb| cosine(ra, rb)).collect())
        .collect();
    let best_b: Vec<usize> = sim.iter().map(|row| argmax_row(row)).collect();
    let best_a: Vec<usize> = (0..b.len())
        .map(|j| {
            let column: Vec<f64> = sim.iter().map(|row| row[j]).collect();
            argmax_row(&column)
        })
        .collect();
    let pairs = best_b
        .iter()
        .enumerate()
        .filter(|&(i, &j)| best_a[j] == i && sim[i][j] >= min_score)
        .map(|(i, &j)| Match {
            index_ref: i,
            index_tgt: j,
            score: sim[i][j],
        })
        .collect();
    MatchSet { pairs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub inlier_px: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_px: 3.0,
            iterations: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyEstimate {
    pub homography: Homography,
    /// Per-correspondence inlier flags under the returned model.
    pub inliers: Vec<bool>,
}

impl HomographyEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|v| **v).count()
    }
}

fn collinear(a: Point2, b: Point2, c: Point2) -> bool {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = a.distance(&b).max(a.distance(&c)).max(b.distance(&c)).max(1.0);
    cross.abs() <= 1e-9 * scale * scale
}

fn degenerate_sample(points: &[Point2; 4]) -> bool {
    (0..4).any(|skip| {
        let rest: Vec<Point2> = (0..4).filter(|&i| i != skip).map(|i| points[i]).collect();
        collinear(rest[0], rest[1], rest[2])
    })
}

fn inlier_mask(h: &Homography, src: &[Point2], dst: &[Point2], inlier_px: f64) -> Vec<bool> {
    src.iter()
        .zip(dst)
        .map(|(s, d)| h.apply(*s).is_ok_and(|p| p.distance(d) < inlier_px))
        .collect()
}

fn select<T: Copy>(values: &[T], mask: &[bool]) -> Vec<T> {
    values.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect()
}

/// Random-sample consensus over 4-point direct linear transforms, refit on
/// the consensus set. Deterministic given `cfg.seed`.
pub fn estimate_homography_points(src: &[Point2], dst: &[Point2], cfg: &RansacConfig) -> Result<HomographyEstimate> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", src.len(), dst.len())));
    }
    let n = src.len();
    if n < 4 {
        return Err(Error::InsufficientMatches(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Homography)> = None;
    let mut seen = HashSet::new();
    for _ in 0..cfg.iterations.max(1) {
        let mut idx = sample(&mut rng, n, 4).into_vec();
        idx.sort_unstable();
        if n <= 8 && !seen.insert(idx.clone()) {
            continue;
        }
        let s = [src[idx[0]], src[idx[1]], src[idx[2]], src[idx[3]]];
        let d = [dst[idx[0]], dst[idx[1]], dst[idx[2]], dst[idx[3]]];
        if degenerate_sample(&s) || degenerate_sample(&d) {
            continue;
        }
        let Ok(h) = Homography::from_correspondences(&s, &d) else {
            continue;
        };
        let count = inlier_mask(&h, src, dst, cfg.inlier_px).iter().filter(|v| **v).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
        }
    }
    let (_, minimal) = best.ok_or(Error::DegenerateConfiguration)?;
    let mut homography = minimal;
    let mut inliers = inlier_mask(&homography, src, dst, cfg.inlier_px);
    let mut count = inliers.iter().filter(|v| **v).count();
    if count >= 4 {
        if let Ok(refit) = Homography::from_correspondences(&select(src, &inliers), &select(dst, &inliers)) {
            let refit_inliers = inlier_mask(&refit, src, dst, cfg.inlier_px);
            let refit_count = refit_inliers.iter().filter(|v| **v).count();
            if refit_count >= count {
                homography = refit;
                inliers = refit_inliers;
                count = refit_count;
            }
        }
    }
    log::debug!("homography consensus {count}/{n}");
    Ok(HomographyEstimate { homography, inliers })
}

/// Keypoint locations of the matched pairs.
pub fn matched_points(matches: &MatchSet, kps_ref: &KeypointSet, kps_tgt: &KeypointSet) -> Result<(Vec<Point2>, Vec<Point2>)> {
    let mut src = Vec::with_capacity(matches.len());
    let mut dst = Vec::with_capacity(matches.len());
    for m in &matches.pairs {
        let (Some(a), Some(b)) = (kps_ref.points.get(m.index_ref), kps_tgt.points.get(m.index_tgt)) else {
            return Err(Error::ShapeMismatch(format!(
                "match ({}, {}) indexes past the keypoint sets",
                m.index_ref, m.index_tgt
            )));
        };
        src.push(Point2::new(a.x as f64, a.y as f64));
        dst.push(Point2::new(b.x as f64, b.y as f64));
    }
    Ok((src, dst))
}

pub fn estimate_homography(
    matches: &MatchSet,
    kps_ref: &KeypointSet,
    kps_tgt: &KeypointSet,
    cfg: &RansacConfig,
) -> Result<HomographyEstimate> {
    let (src, dst) = matched_points(matches, kps_ref, kps_tgt)?;
    estimate_homography_points(&src, &dst, cfg)
}

/// Writes `x_ref y_ref x_tgt y_tgt score` lines.
pub fn write_matches(path: &Path, matches: &MatchSet, kps_ref: &KeypointSet, kps_tgt: &KeypointSet) -> Result<()> {
    let (src, dst) = matched_points(matches, kps_ref, kps_tgt)?;
    let mut text = String::new();
    for ((s, d), m) in src.iter().zip(&dst).zip(&matches.pairs) {
        text.push_str(&format!("{} {} {} {} {}\n", s.x, s.y, d.x, d.y, m.score));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a match file back as `(ref point, target point, score)` triples.
pub fn read_matches(path: &Path) -> Result<Vec<(Point2, Point2, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("{}:{}: expected 5 numbers", path.display(), n + 1));
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if v.len() != 5 {
            return Err(bad());
        }
        out.push((Point2::new(v[0], v[1]), Point2::new(v[2], v[3]), v[4]));
    }
    Ok(out)
}
