//! Spatially constrained contrastive samplers.
//!
//! Detector batches draw two pairs of overlapping crops per source image;
//! the two pairs never overlap each other, so the second pair is a negative
//! for the first. Descriptor batches draw a keypoint-centred patch and
//! neighbouring patches at small offsets as its negatives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::{inward_homography, photometric_augment, AugmentationConfig, GeometricMode, PhotometricConfig};
use crate::data::image::ImageBuffer;
use crate::detector::KeypointSet;
use crate::error::{Error, Result};
use crate::geometry::{rect_overlap_fraction, Homography, Rect};

pub const MAX_SAMPLER_ATTEMPTS: usize = 1000;

/// What was done to produce one pair of views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGeometry {
    pub rect_a: Rect,
    pub rect_b: Rect,
    /// Warp applied to each resized view (view pixels to view pixels).
    pub warp_a: Homography,
    pub warp_b: Homography,
}

#[derive(Debug, Clone)]
pub struct DetectorPairBatch {
    pub views_a: Vec<ImageBuffer>,
    pub views_b: Vec<ImageBuffer>,
    pub source_ids: Vec<String>,
    pub source_indices: Vec<usize>,
    pub geometry: Vec<PairGeometry>,
}

impl DetectorPairBatch {
    pub fn len(&self) -> usize {
        self.views_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views_a.is_empty()
    }
}

fn crop_side<R: Rng>(cfg: &AugmentationConfig, max_side: i64, rng: &mut R) -> i64 {
    let scale = if cfg.crop_scale_min < 1.0 {
        rng.random_range(cfg.crop_scale_min..=1.0)
    } else {
        1.0
    };
    ((cfg.crop_size as f64 * scale).round() as i64).clamp(1, max_side)
}

/// Draws two square crops of one `width x height` image whose overlap
/// fraction is at least `overlap_min` and which avoid every rectangle in
/// `placed`. Sizes and relative offset are drawn first; the position is
/// then chosen uniformly among all placements that fit and stay clear.
/// `None` when no such placement exists for the drawn shape.
fn draw_positive_pair<R: Rng>(
    width: usize,
    height: usize,
    cfg: &AugmentationConfig,
    placed: &[Rect],
    rng: &mut R,
) -> Option<(Rect, Rect)> {
    let max_side = width.min(height) as i64;
    let sa = crop_side(cfg, max_side, rng);
    let sb = crop_side(cfg, max_side, rng);

    // Per-axis overlap must reach ceil(f * smaller side) for the area
    // fraction to reach f, which bounds the relative offset.
    let smaller = sa.min(sb);
    let need = ((cfg.overlap_min * smaller as f64).ceil() as i64).clamp(1, smaller);
    let (lo, hi) = (need - sb, sa - need);
    let dx = rng.random_range(lo..=hi);
    let dy = rng.random_range(lo..=hi);
    let shape_a = Rect::new(0, 0, sa, sa).ok()?;
    let shape_b = Rect::new(dx, dy, sb, sb).ok()?;
    if rect_overlap_fraction(&shape_a, &shape_b) < cfg.overlap_min {
        return None;
    }

    // Top-left corners of `a` for which both crops lie inside the image.
    let (x_min, x_max) = (0.max(-dx), (width as i64 - sa).min(width as i64 - sb - dx));
    let (y_min, y_max) = (0.max(-dy), (height as i64 - sa).min(height as i64 - sb - dy));
    if x_min > x_max || y_min > y_max {
        return None;
    }
    let at = |ax: i64, ay: i64| {
        (
            Rect { x0: ax, y0: ay, ..shape_a },
            Rect { x0: ax + dx, y0: ay + dy, ..shape_b },
        )
    };
    if placed.is_empty() {
        return Some(at(rng.random_range(x_min..=x_max), rng.random_range(y_min..=y_max)));
    }
    let clear = |a: &Rect, b: &Rect| {
        placed
            .iter()
            .all(|r| r.intersection_area(a) == 0 && r.intersection_area(b) == 0)
    };
    let mut options = Vec::new();
    for ay in y_min..=y_max {
        for ax in x_min..=x_max {
            let (a, b) = at(ax, ay);
            if clear(&a, &b) {
                options.push((ax, ay));
            }
        }
    }
    if options.is_empty() {
        return None;
    }
    let (ax, ay) = options[rng.random_range(0..options.len())];
    Some(at(ax, ay))
}

fn render_view(
    source: &ImageBuffer,
    rect: &Rect,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<(ImageBuffer, Homography)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = source.crop(rect)?.resize(cfg.view_size, cfg.view_size);
    let (view, warp) = match cfg.geometric {
        GeometricMode::None => (view, Homography::identity()),
        GeometricMode::WeakHomography => {
            let h = inward_homography(cfg.view_size, cfg.view_size, cfg.max_corner_fraction, &mut rng)?;
            (view.warp(&h, cfg.view_size, cfg.view_size)?, h)
        }
    };
    Ok((photometric_augment(&view, &cfg.photometric, &mut rng), warp))
}

/// Samples `n_pairs` positive pairs. Source images are visited in a seeded
/// random order and each contributes two consecutive pairs; when there are
/// fewer than `ceil(n_pairs / 2)` images, images are revisited and every
/// further pair must also avoid all earlier crops of that image.
pub fn sample_detector_batch(
    images: &[ImageBuffer],
    n_pairs: usize,
    cfg: &AugmentationConfig,
    rng_seed: u64,
) -> Result<DetectorPairBatch> {
    cfg.validate()?;
    if n_pairs < 2 {
        return Err(Error::Precondition(format!("need at least 2 pairs, got {n_pairs}")));
    }
    if images.is_empty() {
        return Err(Error::Precondition("no source images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);

    // Both pairs of one image visit are drawn together; a visit whose
    // second pair finds no free site is redrawn from scratch.
    let mut placed: Vec<Vec<Rect>> = vec![Vec::new(); images.len()];
    let mut plan = Vec::with_capacity(n_pairs);
    for visit_start in (0..n_pairs).step_by(2) {
        let src = order[(visit_start / 2) % order.len()];
        let img = &images[src];
        let visit_len = (n_pairs - visit_start).min(2);
        let mut accepted = None;
        'attempt: for _ in 0..MAX_SAMPLER_ATTEMPTS {
            let mut taken = placed[src].clone();
            let mut pairs = Vec::with_capacity(visit_len);
            for _ in 0..visit_len {
                match draw_positive_pair(img.width(), img.height(), cfg, &taken, &mut rng) {
                    Some((a, b)) => {
                        taken.push(a);
                        taken.push(b);
                        pairs.push((a, b));
                    }
                    None => continue 'attempt,
                }
            }
            accepted = Some((taken, pairs));
            break;
        }
        let (taken, pairs) = accepted.ok_or_else(|| Error::SamplerExhausted {
            attempts: MAX_SAMPLER_ATTEMPTS,
            reason: format!(
                "no disjoint crop sites left in image {:?} ({}x{}) for pairs {visit_start}..{}",
                img.id,
                img.width(),
                img.height(),
                visit_start + visit_len
            ),
        })?;
        placed[src] = taken;
        for (a, b) in pairs {
            plan.push((src, a, b, rng.random::<u64>(), rng.random::<u64>()));
        }
    }

    let rendered: Vec<Result<((ImageBuffer, Homography), (ImageBuffer, Homography))>> = plan
        .par_iter()
        .map(|(src, a, b, seed_a, seed_b)| {
            let img = &images[*src];
            Ok((render_view(img, a, cfg, *seed_a)?, render_view(img, b, cfg, *seed_b)?))
        })
        .collect();

    let mut batch = DetectorPairBatch {
        views_a: Vec::with_capacity(n_pairs),
        views_b: Vec::with_capacity(n_pairs),
        source_ids: Vec::with_capacity(n_pairs),
        source_indices: Vec::with_capacity(n_pairs),
        geometry: Vec::with_capacity(n_pairs),
    };
    for ((src, a, b, _, _), views) in plan.into_iter().zip(rendered) {
        let ((view_a, warp_a), (view_b, warp_b)) = views?;
        batch.views_a.push(view_a);
        batch.views_b.push(view_b);
        batch.source_ids.push(images[src].id.clone());
        batch.source_indices.push(src);
        batch.geometry.push(PairGeometry {
            rect_a: a,
            rect_b: b,
            warp_a,
            warp_b,
        });
    }
    Ok(batch)
}

/// A keypoint-centred positive pair plus neighbouring negatives.
///
/// Each negative also carries a second, independently augmented view
/// (`negative_partners`) so that neighbours can enter a contrastive batch
/// as pairs of their own.
#[derive(Debug, Clone)]
pub struct DescriptorNeighborhoodBatch {
    pub center: (i64, i64),
    pub keypoint_index: usize,
    pub anchor: ImageBuffer,
    pub positive: ImageBuffer,
    pub negatives: Vec<ImageBuffer>,
    pub negative_partners: Vec<ImageBuffer>,
    pub negative_centers: Vec<(i64, i64)>,
    /// Indices of keypoints rejected for lying too close to the border.
    pub skipped: Vec<usize>,
}

/// Top-left corner of the `patch_size` square centred at `(cx, cy)`.
pub fn patch_rect(cx: i64, cy: i64, patch_size: usize) -> Rect {
    let half = patch_size as i64 / 2;
    Rect {
        x0: cx - half,
        y0: cy - half,
        w: patch_size as i64,
        h: patch_size as i64,
    }
}

fn valid_offsets(cx: i64, cy: i64, image: &ImageBuffer, patch_size: usize, radius: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx == 0 && dy == 0 {
                continue;
            }
            if patch_rect(cx + dx, cy + dy, patch_size).fits_within(image.width(), image.height()) {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Picks one keypoint (uniformly among those whose patch and `n_negatives`
/// neighbour patches fit inside the image) and crops its neighbourhood.
pub fn sample_descriptor_batch(
    image: &ImageBuffer,
    keypoints: &KeypointSet,
    patch_size: usize,
    n_negatives: usize,
    radius: usize,
    photometric: &PhotometricConfig,
    rng_seed: u64,
) -> Result<DescriptorNeighborhoodBatch> {
    if keypoints.is_empty() {
        return Err(Error::Precondition("no keypoints to sample from".into()));
    }
    if patch_size == 0 || radius == 0 {
        return Err(Error::InvalidConfig("patch_size and radius must be >= 1".into()));
    }
    let radius = radius as i64;
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for (i, kp) in keypoints.points.iter().enumerate() {
        let (cx, cy) = (kp.x as i64, kp.y as i64);
        let fits = patch_rect(cx, cy, patch_size).fits_within(image.width(), image.height());
        if fits && valid_offsets(cx, cy, image, patch_size, radius).len() >= n_negatives {
            usable.push(i);
        } else {
            skipped.push(i);
        }
    }
    if usable.is_empty() {
        return Err(Error::DegenerateKeypoint { skipped: skipped.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let keypoint_index = usable[rng.random_range(0..usable.len())];
    let kp = &keypoints.points[keypoint_index];
    let (cx, cy) = (kp.x as i64, kp.y as i64);
    let mut offsets = valid_offsets(cx, cy, image, patch_size, radius);
    offsets.shuffle(&mut rng);
    offsets.truncate(n_negatives);

    let base = image.crop(&patch_rect(cx, cy, patch_size))?;
    let anchor = photometric_augment(&base, photometric, &mut rng);
    let positive = photometric_augment(&base, photometric, &mut rng);
    let mut negatives = Vec::with_capacity(offsets.len());
    let mut negative_partners = Vec::with_capacity(offsets.len());
    let mut negative_centers = Vec::with_capacity(offsets.len());
    for (dx, dy) in offsets {
        let center = (cx + dx, cy + dy);
        let patch = image.crop(&patch_rect(center.0, center.1, patch_size))?;
        negatives.push(photometric_augment(&patch, photometric, &mut rng));
        negative_partners.push(photometric_augment(&patch, photometric, &mut rng));
        negative_centers.push(center);
    }
    Ok(DescriptorNeighborhoodBatch {
        center: (cx, cy),
        keypoint_index,
        anchor,
        positive,
        negatives,
        negative_partners,
        negative_centers,
        skipped,
    })
}
