//! Contrastive optimization of the detector weights and of the separate
//! descriptor weights.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::sampler::sample_descriptor_batch;
use crate::data::{sample_detector_batch, AugmentationConfig, ImageBuffer, PhotometricConfig};
use crate::detector::{CorrNetDetector, DetectorConfig, KeypointSet, LatentSource};
use crate::error::{Error, Result};
use crate::evaluation::{run_benchmark, EvalConfig};
use crate::loss::{nt_xent_loss_with_grad, ContrastiveBatchEmbeddings};
use crate::model::{round_to_f32, Gradients, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `N`; each step sees `2N` views.
    pub batch_pairs: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Epochs between repeatability probes; 0 disables probing.
    pub eval_every: usize,
    pub validation_fraction: f64,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            batch_pairs: 16,
            epochs: 20,
            batches_per_epoch: 8,
            temperature: crate::loss::DEFAULT_TEMPERATURE,
            seed: 0,
            eval_every: 5,
            validation_fraction: 0.1,
            augmentation: AugmentationConfig::default(),
        }
    }
}

/// Views per step above which a batch no longer fits comfortably in memory
/// at the default view size.
pub const MAX_BATCH_VIEWS: usize = 1024;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_pairs < 2 || 2 * self.batch_pairs > MAX_BATCH_VIEWS {
            return bad(format!("batch_pairs must be in 2..={}, got {}", MAX_BATCH_VIEWS / 2, self.batch_pairs));
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return bad("epochs and batches_per_epoch must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        self.augmentation.validate()
    }
}

/// First-order adaptive-moment optimizer with L2 weight decay folded into
/// the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = Gradients::zeros_like(model).tensors;
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates the weights in place; results are rounded to `f32`.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, values) in model.parameter_values_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.tensors[k]);
            for i in 0..values.len() {
                let gi = g[i] + self.weight_decay * values[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
                values[i] -= update;
            }
            round_to_f32(values);
        }
    }
}

/// NT-Xent over `(views_a[i], views_b[i])` pairs, with gradients when
/// `grads` is given.
fn contrastive_pass(
    model: &Model,
    views_a: &[ImageBuffer],
    views_b: &[ImageBuffer],
    temperature: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let views: Vec<&ImageBuffer> = views_a.iter().chain(views_b).collect();
    let traces = views.par_iter().map(|v| model.forward(v)).collect::<Result<Vec<_>>>()?;
    let n = views_a.len();
    let rows: Vec<Vec<f64>> = traces.iter().map(|t| t.projection.clone()).collect();
    let batch = ContrastiveBatchEmbeddings::paired(rows[..n].to_vec(), rows[n..].to_vec(), temperature)?;
    let (loss, row_grads) = nt_xent_loss_with_grad(&batch);
    if let Some(total) = grads {
        let parts: Vec<Gradients> = traces
            .par_iter()
            .zip(&row_grads)
            .map(|(trace, g)| {
                let mut acc = Gradients::zeros_like(model);
                model.accumulate_parameter_gradients(trace, g, &mut acc);
                acc
            })
            .collect();
        for p in &parts {
            total.add_assign(p);
        }
    }
    Ok(loss.loss)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

/// Repeatability probe run between epochs.
#[derive(Debug, Clone)]
pub struct Probe {
    pub benchmark_dir: PathBuf,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub rep_h: Option<f64>,
    pub rep_z: Option<f64>,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Weights of the epoch with the lowest validation loss (the final
    /// weights when there is no validation split).
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Splits image indices into `(train, validation)` with a seeded shuffle.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if fraction > 0.0 { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) } else { 0 };
    let mut val = order.split_off(n - n_val);
    let mut train = order;
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn probe_repeatability(model: &Model, probe: &Probe) -> Result<(f64, f64)> {
    let mut reps = [0.0; 2];
    for (slot, source) in reps.iter_mut().zip([LatentSource::H, LatentSource::Z]) {
        let detector = CorrNetDetector {
            model,
            config: DetectorConfig {
                source,
                ..probe.detector.clone()
            },
        };
        *slot = run_benchmark(&probe.benchmark_dir, &detector, None, &probe.eval)?.aggregate.rep;
    }
    Ok((reps[0], reps[1]))
}

/// Trains in place on detector pair batches. `on_epoch` sees every record
/// as soon as it is complete.
pub fn train_corrnet(
    images: &[ImageBuffer],
    mut model: Model,
    cfg: &TrainConfig,
    probe: Option<&Probe>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::Precondition(format!("need at least 2 source images, got {}", images.len())));
    }
    let (train_idx, val_idx) = split_indices(images.len(), cfg.validation_fraction, cfg.seed);
    let train: Vec<ImageBuffer> = train_idx.iter().map(|&i| images[i].clone()).collect();
    let val: Vec<ImageBuffer> = val_idx.iter().map(|&i| images[i].clone()).collect();
    let val_batch = if val.is_empty() {
        None
    } else {
        let pairs = cfg.batch_pairs.min(2 * val.len()).max(2);
        Some(sample_detector_batch(&val, pairs, &cfg.augmentation, mix_seed(cfg.seed, u64::MAX, 0))?)
    };

    let mut adam = Adam::new(&model, cfg.learning_rate, cfg.weight_decay);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let batch = sample_detector_batch(&train, cfg.batch_pairs, &cfg.augmentation, mix_seed(cfg.seed, epoch as u64, b as u64))?;
            let mut grads = Gradients::zeros_like(&model);
            let loss = contrastive_pass(&model, &batch.views_a, &batch.views_b, cfg.temperature, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, value: loss });
            }
            adam.step(&mut model, &grads);
            total += loss;
        }
        let val_loss = match &val_batch {
            Some(vb) => {
                let l = contrastive_pass(&model, &vb.views_a, &vb.views_b, cfg.temperature, None)?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX, value: l });
                }
                Some(l)
            }
            None => None,
        };
        let (rep_h, rep_z) = match probe {
            Some(p) if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) => {
                let (h, z) = probe_repeatability(&model, p)?;
                (Some(h), Some(z))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / cfg.batches_per_epoch as f64,
            val_loss,
            rep_h,
            rep_z,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {}",
            record.train_loss,
            val_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );
        on_epoch(&record);
        let score = val_loss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s || val_loss.is_none()) {
            best = Some((score, epoch, model.clone()));
        }
        log.push(record);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_epoch,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptorTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Keypoint neighbourhoods per step; each adds `n_negatives + 1` pairs.
    pub neighborhoods_per_step: usize,
    pub patch_size: usize,
    pub n_negatives: usize,
    pub radius: usize,
    pub photometric: PhotometricConfig,
    pub seed: u64,
}

impl Default for DescriptorTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            temperature: crate::loss::DEFAULT_TEMPERATURE,
            epochs: 5,
            steps_per_epoch: 8,
            neighborhoods_per_step: 2,
            patch_size: crate::descriptor::DEFAULT_PATCH_SIZE,
            n_negatives: 7,
            radius: 12,
            photometric: PhotometricConfig::default(),
            seed: 0,
        }
    }
}

impl DescriptorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("rates must be >= 0 and temperature > 0".into()));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.neighborhoods_per_step == 0 {
            return Err(Error::InvalidConfig("epochs, steps and neighbourhoods must be >= 1".into()));
        }
        if self.patch_size == 0 || self.radius == 0 || self.n_negatives == 0 {
            return Err(Error::InvalidConfig("patch_size, radius and n_negatives must be >= 1".into()));
        }
        Ok(())
    }
}

/// Neighbourhood pairs of one step: the anchor with its positive and every
/// neighbour with its own second view.
fn neighborhood_pairs(
    images: &[ImageBuffer],
    keypoints: &[KeypointSet],
    cfg: &DescriptorTrainConfig,
    seed: u64,
) -> Result<(Vec<ImageBuffer>, Vec<ImageBuffer>)> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let mut taken = 0;
    for (k, &i) in order.iter().cycle().enumerate() {
        if taken == cfg.neighborhoods_per_step || k >= order.len() * cfg.neighborhoods_per_step.max(1) * 2 {
            break;
        }
        match sample_descriptor_batch(
            &images[i],
            &keypoints[i],
            cfg.patch_size,
            cfg.n_negatives,
            cfg.radius,
            &cfg.photometric,
            mix_seed(seed, i as u64, k as u64),
        ) {
            Ok(nb) => {
                a.push(nb.anchor);
                b.push(nb.positive);
                a.extend(nb.negatives);
                b.extend(nb.negative_partners);
                taken += 1;
            }
            Err(Error::DegenerateKeypoint { skipped }) => {
                log::warn!("image {:?}: all {skipped} keypoints too close to the border", images[i].id);
            }
            Err(e) => return Err(e),
        }
    }
    if taken == 0 {
        return Err(Error::Precondition("no usable keypoint neighbourhood in any image".into()));
    }
    Ok((a, b))
}

/// Fine-tunes a copy of `base` on keypoint neighbourhoods; `keypoints[i]`
/// belongs to `images[i]`.
pub fn train_descriptor(
    images: &[ImageBuffer],
    base: &Model,
    keypoints: &[KeypointSet],
    cfg: &DescriptorTrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Model> {
    cfg.validate()?;
    if images.is_empty() || images.len() != keypoints.len() {
        return Err(Error::Precondition(format!(
            "{} images with {} keypoint sets",
            images.len(),
            keypoints.len()
        )));
    }
    if let Some(i) = keypoints.iter().position(|k| k.is_empty()) {
        return Err(Error::Precondition(format!("no keypoints detected in image {:?}", images[i].id)));
    }
    let mut model = base.clone();
    let mut adam = Adam::new(&model, cfg.learning_rate, cfg.weight_decay);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let (a, b) = neighborhood_pairs(images, keypoints, cfg, mix_seed(cfg.seed, epoch as u64, step as u64))?;
            let mut grads = Gradients::zeros_like(&model);
            let loss = contrastive_pass(&model, &a, &b, cfg.temperature, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: step, value: loss });
            }
            adam.step(&mut model, &grads);
            total += loss;
        }
        on_epoch(&EpochRecord {
            epoch,
            train_loss: total / cfg.steps_per_epoch as f64,
            val_loss: None,
            rep_h: None,
            rep_z: None,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(model)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean `cos(anchor, positive) - cos(anchor, neighbour)` over sampled
/// neighbourhoods.
pub fn neighborhood_margin(
    model: &Model,
    images: &[ImageBuffer],
    keypoints: &[KeypointSet],
    cfg: &DescriptorTrainConfig,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut margins = Vec::new();
    for s in 0..samples {
        let i = s % images.len();
        let nb = match sample_descriptor_batch(
            &images[i],
            &keypoints[i],
            cfg.patch_size,
            cfg.n_negatives,
            cfg.radius,
            &cfg.photometric,
            mix_seed(seed, i as u64, s as u64),
        ) {
            Ok(nb) => nb,
            Err(Error::DegenerateKeypoint { .. }) => continue,
            Err(e) => return Err(e),
        };
        let anchor = model.forward(&nb.anchor)?.projection;
        let positive = model.forward(&nb.positive)?.projection;
        let negatives = nb
            .negatives
            .par_iter()
            .map(|n| model.forward(n).map(|t| cosine(&anchor, &t.projection)))
            .collect::<Result<Vec<_>>>()?;
        let neg_mean = negatives.iter().sum::<f64>() / negatives.len() as f64;
        margins.push(cosine(&anchor, &positive) - neg_mean);
    }
    if margins.is_empty() {
        return Err(Error::Precondition("no usable keypoint neighbourhood".into()));
    }
    Ok(margins.iter().sum::<f64>() / margins.len() as f64)
}
