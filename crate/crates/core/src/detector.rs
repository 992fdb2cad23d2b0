//! Keypoint detection by joint guided grad-CAM.
//!
//! For a pair of images each image's last feature maps are modulated
//! channel-wise by the partner's pooled latent, the most activated common
//! neuron is backpropagated to both inputs with guided gating, and the
//! resulting gradient images are attenuated by a grad-CAM mask computed
//! on the modulated maps. Keypoints are the strict local maxima of that
//! saliency.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBuffer;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Gating, Model};
use crate::tensor::Tensor3;

pub const DEFAULT_NMS_WINDOW: usize = 3;
pub const DEFAULT_TOP_K: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    /// Pooled encoder output.
    H,
    /// Normalized projection-head output.
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionMode {
    Joint,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyReduce {
    ChannelMaxAbs,
}

macro_rules! text_enum {
    ($ty:ty, $($variant:path => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(Error::InvalidConfig(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

text_enum!(LatentSource, LatentSource::H => "h", LatentSource::Z => "z");
text_enum!(DetectionMode, DetectionMode::Joint => "joint", DetectionMode::Single => "single");
text_enum!(SaliencyReduce, SaliencyReduce::ChannelMaxAbs => "channel-max-abs");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub source: LatentSource,
    pub mode: DetectionMode,
    pub nms_window: usize,
    pub top_k: usize,
    pub saliency_reduce: SaliencyReduce,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            source: LatentSource::H,
            mode: DetectionMode::Joint,
            nms_window: DEFAULT_NMS_WINDOW,
            top_k: DEFAULT_TOP_K,
            saliency_reduce: SaliencyReduce::ChannelMaxAbs,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nms_window == 0 || self.nms_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "nms_window must be odd and >= 1, got {}",
                self.nms_window
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: u32,
    pub y: u32,
    pub score: f64,
}

/// Detections of one image, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
    pub image_id: String,
}

impl KeypointSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            points: Vec::new(),
            image_id: image_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Non-negative per-pixel saliency.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Set when the selected neuron had no gradient path to the image; the
    /// map is then all zero.
    pub dead: bool,
}

impl SaliencyMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            dead: false,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

fn latent_of(trace: &ForwardTrace, source: LatentSource) -> &[f64] {
    match source {
        LatentSource::H => &trace.latent,
        LatentSource::Z => &trace.projection,
    }
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Index of the largest entry of `latent_ref ⊙ latent_tgt`; ties go to the
/// lowest index.
pub fn select_common_neuron(trace_ref: &ForwardTrace, trace_tgt: &ForwardTrace, source: LatentSource) -> usize {
    let a = latent_of(trace_ref, source);
    let b = latent_of(trace_tgt, source);
    argmax_lowest(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Bilinear resize of a single-channel map, sampling at pixel centers.
pub fn upsample_bilinear(map: &[f64], width: usize, height: usize, out_width: usize, out_height: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_width * out_height];
    let sx = width as f64 / out_width as f64;
    let sy = height as f64 / out_height as f64;
    for oy in 0..out_height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let wx = fx - x0 as f64;
            let top = map[y0 * width + x0] * (1.0 - wx) + map[y0 * width + x1] * wx;
            let bottom = map[y1 * width + x0] * (1.0 - wx) + map[y1 * width + x1] * wx;
            out[oy * out_width + ox] = top * (1.0 - wy) + bottom * wy;
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`. An all-zero map stays zero and a constant
/// positive map becomes all ones.
fn normalize_unit(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        values.fill(0.0);
    } else if max - min <= 0.0 {
        values.fill(1.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - min) / (max - min));
    }
}

/// One image's half of the saliency computation.
struct SaliencyInput<'a> {
    trace: &'a ForwardTrace,
    /// Per-channel modulation of the feature maps; `None` leaves them as is.
    modulation: Option<&'a [f64]>,
    neuron: usize,
}

fn saliency_for(model: &Model, input: &SaliencyInput<'_>, cfg: &DetectorConfig) -> Result<SaliencyMap> {
    let trace = input.trace;
    let (_, height, width) = trace.input_shape();
    let a = &trace.feature_maps;
    let modulated = match input.modulation {
        Some(m) => a.scale_channels(m),
        None => a.clone(),
    };
    let pooled = modulated.spatial_mean();
    let n = input.neuron;
    let plane = a.plane_len() as f64;

    // Gradient of the target scalar with respect to the pooled modulated
    // latent, standard (for grad-CAM) and gated (for guided backprop).
    let (activation, grad_std, grad_guided) = match cfg.source {
        LatentSource::H => {
            let mut g = vec![0.0; pooled.len()];
            g[n] = 1.0;
            (pooled[n], g.clone(), g)
        }
        LatentSource::Z => {
            let head = model.project(&pooled);
            let mut gz = vec![0.0; head.output().len()];
            gz[n] = 1.0;
            let std = model.project_backward(&head, &gz, Gating::Standard, None);
            let guided = model.project_backward(&head, &gz, Gating::Guided, None);
            (head.output()[n], std, guided)
        }
    };
    let dead = || SaliencyMap {
        dead: true,
        ..SaliencyMap::zeros(width, height)
    };
    if activation == 0.0 {
        log::warn!("selected neuron {n} is inactive; saliency is empty");
        return Ok(dead());
    }

    // Grad-CAM on the modulated maps. The gradient of the pooled scalar is
    // spatially uniform, so its spatial mean is the pooled gradient / |A|.
    let mut cam = vec![0.0; a.plane_len()];
    for (c, &g) in grad_std.iter().enumerate() {
        let alpha = g / plane;
        if alpha != 0.0 {
            cam.iter_mut().zip(modulated.plane(c)).for_each(|(m, v)| *m += alpha * v);
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut mask = upsample_bilinear(&cam, a.width, a.height, width, height);
    normalize_unit(&mut mask);

    // Guided gradient to the input through A* = A ⊙ m.
    let mut grad_a = Tensor3::zeros(a.channels, a.height, a.width);
    for (c, &g) in grad_guided.iter().enumerate() {
        let scale = input.modulation.map_or(1.0, |m| m[c]);
        grad_a.plane_mut(c).fill(g * scale / plane);
    }
    let grad_input = model
        .encoder_backward(trace, &grad_a, Gating::Guided, None, true)
        .expect("input gradient requested");
    if grad_input.data.iter().all(|v| *v == 0.0) {
        log::warn!("neuron {n} has no guided gradient path; saliency is empty");
        return Ok(dead());
    }

    let mut values = vec![0.0f64; width * height];
    match cfg.saliency_reduce {
        SaliencyReduce::ChannelMaxAbs => {
            for c in 0..grad_input.channels {
                for (v, g) in values.iter_mut().zip(grad_input.plane(c)) {
                    *v = f64::max(*v, g.abs());
                }
            }
        }
    }
    values.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    Ok(SaliencyMap {
        width,
        height,
        values,
        dead: false,
    })
}

fn forward_pair(model: &Model, a: &ImageBuffer, b: &ImageBuffer) -> Result<(ForwardTrace, ForwardTrace)> {
    let (ta, tb) = rayon::join(|| model.forward(a), || model.forward(b));
    Ok((ta?, tb?))
}

/// Saliency maps of both images under cross-modulation.
///
/// Each image's feature maps are multiplied channel-wise by the partner's
/// pooled latent `h` regardless of `cfg.source`; the source only picks
/// which latent selects and carries the backpropagated neuron.
pub fn joint_saliency(
    model: &Model,
    image_ref: &ImageBuffer,
    image_tgt: &ImageBuffer,
    cfg: &DetectorConfig,
) -> Result<(SaliencyMap, SaliencyMap)> {
    cfg.validate()?;
    let (tr, tt) = forward_pair(model, image_ref, image_tgt)?;
    let neuron = select_common_neuron(&tr, &tt, cfg.source);
    let ref_input = SaliencyInput {
        trace: &tr,
        modulation: Some(&tt.latent),
        neuron,
    };
    let tgt_input = SaliencyInput {
        trace: &tt,
        modulation: Some(&tr.latent),
        neuron,
    };
    let (sr, st) = rayon::join(
        || saliency_for(model, &ref_input, cfg),
        || saliency_for(model, &tgt_input, cfg),
    );
    Ok((sr?, st?))
}

/// Saliency of one image from its own most activated neuron, without
/// modulation.
pub fn single_saliency(model: &Model, image: &ImageBuffer, cfg: &DetectorConfig) -> Result<SaliencyMap> {
    cfg.validate()?;
    let trace = model.forward(image)?;
    let neuron = argmax_lowest(latent_of(&trace, cfg.source).iter().copied());
    saliency_for(
        model,
        &SaliencyInput {
            trace: &trace,
            modulation: None,
            neuron,
        },
        cfg,
    )
}

/// Window of radius `r` around `(x, y)` clipped to the map.
fn window(x: usize, y: usize, r: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    (x.saturating_sub(r), (x + r).min(width - 1), y.saturating_sub(r), (y + r).min(height - 1))
}

/// A pixel survives iff it beats every other pixel of its window, where
/// equal scores go to the smaller `(y, x)`. Survivors with positive score
/// are ranked by score (then `(y, x)`) and the first `top_k` are kept.
pub fn nms_topk(saliency: &SaliencyMap, cfg: &DetectorConfig, image_id: &str) -> KeypointSet {
    let (w, h) = (saliency.width, saliency.height);
    let r = cfg.nms_window / 2;
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let score = saliency.get(x, y);
            if score <= 0.0 || !score.is_finite() {
                continue;
            }
            let (x0, x1, y0, y1) = window(x, y, r, w, h);
            let survives = (y0..=y1).all(|qy| {
                (x0..=x1).all(|qx| {
                    let other = saliency.get(qx, qy);
                    (qx == x && qy == y) || other < score || (other == score && (y, x) < (qy, qx))
                })
            });
            if survives {
                points.push(Keypoint {
                    x: x as u32,
                    y: y as u32,
                    score,
                });
            }
        }
    }
    points.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.y, a.x).cmp(&(b.y, b.x))));
    points.truncate(cfg.top_k);
    KeypointSet {
        points,
        image_id: image_id.to_string(),
    }
}

/// Runs detection; joint mode needs `image_tgt` and returns both sets.
pub fn detect(
    model: &Model,
    image_ref: &ImageBuffer,
    image_tgt: Option<&ImageBuffer>,
    cfg: &DetectorConfig,
) -> Result<(KeypointSet, Option<KeypointSet>)> {
    match (cfg.mode, image_tgt) {
        (DetectionMode::Joint, Some(tgt)) => {
            let (sr, st) = joint_saliency(model, image_ref, tgt, cfg)?;
            Ok((nms_topk(&sr, cfg, &image_ref.id), Some(nms_topk(&st, cfg, &tgt.id))))
        }
        (DetectionMode::Joint, None) => Err(Error::Precondition("joint detection needs a target image".into())),
        (DetectionMode::Single, tgt) => {
            let sr = single_saliency(model, image_ref, cfg)?;
            let kr = nms_topk(&sr, cfg, &image_ref.id);
            let kt = match tgt {
                Some(t) => Some(nms_topk(&single_saliency(model, t, cfg)?, cfg, &t.id)),
                None => None,
            };
            Ok((kr, kt))
        }
    }
}

/// Anything that turns an image pair into two keypoint sets.
pub trait PairDetector: Sync {
    fn detect_pair(&self, image_ref: &ImageBuffer, image_tgt: &ImageBuffer) -> Result<(KeypointSet, KeypointSet)>;

    fn name(&self) -> String;
}

pub struct CorrNetDetector<'a> {
    pub model: &'a Model,
    pub config: DetectorConfig,
}

impl PairDetector for CorrNetDetector<'_> {
    fn detect_pair(&self, image_ref: &ImageBuffer, image_tgt: &ImageBuffer) -> Result<(KeypointSet, KeypointSet)> {
        let (kr, kt) = detect(self.model, image_ref, Some(image_tgt), &self.config)?;
        Ok((kr, kt.expect("target given")))
    }

    fn name(&self) -> String {
        format!("corrnet-{}-{}", self.config.mode, self.config.source)
    }
}

/// Baseline: strict local maxima of uniform noise, ranked like real
/// saliency. The noise for an image depends only on the seed and the image
/// id.
pub struct RandomDetector {
    pub seed: u64,
    pub nms_window: usize,
    pub top_k: usize,
}

impl RandomDetector {
    pub fn detect_image(&self, image: &ImageBuffer) -> KeypointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(image.id.as_bytes()));
        let (w, h) = (image.width(), image.height());
        let noise = SaliencyMap {
            width: w,
            height: h,
            values: (0..w * h).map(|_| rng.random::<f64>() + f64::MIN_POSITIVE).collect(),
            dead: false,
        };
        let cfg = DetectorConfig {
            nms_window: self.nms_window,
            top_k: self.top_k,
            ..DetectorConfig::default()
        };
        nms_topk(&noise, &cfg, &image.id)
    }
}

impl PairDetector for RandomDetector {
    fn detect_pair(&self, image_ref: &ImageBuffer, image_tgt: &ImageBuffer) -> Result<(KeypointSet, KeypointSet)> {
        Ok((self.detect_image(image_ref), self.detect_image(image_tgt)))
    }

    fn name(&self) -> String {
        "random".into()
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Writes `x y score` lines.
pub fn write_keypoints(path: &Path, keypoints: &KeypointSet) -> Result<()> {
    let mut text = String::new();
    for p in &keypoints.points {
        text.push_str(&format!("{} {} {}\n", p.x, p.y, p.score));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_keypoints(path: &Path, image_id: &str) -> Result<KeypointSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Parse(format!("{}:{}: expected `x y score`", path.display(), n + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        points.push(Keypoint {
            x: fields[0].parse().map_err(|_| bad())?,
            y: fields[1].parse().map_err(|_| bad())?,
            score: fields[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(KeypointSet {
        points,
        image_id: image_id.to_string(),
    })
}
