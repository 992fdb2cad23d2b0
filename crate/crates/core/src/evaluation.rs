//! Repeatability, localization error and homography correctness over
//! HPatches-layout benchmark directories.
//!
//! Detections are never filtered by the ground-truth homography: points
//! that leave the partner frame still count in the denominators.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageBuffer;
use crate::descriptor::{describe, estimate_homography, match_descriptors, RansacConfig, DEFAULT_PATCH_SIZE};
use crate::detector::{KeypointSet, PairDetector};
use crate::error::{Error, Result};
use crate::geometry::{corner_transfer_error, Homography, Point2};
use crate::model::Model;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Correctness radius in pixels.
    pub epsilon: f64,
    /// Summed-corner-error thresholds for homography correctness.
    pub homography_epsilons: Vec<f64>,
    /// `(height, width)` every benchmark image is resized to.
    pub resolution: (usize, usize),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epsilon: 3.0,
            homography_epsilons: vec![1.0, 3.0, 5.0],
            resolution: crate::data::DEFAULT_RESOLUTION,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.homography_epsilons.is_empty() || self.homography_epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidConfig("homography_epsilons must be non-empty and positive".into()));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::InvalidConfig("resolution must be positive".into()));
        }
        Ok(())
    }
}

fn point_of(kp: &crate::detector::Keypoint) -> Point2 {
    Point2::new(kp.x as f64, kp.y as f64)
}

/// Distance from `H x` to the nearest candidate, or `None` when there are
/// no candidates or `x` maps to infinity.
pub fn nearest_transfer_distance(x: Point2, candidates: &KeypointSet, h: &Homography) -> Option<f64> {
    let p = h.apply(x).ok()?;
    candidates
        .points
        .iter()
        .map(|c| p.distance(&point_of(c)))
        .min_by(f64::total_cmp)
}

/// Whether `x`, transferred by `h`, lands within `epsilon` of a candidate.
pub fn correctness(x: Point2, candidates: &KeypointSet, h: &Homography, epsilon: f64) -> bool {
    nearest_transfer_distance(x, candidates, h).is_some_and(|d| d <= epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityResult {
    pub rep: f64,
    /// Mean transfer distance over correct points of both directions.
    pub le: Option<f64>,
    pub n1: usize,
    pub n2: usize,
    pub correct_ref: usize,
    pub correct_tgt: usize,
}

impl RepeatabilityResult {
    pub fn correct(&self) -> usize {
        self.correct_ref + self.correct_tgt
    }
}

/// Counts reference points correct under `h` and target points correct
/// under `inverse(h)`.
pub fn repeatability(kps_ref: &KeypointSet, kps_tgt: &KeypointSet, h: &Homography, epsilon: f64) -> Result<RepeatabilityResult> {
    let (n1, n2) = (kps_ref.len(), kps_tgt.len());
    if n1 + n2 == 0 {
        return Err(Error::EmptyDetections);
    }
    let h_inv = h.inverse()?;
    let mut distances = Vec::new();
    let mut count = |from: &KeypointSet, to: &KeypointSet, map: &Homography| {
        let mut correct = 0;
        for kp in &from.points {
            if let Some(d) = nearest_transfer_distance(point_of(kp), to, map) {
                if d <= epsilon {
                    correct += 1;
                    distances.push(d);
                }
            }
        }
        correct
    };
    let correct_ref = count(kps_ref, kps_tgt, h);
    let correct_tgt = count(kps_tgt, kps_ref, &h_inv);
    let le = (!distances.is_empty()).then(|| distances.iter().sum::<f64>() / distances.len() as f64);
    Ok(RepeatabilityResult {
        rep: (correct_ref + correct_tgt) as f64 / (n1 + n2) as f64,
        le,
        n1,
        n2,
        correct_ref,
        correct_tgt,
    })
}

/// `(epsilon, correct)` for each threshold; a failed estimate (`None`) is
/// incorrect everywhere.
pub fn homography_correctness(
    h_gt: &Homography,
    h_est: Option<&Homography>,
    width: usize,
    height: usize,
    epsilons: &[f64],
) -> Vec<(f64, bool)> {
    let error = h_est.and_then(|h| corner_transfer_error(h_gt, h, width, height).ok());
    epsilons
        .iter()
        .map(|&e| (e, error.is_some_and(|err| err <= e)))
        .collect()
}

/// Reference image, targets and ground-truth homographies of one sequence,
/// rescaled to the evaluation resolution.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub reference: ImageBuffer,
    pub targets: Vec<ImageBuffer>,
    pub homographies: Vec<Homography>,
}

fn find_image(dir: &Path, stem: usize) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn load_rescaled(path: &Path, id: String, resolution: (usize, usize)) -> Result<(ImageBuffer, Homography)> {
    let mut img = ImageBuffer::load(path, None)?;
    let (h, w) = resolution;
    let scale = Homography::scaling(w as f64 / img.width() as f64, h as f64 / img.height() as f64);
    if (img.width(), img.height()) != (w, h) {
        img = img.resize(w, h);
    }
    img.id = id;
    Ok((img, scale))
}

/// Loads `<dir>/1.* .. n.*` and `H_1_2 .. H_1_n`. Homographies are
/// adjusted for the resize as `S_tgt · H · S_ref⁻¹`.
pub fn load_sequence(dir: &Path, resolution: (usize, usize)) -> Result<Sequence> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let malformed = |reason: String| Error::MalformedSequence {
        path: dir.to_path_buf(),
        reason,
    };
    let ref_path = find_image(dir, 1).ok_or_else(|| malformed("missing reference image 1".into()))?;
    let (reference, s_ref) = load_rescaled(&ref_path, format!("{name}/1"), resolution)?;
    let s_ref_inv = s_ref.inverse()?;
    let mut targets = Vec::new();
    let mut homographies = Vec::new();
    for n in 2.. {
        let h_path = dir.join(format!("H_1_{n}"));
        let img_path = find_image(dir, n);
        match (img_path, h_path.is_file()) {
            (None, false) => break,
            (None, true) => return Err(malformed(format!("H_1_{n} has no image {n}"))),
            (Some(_), false) => return Err(malformed(format!("image {n} has no H_1_{n}"))),
            (Some(p), true) => {
                let (img, s_tgt) = load_rescaled(&p, format!("{name}/{n}"), resolution)?;
                let h = Homography::read(&h_path).map_err(|e| malformed(format!("H_1_{n}: {e}")))?;
                homographies.push(s_tgt.compose(&h)?.compose(&s_ref_inv)?);
                targets.push(img);
            }
        }
    }
    if targets.is_empty() {
        return Err(malformed("no target images".into()));
    }
    Ok(Sequence {
        name,
        reference,
        targets,
        homographies,
    })
}

/// Sorted sequence directories of a benchmark root.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MalformedSequence {
            path: root.to_path_buf(),
            reason: "benchmark contains no sequences".into(),
        });
    }
    Ok(dirs)
}

/// Description, matching and robust-estimation settings for homography
/// correctness.
pub struct Describer<'a> {
    pub model: &'a Model,
    pub patch_size: usize,
    pub min_score: f64,
    pub ransac: RansacConfig,
}

impl<'a> Describer<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            model,
            patch_size: DEFAULT_PATCH_SIZE,
            min_score: 0.0,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub sequence: String,
    /// Index of the target image (2 for `H_1_2`).
    pub target: usize,
    pub n1: usize,
    pub n2: usize,
    pub correct: usize,
    pub rep: f64,
    pub le: Option<f64>,
    pub matches: Option<usize>,
    pub inliers: Option<usize>,
    /// `(epsilon, correct)` when a describer was supplied.
    pub corr_h: Option<Vec<(f64, bool)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pairs: usize,
    pub rep: f64,
    pub le: Option<f64>,
    pub corr_h: Option<Vec<(f64, f64)>>,
    pub n1: usize,
    pub n2: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub name: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub detector: String,
    pub eval: EvalConfig,
    pub filtering: String,
    pub describer: Option<(usize, f64, RansacConfig)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub pairs: Vec<PairRecord>,
    pub sequences: Vec<SequenceSummary>,
    pub aggregate: Summary,
}

/// Unweighted mean over pair records.
pub fn summarize(records: &[PairRecord]) -> Summary {
    let n = records.len();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let reps: Vec<f64> = records.iter().map(|r| r.rep).collect();
    let les: Vec<f64> = records.iter().filter_map(|r| r.le).collect();
    let corr_h = records.first().and_then(|r| r.corr_h.as_ref()).map(|first| {
        first
            .iter()
            .enumerate()
            .map(|(k, (eps, _))| {
                let hits = records
                    .iter()
                    .filter(|r| r.corr_h.as_ref().is_some_and(|c| c[k].1))
                    .count();
                (*eps, hits as f64 / n as f64)
            })
            .collect()
    });
    Summary {
        pairs: n,
        rep: mean(&reps).unwrap_or(0.0),
        le: mean(&les),
        corr_h,
        n1: records.iter().map(|r| r.n1).sum(),
        n2: records.iter().map(|r| r.n2).sum(),
        correct: records.iter().map(|r| r.correct).sum(),
    }
}

fn evaluate_pair(
    seq: &Sequence,
    t: usize,
    detector: &dyn PairDetector,
    describer: Option<&Describer<'_>>,
    cfg: &EvalConfig,
) -> Result<PairRecord> {
    let target = &seq.targets[t];
    let h = &seq.homographies[t];
    let (kr, kt) = detector.detect_pair(&seq.reference, target)?;
    let rep = match repeatability(&kr, &kt, h, cfg.epsilon) {
        Ok(r) => r,
        Err(Error::EmptyDetections) => {
            log::warn!("{} pair {}: no detections in either image", seq.name, t + 2);
            RepeatabilityResult {
                rep: 0.0,
                le: None,
                n1: 0,
                n2: 0,
                correct_ref: 0,
                correct_tgt: 0,
            }
        }
        Err(e) => return Err(e),
    };
    let (mut matches, mut inliers, mut corr_h) = (None, None, None);
    if let Some(d) = describer {
        let dr = describe(d.model, &seq.reference, &kr, d.patch_size)?;
        let dt = describe(d.model, target, &kt, d.patch_size)?;
        let m = match_descriptors(&dr, &dt, d.min_score);
        let estimate = match estimate_homography(&m, &kr, &kt, &d.ransac) {
            Ok(est) => Some(est),
            Err(Error::InsufficientMatches(_) | Error::DegenerateConfiguration) => None,
            Err(e) => return Err(e),
        };
        let (height, width) = cfg.resolution;
        matches = Some(m.len());
        inliers = Some(estimate.as_ref().map_or(0, |e| e.inlier_count()));
        corr_h = Some(homography_correctness(
            h,
            estimate.as_ref().map(|e| &e.homography),
            width,
            height,
            &cfg.homography_epsilons,
        ));
    }
    Ok(PairRecord {
        sequence: seq.name.clone(),
        target: t + 2,
        n1: rep.n1,
        n2: rep.n2,
        correct: rep.correct(),
        rep: rep.rep,
        le: rep.le,
        matches,
        inliers,
        corr_h,
    })
}

/// Evaluates every `(reference, target)` pair of every sequence.
pub fn run_benchmark(
    benchmark_dir: &Path,
    detector: &dyn PairDetector,
    describer: Option<&Describer<'_>>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let dirs = list_sequences(benchmark_dir)?;
    let sequences: Vec<Sequence> = dirs
        .par_iter()
        .map(|d| load_sequence(d, cfg.resolution))
        .collect::<Result<_>>()?;
    let per_sequence: Vec<Vec<PairRecord>> = sequences
        .par_iter()
        .map(|seq| {
            (0..seq.targets.len())
                .map(|t| evaluate_pair(seq, t, detector, describer, cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let summaries = sequences
        .iter()
        .zip(&per_sequence)
        .map(|(s, recs)| SequenceSummary {
            name: s.name.clone(),
            summary: summarize(recs),
        })
        .collect();
    let pairs: Vec<PairRecord> = per_sequence.into_iter().flatten().collect();
    let aggregate = summarize(&pairs);
    Ok(EvalReport {
        settings: EvalSettings {
            detector: detector.name(),
            eval: cfg.clone(),
            filtering: "none".into(),
            describer: describer.map(|d| (d.patch_size, d.min_score, d.ransac.clone())),
        },
        pairs,
        sequences: summaries,
        aggregate,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EvalReport {
    /// One row per pair: `sequence,target,n1,n2,correct,rep,le[,matches,inliers,corr_h@eps...]`.
    pub fn to_csv(&self) -> String {
        let eps = &self.settings.eval.homography_epsilons;
        let with_h = self.settings.describer.is_some();
        let mut out = String::from("sequence,target,n1,n2,correct,rep,le");
        if with_h {
            out.push_str(",matches,inliers");
            for e in eps {
                let _ = write!(out, ",corr_h@{e}");
            }
        }
        out.push('\n');
        for r in &self.pairs {
            let _ = write!(out, "{},{},{},{},{},{},{}", r.sequence, r.target, r.n1, r.n2, r.correct, r.rep, opt(r.le));
            if with_h {
                let _ = write!(out, ",{},{}", r.matches.unwrap_or(0), r.inliers.unwrap_or(0));
                for (_, ok) in r.corr_h.iter().flatten() {
                    let _ = write!(out, ",{}", u8::from(*ok));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.settings;
        let _ = writeln!(out, "detector: {}", s.detector);
        let _ = writeln!(out, "epsilon: {} px (filtering: {})", s.eval.epsilon, s.filtering);
        let _ = writeln!(out, "resolution: {}x{}", s.eval.resolution.0, s.eval.resolution.1);
        let _ = writeln!(out);
        let line = |out: &mut String, name: &str, m: &Summary| {
            let _ = write!(out, "{name:<24} pairs {:>3}  REP {:.4}  LE {:>7}", m.pairs, m.rep, m.le.map_or("-".into(), |v| format!("{v:.4}")));
            for (e, v) in m.corr_h.iter().flatten() {
                let _ = write!(out, "  CorrH@{e} {v:.3}");
            }
            out.push('\n');
        };
        for seq in &self.sequences {
            line(&mut out, &seq.name, &seq.summary);
        }
        let _ = writeln!(out);
        line(&mut out, "all", &self.aggregate);
        let a = &self.aggregate;
        let _ = writeln!(out, "N1 {}  N2 {}  correct {}", a.n1, a.n2, a.correct);
        out
    }

    /// Writes `report.json`, `pairs.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        let files = [
            ("report.json", json),
            ("pairs.csv", self.to_csv()),
            ("summary.txt", self.to_text()),
        ];
        let mut paths = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}
