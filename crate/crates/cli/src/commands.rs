use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use corrnet::data::{generate_synthetic_benchmark, load_image_dir, synthetic_scenes, BenchmarkMode, ImageBuffer};
use corrnet::descriptor::{describe, estimate_homography, match_descriptors, read_matches, write_matches};
use corrnet::detector::{
    detect, read_keypoints, write_keypoints, CorrNetDetector, DetectionMode, DetectorConfig, PairDetector,
    RandomDetector,
};
use corrnet::evaluation::{repeatability, run_benchmark, Describer};
use corrnet::model::{load_checkpoint, save_checkpoint, Model};
use corrnet::trainer::{train_corrnet, train_descriptor, EpochRecord, Probe};
use corrnet::Homography;
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{hash_inputs, sha256_file, FileHash, RunManifest};
use crate::render::{render_pair, PairFigure};
use crate::{
    BenchmarkModeArg, Command, DetectArgs, DetectorFlags, EvaluateArgs, GenScenesArgs, GenSyntheticArgs, MatchArgs,
    ReplayArgs, TrainArgs, TrainDescriptorArgs, UsageError, VisualizeArgs, CHECKPOINT_DIR_ENV,
};

/// What a finished command hands back for its manifest.
struct Outcome {
    out: PathBuf,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    checkpoint: Option<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

pub(crate) fn dispatch(command: Command, args: Vec<String>) -> Result<i32> {
    let start = Instant::now();
    let (name, outcome) = match command {
        Command::Replay(a) => return replay(a),
        Command::GenScenes(a) => ("gen-scenes", gen_scenes(a)?),
        Command::GenSynthetic(a) => ("gen-synthetic", gen_synthetic(a)?),
        Command::Train(a) => ("train", train(a)?),
        Command::TrainDescriptor(a) => ("train-descriptor", train_desc(a)?),
        Command::Detect(a) => ("detect", detect_cmd(a)?),
        Command::Match(a) => ("match", match_cmd(a)?),
        Command::Evaluate(a) => ("evaluate", evaluate(a)?),
        Command::Visualize(a) => ("visualize", visualize(a)?),
    };
    let mut inputs = Vec::new();
    for p in &outcome.inputs {
        inputs.extend(hash_inputs(p)?);
    }
    let mut outputs = Vec::new();
    for p in &outcome.outputs {
        outputs.extend(hash_inputs(p)?);
    }
    let checkpoint = match &outcome.checkpoint {
        Some(p) => Some(FileHash {
            sha256: sha256_file(p)?,
            path: p.clone(),
        }),
        None => None,
    };
    let manifest = RunManifest {
        command: name.into(),
        args,
        config: outcome.config,
        inputs,
        checkpoint,
        outputs,
        seed: outcome.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    manifest.write(&outcome.out)?;
    Ok(0)
}

fn replay(a: ReplayArgs) -> Result<i32> {
    let manifest = RunManifest::read(&a.manifest).map_err(|e| UsageError(format!("{e:#}")))?;
    let mut argv = vec!["corrnet".to_string()];
    argv.extend(manifest.replay_args(a.out.as_deref()));
    info!("replaying: {}", argv.join(" "));
    Ok(crate::run(argv))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// A relative checkpoint path that does not exist is looked up in the
/// default checkpoint directory.
fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(CHECKPOINT_DIR_ENV) {
        Some(dir) if Path::new(&dir).join(path).exists() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_model(path: &Path) -> Result<(Model, PathBuf)> {
    let path = resolve_checkpoint(path);
    let model = load_checkpoint(&path)?;
    Ok((model, path))
}

fn load_images(dir: &Path, resolution: (usize, usize)) -> Result<Vec<ImageBuffer>> {
    let loaded = load_image_dir(dir, resolution)?;
    if !loaded.errors.is_empty() {
        warn!("{} unreadable image(s) skipped in {}", loaded.errors.len(), dir.display());
    }
    Ok(loaded.images)
}

fn config_inputs(config: &Option<PathBuf>) -> Vec<PathBuf> {
    config.iter().cloned().collect()
}

fn apply_detector_flags(cfg: &mut DetectorConfig, flags: &DetectorFlags) {
    if let Some(m) = flags.mode {
        cfg.mode = m;
    }
    if let Some(s) = flags.source {
        cfg.source = s;
    }
    if let Some(k) = flags.top_k {
        cfg.top_k = k;
    }
    if let Some(n) = flags.nms {
        cfg.nms_window = n;
    }
}

/// Appends one JSON line per epoch; the first write error is kept and
/// reported after training.
struct EpochLog {
    file: File,
    error: Option<std::io::Error>,
}

impl EpochLog {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { file, error: None })
    }

    fn append(&mut self, record: &EpochRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("epoch records serialize");
        if let Err(e) = writeln!(self.file, "{line}").and_then(|_| self.file.flush()) {
            self.error = Some(e);
        }
    }

    fn finish(self, path: &Path) -> Result<()> {
        match self.error {
            Some(e) => Err(e).with_context(|| format!("writing {}", path.display())),
            None => Ok(()),
        }
    }
}

fn gen_scenes(a: GenScenesArgs) -> Result<Outcome> {
    if a.count == 0 || a.width == 0 || a.height == 0 {
        return Err(UsageError("--count, --width and --height must be >= 1".into()).into());
    }
    create_dir(&a.out)?;
    let mut outputs = Vec::with_capacity(a.count);
    for img in synthetic_scenes(a.count, a.width, a.height, a.seed) {
        let path = a.out.join(format!("{}.png", img.id));
        img.save_png(&path)?;
        outputs.push(path);
    }
    Ok(Outcome {
        config: serde_json::json!({ "count": a.count, "width": a.width, "height": a.height }),
        out: a.out,
        inputs: vec![],
        checkpoint: None,
        outputs,
        seed: Some(a.seed),
    })
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<Outcome> {
    let images = match (&a.images, a.scenes) {
        (Some(dir), _) => load_images(dir, (a.height, a.width))?,
        (None, Some(n)) => synthetic_scenes(n, a.width, a.height, a.seed),
        (None, None) => unreachable!("clap requires --images or --scenes"),
    };
    let mode = match a.mode {
        BenchmarkModeArg::Illumination => BenchmarkMode::Illumination,
        BenchmarkModeArg::Viewpoint => BenchmarkMode::Viewpoint,
    };
    let dirs = generate_synthetic_benchmark(&images, &a.out, a.targets, mode, a.seed)?;
    println!("wrote {} sequences to {}", dirs.len(), a.out.display());
    Ok(Outcome {
        config: serde_json::json!({
            "mode": mode,
            "targets": a.targets,
            "scenes": a.scenes,
            "width": a.width,
            "height": a.height,
        }),
        out: a.out,
        inputs: a.images.into_iter().collect(),
        checkpoint: None,
        outputs: dirs,
        seed: Some(a.seed),
    })
}

fn train(a: TrainArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.train;
    macro_rules! set {
        ($($flag:ident => $field:expr),+ $(,)?) => { $(if let Some(v) = a.$flag { $field = v; })+ };
    }
    set! {
        epochs => t.epochs,
        batch_pairs => t.batch_pairs,
        batches_per_epoch => t.batches_per_epoch,
        learning_rate => t.learning_rate,
        weight_decay => t.weight_decay,
        temperature => t.temperature,
        seed => t.seed,
        validation_fraction => t.validation_fraction,
        overlap_min => t.augmentation.overlap_min,
        eval_every => t.eval_every,
    }
    cfg.train.validate()?;
    cfg.model.encoder().validate()?;

    let images = load_images(&a.images, cfg.eval.resolution)?;
    create_dir(&a.out)?;
    let probe = a.probe_benchmark.as_ref().map(|dir| Probe {
        benchmark_dir: dir.clone(),
        detector: cfg.detector.clone(),
        eval: cfg.eval.clone(),
    });
    let log_path = a.out.join("train_log.jsonl");
    let mut log = EpochLog::create(&log_path)?;
    let model = Model::new(cfg.model.encoder(), cfg.train.seed)?;
    let outcome = train_corrnet(&images, model, &cfg.train, probe.as_ref(), |r| {
        info!("epoch {} train {:.4} val {:?}", r.epoch, r.train_loss, r.val_loss);
        log.append(r);
    })?;
    log.finish(&log_path)?;

    let best = a.out.join("corrnet.ckpt");
    let last = a.out.join("last.ckpt");
    save_checkpoint(&outcome.best, &best)?;
    save_checkpoint(&outcome.model, &last)?;
    println!("best epoch {} -> {}", outcome.best_epoch, best.display());

    let mut inputs = vec![a.images.clone()];
    inputs.extend(config_inputs(&a.config));
    inputs.extend(a.probe_benchmark.clone());
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        out: a.out,
        inputs,
        checkpoint: None,
        outputs: vec![best, last, log_path],
        seed: Some(cfg.train.seed),
    })
}

fn train_desc(a: TrainDescriptorArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let d = &mut cfg.descriptor;
    if let Some(v) = a.epochs {
        d.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        d.steps_per_epoch = v;
    }
    if let Some(v) = a.patch_size {
        d.patch_size = v;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if let Some(v) = a.top_k {
        cfg.detector.top_k = v;
    }
    cfg.detector.mode = DetectionMode::Single;
    cfg.descriptor.validate()?;
    cfg.detector.validate()?;

    let (base, base_path) = load_model(&a.base)?;
    let images = load_images(&a.images, cfg.eval.resolution)?;
    let keypoints = images
        .par_iter()
        .map(|img| detect(&base, img, None, &cfg.detector).map(|(k, _)| k))
        .collect::<corrnet::Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    let log_path = a.out.join("descriptor_log.jsonl");
    let mut log = EpochLog::create(&log_path)?;
    let tuned = train_descriptor(&images, &base, &keypoints, &cfg.descriptor, |r| log.append(r))?;
    log.finish(&log_path)?;
    let path = a.out.join("l-corrnet.ckpt");
    save_checkpoint(&tuned, &path)?;
    println!("descriptor -> {}", path.display());

    let mut inputs = vec![a.images.clone()];
    inputs.extend(config_inputs(&a.config));
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        out: a.out,
        inputs,
        checkpoint: Some(base_path),
        outputs: vec![path, log_path],
        seed: Some(cfg.descriptor.seed),
    })
}

fn detect_cmd(a: DetectArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_detector_flags(&mut cfg.detector, &a.detector);
    cfg.detector.validate()?;
    let mut tgt_path = a.tgt.clone();
    match cfg.detector.mode {
        DetectionMode::Joint if tgt_path.is_none() => {
            return Err(UsageError("joint mode needs --tgt (or use --mode single)".into()).into());
        }
        DetectionMode::Single if tgt_path.is_some() => {
            warn!("single mode ignores --tgt");
            tgt_path = None;
        }
        _ => {}
    }

    let (model, ckpt) = load_model(&a.checkpoint)?;
    let image_ref = ImageBuffer::load(&a.reference, None)?;
    let image_tgt = tgt_path.as_deref().map(|p| ImageBuffer::load(p, None)).transpose()?;
    let (kr, kt) = detect(&model, &image_ref, image_tgt.as_ref(), &cfg.detector)?;

    create_dir(&a.out)?;
    let mut outputs = vec![a.out.join("ref.kpts")];
    write_keypoints(&outputs[0], &kr)?;
    if let Some(kt) = &kt {
        let path = a.out.join("tgt.kpts");
        write_keypoints(&path, kt)?;
        outputs.push(path);
    }
    println!("{} keypoints in {}", kr.len(), kr.image_id);
    if let Some(kt) = &kt {
        println!("{} keypoints in {}", kt.len(), kt.image_id);
    }

    let mut inputs = vec![a.reference.clone()];
    inputs.extend(tgt_path);
    inputs.extend(config_inputs(&a.config));
    Ok(Outcome {
        config: serde_json::json!({ "detector": cfg.detector }),
        out: a.out,
        inputs,
        checkpoint: Some(ckpt),
        outputs,
        seed: None,
    })
}

#[derive(Serialize)]
struct MatchSummary {
    keypoints_ref: usize,
    keypoints_tgt: usize,
    matches: usize,
    inliers: Option<usize>,
    homography: Option<[[f64; 3]; 3]>,
    failure: Option<String>,
}

fn match_cmd(a: MatchArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.inlier_px {
        cfg.ransac.inlier_px = v;
    }
    if let Some(v) = a.iterations {
        cfg.ransac.iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.ransac.seed = v;
    }
    let patch_size = a.patch_size.unwrap_or(cfg.descriptor.patch_size);
    if patch_size == 0 || cfg.ransac.iterations == 0 || !(cfg.ransac.inlier_px > 0.0) {
        return Err(UsageError("--patch-size, --iterations and --inlier-px must be positive".into()).into());
    }

    let (model, ckpt) = load_model(&a.descriptor)?;
    let image_ref = ImageBuffer::load(&a.reference, None)?;
    let image_tgt = ImageBuffer::load(&a.tgt, None)?;
    let kr = read_keypoints(&a.kps_ref, &image_ref.id)?;
    let kt = read_keypoints(&a.kps_tgt, &image_tgt.id)?;
    let dr = describe(&model, &image_ref, &kr, patch_size)?;
    let dt = describe(&model, &image_tgt, &kt, patch_size)?;
    let matches = match_descriptors(&dr, &dt, a.min_score);

    create_dir(&a.out)?;
    let matches_path = a.out.join("matches.txt");
    write_matches(&matches_path, &matches, &kr, &kt)?;
    let mut outputs = vec![matches_path];
    let mut summary = MatchSummary {
        keypoints_ref: kr.len(),
        keypoints_tgt: kt.len(),
        matches: matches.len(),
        inliers: None,
        homography: None,
        failure: None,
    };
    match estimate_homography(&matches, &kr, &kt, &cfg.ransac) {
        Ok(est) => {
            let path = a.out.join("H_est");
            est.homography.write(&path)?;
            outputs.push(path);
            summary.inliers = Some(est.inlier_count());
            summary.homography = Some(*est.homography.matrix());
        }
        Err(e @ (corrnet::Error::InsufficientMatches(_) | corrnet::Error::DegenerateConfiguration)) => {
            warn!("no homography: {e}");
            summary.failure = Some(e.to_string());
        }
        Err(e) => return Err(e.into()),
    }
    let summary_path = a.out.join("match_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    outputs.push(summary_path);
    println!("{} matches, {:?} inliers", summary.matches, summary.inliers);

    let mut inputs = vec![a.reference.clone(), a.tgt.clone(), a.kps_ref.clone(), a.kps_tgt.clone()];
    inputs.extend(config_inputs(&a.config));
    Ok(Outcome {
        config: serde_json::json!({ "patch_size": patch_size, "min_score": a.min_score, "ransac": cfg.ransac }),
        out: a.out,
        inputs,
        checkpoint: Some(ckpt),
        outputs,
        seed: Some(cfg.ransac.seed),
    })
}

fn evaluate(a: EvaluateArgs) -> Result<Outcome> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_detector_flags(&mut cfg.detector, &a.detector);
    if let Some(e) = a.epsilon {
        cfg.eval.epsilon = e;
    }
    if let Some(s) = a.seed {
        cfg.ransac.seed = s;
    }
    cfg.detector.validate()?;
    cfg.eval.validate()?;

    let random_seed = a.seed.unwrap_or(0);
    let trained = a.checkpoint.as_deref().map(load_model).transpose()?;
    let descriptor = a.descriptor.as_deref().map(load_model).transpose()?;
    let random = RandomDetector {
        seed: random_seed,
        nms_window: cfg.detector.nms_window,
        top_k: cfg.detector.top_k,
    };
    let network = trained.as_ref().map(|(m, _)| CorrNetDetector {
        model: m,
        config: cfg.detector.clone(),
    });
    let detector: &dyn PairDetector = match &network {
        Some(d) => d,
        None => &random,
    };
    let describer = descriptor.as_ref().map(|(m, _)| Describer {
        patch_size: cfg.descriptor.patch_size,
        ransac: cfg.ransac.clone(),
        ..Describer::new(m)
    });
    let report = run_benchmark(&a.benchmark, detector, describer.as_ref(), &cfg.eval)?;
    create_dir(&a.out)?;
    let outputs = report.write(&a.out)?;
    print!("{}", report.to_text());

    let mut inputs = vec![a.benchmark.clone()];
    inputs.extend(descriptor.map(|(_, p)| p));
    inputs.extend(config_inputs(&a.config));
    Ok(Outcome {
        config: serde_json::json!({
            "detector": detector.name(),
            "detector_config": cfg.detector,
            "eval": cfg.eval,
            "ransac": cfg.ransac,
            "patch_size": cfg.descriptor.patch_size,
        }),
        out: a.out,
        inputs,
        checkpoint: trained.map(|(_, p)| p),
        outputs,
        seed: Some(random_seed),
    })
}

fn visualize(a: VisualizeArgs) -> Result<Outcome> {
    if !(a.epsilon > 0.0) {
        return Err(UsageError("--epsilon must be positive".into()).into());
    }
    let image_ref = ImageBuffer::load(&a.reference, None)?;
    let image_tgt = ImageBuffer::load(&a.tgt, None)?;
    let kr = read_keypoints(&a.kps_ref, &image_ref.id)?;
    let kt = read_keypoints(&a.kps_tgt, &image_tgt.id)?;
    let matches: Vec<_> = match &a.matches {
        Some(p) => read_matches(p)?.into_iter().map(|(s, d, _)| (s, d)).collect(),
        None => vec![],
    };
    let rep = match &a.homography {
        Some(p) => match repeatability(&kr, &kt, &Homography::read(p)?, a.epsilon) {
            Ok(r) => format!("{:.3}", r.rep),
            Err(corrnet::Error::EmptyDetections) => "0.000".into(),
            Err(e) => return Err(e.into()),
        },
        None => "n/a".into(),
    };
    let title = format!(
        "{} - {}  REP {rep}  KPTS {}/{}  MATCHES {}",
        image_ref.id,
        image_tgt.id,
        kr.len(),
        kt.len(),
        matches.len()
    );
    let figure = render_pair(&PairFigure {
        image_ref: &image_ref,
        image_tgt: &image_tgt,
        keypoints_ref: &kr,
        keypoints_tgt: &kt,
        matches: &matches,
        title,
    });
    create_dir(&a.out)?;
    let path = a.out.join("figure.png");
    figure.save(&path).with_context(|| format!("writing {}", path.display()))?;
    println!("figure -> {}", path.display());

    let mut inputs = vec![a.reference.clone(), a.tgt.clone(), a.kps_ref.clone(), a.kps_tgt.clone()];
    inputs.extend(a.matches.clone());
    inputs.extend(a.homography.clone());
    Ok(Outcome {
        config: serde_json::json!({ "epsilon": a.epsilon }),
        out: a.out,
        inputs,
        checkpoint: None,
        outputs: vec![path],
        seed: None,
    })
}
