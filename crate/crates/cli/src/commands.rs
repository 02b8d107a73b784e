//! Subcommand implementations. Each returns a summary for the caller to
//! print; files are written under the configured output directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use eqdiff_core::baselines::{BcModel, ExplicitDiffusionModel};
use eqdiff_core::checkpoint::{resume_trainer, AnyModel, Checkpoint, ModelKind};
use eqdiff_core::equivariance::{check_network, layer_suite, EquivarianceReport};
use eqdiff_core::metrics::{score, LabeledClip, MetricsReport};
use eqdiff_core::sampler::{sample_conditional_batch, sample_unconditional, Guidance, SampledTrajectory};
use eqdiff_core::train::{EpochRecord, Trainable, Trainer};
use eqdiff_core::{
    denormalize_frames, denormalize_trajectory, normalize_trajectory, DiffusionConfig, NoiseSchedule, PolicyNetwork,
    StateActionPair, TrajectoryAction,
};
use eqdiff_synthbench::{
    blur_corrupt, generate_dataset, load_dataset, write_dataset, ClipRecord, Dataset, DatasetManifest, GlobalConfig,
    Split,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelChoice};
use crate::error::{CliError, Result};
use crate::plot::{bounds, Axes, Canvas, PALETTE, WHITE};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn check_dims(model: &DiffusionConfig, data: &GlobalConfig) -> Result<()> {
    let want = (model.frames, model.points, model.height, model.width);
    let got = (data.frames, data.points, data.height, data.width);
    if want != got {
        return Err(CliError::config(format!(
            "model expects (L, N, H, W) = {want:?} but the dataset has {got:?}"
        )));
    }
    Ok(())
}

#[derive(Debug)]
pub struct GenSummary {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// `(scenes with two separated modes, scenes)` for bimodal datasets.
    pub two_mode: Option<(usize, usize)>,
}

/// Scenes whose two ground-truth branches are at least 1.5 px apart per
/// 16 px of image size, on average.
pub fn mode_audit(manifest: &DatasetManifest) -> (usize, usize) {
    let min_sep = 1.5 * manifest.config.width as f64 / 16.0;
    let ok = manifest
        .entries
        .iter()
        .filter(|e| {
            e.alt_trajectory_px.as_ref().is_some_and(|alt| {
                let sep: f64 = e
                    .trajectory_px
                    .iter()
                    .zip(alt)
                    .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                    .sum::<f64>()
                    / alt.len().max(1) as f64;
                sep >= min_sep
            })
        })
        .count();
    (ok, manifest.entries.len())
}

pub fn gen_synth(cfg: &ExperimentConfig, bimodal: bool, force: bool) -> Result<GenSummary> {
    cfg.validate()?;
    let mut synth = cfg.synth.clone();
    synth.seed = cfg.seed;
    synth.bimodal |= bimodal;
    let root = cfg.dataset_dir();
    create_dir(&root)?;
    let manifest = generate_dataset(&root, &synth, force)?;
    let two_mode = synth.bimodal.then(|| mode_audit(&manifest));
    Ok(GenSummary {
        root,
        manifest,
        two_mode,
    })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub last: PathBuf,
    pub best: PathBuf,
    pub log: Vec<EpochRecord>,
}

fn model_kind(choice: ModelChoice) -> ModelKind {
    match choice {
        ModelChoice::Idpoe | ModelChoice::IdpoeNoEquiv => ModelKind::Policy,
        ModelChoice::ExplicitDiffusion => ModelKind::Explicit,
        ModelChoice::Bc => ModelKind::Bc,
    }
}

fn same_run(a: &DiffusionConfig, b: &DiffusionConfig) -> bool {
    let mut a = a.clone();
    a.optimizer.epochs = b.optimizer.epochs;
    a == *b
}

pub fn train(cfg: &ExperimentConfig, resume: bool, quiet: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset_dir())?;
    let mcfg = cfg.model_config();
    check_dims(&mcfg, ds.config())?;
    let train = ds.pairs(Split::Train)?;
    let val = ds.pairs(Split::Val)?;
    if train.is_empty() {
        return Err(CliError::data("the dataset has no training clips"));
    }
    match cfg.model {
        ModelChoice::Idpoe | ModelChoice::IdpoeNoEquiv => {
            run_training(cfg, PolicyNetwork::new(&mcfg, cfg.seed)?, &train, &val, resume, quiet)
        }
        ModelChoice::ExplicitDiffusion => {
            run_training(cfg, ExplicitDiffusionModel::new(&mcfg, cfg.seed)?, &train, &val, resume, quiet)
        }
        ModelChoice::Bc => run_training(cfg, BcModel::new(&mcfg, cfg.seed)?, &train, &val, resume, quiet),
    }
}

fn run_training<M: Trainable + Clone>(
    cfg: &ExperimentConfig,
    fresh: M,
    train: &[StateActionPair],
    val: &[StateActionPair],
    resume: bool,
    quiet: bool,
) -> Result<TrainSummary> {
    let kind = model_kind(cfg.model);
    let mcfg = cfg.model_config();
    let dir = cfg.checkpoint_dir();
    create_dir(&dir)?;
    let last_path = dir.join("last.ckpt");
    let best_path = dir.join("best.ckpt");
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut trainer = if resume && last_path.exists() {
        let last = Checkpoint::load(&last_path)?;
        if last.kind != kind || !same_run(&last.config, &mcfg) {
            return Err(CliError::config(format!(
                "{} was written by a different model or configuration",
                last_path.display()
            )));
        }
        let best = best_path.exists().then(|| Checkpoint::load(&best_path)).transpose()?;
        resume_trainer(fresh, &last, best.as_ref())?
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        }
        Trainer::new(fresh, mcfg.optimizer.clone(), cfg.seed)
    };
    trainer.optimizer = mcfg.optimizer.clone();
    trainer.log_path = Some(log_path);
    let target = mcfg.optimizer.epochs;
    while trainer.state.epoch < target {
        let epoch = trainer.state.epoch + 1;
        trainer.run(train, val, epoch, |r| {
            if !quiet {
                eprintln!(
                    "epoch {:>4}/{target}  train {:.5}  val {:.5}  lr {:.2e}",
                    r.epoch, r.train_loss, r.val_loss, r.lr
                );
            }
        })?;
        Checkpoint::of_trainer(kind, &mcfg, &trainer).save(&last_path)?;
        if trainer.state.best_epoch == epoch {
            Checkpoint::of_model(kind, &mcfg, &trainer.best_model()).save(&best_path)?;
        }
    }
    if !last_path.exists() {
        Checkpoint::of_trainer(kind, &mcfg, &trainer).save(&last_path)?;
    }
    if !best_path.exists() {
        Checkpoint::of_model(kind, &mcfg, &trainer.best_model()).save(&best_path)?;
    }
    Ok(TrainSummary {
        epochs: trainer.state.epoch,
        best_epoch: trainer.state.best_epoch,
        best_val: trainer.state.best_val,
        last: last_path,
        best: best_path,
        log: trainer.state.log.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// Forward-diffusion guidance: the clip is re-noised at every step.
    Conditional,
    /// The clean clip is fed at every step.
    Naive,
    /// Joint sampling from noise; the generated clip is discarded.
    Unconditional,
}

impl PredictMode {
    pub fn name(self) -> &'static str {
        match self {
            PredictMode::Conditional => "conditional",
            PredictMode::Naive => "naive",
            PredictMode::Unconditional => "unconditional",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PredictOptions {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub mode: PredictMode,
    /// Blur severity applied to every clip before prediction.
    pub blur: Option<u8>,
    /// Quarter turns applied to clips (and labels) before prediction.
    pub rotate: usize,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub points_px: Vec<[f64; 2]>,
    /// `T + 1` snapshots from pure noise down to the prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediates_px: Option<Vec<Vec<[f64; 2]>>>,
}

/// Clips of a split after the optional rotation and blur.
pub fn prepared_clips(ds: &Dataset, split: Split, rotate: usize, blur: Option<u8>) -> Result<Vec<LabeledClip>> {
    let mut clips = ds.labeled_rotated(split, rotate)?;
    if let Some(s) = blur {
        for c in &mut clips {
            c.state = blur_corrupt(&c.state, s)?;
        }
    }
    Ok(clips)
}

pub fn predict(cfg: &ExperimentConfig, opts: &PredictOptions) -> Result<(PathBuf, Vec<PredictionRecord>)> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(&opts.checkpoint)?;
    let model = AnyModel::from_checkpoint(&ckpt)?;
    let mcfg = model.config().clone();
    let ds = load_dataset(&cfg.dataset_dir())?;
    check_dims(&mcfg, ds.config())?;
    let clips = prepared_clips(&ds, opts.split, opts.rotate, opts.blur)?;
    if clips.is_empty() {
        return Err(CliError::data(format!("split {} is empty", opts.split)));
    }
    let states: Vec<_> = clips.iter().map(|c| c.state.clone()).collect();
    let sc = &cfg.sampler;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampled: Vec<SampledTrajectory> = match (&model, opts.mode) {
        (AnyModel::Policy(net), PredictMode::Unconditional) => {
            if sc.record_intermediates {
                return Err(CliError::config("intermediates are only recorded for conditional sampling"));
            }
            let sched = NoiseSchedule::from_config(&mcfg)?;
            sample_unconditional(net, &sched, &mut rng, states.len(), sc.deterministic)?
                .into_iter()
                .map(|p| SampledTrajectory {
                    action: p.action,
                    intermediates: None,
                })
                .collect()
        }
        (AnyModel::Policy(net), mode) => {
            let guidance = if mode == PredictMode::Naive { Guidance::Naive } else { Guidance::ForwardDiffused };
            let sched = NoiseSchedule::from_config(&mcfg)?;
            sample_conditional_batch(net, &sched, &states, guidance, sc, &mut rng)?
        }
        (AnyModel::Explicit(m), PredictMode::Conditional) => m.sample_batch(&states, sc, &mut rng)?,
        (AnyModel::Bc(m), PredictMode::Conditional) => {
            if sc.record_intermediates {
                return Err(CliError::config("behaviour cloning has no intermediate samples"));
            }
            m.predict_batch(&states)?
                .into_iter()
                .map(|action| SampledTrajectory {
                    action,
                    intermediates: None,
                })
                .collect()
        }
        (other, mode) => {
            return Err(CliError::config(format!(
                "{:?} checkpoints do not support {} sampling",
                other.kind(),
                mode.name()
            )))
        }
    };
    let (h, w) = (mcfg.height, mcfg.width);
    let records: Vec<PredictionRecord> = clips
        .iter()
        .zip(sampled)
        .map(|(c, s)| PredictionRecord {
            clip_id: c.clip_id.clone(),
            points_px: denormalize_trajectory(&s.action, h, w),
            intermediates_px: s
                .intermediates
                .map(|v| v.iter().map(|a| denormalize_trajectory(a, h, w)).collect()),
        })
        .collect();
    let path = opts.output.clone().unwrap_or_else(|| {
        cfg.out_dir
            .join("predictions")
            .join(format!("{}_{}.jsonl", opts.split, opts.mode.name()))
    });
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("plain record"));
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok((path, records))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateOptions {
    /// `(model name, predictions file)`.
    pub predictions: Vec<(String, PathBuf)>,
    pub split: Option<Split>,
    pub rotate: usize,
    /// `(model name, training log)` for loss curves.
    pub logs: Vec<(String, PathBuf)>,
    /// `(model name, checkpoint)` for the complexity plot.
    pub checkpoints: Vec<(String, PathBuf)>,
}

#[derive(Debug)]
pub struct Evaluation {
    pub reports: Vec<(String, MetricsReport)>,
    pub table: String,
    pub files: Vec<PathBuf>,
}

/// Splits `name=path`, or names the entry after the file stem.
pub fn named_path(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let name = p.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

/// Scores prediction records against a split. Every clip of the split
/// needs exactly one record.
pub fn score_records(split: &str, clips: &[LabeledClip], records: &[PredictionRecord], size: usize) -> Result<MetricsReport> {
    let by_id: HashMap<&str, &PredictionRecord> = records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let missing: Vec<&str> = clips
        .iter()
        .map(|c| c.clip_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::data(format!(
            "{} clip(s) have no prediction: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let known: std::collections::HashSet<&str> = clips.iter().map(|c| c.clip_id.as_str()).collect();
    let unknown: Vec<&str> = records
        .iter()
        .map(|r| r.clip_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::data(format!(
            "predictions for clips outside split {split}: {}",
            unknown.join(", ")
        )));
    }
    let preds: Vec<eqdiff_core::Result<TrajectoryAction>> = clips
        .iter()
        .map(|c| normalize_trajectory(&by_id[c.clip_id.as_str()].points_px, size, size))
        .collect();
    Ok(score(split, clips, &preds))
}

fn table(split: &str, reports: &[(String, MetricsReport)]) -> String {
    let mut t = format!(
        "split: {split}\n\n| model | clips | ADE (px) | FDE (px) | FD (px) | plot colour |\n|---|---|---|---|---|---|\n"
    );
    for (i, (name, r)) in reports.iter().enumerate() {
        let a = &r.aggregate;
        let c = PALETTE[i % PALETTE.len()];
        t.push_str(&format!(
            "| {name} | {} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} | #{:02x}{:02x}{:02x} |\n",
            a.count, a.ade.mean, a.ade.std, a.fde.mean, a.fde.std, a.fd.mean, a.fd.std, c[0], c[1], c[2]
        ));
    }
    t
}

pub fn evaluate(cfg: &ExperimentConfig, opts: &EvaluateOptions) -> Result<Evaluation> {
    if opts.predictions.is_empty() {
        return Err(CliError::config("no prediction files given"));
    }
    let split = opts.split.unwrap_or(Split::InContextTest);
    let ds = load_dataset(&cfg.dataset_dir())?;
    let size = ds.config().width;
    let clips = ds.labeled_rotated(split, opts.rotate)?;
    let out = cfg.out_dir.join("eval");
    create_dir(&out)?;
    let mut reports = Vec::new();
    let mut all_records = Vec::new();
    let mut files = Vec::new();
    for (name, path) in &opts.predictions {
        let records = read_predictions(path)?;
        let report = score_records(split.name(), &clips, &records, size)?;
        let file = out.join(format!("{name}_{split}.jsonl"));
        report.write(&file)?;
        files.push(file);
        reports.push((name.clone(), report));
        all_records.push(records);
    }
    let table = table(split.name(), &reports);
    let table_file = out.join(format!("comparison_{split}.md"));
    fs::write(&table_file, &table).map_err(|e| CliError::io(&table_file, e))?;
    files.push(table_file);

    let plots = out.join("plots");
    create_dir(&plots)?;
    let overlay = plots.join(format!("overlays_{split}.png"));
    overlay_plot(&clips, &reports, &all_records, size)?.save(&overlay)?;
    files.push(overlay);
    if !opts.logs.is_empty() {
        let p = plots.join("loss_curves.png");
        loss_plot(&opts.logs)?.save(&p)?;
        files.push(p);
    }
    if !opts.checkpoints.is_empty() {
        let ade: BTreeMap<&str, f64> = reports.iter().map(|(n, r)| (n.as_str(), r.aggregate.ade.mean)).collect();
        let mut pts = Vec::new();
        for (name, path) in &opts.checkpoints {
            let Some(&a) = ade.get(name.as_str()) else {
                return Err(CliError::config(format!("checkpoint '{name}' has no matching predictions")));
            };
            let params = Checkpoint::load(path)?.params.num_scalars();
            let colour = reports.iter().position(|(n, _)| n == name).unwrap_or(0);
            pts.push((params as f64, a, colour));
        }
        let p = plots.join(format!("complexity_{split}.png"));
        complexity_plot(&pts).save(&p)?;
        files.push(p);
    }
    Ok(Evaluation { reports, table, files })
}

const TILE_SCALE: usize = 8;

/// Last observed frame of the first clips with the ground truth in white
/// and each model's prediction in its palette colour.
fn overlay_plot(clips: &[LabeledClip], reports: &[(String, MetricsReport)], records: &[Vec<PredictionRecord>], size: usize) -> Result<Canvas> {
    let shown = clips.len().min(8);
    let tile = size * TILE_SCALE;
    let gap = 6;
    let mut canvas = Canvas::new(shown.max(1) * (tile + gap) + gap, tile + 2 * gap, WHITE);
    let by_model: Vec<HashMap<&str, &PredictionRecord>> = records
        .iter()
        .map(|rs| rs.iter().map(|r| (r.clip_id.as_str(), r)).collect())
        .collect();
    let to_canvas = |x0: usize, p: &[f64; 2]| {
        (
            (x0 as f64) + (p[0] + 0.5) * TILE_SCALE as f64,
            gap as f64 + (p[1] + 0.5) * TILE_SCALE as f64,
        )
    };
    for (k, clip) in clips.iter().take(shown).enumerate() {
        let x0 = gap + k * (tile + gap);
        let raw = denormalize_frames(&clip.state);
        let frame = size * size * 3;
        let last = &raw[raw.len() - frame..];
        canvas.blit(x0 as i64, gap as i64, last, size, TILE_SCALE);
        let gt: Vec<_> = denormalize_trajectory(&clip.gt, size, size).iter().map(|p| to_canvas(x0, p)).collect();
        canvas.polyline(&gt, WHITE, 3);
        for (m, map) in by_model.iter().enumerate().take(reports.len()) {
            if let Some(r) = map.get(clip.clip_id.as_str()) {
                let pts: Vec<_> = r.points_px.iter().map(|p| to_canvas(x0, p)).collect();
                let c = PALETTE[m % PALETTE.len()];
                canvas.polyline(&pts, c, 2);
                if let Some(&end) = pts.last() {
                    canvas.dot(end, 3, c);
                }
            }
        }
    }
    Ok(canvas)
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

/// Validation loss per epoch on a log scale, one colour per run.
fn loss_plot(logs: &[(String, PathBuf)]) -> Result<Canvas> {
    let runs: Vec<Vec<EpochRecord>> = logs.iter().map(|(_, p)| read_log(p)).collect::<Result<_>>()?;
    let xs = bounds(runs.iter().flatten().map(|r| r.epoch as f64));
    let ys = bounds(runs.iter().flatten().flat_map(|r| [r.val_loss, r.train_loss]));
    let mut axes = Axes::new(640, 400, xs, ys, true);
    for (i, run) in runs.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        axes.series(&run.iter().map(|r| (r.epoch as f64, r.val_loss)).collect::<Vec<_>>(), c);
    }
    Ok(axes.canvas)
}

/// Mean ADE against parameter count.
fn complexity_plot(points: &[(f64, f64, usize)]) -> Canvas {
    let xs = bounds(points.iter().map(|p| p.0));
    let ys = bounds(points.iter().map(|p| p.1));
    let pad = |(a, b): (f64, f64)| {
        let d = (b - a).max(1e-9) * 0.1;
        (a - d, b + d)
    };
    let mut axes = Axes::new(480, 360, pad(xs), pad(ys), false);
    for &(x, y, c) in points {
        axes.point(x, y, PALETTE[c % PALETTE.len()]);
    }
    axes.canvas
}

#[derive(Debug, Serialize)]
pub struct EquivarianceAudit {
    pub network: EquivarianceReport,
    pub layers: Vec<EquivarianceReport>,
}

impl EquivarianceAudit {
    pub fn passed(&self) -> bool {
        self.network.passed() && self.layers.iter().all(EquivarianceReport::passed)
    }
}

/// Audits a trained policy, or a freshly initialized one built from the
/// configuration when no checkpoint is given.
pub fn check_equivariance(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    samples: usize,
    tolerance: f64,
    layer_tolerance: f64,
) -> Result<(PathBuf, EquivarianceAudit)> {
    cfg.validate()?;
    let net = match checkpoint {
        Some(path) => match AnyModel::from_checkpoint(&Checkpoint::load(path)?)? {
            AnyModel::Policy(net) => net,
            other => {
                return Err(CliError::config(format!(
                    "{:?} checkpoints have no equivariance contract to audit",
                    other.kind()
                )))
            }
        },
        None => {
            if !matches!(cfg.model, ModelChoice::Idpoe | ModelChoice::IdpoeNoEquiv) {
                return Err(CliError::config("only policy models can be audited"));
            }
            PolicyNetwork::new(&cfg.model_config(), cfg.seed)?
        }
    };
    let network = check_network(&net, samples, tolerance, cfg.seed)?;
    let layers = if net.is_equivariant() {
        layer_suite(net.config().group_order, samples, layer_tolerance, cfg.seed)?
    } else {
        Vec::new()
    };
    let audit = EquivarianceAudit { network, layers };
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("equivariance.json");
    let text = serde_json::to_string_pretty(&audit).expect("plain report");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok((path, audit))
}

#[derive(Debug)]
pub struct AugmentSummary {
    pub root: PathBuf,
    pub synthetic: usize,
    pub real: usize,
    pub manifest: DatasetManifest,
}

/// Samples `count` joint (clip, trajectory) pairs from a trained policy
/// and writes them as a training split. The real validation split is
/// always copied; `mix` also copies the real training split.
pub fn augment_with_synthetic(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    count: usize,
    mix: bool,
    output: Option<&Path>,
    force: bool,
) -> Result<AugmentSummary> {
    cfg.validate()?;
    if count == 0 {
        return Err(CliError::config("count must be positive"));
    }
    let net = match AnyModel::from_checkpoint(&Checkpoint::load(checkpoint)?)? {
        AnyModel::Policy(net) => net,
        other => {
            return Err(CliError::config(format!(
                "{:?} checkpoints cannot generate joint samples",
                other.kind()
            )))
        }
    };
    let mcfg = net.config().clone();
    let ds = load_dataset(&cfg.dataset_dir())?;
    check_dims(&mcfg, ds.config())?;
    let sched = NoiseSchedule::from_config(&mcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = sample_unconditional(&net, &sched, &mut rng, count, cfg.sampler.deterministic)?;
    let size = mcfg.width;
    let mut records: Vec<ClipRecord> = samples
        .iter()
        .enumerate()
        .map(|(i, p)| ClipRecord {
            clip_id: format!("synthetic_{i:05}"),
            split: Split::Train,
            pixels: denormalize_frames(&p.state),
            trajectory_px: denormalize_trajectory(&p.action, size, size),
            alt_trajectory_px: None,
            scene: None,
        })
        .collect();
    let mut real = 0;
    for i in 0..ds.len() {
        let e = ds.entry(i);
        if e.split == Split::Val || (mix && e.split == Split::Train) {
            records.push(ClipRecord {
                clip_id: e.clip_id.clone(),
                split: e.split,
                pixels: ds.raw_frames(i).to_vec(),
                trajectory_px: e.trajectory_px.clone(),
                alt_trajectory_px: e.alt_trajectory_px.clone(),
                scene: e.scene.clone(),
            });
            real += (e.split == Split::Train) as usize;
        }
    }
    let root = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(if mix { "augmented_mix" } else { "augmented_synt" }));
    create_dir(&root)?;
    let mut global = GlobalConfig::new(mcfg.frames, mcfg.points, size, if mix { "synthetic+real" } else { "synthetic" });
    global.fps_semantics = ds.config().fps_semantics.clone();
    let manifest = write_dataset(&root, global, &records, force)?;
    load_dataset(&root)?;
    Ok(AugmentSummary {
        root,
        synthetic: count,
        real,
        manifest,
    })
}
