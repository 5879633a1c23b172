//! Pipeline configuration and the stage driver behind the `suturekit` binary.
//!
//! All artifacts of a run live under `out`:
//!
//! ```text
//! synthetic/   gen       rendered frames + manifest.jsonl
//! corpus/      prepare   resized crops + manifest.jsonl
//! checkpoints/ train     joint.ckpt, finetuned.ckpt
//! logs/        train     per-epoch JSON lines
//! reports/     eval      metrics.json, metrics.txt
//! predictions/ infer     predicted seg/depth + manifest.jsonl
//! overlays/    overlay   annotated frames + metrics.jsonl
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::CameraModel;
use crate::dataset::{build_training_corpus, ingest_real_dir, AugmentationConfig, Frame};
use crate::eval::{evaluate, EvalConfig, MetricsReport};
use crate::geometry::{analyze_frame, render_overlay, FrameAnalysis, GeometryConfig, OverlayStyle};
use crate::manifest::{DatasetManifest, Provenance, SampleRecord, Split, MANIFEST_VERSION};
use crate::model::{ModelConfig, Tensor};
use crate::scenegen::{generate_dataset, GenerateConfig, RandomizationConfig, SceneSpecs};
use crate::training::{finetune_seg, load_samples, train_joint, Checkpoint, LossConfig, OptimizerConfig, TrainReport, TrainSample};
use crate::{derive_seed, imageio, Error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Render synthetic frames.
    Gen,
    /// Resize and crop frames into the training corpus.
    Prepare,
    /// Joint segmentation + depth training on synthetic crops.
    Train,
    /// Segmentation fine-tuning on real crops.
    Finetune,
    /// Dice and depth MAE on the test split.
    Eval,
    /// Write predicted seg/depth maps for the test split.
    Infer,
    /// Geometry fits and overlay frames from predictions.
    Overlay,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Prepare => "prepare",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Infer => "infer",
            Stage::Overlay => "overlay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    /// Number of frames rendered by `gen`.
    pub frames: usize,
    pub test_fraction: f64,
    pub specs: SceneSpecs,
    pub camera: CameraModel,
    pub randomization: RandomizationConfig,
}

impl Default for SceneSection {
    fn default() -> Self {
        let g = GenerateConfig::default();
        Self {
            frames: 218,
            test_fraction: g.test_fraction,
            specs: g.specs,
            camera: g.camera,
            randomization: g.randomization,
        }
    }
}

impl SceneSection {
    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            specs: self.specs.clone(),
            camera: self.camera,
            randomization: self.randomization.clone(),
            test_fraction: self.test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub target_height: u32,
    pub crop_width: u32,
    pub crops_per_image: u32,
    /// Annotated real frames (`<id>_rgb.png` + `<id>_seg.png`) split into
    /// `train/` and `test/` subdirectories.
    pub real_dir: Option<PathBuf>,
    /// Intrinsics of the real frames at their original resolution; without
    /// them the overlay stage skips real frames.
    pub real_camera: Option<CameraModel>,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let a = AugmentationConfig::default();
        Self {
            target_height: a.target_height,
            crop_width: a.crop_width,
            crops_per_image: a.crops_per_image,
            real_dir: None,
            real_camera: None,
            seed: a.seed,
        }
    }
}

impl DatasetSection {
    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            target_height: self.target_height,
            crop_width: self.crop_width,
            crops_per_image: self.crops_per_image,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Global seed; every stage seed is derived from it.
    pub seed: u64,
    pub out: PathBuf,
    pub scene: SceneSection,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub eval: EvalConfig,
    pub geometry: GeometryConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            scene: SceneSection::default(),
            dataset: DatasetSection::default(),
            model: ModelConfig::default(),
            training: TrainingSection::default(),
            eval: EvalConfig::default(),
            geometry: GeometryConfig::default(),
        }
    }
}

// Stream ids for per-stage seeds.
const SEED_SCENE: u64 = 1;
const SEED_DATASET: u64 = 2;
const SEED_INIT: u64 = 3;
const SEED_TRAIN: u64 = 4;
const SEED_CIRCLE: u64 = 5;
const SEED_PLANE: u64 = 6;

/// Stage seed kept within 63 bits so the resolved config stays valid TOML.
fn stage_seed(global: u64, stream: u64) -> u64 {
    derive_seed(global, stream) >> 1
}

impl PipelineConfig {
    /// Parses a TOML document. Errors carry the line and column of the
    /// offending key.
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value` overrides on top of `text`. Values are
    /// parsed as TOML and fall back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, Error> {
        let base = Self::from_toml(text)?;
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(format!("after --set overrides: {e}")))
    }

    /// Overwrites every section seed with one derived from the global seed.
    pub fn resolve_seeds(&mut self) {
        let g = self.seed;
        self.scene.randomization.seed = stage_seed(g, SEED_SCENE);
        self.dataset.seed = stage_seed(g, SEED_DATASET);
        self.training.init_seed = stage_seed(g, SEED_INIT);
        self.training.optimizer.seed = stage_seed(g, SEED_TRAIN);
        self.geometry.circle.seed = stage_seed(g, SEED_CIRCLE);
        self.geometry.plane.seed = stage_seed(g, SEED_PLANE);
    }

    pub fn validate(&self) -> Result<(), Error> {
        let invalid = |m: String| Err(Error::Config(m));
        if self.scene.frames == 0 {
            return invalid("scene.frames must be positive".into());
        }
        self.scene.specs.validate()?;
        self.scene.camera.validate()?;
        self.scene.randomization.validate()?;
        if !(0.0..=1.0).contains(&self.scene.test_fraction) {
            return invalid("scene.test_fraction must lie in [0, 1]".into());
        }
        self.model.validate()?;
        let [h, w] = self.model.input_size;
        if [self.dataset.target_height as usize, self.dataset.crop_width as usize] != [h, w] {
            return invalid(format!(
                "dataset crops are {}x{} but model.input_size is {h}x{w}",
                self.dataset.target_height, self.dataset.crop_width
            ));
        }
        self.training.optimizer.validate()?;
        self.training.loss.validate()?;
        self.geometry.validate()?;
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Error> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {spec}: expected section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("--set {spec}: empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut node = table;
    for k in parents {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {spec}: `{k}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Artifact paths under the output root.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub synthetic: PathBuf,
    pub corpus: PathBuf,
    pub joint_checkpoint: PathBuf,
    pub finetuned_checkpoint: PathBuf,
    pub joint_log: PathBuf,
    pub finetune_log: PathBuf,
    pub report_json: PathBuf,
    pub report_table: PathBuf,
    pub predictions: PathBuf,
    pub overlays: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Self {
        Self {
            synthetic: out.join("synthetic"),
            corpus: out.join("corpus"),
            joint_checkpoint: out.join("checkpoints/joint.ckpt"),
            finetuned_checkpoint: out.join("checkpoints/finetuned.ckpt"),
            joint_log: out.join("logs/joint.jsonl"),
            finetune_log: out.join("logs/finetune.jsonl"),
            report_json: out.join("reports/metrics.json"),
            report_table: out.join("reports/metrics.txt"),
            predictions: out.join("predictions"),
            overlays: out.join("overlays"),
        }
    }
}

/// Command-line overrides layered on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

/// Reads, overrides, seeds and validates the pipeline config.
pub fn load_config(config_path: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig, Error> {
    let text = match config_path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut cfg = PipelineConfig::from_toml_with_overrides(&text, &overrides.set).map_err(|e| match (e, config_path) {
        (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
        (e, _) => e,
    })?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(o) = &overrides.out {
        cfg.out = o.clone();
    }
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(cfg)
}

/// 1 for configuration and data validation failures, 2 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Invalid(_)
        | Error::EmptyTestSplit
        | Error::SplitLeakage { .. }
        | Error::MissingDepth(_)
        | Error::MissingSegmentation(_) => 1,
        _ => 2,
    }
}

/// What a stage produced.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutput {
    Manifest { path: PathBuf, records: usize },
    Trained { checkpoint: PathBuf, report: TrainReport },
    Report { path: PathBuf, report: MetricsReport, sha256: String },
    Overlays { dir: PathBuf, frames: usize },
}

/// Runs one stage with an already resolved config.
pub fn execute(stage: Stage, cfg: &PipelineConfig) -> Result<StageOutput, Error> {
    let layout = cfg.layout();
    match stage {
        Stage::Gen => {
            let m = generate_dataset(cfg.scene.frames, &cfg.scene.generate_config(), &layout.synthetic)?;
            Ok(StageOutput::Manifest { path: layout.synthetic.join("manifest.jsonl"), records: m.records.len() })
        }
        Stage::Prepare => {
            let synthetic = DatasetManifest::read(&layout.synthetic.join("manifest.jsonl"))?;
            let real = cfg.dataset.real_dir.as_deref().map(|d| real_manifest(d, cfg.dataset.real_camera)).transpose()?;
            let m = build_training_corpus(&synthetic, real.as_ref(), &cfg.dataset.augmentation(), &layout.corpus)?;
            Ok(StageOutput::Manifest { path: layout.corpus.join("manifest.jsonl"), records: m.records.len() })
        }
        Stage::Train => {
            let corpus = read_corpus(&layout)?;
            let synthetic = subset(&corpus, |r| r.provenance == Provenance::Synthetic);
            let samples = load_samples(&synthetic, Split::Train, &cfg.model)?;
            if samples.is_empty() {
                return Err(Error::invalid("corpus has no synthetic training records"));
            }
            let mut ckpt = Checkpoint::init(&cfg.model, cfg.training.init_seed)?;
            fresh_file(&layout.joint_log)?;
            let report = train_joint(&samples, &mut ckpt, &cfg.training.optimizer, &cfg.training.loss, Some(&layout.joint_log))?;
            ckpt.save(&layout.joint_checkpoint)?;
            Ok(StageOutput::Trained { checkpoint: layout.joint_checkpoint, report })
        }
        Stage::Finetune => {
            let corpus = read_corpus(&layout)?;
            let real = subset(&corpus, |r| r.provenance == Provenance::Real);
            let mut ckpt = Checkpoint::load(&layout.joint_checkpoint)?;
            let samples = load_samples(&real, Split::Train, &ckpt.network.config)?;
            if samples.is_empty() {
                return Err(Error::invalid("corpus has no real training records; set dataset.real_dir"));
            }
            fresh_file(&layout.finetune_log)?;
            let report = finetune_seg(&samples, &mut ckpt, &cfg.training.optimizer, &cfg.training.loss, Some(&layout.finetune_log))?;
            ckpt.save(&layout.finetuned_checkpoint)?;
            Ok(StageOutput::Trained { checkpoint: layout.finetuned_checkpoint, report })
        }
        Stage::Eval => run_eval(cfg, &layout),
        Stage::Infer => run_infer(&layout),
        Stage::Overlay => run_overlay(cfg, &layout),
    }
}

fn read_corpus(layout: &Layout) -> Result<DatasetManifest, Error> {
    DatasetManifest::read(&layout.corpus.join("manifest.jsonl"))
}

fn subset(m: &DatasetManifest, keep: impl Fn(&SampleRecord) -> bool) -> DatasetManifest {
    DatasetManifest { root: m.root.clone(), records: m.records.iter().filter(|r| keep(r)).cloned().collect() }
}

fn fresh_file(path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fresh_file(path)?;
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Real frames from `dir/train` and `dir/test`, either of which may be absent.
fn real_manifest(dir: &Path, camera: Option<CameraModel>) -> Result<DatasetManifest, Error> {
    let mut out = DatasetManifest::new(dir);
    for (sub, split) in [("train", Split::Train), ("test", Split::Test)] {
        let d = dir.join(sub);
        if !d.is_dir() {
            continue;
        }
        for mut r in ingest_real_dir(&d, split)?.records {
            r.rgb_path = format!("{sub}/{}", r.rgb_path);
            r.seg_path = r.seg_path.map(|p| format!("{sub}/{p}"));
            r.camera = camera;
            out.records.push(r);
        }
    }
    if out.records.is_empty() {
        return Err(Error::invalid(format!("{}: no annotated frames under train/ or test/", dir.display())));
    }
    Ok(out)
}

/// The fine-tuned checkpoint when present, else the joint one.
fn latest_checkpoint(layout: &Layout) -> Result<Checkpoint, Error> {
    if layout.finetuned_checkpoint.exists() {
        Checkpoint::load(&layout.finetuned_checkpoint)
    } else {
        Checkpoint::load(&layout.joint_checkpoint)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn run_eval(cfg: &PipelineConfig, layout: &Layout) -> Result<StageOutput, Error> {
    let corpus = read_corpus(layout)?;
    if corpus.split(Split::Test).next().is_none() {
        return Err(Error::EmptyTestSplit);
    }
    // Rows are labeled by provenance; with a fine-tuned checkpoint present the
    // real test frames are scored by both models.
    let joint = Checkpoint::load(&layout.joint_checkpoint)?;
    let tuned = layout.finetuned_checkpoint.exists().then(|| Checkpoint::load(&layout.finetuned_checkpoint)).transpose()?;
    let mut report = evaluate(&joint.network, &corpus, &cfg.eval, if tuned.is_some() { "joint" } else { "" })?;
    if let Some(tuned) = tuned {
        let real = subset(&corpus, |r| r.provenance == Provenance::Real);
        if real.split(Split::Test).next().is_some() {
            report.merge(evaluate(&tuned.network, &real, &cfg.eval, "finetuned")?);
        }
    }
    let json = report.to_json();
    write_file(&layout.report_json, &json)?;
    write_file(&layout.report_table, &report.to_table())?;
    Ok(StageOutput::Report { path: layout.report_json.clone(), sha256: sha256_hex(json.as_bytes()), report })
}

fn run_infer(layout: &Layout) -> Result<StageOutput, Error> {
    let corpus = read_corpus(layout)?;
    let ckpt = latest_checkpoint(layout)?;
    let net = &ckpt.network;
    let [h, w] = net.config.input_size;
    let out = &layout.predictions;
    let records: Vec<&SampleRecord> = corpus.split(Split::Test).collect();
    if records.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    let predicted = records
        .par_iter()
        .map(|record| {
            let frame = Frame::load(&corpus, record)?;
            if [frame.height() as usize, frame.width() as usize] != [h, w] {
                return Err(Error::shape(format!("record {} does not match the model input size", record.id)));
            }
            let sample = TrainSample::from_frame(&record.id, &frame, net.config.depth_scale_mm);
            let pred = net.forward(&Tensor::from_vec(sample.rgb, [1, 3, h, w])?)?;
            let seg: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, pred.argmax(0))
                .ok_or_else(|| Error::shape("segmentation size"))?;
            let depth_mm: Vec<f32> = pred.depth_mm(0, net.config.depth_scale_mm).into_iter().map(|d| d as f32).collect();
            let depth: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w as u32, h as u32, depth_mm).ok_or_else(|| Error::shape("depth size"))?;
            let id = &record.id;
            let rgb_path = format!("{id}_rgb.png");
            let seg_path = format!("{id}_seg.png");
            let depth_path = format!("{id}_depth.png");
            imageio::save_rgb(&out.join(&rgb_path), &frame.rgb)?;
            imageio::save_seg(&out.join(&seg_path), &seg)?;
            imageio::save_depth(&out.join(&depth_path), &depth)?;
            Ok(SampleRecord {
                version: MANIFEST_VERSION,
                id: id.clone(),
                rgb_path,
                depth_path: Some(depth_path),
                seg_path: Some(seg_path),
                split: Split::Test,
                camera: record.camera,
                seed: record.seed,
                provenance: Provenance::Prediction,
                lineage: None,
                poses: record.poses,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let manifest = DatasetManifest { root: out.clone(), records: predicted };
    let path = out.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(StageOutput::Manifest { path, records: manifest.records.len() })
}

#[derive(Serialize)]
struct OverlayLine<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    skipped: Option<&'static str>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    analysis: Option<&'a FrameAnalysis>,
}

fn run_overlay(cfg: &PipelineConfig, layout: &Layout) -> Result<StageOutput, Error> {
    let preds = DatasetManifest::read(&layout.predictions.join("manifest.jsonl"))?;
    let style = OverlayStyle::default();
    let dir = &layout.overlays;
    let lines = preds
        .records
        .par_iter()
        .map(|record| {
            let frame = Frame::load(&preds, record)?;
            let (Some(depth), Some(seg)) = (&frame.depth, &frame.seg) else {
                return Err(Error::invalid(format!("prediction {} lacks depth or seg", record.id)));
            };
            let Some(camera) = record.camera.as_ref() else {
                let line = OverlayLine { id: &record.id, skipped: Some("no camera intrinsics"), analysis: None };
                return serde_json::to_string(&line).map(|l| (l, false)).map_err(|e| Error::invalid(e.to_string()));
            };
            let analysis = analyze_frame(depth, seg, camera, &cfg.geometry)?;
            let img = render_overlay(&imageio::quantize_rgb(&frame.rgb), camera, &analysis, &cfg.geometry, &style);
            let path = dir.join(format!("{}_overlay.png", record.id));
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            img.save(&path).map_err(|e| Error::image(&path, e))?;
            let line = OverlayLine { id: &record.id, skipped: None, analysis: Some(&analysis) };
            serde_json::to_string(&line).map(|l| (l, true)).map_err(|e| Error::invalid(e.to_string()))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let frames = lines.iter().filter(|l| l.1).count();
    let mut text = lines.into_iter().map(|l| l.0).collect::<Vec<_>>().join("\n");
    text.push('\n');
    write_file(&dir.join("metrics.jsonl"), &text)?;
    Ok(StageOutput::Overlays { dir: dir.clone(), frames })
}

#[derive(Debug, Parser)]
#[command(name = "suturekit", version, about = "Synthetic suturing scenes, seg/depth training and needle geometry")]
pub struct Args {
    #[arg(value_enum)]
    pub stage: Stage,
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed, overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root, overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `section.key=value`, repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

/// Loads the config, prints it with the seed to stderr, runs the stage and
/// maps the outcome to an exit code.
pub fn run(stage: Stage, config_path: Option<&Path>, overrides: &Overrides) -> i32 {
    let cfg = match load_config(config_path, overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match toml::to_string(&cfg) {
        Ok(t) => eprintln!("# resolved config\n{t}"),
        Err(e) => eprintln!("# resolved config unavailable: {e}"),
    }
    eprintln!("{}: seed {}", stage.name(), cfg.seed);
    match execute(stage, &cfg) {
        Ok(out) => {
            match out {
                StageOutput::Manifest { path, records } => eprintln!("{}: {records} records -> {}", stage.name(), path.display()),
                StageOutput::Trained { checkpoint, report } => eprintln!(
                    "{}: {} steps, final loss {} -> {}",
                    stage.name(),
                    report.step_losses.len(),
                    report.final_loss().map_or("n/a".into(), |l| format!("{l:.6}")),
                    checkpoint.display()
                ),
                StageOutput::Report { path, report, sha256 } => {
                    print!("{}", report.to_table());
                    eprintln!("{}: report sha256 {sha256} -> {}", stage.name(), path.display());
                }
                StageOutput::Overlays { dir, frames } => eprintln!("{}: {frames} overlays -> {}", stage.name(), dir.display()),
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Entry point for the binary. Argument errors exit 1; help and version exit 0.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Args::try_parse_from(args) {
        Ok(a) => run(a.stage, a.config.as_deref(), &Overrides { seed: a.seed, out: a.out, set: a.set }),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}
