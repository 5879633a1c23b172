//! Two-phase optimization: joint training of both branches on synthetic
//! frames, then encoder + segmentation fine-tuning on real frames with the
//! depth decoder frozen.

mod loss;
mod optim;

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::manifest::{DatasetManifest, Split};
use crate::model::checkpoint::{CheckpointMeta, PhaseRecord};
use crate::model::{ModelConfig, Network, ParamGroup, Tensor};
use crate::{derive_seed, Error};

pub use loss::{loss_and_grads, loss_total, LossBreakdown, LossConfig, CE_EPSILON};
pub use optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    JointSynthetic,
    SegFinetuneReal,
}

impl TrainPhase {
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            TrainPhase::JointSynthetic => &ParamGroup::ALL,
            TrainPhase::SegFinetuneReal => &[ParamGroup::Encoder, ParamGroup::SegDecoder],
        }
    }

    pub fn uses_depth(self) -> bool {
        self == TrainPhase::JointSynthetic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs_synthetic: usize,
    pub epochs_real: usize,
    /// Stops a phase after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            epochs_synthetic: 20,
            epochs_real: 10,
            max_steps: None,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// One training frame in network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    /// `[3, h, w]` planar, values in `[0, 1]`.
    pub rgb: Vec<f32>,
    pub seg: Option<Vec<u8>>,
    /// Normalized depth, `mm / depth_scale_mm` clamped to `[0, 1]`.
    pub depth_norm: Option<Vec<f32>>,
    pub height: usize,
    pub width: usize,
}

impl TrainSample {
    pub fn from_frame(id: &str, frame: &Frame, depth_scale_mm: f64) -> Self {
        let (w, h) = frame.rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut rgb = vec![0.0; 3 * w * h];
        for (x, y, p) in frame.rgb.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                rgb[c * w * h + i] = p.0[c];
            }
        }
        Self {
            id: id.to_string(),
            rgb,
            seg: frame.seg.as_ref().map(|s| s.as_raw().clone()),
            depth_norm: frame.depth.as_ref().map(|d| {
                d.as_raw()
                    .iter()
                    .map(|&mm| (mm as f64 / depth_scale_mm).clamp(0.0, 1.0) as f32)
                    .collect()
            }),
            height: h,
            width: w,
        }
    }
}

/// Loads the records of one split, checking that they match the network input size.
pub fn load_samples(manifest: &DatasetManifest, split: Split, model: &ModelConfig) -> Result<Vec<TrainSample>, Error> {
    manifest
        .split(split)
        .map(|record| {
            let frame = Frame::load(manifest, record)?;
            let size = [frame.height() as usize, frame.width() as usize];
            if size != model.input_size {
                return Err(Error::shape(format!(
                    "record {} is {}x{}, model expects {}x{}",
                    record.id, size[0], size[1], model.input_size[0], model.input_size[1]
                )));
            }
            Ok(TrainSample::from_frame(&record.id, &frame, model.depth_scale_mm))
        })
        .collect()
}

/// Network weights plus the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, Error> {
        Ok(Self {
            network: Network::new(config, seed)?,
            meta: CheckpointMeta { phases: Vec::new(), init_seed: seed },
        })
    }

    pub fn save(&mut self, path: &Path) -> Result<(), Error> {
        crate::model::save_checkpoint(path, &mut self.network, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let (network, meta) = crate::model::load_checkpoint(path)?;
        Ok(Self { network, meta })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: TrainPhase,
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub ce: f64,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Loss of every optimizer step, measured on its batch before the update.
    pub step_losses: Vec<LossBreakdown>,
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Assembles a batch tensor and its labels.
pub fn make_batch(samples: &[&TrainSample], with_depth: bool) -> (Tensor<f32>, Vec<u8>, Option<Vec<f32>>) {
    let (h, w) = (samples[0].height, samples[0].width);
    let mut rgb = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut seg = Vec::with_capacity(samples.len() * h * w);
    let mut depth = Vec::new();
    for s in samples {
        rgb.extend_from_slice(&s.rgb);
        seg.extend_from_slice(s.seg.as_ref().expect("checked before training"));
        if with_depth {
            depth.extend_from_slice(s.depth_norm.as_ref().expect("checked before training"));
        }
    }
    let t = Tensor::from_vec(rgb, [samples.len(), 3, h, w]).expect("uniform sample sizes");
    (t, seg, with_depth.then_some(depth))
}

fn run_phase(
    ckpt: &mut Checkpoint,
    samples: &[TrainSample],
    opt: &OptimizerConfig,
    loss_cfg: &LossConfig,
    phase: TrainPhase,
    epochs: usize,
    log_path: Option<&Path>,
) -> Result<TrainReport, Error> {
    opt.validate()?;
    loss_cfg.validate()?;
    for s in samples {
        if s.seg.is_none() {
            return Err(Error::MissingSegmentation(s.id.clone()));
        }
        if phase.uses_depth() && s.depth_norm.is_none() {
            return Err(Error::MissingDepth(s.id.clone()));
        }
        if [s.height, s.width] != ckpt.network.config.input_size {
            return Err(Error::shape(format!("sample {} does not match the model input size", s.id)));
        }
    }
    let mut log = match log_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some(File::options().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?)
        }
        None => None,
    };

    let phase_seed = derive_seed(opt.seed, phase as u64);
    let mut adam = Adam::new(opt);
    let mut report = TrainReport::default();
    let net = &mut ckpt.network;
    let with_depth = phase.uses_depth();
    let mut steps = 0;
    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(phase_seed, epoch as u64)));
        let (mut sum, mut ce, mut mse, mut count) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(opt.batch_size) {
            if opt.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (x, seg, depth) = make_batch(&batch, with_depth);
            let (pred, cache) = net.forward_train(&x, with_depth)?;
            let (l, d_seg, d_depth) = loss_and_grads(&pred, &seg, depth.as_deref(), loss_cfg, phase)?;
            net.zero_grad();
            net.backward(&cache, &d_seg, d_depth.as_ref());
            net.update_batch_norm(&cache);
            adam.step(net, phase.trainable_groups());
            steps += 1;
            sum += l.total;
            ce += l.ce;
            mse += l.mse.unwrap_or(0.0);
            count += 1;
            report.step_losses.push(l);
        }
        if count == 0 {
            break;
        }
        let n = count as f64;
        let entry = EpochLog {
            phase,
            epoch,
            steps,
            loss: sum / n,
            ce: ce / n,
            mse: with_depth.then_some(mse / n),
        };
        if let (Some(f), Some(p)) = (log.as_mut(), log_path) {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        report.epochs.push(entry);
    }
    ckpt.meta.phases.push(PhaseRecord {
        phase,
        epochs,
        steps,
        seed: opt.seed,
        final_loss: report.final_loss(),
    });
    Ok(report)
}

/// Trains encoder and both decoders on samples that carry depth.
pub fn train_joint(
    corpus: &[TrainSample],
    ckpt: &mut Checkpoint,
    opt: &OptimizerConfig,
    loss: &LossConfig,
    log_path: Option<&Path>,
) -> Result<TrainReport, Error> {
    run_phase(ckpt, corpus, opt, loss, TrainPhase::JointSynthetic, opt.epochs_synthetic, log_path)
}

/// Re-trains encoder and segmentation decoder; the depth decoder is frozen.
pub fn finetune_seg(
    corpus: &[TrainSample],
    ckpt: &mut Checkpoint,
    opt: &OptimizerConfig,
    loss: &LossConfig,
    log_path: Option<&Path>,
) -> Result<TrainReport, Error> {
    run_phase(ckpt, corpus, opt, loss, TrainPhase::SegFinetuneReal, opt.epochs_real, log_path)
}
