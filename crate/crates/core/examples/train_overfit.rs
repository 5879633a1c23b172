//! Overfits a small network on a handful of rendered 256x256 frames and
//! reports training-set Dice and depth MAE.
//!
//! cargo run --release --example train_overfit -- [frames] [steps] [base_channels]

use std::time::Instant;

use suturekit::camera::CameraModel;
use suturekit::dataset::Frame;
use suturekit::eval::{dice, mae_depth};
use suturekit::model::{ModelConfig, Tensor};
use suturekit::scenegen::{build_scene, class, render, RandomizationConfig, SceneSpecs};
use suturekit::training::{train_joint, Checkpoint, LossConfig, OptimizerConfig, TrainSample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let frames = args.next().transpose()?.unwrap_or(16);
    let steps = args.next().transpose()?.unwrap_or(500);
    let base = args.next().transpose()?.unwrap_or(8);

    let specs = SceneSpecs::default();
    let rand = RandomizationConfig::default();
    let camera = CameraModel::centered(256, 256, 520.0, 10.0, 400.0);
    let model = ModelConfig { base_channels: base, input_size: [256, 256], ..ModelConfig::default() };

    let samples = (0..frames)
        .map(|i| {
            let poses = build_scene(&specs, &rand, suturekit::derive_seed(42, i as u64))?;
            let r = render(&poses, &camera, &specs, &rand)?;
            let frame = Frame { rgb: r.rgb, depth: Some(r.depth), seg: Some(r.seg), camera: Some(camera) };
            Ok(TrainSample::from_frame(&format!("f{i}"), &frame, model.depth_scale_mm))
        })
        .collect::<Result<Vec<_>, suturekit::Error>>()?;

    let opt = OptimizerConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs_synthetic: steps.div_ceil(frames.div_ceil(4)),
        max_steps: Some(steps),
        ..OptimizerConfig::default()
    };
    let loss = LossConfig { class_weights: [1.0, 4.0, 2.0], ..LossConfig::default() };
    let mut ckpt = Checkpoint::init(&model, 1)?;
    println!("{} parameters", ckpt.network.num_parameters());

    let start = Instant::now();
    let report = train_joint(&samples, &mut ckpt, &opt, &loss, None)?;
    for (i, l) in report.step_losses.iter().enumerate() {
        if i % 25 == 0 || i + 1 == report.step_losses.len() {
            println!("step {i:4}  loss {:.4}  ce {:.4}  mse {:.5}", l.total, l.ce, l.mse.unwrap_or(0.0));
        }
    }
    println!("trained {} steps in {:.1?}", report.step_losses.len(), start.elapsed());

    let (mut dn, mut di, mut mae) = (0.0, 0.0, 0.0);
    for s in &samples {
        let x = Tensor::from_vec(s.rgb.clone(), [1, 3, 256, 256])?;
        let pred = ckpt.network.forward(&x)?;
        let labels = pred.argmax(0);
        let gt = s.seg.as_ref().unwrap();
        let mask = |m: &[u8], c: u8| m.iter().map(|&v| v == c).collect::<Vec<_>>();
        dn += dice(&mask(&labels, class::NEEDLE), &mask(gt, class::NEEDLE))?;
        di += dice(&mask(&labels, class::INSTRUMENT), &mask(gt, class::INSTRUMENT))?;
        let gt_mm: Vec<f64> = s.depth_norm.as_ref().unwrap().iter().map(|&d| d as f64 * model.depth_scale_mm).collect();
        let valid: Vec<bool> = gt_mm.iter().map(|&d| d > 0.0).collect();
        mae += mae_depth(&pred.depth_mm(0, model.depth_scale_mm), &gt_mm, &valid)?;
    }
    let n = samples.len() as f64;
    println!("needle dice {:.3}  instrument dice {:.3}  depth MAE {:.2} mm", dn / n, di / n, mae / n);
    Ok(())
}
