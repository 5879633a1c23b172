//! Runs gen, prepare, train, eval, infer and overlay in-process on a tiny
//! configuration, the same path the `suturekit` binary takes.
//!
//! cargo run --release --example pipeline -- [out_dir]

use std::path::PathBuf;

use suturekit::cli::{execute, PipelineConfig, Stage, StageOutput};

const CONFIG: &str = r#"
seed = 4
[scene]
frames = 24
[scene.camera]
width = 192
height = 108
fx = 220.0
fy = 220.0
cx = 95.5
cy = 53.5
[dataset]
target_height = 64
crop_width = 64
crops_per_image = 2
[model]
depth_levels = 3
base_channels = 4
input_size = [64, 64]
[training.optimizer]
learning_rate = 1e-3
epochs_synthetic = 3
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "pipeline_out".into()));
    let mut cfg = PipelineConfig::from_toml(CONFIG)?;
    cfg.out = out;
    cfg.resolve_seeds();
    cfg.validate()?;

    for stage in [Stage::Gen, Stage::Prepare, Stage::Train, Stage::Eval, Stage::Infer, Stage::Overlay] {
        match execute(stage, &cfg)? {
            StageOutput::Manifest { path, records } => println!("{:8} {records} records in {}", stage.name(), path.display()),
            StageOutput::Trained { report, .. } => {
                println!("{:8} {} steps, final loss {:.4}", stage.name(), report.step_losses.len(), report.final_loss().unwrap_or(f64::NAN))
            }
            StageOutput::Report { report, sha256, .. } => {
                println!("{:8} report {}", stage.name(), &sha256[..12]);
                print!("{}", report.to_table());
            }
            StageOutput::Overlays { dir, frames } => println!("{:8} {frames} overlays in {}", stage.name(), dir.display()),
        }
    }
    Ok(())
}
