//! Renders one randomized suturing scene and writes its RGB, depth and
//! segmentation maps as PNG files.
//!
//! cargo run --example render_scene -- [seed] [out_dir]

use std::path::PathBuf;

use suturekit::camera::CameraModel;
use suturekit::imageio;
use suturekit::scenegen::{build_scene, class, render, RandomizationConfig, SceneSpecs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "scene_out".into()));

    let specs = SceneSpecs::default();
    let rand = RandomizationConfig::default();
    let camera = CameraModel::centered(480, 270, 550.0, 10.0, 400.0);
    let poses = build_scene(&specs, &rand, seed)?;
    let sample = render(&poses, &camera, &specs, &rand)?;

    imageio::save_rgb(&out.join("rgb.png"), &sample.rgb)?;
    imageio::save_depth(&out.join("depth.png"), &sample.depth)?;
    imageio::save_seg(&out.join("seg.png"), &sample.seg)?;

    // Stretched label map for viewing.
    let mut vis = sample.seg.clone();
    vis.pixels_mut().for_each(|p| p[0] *= 120);
    vis.save(out.join("seg_vis.png"))?;

    let count = |c: u8| sample.seg.pixels().filter(|p| p[0] == c).count();
    println!(
        "seed {seed}: grasp {:?}, needle px {}, instrument px {}",
        poses.grasp_fraction,
        count(class::NEEDLE),
        count(class::INSTRUMENT)
    );
    println!("wrote {}", out.display());
    Ok(())
}
