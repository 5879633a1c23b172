//! Renders a handful of frames and turns them into a training corpus of
//! fixed-size crops with lineage records.
//!
//! cargo run --release --example prepare_corpus -- [frames] [out_dir]

use std::path::PathBuf;

use suturekit::camera::CameraModel;
use suturekit::dataset::{build_training_corpus, AugmentationConfig};
use suturekit::manifest::Split;
use suturekit::scenegen::{generate_dataset, GenerateConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let frames: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(12);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "corpus_out".into()));

    let gen = GenerateConfig { camera: CameraModel::centered(320, 180, 366.0, 10.0, 400.0), ..GenerateConfig::default() };
    let synthetic = generate_dataset(frames, &gen, &out.join("synthetic"))?;
    let aug = AugmentationConfig { target_height: 128, crop_width: 128, crops_per_image: 4, seed: 1 };
    let corpus = build_training_corpus(&synthetic, None, &aug, &out.join("corpus"))?;

    println!(
        "{} rendered ({} test) -> {} training crops, {} test crops",
        synthetic.records.len(),
        synthetic.split(Split::Test).count(),
        corpus.split(Split::Train).count(),
        corpus.split(Split::Test).count()
    );
    for r in corpus.records.iter().take(5) {
        let l = r.lineage.as_ref().unwrap();
        println!("  {:14} <- {} at x = {}", r.id, l.parent, l.crop_offset);
    }
    Ok(())
}
