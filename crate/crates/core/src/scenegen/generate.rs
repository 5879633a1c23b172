use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_scene, render, RandomizationConfig, SceneSpecs};
use crate::camera::CameraModel;
use crate::manifest::{DatasetManifest, Provenance, SampleRecord, Split, MANIFEST_VERSION};
use crate::{derive_seed, imageio, Error};

const SPLIT_STREAM: u64 = 0x73706c6974;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub specs: SceneSpecs,
    pub camera: CameraModel,
    pub randomization: RandomizationConfig,
    /// Fraction of frames held out for testing (21 of 218 by default).
    pub test_fraction: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            specs: SceneSpecs::default(),
            camera: CameraModel::default(),
            randomization: RandomizationConfig::default(),
            test_fraction: 21.0 / 218.0,
        }
    }
}

impl GenerateConfig {
    pub fn test_count(&self, n: usize) -> usize {
        ((n as f64 * self.test_fraction).round() as usize).min(n)
    }
}

/// Renders `n` frames into `out_dir/samples/` and writes
/// `out_dir/manifest.jsonl`. Frame `i` uses seed `derive_seed(seed, i)`.
pub fn generate_dataset(n: usize, config: &GenerateConfig, out_dir: &Path) -> Result<DatasetManifest, Error> {
    if n == 0 {
        return Err(Error::invalid("frame count must be positive"));
    }
    config.specs.validate()?;
    config.camera.validate()?;
    config.randomization.validate()?;
    if !(0.0..=1.0).contains(&config.test_fraction) {
        return Err(Error::invalid("test_fraction must lie in [0, 1]"));
    }

    let base_seed = config.randomization.seed;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(base_seed, SPLIT_STREAM)));
    let mut is_test = vec![false; n];
    for &i in &order[..config.test_count(n)] {
        is_test[i] = true;
    }

    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = format!("syn_{i:05}");
            let seed = derive_seed(base_seed, i as u64);
            let poses = build_scene(&config.specs, &config.randomization, seed)?;
            let sample = render(&poses, &config.camera, &config.specs, &config.randomization)?;
            let rgb_path = format!("samples/{id}_rgb.png");
            let depth_path = format!("samples/{id}_depth.png");
            let seg_path = format!("samples/{id}_seg.png");
            imageio::save_rgb(&out_dir.join(&rgb_path), &sample.rgb)?;
            imageio::save_depth(&out_dir.join(&depth_path), &sample.depth)?;
            imageio::save_seg(&out_dir.join(&seg_path), &sample.seg)?;
            Ok(SampleRecord {
                version: MANIFEST_VERSION,
                id,
                rgb_path,
                depth_path: Some(depth_path),
                seg_path: Some(seg_path),
                split: if is_test[i] { Split::Test } else { Split::Train },
                camera: Some(config.camera),
                seed: Some(seed),
                provenance: Provenance::Synthetic,
                lineage: None,
                poses: Some(poses),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio;

    fn small() -> GenerateConfig {
        GenerateConfig {
            camera: CameraModel::centered(32, 24, 30.0, 10.0, 400.0),
            ..GenerateConfig::default()
        }
    }

    #[test]
    fn single_frame_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(1, &small(), dir.path()).unwrap();
        assert_eq!(m.records.len(), 1);
        let r = &m.records[0];
        assert_eq!(r.split, Split::Train);
        let rgb_path = dir.path().join(&r.rgb_path);
        let rgb = imageio::load_rgb(&rgb_path).unwrap();
        let copy = dir.path().join("copy.png");
        imageio::save_rgb(&copy, &rgb).unwrap();
        assert_eq!(
            image::open(&rgb_path).unwrap().to_rgb8(),
            image::open(&copy).unwrap().to_rgb8()
        );
        let seg = imageio::load_seg(&dir.path().join(r.seg_path.as_ref().unwrap())).unwrap();
        assert_eq!(seg.dimensions(), (32, 24));
        let back = DatasetManifest::read(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn default_corpus_size_and_split() {
        let cfg = GenerateConfig::default();
        assert_eq!(cfg.test_count(218), 21);
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenerateConfig {
            camera: CameraModel::centered(8, 6, 8.0, 10.0, 400.0),
            ..cfg
        };
        let m = generate_dataset(218, &cfg, dir.path()).unwrap();
        assert_eq!(m.records.len(), 218);
        assert_eq!(m.split(Split::Test).count(), 21);
    }

    #[test]
    fn identical_config_gives_identical_manifest() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(4, &small(), a.path()).unwrap();
        generate_dataset(4, &small(), b.path()).unwrap();
        for f in ["manifest.jsonl", "samples/syn_00002_rgb.png", "samples/syn_00003_depth.png"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn zero_frames_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(0, &small(), dir.path()).is_err());
    }
}
