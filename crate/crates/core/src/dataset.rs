//! Preprocessing shared by synthetic and real frames: resize to a fixed
//! height, random horizontal crops for training, and split bookkeeping.

use std::collections::HashSet;
use std::path::Path;

use image::{ImageBuffer, Luma, Pixel, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::manifest::{DatasetManifest, Lineage, Provenance, SampleRecord, Split, MANIFEST_VERSION};
use crate::scenegen::{DepthMap, RgbFrame, ScenePose, SegMap};
use crate::{derive_seed, imageio, Error};

/// One frame loaded into memory. Real frames carry no depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: RgbFrame,
    pub depth: Option<DepthMap>,
    pub seg: Option<SegMap>,
    pub camera: Option<CameraModel>,
}

impl Frame {
    pub fn load(manifest: &DatasetManifest, record: &SampleRecord) -> Result<Self, Error> {
        let rgb = imageio::load_rgb(&manifest.resolve(&record.rgb_path))?;
        let depth = record
            .depth_path
            .as_deref()
            .map(|p| imageio::load_depth(&manifest.resolve(p)))
            .transpose()?;
        let seg = record
            .seg_path
            .as_deref()
            .map(|p| imageio::load_seg(&manifest.resolve(p)))
            .transpose()?;
        let frame = Self {
            rgb,
            depth,
            seg,
            camera: record.camera,
        };
        frame.check_dims()?;
        Ok(frame)
    }

    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }

    fn check_dims(&self) -> Result<(), Error> {
        let dims = self.rgb.dimensions();
        let depth_ok = self.depth.as_ref().is_none_or(|d| d.dimensions() == dims);
        let seg_ok = self.seg.as_ref().is_none_or(|s| s.dimensions() == dims);
        if depth_ok && seg_ok {
            Ok(())
        } else {
            Err(Error::shape("rgb, depth and seg maps differ in size"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub target_height: u32,
    pub crop_width: u32,
    pub crops_per_image: u32,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            target_height: 512,
            crop_width: 512,
            crops_per_image: 4,
            seed: 0,
        }
    }
}

/// Maps destination pixel centers to source coordinates.
fn source_coord(dst: u32, scale: f64) -> f64 {
    (dst as f64 + 0.5) / scale - 0.5
}

fn nearest<P: Pixel>(src: &ImageBuffer<P, Vec<P::Subpixel>>, w: u32, h: u32) -> ImageBuffer<P, Vec<P::Subpixel>> {
    let (sx, sy) = (w as f64 / src.width() as f64, h as f64 / src.height() as f64);
    ImageBuffer::from_fn(w, h, |x, y| {
        let u = (source_coord(x, sx).round().max(0.0) as u32).min(src.width() - 1);
        let v = (source_coord(y, sy).round().max(0.0) as u32).min(src.height() - 1);
        *src.get_pixel(u, v)
    })
}

fn bilinear(src: &RgbFrame, w: u32, h: u32) -> RgbFrame {
    let (sx, sy) = (w as f64 / src.width() as f64, h as f64 / src.height() as f64);
    let clamp = |c: f64, n: u32| c.clamp(0.0, (n - 1) as f64);
    ImageBuffer::from_fn(w, h, |x, y| {
        let u = clamp(source_coord(x, sx), src.width());
        let v = clamp(source_coord(y, sy), src.height());
        let (u0, v0) = (u.floor() as u32, v.floor() as u32);
        let (u1, v1) = ((u0 + 1).min(src.width() - 1), (v0 + 1).min(src.height() - 1));
        let (fu, fv) = ((u - u0 as f64) as f32, (v - v0 as f64) as f32);
        let mut out = [0f32; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let top = src.get_pixel(u0, v0)[k] * (1.0 - fu) + src.get_pixel(u1, v0)[k] * fu;
            let bottom = src.get_pixel(u0, v1)[k] * (1.0 - fu) + src.get_pixel(u1, v1)[k] * fu;
            *o = top * (1.0 - fv) + bottom * fv;
        }
        Rgb(out)
    })
}

/// Aspect-preserving resize to `target_height`. RGB is bilinear; seg and
/// depth are nearest-neighbor so labels and metric depths are preserved.
pub fn resize_to_height(frame: &Frame, target_height: u32) -> Result<Frame, Error> {
    if target_height == 0 {
        return Err(Error::invalid("target_height must be positive"));
    }
    frame.check_dims()?;
    if frame.height() == target_height {
        return Ok(frame.clone());
    }
    let width = ((frame.width() as f64 * target_height as f64 / frame.height() as f64).round() as u32).max(1);
    Ok(Frame {
        rgb: bilinear(&frame.rgb, width, target_height),
        depth: frame.depth.as_ref().map(|d| nearest(d, width, target_height)),
        seg: frame.seg.as_ref().map(|s| nearest(s, width, target_height)),
        camera: frame.camera.map(|c| c.resized(width, target_height)),
    })
}

/// Crops all maps to `crop_width` at the same horizontal offset.
pub fn crop_at(frame: &Frame, offset: u32, crop_width: u32) -> Result<Frame, Error> {
    if crop_width == 0 || offset + crop_width > frame.width() {
        return Err(Error::invalid(format!(
            "crop of width {crop_width} at {offset} exceeds frame width {}",
            frame.width()
        )));
    }
    let h = frame.height();
    let rgb = image::imageops::crop_imm(&frame.rgb, offset, 0, crop_width, h).to_image();
    let depth: Option<DepthMap> = frame
        .depth
        .as_ref()
        .map(|d| image::imageops::crop_imm(d, offset, 0, crop_width, h).to_image());
    let seg: Option<ImageBuffer<Luma<u8>, Vec<u8>>> = frame
        .seg
        .as_ref()
        .map(|s| image::imageops::crop_imm(s, offset, 0, crop_width, h).to_image());
    Ok(Frame {
        rgb,
        depth,
        seg,
        camera: frame.camera.map(|c| c.cropped(offset, 0, crop_width, h)),
    })
}

/// Crop at an offset drawn uniformly from `[0, width - crop_width]`.
pub fn random_crop_width(frame: &Frame, crop_width: u32, seed: u64) -> Result<(Frame, u32), Error> {
    if crop_width > frame.width() {
        return Err(Error::invalid(format!(
            "crop_width {crop_width} exceeds frame width {}",
            frame.width()
        )));
    }
    let offset = crop_offset(frame.width(), crop_width, seed);
    Ok((crop_at(frame, offset, crop_width)?, offset))
}

pub fn crop_offset(width: u32, crop_width: u32, seed: u64) -> u32 {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..=width - crop_width)
}

/// Stable 64-bit FNV-1a hash, used to key per-record seeds by id.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Reads a directory of annotated real frames (`<id>_rgb.png` paired with
/// `<id>_seg.png`) into a manifest rooted at that directory.
pub fn ingest_real_dir(dir: &Path, split: Split) -> Result<DatasetManifest, Error> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_rgb.png") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    let mut manifest = DatasetManifest::new(dir);
    for id in ids {
        let seg = format!("{id}_seg.png");
        if !dir.join(&seg).exists() {
            return Err(Error::MissingSegmentation(id));
        }
        manifest.records.push(SampleRecord {
            version: MANIFEST_VERSION,
            rgb_path: format!("{id}_rgb.png"),
            depth_path: None,
            seg_path: Some(seg),
            split,
            camera: None,
            seed: None,
            provenance: Provenance::Real,
            lineage: None,
            poses: None,
            id,
        });
    }
    Ok(manifest)
}

struct Job<'a> {
    manifest: &'a DatasetManifest,
    record: &'a SampleRecord,
}

fn write_frame(out_dir: &Path, id: &str, frame: &Frame) -> Result<(String, Option<String>, Option<String>), Error> {
    let rgb = format!("frames/{id}_rgb.png");
    imageio::save_rgb(&out_dir.join(&rgb), &frame.rgb)?;
    let depth = match &frame.depth {
        Some(d) => {
            let p = format!("frames/{id}_depth.png");
            imageio::save_depth(&out_dir.join(&p), d)?;
            Some(p)
        }
        None => None,
    };
    let seg = match &frame.seg {
        Some(s) => {
            let p = format!("frames/{id}_seg.png");
            imageio::save_seg(&out_dir.join(&p), s)?;
            Some(p)
        }
        None => None,
    };
    Ok((rgb, depth, seg))
}

fn derived_record(
    parent: &SampleRecord,
    id: String,
    paths: (String, Option<String>, Option<String>),
    camera: Option<CameraModel>,
    lineage: Lineage,
    poses: Option<ScenePose>,
) -> SampleRecord {
    SampleRecord {
        version: MANIFEST_VERSION,
        id,
        rgb_path: paths.0,
        depth_path: paths.1,
        seg_path: paths.2,
        split: parent.split,
        camera,
        seed: parent.seed,
        provenance: parent.provenance,
        lineage: Some(lineage),
        poses,
    }
}

fn check_leakage(inputs: &[&DatasetManifest]) -> Result<(), Error> {
    let test_ids: HashSet<&str> = inputs
        .iter()
        .flat_map(|m| m.split(Split::Test))
        .flat_map(|r| {
            std::iter::once(r.id.as_str()).chain(r.lineage.as_ref().map(|l| l.parent.as_str()))
        })
        .collect();
    for r in inputs.iter().flat_map(|m| m.split(Split::Train)) {
        let parent = r.lineage.as_ref().map_or(r.id.as_str(), |l| l.parent.as_str());
        if test_ids.contains(parent) || test_ids.contains(r.id.as_str()) {
            return Err(Error::SplitLeakage {
                child: r.id.clone(),
                parent: parent.to_string(),
            });
        }
    }
    Ok(())
}

/// Builds the preprocessed corpus in `out_dir`: every training parent is
/// resized and randomly cropped `crops_per_image` times; every test record
/// is resized and center-cropped once (never augmented). Writes
/// `out_dir/manifest.jsonl`.
pub fn build_training_corpus(
    synthetic: &DatasetManifest,
    real: Option<&DatasetManifest>,
    aug: &AugmentationConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, Error> {
    if aug.target_height == 0 || aug.crop_width == 0 {
        return Err(Error::invalid("target_height and crop_width must be positive"));
    }
    let mut inputs = vec![synthetic];
    inputs.extend(real);
    check_leakage(&inputs)?;

    let jobs: Vec<Job> = inputs
        .iter()
        .flat_map(|m| m.records.iter().map(move |record| Job { manifest: m, record }))
        .collect();

    let produced = jobs
        .par_iter()
        .map(|job| -> Result<Vec<SampleRecord>, Error> {
            let record = job.record;
            if record.seg_path.is_none() {
                return Err(Error::MissingSegmentation(record.id.clone()));
            }
            let frame = resize_to_height(&Frame::load(job.manifest, record)?, aug.target_height)?;
            if aug.crop_width > frame.width() {
                return Err(Error::invalid(format!(
                    "{}: crop_width {} exceeds resized width {}",
                    record.id,
                    aug.crop_width,
                    frame.width()
                )));
            }
            let parent_seed = derive_seed(aug.seed, fnv1a(&record.id));
            match record.split {
                Split::Train => (0..aug.crops_per_image)
                    .map(|k| {
                        let (crop, offset) = random_crop_width(&frame, aug.crop_width, derive_seed(parent_seed, k as u64))?;
                        let id = format!("{}_c{k}", record.id);
                        let paths = write_frame(out_dir, &id, &crop)?;
                        let lineage = Lineage {
                            parent: record.id.clone(),
                            crop_offset: offset,
                            augmented: true,
                        };
                        Ok(derived_record(record, id, paths, crop.camera, lineage, record.poses))
                    })
                    .collect(),
                Split::Test => {
                    let offset = (frame.width() - aug.crop_width) / 2;
                    let crop = crop_at(&frame, offset, aug.crop_width)?;
                    let paths = write_frame(out_dir, &record.id, &crop)?;
                    let lineage = Lineage {
                        parent: record.id.clone(),
                        crop_offset: offset,
                        augmented: false,
                    };
                    Ok(vec![derived_record(record, record.id.clone(), paths, crop.camera, lineage, record.poses)])
                }
            }
        })
        .collect::<Result<Vec<_>, Error>>()?;

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records: produced.into_iter().flatten().collect(),
    };
    check_leakage(&[&manifest])?;
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::class;

    fn gradient_frame(w: u32, h: u32) -> Frame {
        Frame {
            rgb: ImageBuffer::from_fn(w, h, |x, y| Rgb([x as f32 / w as f32, y as f32 / h as f32, 0.5])),
            depth: Some(ImageBuffer::from_fn(w, h, |x, y| Luma([100.0 + x as f32 + 0.1 * y as f32]))),
            seg: Some(ImageBuffer::from_fn(w, h, |x, y| Luma([((x / 7 + y / 5) % 3) as u8]))),
            camera: Some(CameraModel::centered(w, h, 50.0, 10.0, 400.0)),
        }
    }

    #[test]
    fn resize_hd_to_512() {
        let f = gradient_frame(1920, 1080);
        let r = resize_to_height(&f, 512).unwrap();
        assert_eq!(r.rgb.dimensions(), (910, 512));
        assert_eq!(r.depth.as_ref().unwrap().dimensions(), (910, 512));
        assert_eq!(r.camera.unwrap().width, 910);
    }

    #[test]
    fn resize_to_same_height_is_identity() {
        let f = gradient_frame(40, 32);
        assert_eq!(resize_to_height(&f, 32).unwrap(), f);
    }

    #[test]
    fn resize_preserves_labels_and_depth_values() {
        let f = gradient_frame(53, 37);
        let r = resize_to_height(&f, 64).unwrap();
        let labels: HashSet<u8> = r.seg.unwrap().pixels().map(|p| p[0]).collect();
        assert!(labels.iter().all(|&l| (l as usize) < class::COUNT));
        let src: HashSet<u32> = f.depth.unwrap().pixels().map(|p| p[0].to_bits()).collect();
        assert!(r.depth.unwrap().pixels().all(|p| src.contains(&p[0].to_bits())));
    }

    #[test]
    fn crop_width_edge_cases() {
        let f = gradient_frame(30, 10);
        let (c, off) = random_crop_width(&f, 30, 9).unwrap();
        assert_eq!(off, 0);
        assert_eq!(c, Frame { camera: c.camera, ..f.clone() });
        assert!(random_crop_width(&f, 31, 9).is_err());
        assert_eq!(random_crop_width(&f, 12, 4).unwrap().1, random_crop_width(&f, 12, 4).unwrap().1);
    }

    #[test]
    fn crop_is_applied_identically_to_all_maps() {
        let f = gradient_frame(50, 20);
        let (c, off) = random_crop_width(&f, 17, 77).unwrap();
        let (d0, s0) = (f.depth.as_ref().unwrap(), f.seg.as_ref().unwrap());
        for y in 0..20 {
            for x in 0..17 {
                assert_eq!(c.rgb.get_pixel(x, y), f.rgb.get_pixel(x + off, y));
                assert_eq!(c.depth.as_ref().unwrap().get_pixel(x, y), d0.get_pixel(x + off, y));
                assert_eq!(c.seg.as_ref().unwrap().get_pixel(x, y), s0.get_pixel(x + off, y));
            }
        }
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 399 possible offsets for a 910-wide frame cropped to 512.
        let bins = 399usize;
        let draws = 10_000u64;
        let mut counts = vec![0u32; bins];
        for seed in 0..draws {
            counts[crop_offset(910, 512, derive_seed(11, seed)) as usize] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 398 degrees of freedom: the 0.999 quantile is about 490.9.
        assert!(chi2 < 491.0, "chi2 = {chi2}");
        assert!(counts.iter().all(|&c| c > 0));
    }
}
