use image::{GrayImage, ImageBuffer, Luma, Rgb, Rgb32FImage};
use nalgebra::{Isometry3, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{class, sdf, RandomizationConfig, ScenePose, SceneSpecs};
use crate::camera::CameraModel;
use crate::{derive_seed, Error};

pub type RgbFrame = Rgb32FImage;
/// Metric z-depth in mm, 0 where no surface was hit.
pub type DepthMap = ImageBuffer<Luma<f32>, Vec<f32>>;
pub type SegMap = GrayImage;

/// Sphere-tracing convergence threshold, mm.
pub const MARCH_TOLERANCE: f64 = 1e-3;
pub const MAX_MARCH_STEPS: usize = 256;

const NOISE_STREAM: u64 = 0x6e6f697365;
const AMBIENT: f64 = 0.35;
const BACKGROUND_RGB: [f64; 3] = [0.03, 0.03, 0.04];
const PAD_RGB: [f64; 3] = [0.86, 0.58, 0.52];
const WOUND_RGB: [f64; 3] = [0.55, 0.18, 0.16];
const NEEDLE_RGB: [f64; 3] = [0.78, 0.78, 0.82];
const INSTRUMENT_RGB: [f64; 3] = [0.22, 0.23, 0.26];
const WOUND_HALF_WIDTH: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct RenderSample {
    /// Linear RGB in [0, 1].
    pub rgb: RgbFrame,
    pub depth: DepthMap,
    pub seg: SegMap,
    pub camera: CameraModel,
    pub poses: ScenePose,
    pub seed: u64,
}

/// World-space signed distance field of a posed scene.
#[derive(Debug, Clone)]
pub struct Scene {
    specs: SceneSpecs,
    pad_inv: Isometry3<f64>,
    needle_inv: Isometry3<f64>,
    instrument_inv: Isometry3<f64>,
}

impl Scene {
    pub fn new(specs: &SceneSpecs, poses: &ScenePose) -> Self {
        Self {
            specs: *specs,
            pad_inv: poses.pad.isometry().inverse(),
            needle_inv: poses.needle.isometry().inverse(),
            instrument_inv: poses.instrument.isometry().inverse(),
        }
    }

    /// Distance to the surface of one class (world frame).
    pub fn class_sdf(&self, p: &Point3<f64>, class_id: u8) -> f64 {
        match class_id {
            class::BACKGROUND => {
                let pad = &self.specs.pad;
                let local = self.pad_inv * p;
                let centered = Point3::new(local.x, local.y, local.z + pad.thickness / 2.0);
                let half = Vector3::new(pad.extent_x, pad.extent_y, pad.thickness) / 2.0;
                sdf::rounded_box(&centered, &half, 1.0)
            }
            class::NEEDLE => {
                let n = &self.specs.needle;
                sdf::torus_arc(&(self.needle_inv * p), n.circle_radius, n.wire_radius, n.arc_angle())
            }
            class::INSTRUMENT => {
                let s = &self.specs.instrument;
                let local = self.instrument_inv * p;
                let hinge = Point3::new(s.jaw_length, 0.0, 0.0);
                let end = Point3::new(s.jaw_length + s.shaft_length, 0.0, 0.0);
                let spread = s.jaw_length * (s.jaw_opening_angle / 2.0).to_radians().tan();
                let shaft = sdf::capsule(&local, &hinge, &end, s.shaft_radius);
                let upper = sdf::capsule(&local, &Point3::new(0.0, 0.0, spread), &hinge, s.jaw_radius());
                let lower = sdf::capsule(&local, &Point3::new(0.0, 0.0, -spread), &hinge, s.jaw_radius());
                shaft.min(upper).min(lower)
            }
            other => panic!("unknown class id {other}"),
        }
    }

    /// Union distance and the class of the nearest surface.
    pub fn sdf(&self, p: &Point3<f64>) -> (f64, u8) {
        let mut best = (self.class_sdf(p, class::BACKGROUND), class::BACKGROUND);
        for c in [class::NEEDLE, class::INSTRUMENT] {
            let d = self.class_sdf(p, c);
            if d < best.0 {
                best = (d, c);
            }
        }
        best
    }

    fn normal(&self, p: &Point3<f64>) -> Vector3<f64> {
        let h = 1e-3;
        let d = |dx: f64, dy: f64, dz: f64| self.sdf(&(p + Vector3::new(dx, dy, dz))).0;
        Vector3::new(
            d(h, 0.0, 0.0) - d(-h, 0.0, 0.0),
            d(0.0, h, 0.0) - d(0.0, -h, 0.0),
            d(0.0, 0.0, h) - d(0.0, 0.0, -h),
        )
        .try_normalize(1e-12)
        .unwrap_or_else(Vector3::z)
    }

    fn on_wound(&self, p: &Point3<f64>) -> bool {
        let local = self.pad_inv * p;
        if local.z.abs() > 0.05 {
            return false;
        }
        let [a, b] = self.specs.pad.wound_line.map(Point3::from);
        sdf::capsule(&local, &a, &b, WOUND_HALF_WIDTH) < 0.0
    }
}

struct Hit {
    depth: f64,
    class_id: u8,
    point: Point3<f64>,
}

fn trace(scene: &Scene, origin: &Point3<f64>, dir: &Vector3<f64>, dir_z: f64, camera: &CameraModel) -> Option<Hit> {
    let mut t = camera.near / dir_z;
    let t_max = camera.far / dir_z;
    for _ in 0..MAX_MARCH_STEPS {
        let p = origin + dir * t;
        let (d, class_id) = scene.sdf(&p);
        if d < MARCH_TOLERANCE {
            let depth = t * dir_z;
            return (depth > camera.near).then_some(Hit { depth, class_id, point: p });
        }
        t += d;
        if t >= t_max {
            return None;
        }
    }
    None
}

fn shade(scene: &Scene, hit: &Hit, light: &Vector3<f64>, view: &Vector3<f64>) -> [f64; 3] {
    let n = scene.normal(&hit.point);
    let diffuse = n.dot(light).max(0.0);
    let base = match hit.class_id {
        class::NEEDLE => NEEDLE_RGB,
        class::INSTRUMENT => INSTRUMENT_RGB,
        _ if scene.on_wound(&hit.point) => WOUND_RGB,
        _ => PAD_RGB,
    };
    let specular = if hit.class_id == class::NEEDLE {
        let half = (light - view).normalize();
        0.5 * n.dot(&half).max(0.0).powi(24)
    } else {
        0.0
    };
    base.map(|c| (c * (AMBIENT + (1.0 - AMBIENT) * diffuse) + specular).min(1.0))
}

/// Renders a frame. Depth and segmentation come from the first surface hit
/// along each pixel ray; Gaussian noise is then added to the RGB only.
pub fn render(
    poses: &ScenePose,
    camera: &CameraModel,
    specs: &SceneSpecs,
    rand: &RandomizationConfig,
) -> Result<RenderSample, Error> {
    camera.validate()?;
    specs.validate()?;
    if !(rand.noise_sigma >= 0.0) {
        return Err(Error::invalid("noise_sigma must be >= 0"));
    }
    let scene = Scene::new(specs, poses);
    let world_from_cam = poses.camera.isometry();
    let origin = world_from_cam * Point3::origin();
    let light = Vector3::from(poses.light_dir).normalize();
    let (w, h) = (camera.width as usize, camera.height as usize);

    let rows: Vec<Vec<([f64; 3], f32, u8)>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let ray = camera.ray(u as f64, v as f64);
                    let dir_cam = ray.normalize();
                    let dir = world_from_cam.rotation * dir_cam;
                    match trace(&scene, &origin, &dir, dir_cam.z, camera) {
                        Some(hit) => (shade(&scene, &hit, &light, &dir), hit.depth as f32, hit.class_id),
                        None => (BACKGROUND_RGB, 0.0, class::BACKGROUND),
                    }
                })
                .collect()
        })
        .collect();

    let mut rgb = RgbFrame::new(camera.width, camera.height);
    let mut depth = DepthMap::new(camera.width, camera.height);
    let mut seg = SegMap::new(camera.width, camera.height);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(poses.seed, NOISE_STREAM));
    let noise = (rand.noise_sigma > 0.0).then(|| Normal::new(0.0, rand.noise_sigma).unwrap());
    for (v, row) in rows.into_iter().enumerate() {
        for (u, (color, z, c)) in row.into_iter().enumerate() {
            let mut px = [0f32; 3];
            for (k, value) in color.iter().enumerate() {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                px[k] = (value + n).clamp(0.0, 1.0) as f32;
            }
            rgb.put_pixel(u as u32, v as u32, Rgb(px));
            depth.put_pixel(u as u32, v as u32, Luma([z]));
            seg.put_pixel(u as u32, v as u32, Luma([c]));
        }
    }
    Ok(RenderSample {
        rgb,
        depth,
        seg,
        camera: *camera,
        poses: *poses,
        seed: poses.seed,
    })
}
