//! Procedural virtual suturing scene: a silicone pad, a half-circle needle and
//! a needle holder, rendered by sphere tracing analytic signed distance
//! fields so that depth and segmentation ground truth are exact.

mod generate;
mod render;
pub mod sdf;

use std::f64::consts::TAU;

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

pub use generate::{generate_dataset, GenerateConfig};
pub use render::{render, DepthMap, RenderSample, RgbFrame, Scene, SegMap, MARCH_TOLERANCE, MAX_MARCH_STEPS};

/// Segmentation class ids.
pub mod class {
    /// Background and suture pad.
    pub const BACKGROUND: u8 = 0;
    pub const NEEDLE: u8 = 1;
    pub const INSTRUMENT: u8 = 2;
    pub const COUNT: usize = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleSpec {
    /// Radius of the needle's circle, mm.
    pub circle_radius: f64,
    /// Radius of the needle wire, mm.
    pub wire_radius: f64,
    /// Fraction of a full circle covered by the needle body.
    pub arc_fraction: f64,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        Self {
            circle_radius: 8.0,
            wire_radius: 0.4,
            arc_fraction: 0.5,
        }
    }
}

impl NeedleSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.circle_radius > self.wire_radius && self.wire_radius > 0.0) {
            return Err(Error::invalid("needle requires circle_radius > wire_radius > 0"));
        }
        if !(self.arc_fraction > 0.0 && self.arc_fraction <= 1.0) {
            return Err(Error::invalid("needle arc_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Angular span of the needle body in radians.
    pub fn arc_angle(&self) -> f64 {
        TAU * self.arc_fraction
    }

    /// Centerline point at arc angle `theta` in the needle frame.
    pub fn centerline(&self, theta: f64) -> Point3<f64> {
        Point3::new(
            self.circle_radius * theta.cos(),
            self.circle_radius * theta.sin(),
            0.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstrumentSpec {
    pub shaft_radius: f64,
    pub shaft_length: f64,
    pub jaw_length: f64,
    /// Full opening angle between the two jaws, degrees.
    pub jaw_opening_angle: f64,
}

impl Default for InstrumentSpec {
    fn default() -> Self {
        Self {
            shaft_radius: 2.5,
            shaft_length: 120.0,
            jaw_length: 8.0,
            jaw_opening_angle: 10.0,
        }
    }
}

impl InstrumentSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.shaft_radius > 0.0 && self.shaft_length > 0.0 && self.jaw_length > 0.0) {
            return Err(Error::invalid("instrument lengths must be positive"));
        }
        if !(0.0..=45.0).contains(&self.jaw_opening_angle) {
            return Err(Error::invalid("jaw_opening_angle must lie in [0, 45] degrees"));
        }
        Ok(())
    }

    pub fn jaw_radius(&self) -> f64 {
        0.4 * self.shaft_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PadSpec {
    pub extent_x: f64,
    pub extent_y: f64,
    pub thickness: f64,
    /// Wound segment endpoints on the top surface (pad frame, z = 0).
    pub wound_line: [[f64; 3]; 2],
}

impl Default for PadSpec {
    fn default() -> Self {
        Self {
            extent_x: 90.0,
            extent_y: 70.0,
            thickness: 10.0,
            wound_line: [[-25.0, 0.0, 0.0], [25.0, 0.0, 0.0]],
        }
    }
}

impl PadSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.extent_x > 0.0 && self.extent_y > 0.0 && self.thickness > 0.0) {
            return Err(Error::invalid("pad extents must be positive"));
        }
        for end in &self.wound_line {
            if end[2].abs() > 1e-9
                || end[0].abs() > self.extent_x / 2.0
                || end[1].abs() > self.extent_y / 2.0
            {
                return Err(Error::invalid("wound_line endpoints must lie on the pad top surface"));
            }
        }
        Ok(())
    }
}

/// Object dimensions of one scene.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpecs {
    pub needle: NeedleSpec,
    pub instrument: InstrumentSpec,
    pub pad: PadSpec,
}

impl SceneSpecs {
    pub fn validate(&self) -> Result<(), Error> {
        self.needle.validate()?;
        self.instrument.validate()?;
        self.pad.validate()
    }
}

/// Rigid transform stored as a unit quaternion `[w, i, j, k]` and a translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl RigidPose {
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let q = iso.rotation.quaternion();
        Self {
            rotation: [q.w, q.i, q.j, q.k],
            translation: iso.translation.vector.into(),
        }
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        let [w, i, j, k] = self.rotation;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, i, j, k));
        Isometry3::from_parts(Translation3::from(Vector3::from(self.translation)), q)
    }

    pub fn is_unit(&self) -> bool {
        let n: f64 = self.rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        (n - 1.0).abs() <= 1e-9
    }
}

/// Sampled configuration of one frame. All object poses map the object's
/// local frame into the world frame, whose z = 0 plane is the pad's resting
/// plane. The camera pose maps camera coordinates (x right, y down, z
/// forward) into the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePose {
    pub camera: RigidPose,
    pub pad: RigidPose,
    pub needle: RigidPose,
    pub instrument: RigidPose,
    /// Arc fraction from the needle tip at which the jaws hold the needle;
    /// `None` for free placement.
    pub grasp_fraction: Option<f64>,
    /// Unit direction toward the light, world frame.
    pub light_dir: [f64; 3],
    pub seed: u64,
}

impl ScenePose {
    /// Ground-truth needle circle (center, unit normal) in camera coordinates.
    pub fn needle_circle_in_camera(&self) -> (Point3<f64>, Vector3<f64>) {
        let cam_from_needle = self.camera.isometry().inverse() * self.needle.isometry();
        let center = cam_from_needle * Point3::origin();
        let normal = cam_from_needle * Vector3::z();
        (center, normal)
    }

    /// Needle centerline point at arc angle `theta`, camera coordinates.
    pub fn needle_point_in_camera(&self, needle: &NeedleSpec, theta: f64) -> Point3<f64> {
        self.camera.isometry().inverse() * (self.needle.isometry() * needle.centerline(theta))
    }

    /// Instrument axis (tip point, unit direction from tip toward the shaft),
    /// camera coordinates.
    pub fn instrument_axis_in_camera(&self) -> (Point3<f64>, Vector3<f64>) {
        let cam_from_inst = self.camera.isometry().inverse() * self.instrument.isometry();
        (cam_from_inst * Point3::origin(), cam_from_inst * Vector3::x())
    }

    /// Pad top plane as (unit normal, offset) with `n · p = offset`, camera coordinates.
    pub fn pad_plane_in_camera(&self) -> (Vector3<f64>, f64) {
        let cam_from_pad = self.camera.isometry().inverse() * self.pad.isometry();
        let n = cam_from_pad * Vector3::z();
        let p = cam_from_pad * Point3::origin();
        (n, n.dot(&p.coords))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const ZERO: Interval = Interval { min: 0.0, max: 0.0 };

    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn symmetric(half: f64) -> Self {
        Self { min: -half, max: half }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.max == self.min {
            self.min
        } else {
            rng.random_range(self.min..self.max)
        }
    }

    fn valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

/// Sampling ranges for one object: Euler angles (roll, pitch, yaw) in degrees
/// and translation offsets in mm, both relative to the canonical pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseRange {
    pub euler_deg: [Interval; 3],
    pub translation_mm: [Interval; 3],
}

impl Default for PoseRange {
    fn default() -> Self {
        Self::FIXED
    }
}

impl PoseRange {
    pub const FIXED: PoseRange = PoseRange {
        euler_deg: [Interval::ZERO; 3],
        translation_mm: [Interval::ZERO; 3],
    };

    pub const fn uniform(angle_deg: f64, translation_mm: f64) -> Self {
        Self {
            euler_deg: [Interval::symmetric(angle_deg); 3],
            translation_mm: [Interval::symmetric(translation_mm); 3],
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (UnitQuaternion<f64>, Vector3<f64>) {
        let e: Vec<f64> = self
            .euler_deg
            .iter()
            .map(|i| i.sample(rng).to_radians())
            .collect();
        let t: Vec<f64> = self.translation_mm.iter().map(|i| i.sample(rng)).collect();
        (
            UnitQuaternion::from_euler_angles(e[0], e[1], e[2]),
            Vector3::new(t[0], t[1], t[2]),
        )
    }

    fn valid(&self) -> bool {
        self.euler_deg.iter().chain(&self.translation_mm).all(Interval::valid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationConfig {
    pub camera: PoseRange,
    pub needle: PoseRange,
    /// For grasped scenes the rotation perturbs the holder axis around its
    /// nominal direction and the translation is ignored.
    pub instrument: PoseRange,
    pub pad: PoseRange,
    /// Probability that the holder grasps the needle.
    pub grasp_probability: f64,
    /// Arc fraction (from the tip) at which a grasp is placed.
    pub grasp_fraction: Interval,
    pub light_azimuth_deg: Interval,
    pub light_elevation_deg: Interval,
    /// Standard deviation of additive Gaussian RGB noise, [0, 1] units.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Rejection-sampling budget per scene.
    pub max_attempts: u32,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            camera: PoseRange {
                euler_deg: [Interval::symmetric(6.0); 3],
                translation_mm: [Interval::symmetric(10.0); 3],
            },
            needle: PoseRange {
                euler_deg: [Interval::symmetric(15.0); 3],
                translation_mm: [
                    Interval::symmetric(10.0),
                    Interval::symmetric(8.0),
                    Interval::new(0.0, 6.0),
                ],
            },
            instrument: PoseRange::uniform(15.0, 8.0),
            pad: PoseRange::FIXED,
            grasp_probability: 0.8,
            grasp_fraction: Interval::new(0.45, 0.85),
            light_azimuth_deg: Interval::new(0.0, 360.0),
            light_elevation_deg: Interval::new(35.0, 85.0),
            noise_sigma: 0.02,
            seed: 0,
            max_attempts: 100,
        }
    }
}

impl RandomizationConfig {
    /// Every range collapsed: the sampler returns the canonical grasped pose.
    pub fn fixed() -> Self {
        Self {
            camera: PoseRange::FIXED,
            needle: PoseRange::FIXED,
            instrument: PoseRange::FIXED,
            pad: PoseRange::FIXED,
            grasp_probability: 1.0,
            grasp_fraction: Interval::new(CANONICAL_GRASP_FRACTION, CANONICAL_GRASP_FRACTION),
            light_azimuth_deg: Interval::new(CANONICAL_LIGHT[0], CANONICAL_LIGHT[0]),
            light_elevation_deg: Interval::new(CANONICAL_LIGHT[1], CANONICAL_LIGHT[1]),
            noise_sigma: 0.0,
            seed: 0,
            max_attempts: 1,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let ranges = [&self.camera, &self.needle, &self.instrument, &self.pad];
        if !ranges.iter().all(|r| r.valid()) {
            return Err(Error::invalid("pose interval with min > max or non-finite bound"));
        }
        let others = [
            self.grasp_fraction,
            self.light_azimuth_deg,
            self.light_elevation_deg,
        ];
        if !others.iter().all(Interval::valid) {
            return Err(Error::invalid("interval with min > max or non-finite bound"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.grasp_probability) {
            return Err(Error::invalid("grasp_probability must lie in [0, 1]"));
        }
        if self.grasp_fraction.min < 0.0 || self.grasp_fraction.max > 1.0 {
            return Err(Error::invalid("grasp_fraction must lie in [0, 1]"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("max_attempts must be positive"));
        }
        Ok(())
    }
}

pub const CANONICAL_GRASP_FRACTION: f64 = 2.0 / 3.0;
/// Light azimuth and elevation (degrees) of the canonical scene.
pub const CANONICAL_LIGHT: [f64; 2] = [45.0, 60.0];

const CAMERA_DISTANCE: f64 = 90.0;
const CAMERA_ELEVATION_DEG: f64 = 50.0;
const CAMERA_TARGET: [f64; 3] = [0.0, 0.0, 10.0];
/// Clearance between the lowest point of the needle and the pad, mm.
const NEEDLE_CLEARANCE: f64 = 2.0;
/// Rotation of the needle in its plane that lowers the tip below the tail.
const NEEDLE_ROLL_DEG: f64 = 30.0;
/// Elevation of the holder shaft above the needle normal in grasped scenes.
const HOLDER_TILT_DEG: f64 = 35.0;
/// Offset of a free-lying holder tip from the needle center, world frame.
const FREE_HOLDER_OFFSET: [f64; 3] = [20.0, -6.0, 0.0];

fn frame(x: Vector3<f64>, y: Vector3<f64>) -> UnitQuaternion<f64> {
    let x = x.normalize();
    let y = (y - x * x.dot(&y)).normalize();
    let z = x.cross(&y);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
        Matrix3::from_columns(&[x, y, z]),
    ))
}

fn canonical_camera() -> Isometry3<f64> {
    let el = CAMERA_ELEVATION_DEG.to_radians();
    let target = Vector3::from(CAMERA_TARGET);
    let position = target + CAMERA_DISTANCE * Vector3::new(0.0, -el.cos(), el.sin());
    let forward = (target - position).normalize();
    let right = Vector3::x();
    let down = forward.cross(&right);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward]));
    Isometry3::from_parts(
        Translation3::from(position),
        UnitQuaternion::from_rotation_matrix(&rot),
    )
}

fn canonical_needle(needle: &NeedleSpec) -> Isometry3<f64> {
    // Circle in the world xz-plane, normal +y, tip on the +x side slightly
    // below the center, arc sweeping down through the lowest point.
    let roll = NEEDLE_ROLL_DEG.to_radians();
    let tip_dir = Vector3::new(roll.cos(), 0.0, -roll.sin());
    let travel = Vector3::new(-roll.sin(), 0.0, -roll.cos());
    let center = Vector3::new(0.0, 0.0, needle.circle_radius + NEEDLE_CLEARANCE);
    Isometry3::from_parts(Translation3::from(center), frame(tip_dir, travel))
}

fn holder_direction(needle_pose: &Isometry3<f64>) -> Vector3<f64> {
    let normal = needle_pose * Vector3::z();
    let tilt = HOLDER_TILT_DEG.to_radians();
    (normal * tilt.cos() + Vector3::z() * tilt.sin()).normalize()
}

fn holder_pose(tip: Point3<f64>, shaft_dir: Vector3<f64>) -> Isometry3<f64> {
    // Jaws open in the local xz-plane; keep that plane roughly vertical.
    let helper = if shaft_dir.cross(&Vector3::z()).norm() > 1e-6 {
        Vector3::z().cross(&shaft_dir)
    } else {
        Vector3::y()
    };
    Isometry3::from_parts(Translation3::from(tip.coords), frame(shaft_dir, helper))
}

/// The canonical grasped arrangement returned when every range is zero-width.
pub fn canonical_pose(specs: &SceneSpecs, grasp_fraction: f64) -> ScenePose {
    let needle = canonical_needle(&specs.needle);
    let grasp = needle * specs.needle.centerline(grasp_fraction * specs.needle.arc_angle());
    let instrument = holder_pose(grasp, holder_direction(&needle));
    ScenePose {
        camera: RigidPose::from_isometry(&canonical_camera()),
        pad: RigidPose::from_isometry(&Isometry3::identity()),
        needle: RigidPose::from_isometry(&needle),
        instrument: RigidPose::from_isometry(&instrument),
        grasp_fraction: Some(grasp_fraction),
        light_dir: light_direction(CANONICAL_LIGHT[0], CANONICAL_LIGHT[1]),
        seed: 0,
    }
}

fn light_direction(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// True when neither the needle nor the holder dips into the pad.
fn clears_pad(specs: &SceneSpecs, pad: &Isometry3<f64>, needle: &Isometry3<f64>, inst: &Isometry3<f64>) -> bool {
    let pad_inv = pad.inverse();
    let height = |p: Point3<f64>| (pad_inv * p).z;
    let n = &specs.needle;
    let steps = 64;
    for k in 0..=steps {
        let theta = n.arc_angle() * k as f64 / steps as f64;
        if height(needle * n.centerline(theta)) < n.wire_radius {
            return false;
        }
    }
    let s = &specs.instrument;
    let half = (s.jaw_opening_angle / 2.0).to_radians();
    let jaw_tip = s.jaw_length * half.tan();
    let checks = [
        (Point3::new(0.0, 0.0, jaw_tip), s.jaw_radius()),
        (Point3::new(0.0, 0.0, -jaw_tip), s.jaw_radius()),
        (Point3::new(s.jaw_length, 0.0, 0.0), s.shaft_radius),
        (Point3::new(s.jaw_length + s.shaft_length, 0.0, 0.0), s.shaft_radius),
    ];
    checks.iter().all(|(p, r)| height(inst * p) >= *r)
}

/// Samples one scene arrangement. Deterministic in `seed`; `rand.seed` is
/// not consulted here.
pub fn build_scene(specs: &SceneSpecs, rand: &RandomizationConfig, seed: u64) -> Result<ScenePose, Error> {
    specs.validate()?;
    rand.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = &specs.needle;
    for _ in 0..rand.max_attempts {
        let cam0 = canonical_camera();
        let (cq, ct) = rand.camera.sample(&mut rng);
        let camera = Isometry3::from_parts(
            Translation3::from(cam0.translation.vector + ct),
            cam0.rotation * cq,
        );

        let (pq, pt) = rand.pad.sample(&mut rng);
        let pad = Isometry3::from_parts(Translation3::from(pt), pq);

        let needle0 = canonical_needle(n);
        let (nq, nt) = rand.needle.sample(&mut rng);
        let needle = Isometry3::from_parts(
            Translation3::from(needle0.translation.vector + nt),
            nq * needle0.rotation,
        );

        let grasped = rng.random::<f64>() < rand.grasp_probability;
        let grasp_fraction = rand.grasp_fraction.sample(&mut rng);
        let (iq, it) = rand.instrument.sample(&mut rng);
        let shaft = iq * holder_direction(&needle);
        let (instrument, grasp) = if grasped {
            let tip = needle * n.centerline(grasp_fraction * n.arc_angle());
            (holder_pose(tip, shaft), Some(grasp_fraction))
        } else {
            let tip = needle * Point3::origin() + Vector3::from(FREE_HOLDER_OFFSET) + it;
            (holder_pose(tip, shaft), None)
        };

        let az = rand.light_azimuth_deg.sample(&mut rng);
        let el = rand.light_elevation_deg.sample(&mut rng);

        if clears_pad(specs, &pad, &needle, &instrument) {
            return Ok(ScenePose {
                camera: RigidPose::from_isometry(&camera),
                pad: RigidPose::from_isometry(&pad),
                needle: RigidPose::from_isometry(&needle),
                instrument: RigidPose::from_isometry(&instrument),
                grasp_fraction: grasp,
                light_dir: light_direction(az, el),
                seed,
            });
        }
    }
    Err(Error::SceneSampling {
        attempts: rand.max_attempts,
    })
}
