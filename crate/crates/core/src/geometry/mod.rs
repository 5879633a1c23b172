//! From predicted (or ground-truth) segmentation and depth to needle and
//! holder measurements: back-projection, primitive fits, suturing metrics
//! and overlay frames.

mod fit;
mod overlay;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::scenegen::{class, DepthMap, SegMap};
use crate::Error;

pub use fit::{fit_axis, fit_circle_3d, fit_pad_plane, AxisFit, CircleFit3D, Plane, RansacConfig};
pub use overlay::{draw_text, render_overlay, OverlayStyle};

/// Camera-frame points (mm) grouped by class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledPointCloud {
    pub needle: Vec<Point3<f64>>,
    pub instrument: Vec<Point3<f64>>,
    /// Background pixels with valid depth, used for the pad plane.
    pub background: Vec<Point3<f64>>,
}

/// Lifts every pixel with positive depth into camera coordinates.
pub fn backproject(depth_mm: &DepthMap, seg: &SegMap, camera: &CameraModel) -> Result<LabeledPointCloud, Error> {
    if depth_mm.dimensions() != seg.dimensions() || depth_mm.dimensions() != (camera.width, camera.height) {
        return Err(Error::shape(format!(
            "depth {:?}, segmentation {:?} and camera {}x{} disagree",
            depth_mm.dimensions(),
            seg.dimensions(),
            camera.width,
            camera.height
        )));
    }
    let mut cloud = LabeledPointCloud::default();
    for (u, v, d) in depth_mm.enumerate_pixels() {
        let z = d[0] as f64;
        if !(z > 0.0) {
            continue;
        }
        let p = camera.backproject(u as f64, v as f64, z);
        match seg.get_pixel(u, v)[0] {
            class::NEEDLE => cloud.needle.push(p),
            class::INSTRUMENT => cloud.instrument.push(p),
            _ => cloud.background.push(p),
        }
    }
    Ok(cloud)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub circle: RansacConfig,
    pub plane: RansacConfig,
    /// Needle wire radius used to treat needle points as surface samples;
    /// 0 fits the points as if they lay on the centerline.
    pub needle_wire_radius: f64,
    /// Holder shaft radius for the surface-aware axis fit; 0 disables it.
    pub shaft_radius: f64,
    /// Length of the jaws ahead of the shaft; these points are left out of
    /// the final axis fit.
    pub jaw_length: f64,
    /// Minimum points per class before a fit is attempted.
    pub min_points: usize,
    /// Endpoints closer than this to equal pad distance make the tip ambiguous.
    pub tip_ambiguity_mm: f64,
    /// Recommended grasp fraction band.
    pub grasp_band: [f64; 2],
    /// Recommended grasp angle band before folding, degrees.
    pub grasp_angle_band: [f64; 2],
    /// Recommended entry angle band, degrees.
    pub entry_band: [f64; 2],
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            circle: RansacConfig::CIRCLE,
            plane: RansacConfig::PLANE,
            needle_wire_radius: 0.4,
            shaft_radius: 2.5,
            jaw_length: 8.0,
            min_points: 10,
            tip_ambiguity_mm: 2.0,
            grasp_band: [0.6, 0.73],
            grasp_angle_band: [90.0, 120.0],
            entry_band: [80.0, 90.0],
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.circle.validate()?;
        self.plane.validate()?;
        if self.needle_wire_radius < 0.0 || self.shaft_radius < 0.0 || self.jaw_length < 0.0 || self.min_points < 3 {
            return Err(Error::invalid("radii must be non-negative and min_points at least 3"));
        }
        let ordered = |b: [f64; 2]| b[0] <= b[1];
        if !(ordered(self.grasp_band) && ordered(self.grasp_angle_band) && ordered(self.entry_band)) {
            return Err(Error::invalid("recommendation bands must be [low, high]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub grasp_fraction_ok: bool,
    pub grasp_angle_ok: bool,
    /// `None` when no pad plane was available.
    pub entry_angle_ok: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SutureMetrics {
    /// Arc length from the needle tip to the grasp point over the total arc length.
    pub grasp_fraction: f64,
    /// Angle between the needle chord and the holder axis, folded to [0, 90].
    pub grasp_angle_deg: f64,
    /// Angle between the needle plane and the holder axis, [0, 90].
    pub plane_instrument_angle_deg: f64,
    /// Angle between the tip tangent and the pad plane, [0, 90].
    pub entry_angle_deg: Option<f64>,
    /// Distance between the grasp point and the holder axis, mm.
    pub grasp_distance_mm: f64,
    /// Arc angle of the needle tip on the fitted circle.
    pub tip_angle: f64,
    pub grasp_angle: f64,
    pub tip_ambiguous: bool,
    pub low_confidence: bool,
    pub flags: MetricFlags,
}

/// Acute angle between two lines, degrees in [0, 90].
fn line_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos().to_degrees()
}

/// Folds an angle between two undirected lines given in [0, 180] into [0, 90].
pub fn fold_angle(deg: f64) -> f64 {
    let d = deg.rem_euclid(180.0);
    if d > 90.0 {
        180.0 - d
    } else {
        d
    }
}

fn within(v: f64, band: [f64; 2]) -> bool {
    v >= band[0] && v <= band[1]
}

/// Folded interval covered by an unfolded angle band.
fn folded_band(band: [f64; 2]) -> [f64; 2] {
    let (a, b) = (fold_angle(band[0]), fold_angle(band[1]));
    if band[0] <= 90.0 && band[1] >= 90.0 {
        [a.min(b), 90.0]
    } else {
        [a.min(b), a.max(b)]
    }
}

/// Suturing measurements from the fitted primitives. The needle tip is the
/// arc endpoint nearer the pad plane; without a plane it is the endpoint
/// farther from the grasp point.
pub fn compute_suture_metrics(circle: &CircleFit3D, axis: &AxisFit, pad: Option<&Plane>, cfg: &GeometryConfig) -> SutureMetrics {
    let (a0, a1) = (circle.arc_start, circle.arc_end);
    let span = (a1 - a0).max(f64::MIN_POSITIVE);

    // Grasp point: the arc point closest to the holder axis line.
    let samples = 720;
    let (mut grasp, mut best) = (a0, f64::INFINITY);
    for k in 0..=samples {
        let t = a0 + span * k as f64 / samples as f64;
        let d = axis.distance(&circle.point_at(t));
        if d < best {
            (grasp, best) = (t, d);
        }
    }
    // Golden-section polish around the best sample.
    let step = span / samples as f64;
    let (mut lo, mut hi) = ((grasp - step).max(a0), (grasp + step).min(a1));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let (m1, m2) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if axis.distance(&circle.point_at(m1)) < axis.distance(&circle.point_at(m2)) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    grasp = 0.5 * (lo + hi);
    let grasp_distance_mm = axis.distance(&circle.point_at(grasp));

    let (tip_at_start, tip_ambiguous) = match pad {
        Some(plane) => {
            let d0 = plane.signed_distance(&circle.point_at(a0)).abs();
            let d1 = plane.signed_distance(&circle.point_at(a1)).abs();
            (d0 <= d1, (d0 - d1).abs() < cfg.tip_ambiguity_mm)
        }
        None => (grasp - a0 >= a1 - grasp, (grasp - a0 - (a1 - grasp)).abs() * circle.radius < cfg.tip_ambiguity_mm),
    };
    let (tip_angle, grasp_fraction) = if tip_at_start {
        (a0, (grasp - a0) / span)
    } else {
        (a1, (a1 - grasp) / span)
    };

    let chord = circle.point_at(a1) - circle.point_at(a0);
    let grasp_angle_deg = line_angle_deg(&chord, &axis.direction);
    let plane_instrument_angle_deg = 90.0 - line_angle_deg(&circle.normal, &axis.direction);
    let entry_angle_deg = pad.map(|plane| {
        let t = circle.tangent_at(tip_angle);
        t.dot(&plane.normal).abs().min(1.0).asin().to_degrees()
    });

    SutureMetrics {
        grasp_fraction: grasp_fraction.clamp(0.0, 1.0),
        grasp_angle_deg,
        plane_instrument_angle_deg,
        entry_angle_deg,
        grasp_distance_mm,
        tip_angle,
        grasp_angle: grasp,
        tip_ambiguous,
        low_confidence: circle.low_confidence || axis.low_confidence,
        flags: MetricFlags {
            grasp_fraction_ok: within(grasp_fraction, cfg.grasp_band),
            grasp_angle_ok: within(grasp_angle_deg, folded_band(cfg.grasp_angle_band)),
            entry_angle_ok: entry_angle_deg.map(|e| within(e, cfg.entry_band)),
        },
    }
}

/// Per-frame result, serialized as the frame's metrics JSON.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameAnalysis {
    pub needle_points: usize,
    pub instrument_points: usize,
    pub background_points: usize,
    pub circle: Option<CircleFit3D>,
    pub axis: Option<AxisFit>,
    pub pad_plane: Option<Plane>,
    pub metrics: Option<SutureMetrics>,
    /// Reasons for missing fits.
    pub notes: Vec<String>,
}

impl FrameAnalysis {
    pub fn detected(&self) -> bool {
        self.circle.is_some() || self.axis.is_some()
    }
}

/// Runs every fit that the frame supports. Missing classes or failed fits
/// are recorded in `notes` rather than returned as errors.
pub fn analyze_frame(depth_mm: &DepthMap, seg: &SegMap, camera: &CameraModel, cfg: &GeometryConfig) -> Result<FrameAnalysis, Error> {
    cfg.validate()?;
    let cloud = backproject(depth_mm, seg, camera)?;
    let mut out = FrameAnalysis {
        needle_points: cloud.needle.len(),
        instrument_points: cloud.instrument.len(),
        background_points: cloud.background.len(),
        ..FrameAnalysis::default()
    };
    if cloud.needle.len() >= cfg.min_points {
        match fit_circle_3d(&cloud.needle, &cfg.circle, cfg.needle_wire_radius) {
            Ok(c) => out.circle = Some(c),
            Err(e) => out.notes.push(format!("needle: {e}")),
        }
    } else {
        out.notes.push(format!("needle: {} points", cloud.needle.len()));
    }
    if cloud.instrument.len() >= cfg.min_points {
        let toward = out.circle.map(|c| c.center);
        match fit_axis(&cloud.instrument, cfg.shaft_radius, cfg.jaw_length, toward.as_ref()) {
            Ok(a) => out.axis = Some(a),
            Err(e) => out.notes.push(format!("instrument: {e}")),
        }
    } else {
        out.notes.push(format!("instrument: {} points", cloud.instrument.len()));
    }
    if cloud.background.len() >= cfg.min_points {
        match fit_pad_plane(&cloud.background, &cfg.plane) {
            Ok(p) => out.pad_plane = Some(p),
            Err(e) => out.notes.push(format!("pad: {e}")),
        }
    }
    if let (Some(c), Some(a)) = (&out.circle, &out.axis) {
        out.metrics = Some(compute_suture_metrics(c, a, out.pad_plane.as_ref(), cfg));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Luma};
    use std::f64::consts::PI;

    fn half_circle() -> CircleFit3D {
        CircleFit3D {
            center: Point3::new(0.0, 0.0, 100.0),
            normal: Vector3::z(),
            basis_u: Vector3::x(),
            radius: 8.0,
            inlier_fraction: 1.0,
            arc_start: 0.0,
            arc_end: PI,
            low_confidence: false,
        }
    }

    fn axis_through(p: Point3<f64>, d: Vector3<f64>) -> AxisFit {
        let direction = d.normalize();
        AxisFit { point: p, direction, tip: p, elongation: 10.0, low_confidence: false }
    }

    #[test]
    fn backprojection_examples() {
        let cam = CameraModel { width: 1024, height: 512, fx: 500.0, fy: 500.0, cx: 256.0, cy: 256.0, near: 1.0, far: 500.0 };
        let mut depth: DepthMap = ImageBuffer::new(1024, 512);
        let mut seg: SegMap = ImageBuffer::new(1024, 512);
        depth.put_pixel(256, 256, Luma([100.0]));
        seg.put_pixel(256, 256, Luma([class::NEEDLE]));
        depth.put_pixel(756, 256, Luma([100.0]));
        seg.put_pixel(756, 256, Luma([class::INSTRUMENT]));
        depth.put_pixel(3, 4, Luma([50.0]));
        let cloud = backproject(&depth, &seg, &cam).unwrap();
        assert_eq!(cloud.needle, vec![Point3::new(0.0, 0.0, 100.0)]);
        assert_eq!(cloud.instrument, vec![Point3::new(100.0, 0.0, 100.0)]);
        assert_eq!(cloud.background.len(), 1);
        let px = cam.project(&cloud.background[0]).unwrap();
        assert!((px.x - 3.0).abs() < 0.5 && (px.y - 4.0).abs() < 0.5);
        assert!(backproject(&depth, &ImageBuffer::new(4, 4), &cam).is_err());
    }

    #[test]
    fn grasp_at_two_thirds() {
        let c = half_circle();
        let grasp = c.point_at(2.0 * PI / 3.0);
        // Holder approaching from above the needle plane.
        let axis = axis_through(grasp, Vector3::new(0.2, 0.3, -1.0));
        let pad = Plane { normal: Vector3::new(0.0, -1.0, 0.0), offset: 20.0, inlier_fraction: 1.0 };
        // Both endpoints lie at y = 0; tilt the plane so the one at angle 0 is nearer.
        let pad = Plane { normal: Vector3::new(0.2, -1.0, 0.0).normalize(), ..pad };
        let m = compute_suture_metrics(&c, &axis, Some(&pad), &GeometryConfig::default());
        assert!((m.grasp_fraction - 2.0 / 3.0).abs() < 1e-9, "{}", m.grasp_fraction);
        assert!(m.grasp_distance_mm < 1e-9);
        assert!(m.flags.grasp_fraction_ok);
    }

    #[test]
    fn plane_instrument_angle_extremes() {
        let c = half_circle();
        let in_plane = axis_through(c.point_at(1.0), Vector3::new(1.0, 1.0, 0.0));
        let m = compute_suture_metrics(&c, &in_plane, None, &GeometryConfig::default());
        assert!(m.plane_instrument_angle_deg.abs() < 1e-9);
        let normal = axis_through(c.point_at(1.0), Vector3::z());
        let m = compute_suture_metrics(&c, &normal, None, &GeometryConfig::default());
        assert!((m.plane_instrument_angle_deg - 90.0).abs() < 1e-9);
        assert!(m.entry_angle_deg.is_none() && m.flags.entry_angle_ok.is_none());
    }

    #[test]
    fn angles_ignore_normal_and_axis_signs() {
        let c = half_circle();
        let axis = axis_through(c.point_at(2.0), Vector3::new(0.3, -0.4, 0.8));
        let pad = Plane { normal: Vector3::new(0.1, -1.0, 0.2).normalize(), offset: 30.0, inlier_fraction: 1.0 };
        let cfg = GeometryConfig::default();
        let a = compute_suture_metrics(&c, &axis, Some(&pad), &cfg);
        let flipped_axis = AxisFit { direction: -axis.direction, ..axis };
        let flipped_plane = Plane { normal: -pad.normal, offset: -pad.offset, ..pad };
        let b = compute_suture_metrics(&c, &flipped_axis, Some(&flipped_plane), &cfg);
        for (x, y) in [
            (a.grasp_angle_deg, b.grasp_angle_deg),
            (a.plane_instrument_angle_deg, b.plane_instrument_angle_deg),
            (a.entry_angle_deg.unwrap(), b.entry_angle_deg.unwrap()),
        ] {
            assert!((x - y).abs() < 1e-9);
            assert!((0.0..=90.0).contains(&x));
        }
    }

    #[test]
    fn entry_angle_of_perpendicular_tip() {
        let c = half_circle();
        let axis = axis_through(c.point_at(2.0), Vector3::z());
        // Tip at angle 0 moves along +y there; a pad with normal y is crossed at 90 degrees.
        let pad = Plane { normal: Vector3::new(1.0, -0.0001, 0.0).normalize(), offset: -30.0, inlier_fraction: 1.0 };
        let m = compute_suture_metrics(&c, &axis, Some(&pad), &GeometryConfig::default());
        assert_eq!(m.tip_angle, PI, "endpoint at x = -8 is nearer the plane x = -30");
        let pad = Plane { normal: Vector3::y(), offset: -30.0, inlier_fraction: 1.0 };
        let m = compute_suture_metrics(&c, &axis, Some(&pad), &GeometryConfig::default());
        assert!(m.tip_ambiguous);
        assert!((m.entry_angle_deg.unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn folding() {
        assert_eq!(fold_angle(120.0), 60.0);
        assert_eq!(fold_angle(90.0), 90.0);
        assert_eq!(folded_band([90.0, 120.0]), [60.0, 90.0]);
    }
}
