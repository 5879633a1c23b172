//! Exact signed distance functions for the analytic primitives of the scene.
//! All functions take points in the primitive's local frame, in mm.

use std::f64::consts::TAU;

use nalgebra::{Point3, Vector3};

/// Tube of radius `wire` swept along a circular arc of radius `radius` in the
/// local xy-plane, from angle 0 (the tip) to `arc_angle` (the tail), with
/// hemispherical caps at both ends.
pub fn torus_arc(p: &Point3<f64>, radius: f64, wire: f64, arc_angle: f64) -> f64 {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let mut angle = p.y.atan2(p.x);
    if angle < 0.0 {
        angle += TAU;
    }
    if angle <= arc_angle {
        let dr = rho - radius;
        return (dr * dr + p.z * p.z).sqrt() - wire;
    }
    // Outside the angular wedge the closest curve point is an endpoint.
    let tip = Point3::new(radius, 0.0, 0.0);
    let tail = Point3::new(radius * arc_angle.cos(), radius * arc_angle.sin(), 0.0);
    (p - tip).norm().min((p - tail).norm()) - wire
}

/// Segment `a`–`b` inflated by `radius`.
pub fn capsule(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>, radius: f64) -> f64 {
    let ab = b - a;
    let ap = p - a;
    let h = (ap.dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (ap - ab * h).norm() - radius
}

/// Axis-aligned box centered at the origin with half extents `half`, edges
/// rounded by `rounding`.
pub fn rounded_box(p: &Point3<f64>, half: &Vector3<f64>, rounding: f64) -> f64 {
    let q = p.coords.abs() - half + Vector3::repeat(rounding);
    let outside = q.map(|c| c.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside - rounding
}
