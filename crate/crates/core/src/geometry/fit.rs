//! Robust primitive fits on camera-frame point clouds: needle circle,
//! instrument axis and pad plane.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Matrix3, Point3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier distance to the model, mm.
    pub tolerance: f64,
    /// Below this inlier fraction the fit is flagged low-confidence.
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl RansacConfig {
    pub const CIRCLE: RansacConfig = RansacConfig { iterations: 500, tolerance: 1.0, min_inlier_fraction: 0.3, seed: 0 };
    pub const PLANE: RansacConfig = RansacConfig { iterations: 500, tolerance: 2.0, min_inlier_fraction: 0.3, seed: 0 };

    pub fn validate(&self) -> Result<(), Error> {
        if self.iterations == 0 || !(self.tolerance > 0.0) || !(0.0..=1.0).contains(&self.min_inlier_fraction) {
            return Err(Error::invalid("RANSAC needs iterations > 0, tolerance > 0, inlier fraction in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self::CIRCLE
    }
}

/// Circle in 3D with the arc covered by its inliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleFit3D {
    pub center: Point3<f64>,
    pub normal: Vector3<f64>,
    /// In-plane reference direction for arc angles; `normal × basis_u`
    /// completes the frame.
    pub basis_u: Vector3<f64>,
    pub radius: f64,
    pub inlier_fraction: f64,
    /// Arc endpoints in radians, `arc_start <= arc_end`, counterclockwise
    /// about `normal`.
    pub arc_start: f64,
    pub arc_end: f64,
    pub low_confidence: bool,
}

impl CircleFit3D {
    pub fn basis_v(&self) -> Vector3<f64> {
        self.normal.cross(&self.basis_u)
    }

    pub fn point_at(&self, angle: f64) -> Point3<f64> {
        self.center + self.radius * (angle.cos() * self.basis_u + angle.sin() * self.basis_v())
    }

    /// Unit tangent in the direction of increasing angle.
    pub fn tangent_at(&self, angle: f64) -> Vector3<f64> {
        -angle.sin() * self.basis_u + angle.cos() * self.basis_v()
    }

    pub fn arc_span(&self) -> f64 {
        self.arc_end - self.arc_start
    }

    /// Angle of the projection of `p` onto the circle plane.
    pub fn angle_of(&self, p: &Point3<f64>) -> f64 {
        let d = p - self.center;
        d.dot(&self.basis_v()).atan2(d.dot(&self.basis_u))
    }

    /// Distance from `p` to the circle curve.
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        circle_distance(&self.center, &self.normal, self.radius, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisFit {
    /// A point on the axis (the centroid of the cloud, or of the fitted
    /// cylinder's support).
    pub point: Point3<f64>,
    /// Unit direction, oriented from the tip toward the shaft.
    pub direction: Vector3<f64>,
    /// Axis point at the tip end of the cloud.
    pub tip: Point3<f64>,
    /// Ratio of the two largest singular values of the centred cloud.
    pub elongation: f64,
    pub low_confidence: bool,
}

impl AxisFit {
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let d = p - self.point;
        (d - d.dot(&self.direction) * self.direction).norm()
    }
}

/// Plane `normal · p = offset` with the normal facing the camera origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inlier_fraction: f64,
}

impl Plane {
    /// Signed distance, positive on the camera side.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }
}

fn circle_distance(center: &Point3<f64>, normal: &Vector3<f64>, radius: f64, p: &Point3<f64>) -> f64 {
    let d = p - center;
    let h = d.dot(normal);
    let rho = (d - h * normal).norm();
    (h * h + (rho - radius).powi(2)).sqrt()
}

fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    let sum = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords);
    Point3::from(sum / points.len() as f64)
}

/// Eigen-decomposition of the scatter matrix, eigenvalues descending.
fn principal_axes(points: &[Point3<f64>], c: &Point3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let mut m = Matrix3::zeros();
    for p in points {
        let d = p - c;
        m += d * d.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let mut idx = [0, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = idx.map(|i| eig.eigenvalues[i].max(0.0));
    let vecs = idx.map(|i| canonical_sign(eig.eigenvectors.column(i).into_owned()));
    (vals, vecs)
}

/// Flips `v` so that its largest-magnitude component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let i = v.iamax();
    if v[i] < 0.0 {
        -v
    } else {
        v
    }
}

fn any_perpendicular(n: &Vector3<f64>) -> Vector3<f64> {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    n.cross(&helper).normalize()
}

fn check_spread(points: &[Point3<f64>], needed: usize, dims: usize) -> Result<(), Error> {
    if points.len() < needed {
        return Err(Error::InsufficientPoints { needed, got: points.len() });
    }
    let c = centroid(points);
    let (vals, _) = principal_axes(points, &c);
    let scale = vals[0].max(f64::MIN_POSITIVE);
    if vals[0] <= 1e-18 || vals[dims - 1] / scale < 1e-12 {
        return Err(Error::Degenerate(if dims == 1 {
            "all points coincide".into()
        } else {
            "points are collinear".into()
        }));
    }
    Ok(())
}

fn circumcircle(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<(Point3<f64>, Vector3<f64>, f64)> {
    let (ab, ac) = (b - a, c - a);
    let n = ab.cross(&ac);
    let n2 = n.norm_squared();
    if n2 < 1e-12 * ab.norm_squared() * ac.norm_squared() || n2 == 0.0 {
        return None;
    }
    let offset = (ac.norm_squared() * n.cross(&ab) + ab.norm_squared() * ac.cross(&n)) / (2.0 * n2);
    Some((a + offset, n / n2.sqrt(), offset.norm()))
}

/// Plane by PCA, then an algebraic circle fit in the plane.
fn algebraic_circle(points: &[Point3<f64>]) -> Option<(Point3<f64>, Vector3<f64>, f64)> {
    if points.len() < 3 {
        return None;
    }
    let c = centroid(points);
    let (_, axes) = principal_axes(points, &c);
    let (u, v, n) = (axes[0], axes[1], axes[2]);
    let mut a = DMatrix::zeros(points.len(), 3);
    let mut rhs = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        let d = p - c;
        let (x, y) = (d.dot(&u), d.dot(&v));
        a[(i, 0)] = x;
        a[(i, 1)] = y;
        a[(i, 2)] = 1.0;
        rhs[i] = -(x * x + y * y);
    }
    let sol = a.svd(true, true).solve(&rhs, 1e-14).ok()?;
    let (cx, cy) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cx * cx + cy * cy - sol[2];
    if !(r2 > 0.0) {
        return None;
    }
    Some((c + cx * u + cy * v, n, r2.sqrt()))
}

/// Damped Gauss-Newton on a small parameter vector with a forward-difference
/// Jacobian. Returns the refined parameters.
fn levenberg_marquardt(mut params: DVector<f64>, residuals: impl Fn(&DVector<f64>) -> DVector<f64>, iterations: usize) -> DVector<f64> {
    let mut r = residuals(&params);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let mut j = DMatrix::zeros(r.len(), params.len());
        for k in 0..params.len() {
            let h = 1e-7 * params[k].abs().max(1.0);
            let mut p = params.clone();
            p[k] += h;
            j.set_column(k, &((residuals(&p) - &r) / h));
        }
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * &r;
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for k in 0..params.len() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = &params + &step;
            let rc = residuals(&candidate);
            let c = rc.norm_squared();
            if c < cost {
                let small = step.norm() < 1e-12 * params.norm().max(1.0);
                params = candidate;
                r = rc;
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !(small || rel < 1e-15);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    params
}

/// Geometric refinement of a circle, or of a torus of tube radius `tube`
/// when the points lie on a wire surface rather than its centerline.
fn refine_circle(points: &[Point3<f64>], center: Point3<f64>, normal: Vector3<f64>, radius: f64, tube: f64) -> (Point3<f64>, Vector3<f64>, f64) {
    let u = any_perpendicular(&normal);
    let v = normal.cross(&u);
    let unpack = |p: &DVector<f64>| {
        let n = (normal + p[3] * u + p[4] * v).normalize();
        (Point3::new(p[0], p[1], p[2]), n, p[5])
    };
    let residuals = |p: &DVector<f64>| {
        let (c, n, r) = unpack(p);
        let per = if tube > 0.0 { 1 } else { 2 };
        let mut out = DVector::zeros(points.len() * per);
        for (i, q) in points.iter().enumerate() {
            let d = q - c;
            let h = d.dot(&n);
            let rho = (d - h * n).norm();
            if tube > 0.0 {
                out[i] = (h * h + (rho - r).powi(2)).sqrt() - tube;
            } else {
                out[2 * i] = h;
                out[2 * i + 1] = rho - r;
            }
        }
        out
    };
    let start = DVector::from_vec(vec![center.x, center.y, center.z, 0.0, 0.0, radius]);
    let p = levenberg_marquardt(start, residuals, 100);
    unpack(&p)
}

/// Fits the needle circle. `tube` is the wire radius of the needle when the
/// points are surface samples (0 for centerline samples); arc endpoints are
/// pulled in by the end-cap overhang accordingly.
pub fn fit_circle_3d(points: &[Point3<f64>], cfg: &RansacConfig, tube: f64) -> Result<CircleFit3D, Error> {
    cfg.validate()?;
    check_spread(points, 3, 2)?;
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let residual = |c: &Point3<f64>, nn: &Vector3<f64>, r: f64, p: &Point3<f64>| (circle_distance(c, nn, r, p) - tube).abs();

    let mut best: Option<(usize, Point3<f64>, Vector3<f64>, f64)> = None;
    if n == 3 {
        let (c, nn, r) = circumcircle(&points[0], &points[1], &points[2]).ok_or_else(|| Error::Degenerate("points are collinear".into()))?;
        best = Some((3, c, nn, r));
    } else {
        for _ in 0..cfg.iterations {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let k = rng.random_range(0..n);
            if i == j || j == k || i == k {
                continue;
            }
            let Some((c, nn, r)) = circumcircle(&points[i], &points[j], &points[k]) else { continue };
            let count = points.iter().filter(|p| residual(&c, &nn, r, p) <= cfg.tolerance).count();
            if best.is_none_or(|b| count > b.0) {
                best = Some((count, c, nn, r));
            }
        }
    }
    let (_, mut c, mut nn, mut r) = best.ok_or_else(|| Error::Degenerate("no valid circle hypothesis".into()))?;

    let mut inliers: Vec<Point3<f64>> = Vec::new();
    for round in 0..3 {
        inliers = points.iter().copied().filter(|p| residual(&c, &nn, r, p) <= cfg.tolerance).collect();
        if inliers.len() < 3 {
            break;
        }
        if round == 0 {
            if let Some((c2, n2, r2)) = algebraic_circle(&inliers) {
                // The algebraic fit is biased by a surface offset; keep the
                // hypothesis frame if it made things worse.
                let score = |c: &Point3<f64>, nn: &Vector3<f64>, r: f64| inliers.iter().map(|p| residual(c, nn, r, p).powi(2)).sum::<f64>();
                if tube == 0.0 || score(&c2, &n2, r2) < score(&c, &nn, r) {
                    (c, nn, r) = (c2, n2, r2);
                }
            }
        }
        (c, nn, r) = refine_circle(&inliers, c, nn, r, tube);
    }
    if inliers.len() < 3 {
        inliers = points.to_vec();
    }
    let normal = canonical_sign(nn);

    // Reference direction: toward the inlier centroid, so angles of a
    // typical arc do not straddle the branch cut.
    let mean = centroid(&inliers) - c;
    let in_plane = mean - mean.dot(&normal) * normal;
    let basis_u = if in_plane.norm() > 1e-9 * r { in_plane.normalize() } else { any_perpendicular(&normal) };
    let basis_v = normal.cross(&basis_u);
    let mut angles: Vec<f64> = inliers
        .iter()
        .map(|p| {
            let d = p - c;
            d.dot(&basis_v).atan2(d.dot(&basis_u))
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    // The arc is the complement of the largest angular gap.
    let mut gap = (angles[0] + TAU - angles[angles.len() - 1], angles.len() - 1);
    for w in 0..angles.len() - 1 {
        let g = angles[w + 1] - angles[w];
        if g > gap.0 {
            gap = (g, w);
        }
    }
    let start = angles[(gap.1 + 1) % angles.len()];
    let mut end = angles[gap.1];
    if end < start {
        end += TAU;
    }
    let trim = (tube / r).min((end - start) / 4.0);
    let (arc_start, arc_end) = if tube > 0.0 { (start + trim, end - trim) } else { (start, end) };

    let inlier_fraction = inliers.len() as f64 / n as f64;
    Ok(CircleFit3D {
        center: c,
        normal,
        basis_u,
        radius: r,
        inlier_fraction,
        arc_start,
        arc_end,
        low_confidence: inlier_fraction < cfg.min_inlier_fraction,
    })
}

/// Fits the instrument axis. `shaft_radius > 0` treats the points as
/// samples of a cylinder's visible surface and refines the axis through its
/// center; `toward` (typically the needle centroid) selects the tip end.
pub fn fit_axis(
    points: &[Point3<f64>],
    shaft_radius: f64,
    jaw_length: f64,
    toward: Option<&Point3<f64>>,
) -> Result<AxisFit, Error> {
    check_spread(points, 2, 1)?;
    let c = centroid(points);
    let (vals, axes) = principal_axes(points, &c);
    let elongation = if vals[1] <= 0.0 { f64::INFINITY } else { (vals[0] / vals[1]).sqrt() };
    let mut point = c;
    let mut direction = axes[0];
    let orient = |point: &Point3<f64>, direction: Vector3<f64>| -> Vector3<f64> {
        let Some(target) = toward else { return direction };
        let (lo, hi) = extent(points, point, &direction);
        let t = (target - point).dot(&direction);
        if (t - hi).abs() < (t - lo).abs() {
            -direction
        } else {
            direction
        }
    };

    if shaft_radius > 0.0 && points.len() >= 20 {
        let mut params = cylinder_fit(points, &point, &direction, shaft_radius, 0.5);
        if let Some((o, d)) = params {
            (point, direction) = (o, d);
        }
        // The jaws sit within `jaw_length` of the tip and pull the fit off the
        // shaft axis. Once the tip end is known, refit on the shaft alone.
        if toward.is_some() && jaw_length > 0.0 {
            for _ in 0..2 {
                let d = orient(&point, direction);
                let (lo, _) = extent(points, &point, &d);
                let shaft: Vec<Point3<f64>> =
                    points.iter().copied().filter(|q| (q - point).dot(&d) > lo + jaw_length + 0.5 * shaft_radius).collect();
                if shaft.len() < 20 {
                    break;
                }
                params = cylinder_fit(&shaft, &point, &d, shaft_radius, 0.2);
                match params {
                    Some((o, dd)) => (point, direction) = (o, dd),
                    None => break,
                }
            }
        }
        // Re-anchor at the projection of the centroid.
        point += (c - point).dot(&direction) * direction;
        direction = canonical_sign(direction);
    }

    direction = orient(&point, direction);
    let (lo, _) = extent(points, &point, &direction);
    Ok(AxisFit {
        point,
        direction,
        tip: point + lo * direction,
        elongation,
        low_confidence: elongation < 1.5,
    })
}

fn extent(points: &[Point3<f64>], point: &Point3<f64>, direction: &Vector3<f64>) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let t = (p - point).dot(direction);
        (lo.min(t), hi.max(t))
    })
}

/// Cylinder of known radius fitted by LM from an initial axis, then refitted
/// twice on points whose residual is below `trim * radius`.
fn cylinder_fit(
    points: &[Point3<f64>],
    p0: &Point3<f64>,
    d0: &Vector3<f64>,
    radius: f64,
    trim: f64,
) -> Option<(Point3<f64>, Vector3<f64>)> {
    let (p0, d0) = (*p0, d0.normalize());
    let u = any_perpendicular(&d0);
    let v = d0.cross(&u);
    let unpack = |p: &DVector<f64>| ((p0 + p[0] * u + p[1] * v), (d0 + p[2] * u + p[3] * v).normalize());
    let residual = |q: &Point3<f64>, o: &Point3<f64>, d: &Vector3<f64>| {
        let w = q - o;
        (w - w.dot(d) * d).norm() - radius
    };
    let fit = |pts: &[Point3<f64>], start: DVector<f64>| {
        levenberg_marquardt(
            start,
            |p| {
                let (o, d) = unpack(p);
                DVector::from_iterator(pts.len(), pts.iter().map(|q| residual(q, &o, &d)))
            },
            100,
        )
    };
    let mut params = fit(points, DVector::zeros(4));
    for _ in 0..2 {
        let (o, d) = unpack(&params);
        let kept: Vec<Point3<f64>> = points.iter().copied().filter(|q| residual(q, &o, &d).abs() < trim * radius).collect();
        if kept.len() < 20 {
            break;
        }
        params = fit(&kept, params);
    }
    let (o, d) = unpack(&params);
    (o.coords.iter().chain(d.iter()).all(|x| x.is_finite())).then_some((o, d))
}

fn oriented_plane(normal: Vector3<f64>, through: &Point3<f64>) -> (Vector3<f64>, f64) {
    let mut n = normal.normalize();
    let mut offset = n.dot(&through.coords);
    // Face the camera origin: signed distance of the origin is -offset.
    if offset > 0.0 {
        n = -n;
        offset = -offset;
    }
    (n, offset)
}

/// RANSAC dominant plane with PCA refinement on the inliers.
pub fn fit_pad_plane(points: &[Point3<f64>], cfg: &RansacConfig) -> Result<Plane, Error> {
    cfg.validate()?;
    check_spread(points, 3, 2)?;
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..cfg.iterations {
        let (i, j, k) = (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n));
        let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
        if normal.norm() < 1e-9 {
            continue;
        }
        let (nn, off) = oriented_plane(normal, &points[i]);
        let count = points.iter().filter(|p| (nn.dot(&p.coords) - off).abs() <= cfg.tolerance).count();
        if best.is_none_or(|b| count > b.0) {
            best = Some((count, nn, off));
        }
    }
    let (_, mut normal, mut offset) = best.ok_or_else(|| Error::Degenerate("no valid plane hypothesis".into()))?;
    let mut inliers = Vec::new();
    for _ in 0..3 {
        inliers = points.iter().copied().filter(|p| (normal.dot(&p.coords) - offset).abs() <= cfg.tolerance).collect();
        if inliers.len() < 3 {
            break;
        }
        let c = centroid(&inliers);
        let (_, axes) = principal_axes(&inliers, &c);
        (normal, offset) = oriented_plane(axes[2], &c);
    }
    Ok(Plane { normal, offset, inlier_fraction: inliers.len() as f64 / n as f64 })
}
