use image::RgbImage;
use nalgebra::Point2;
use suturekit::geometry::{analyze_frame, render_overlay, GeometryConfig, OverlayStyle};
use suturekit::imageio::quantize_rgb;
use suturekit::scenegen::{build_scene, class, render, GenerateConfig};
use suturekit::{derive_seed, Error};

fn nearest(p: &Point2<f64>, set: &[Point2<f64>]) -> f64 {
    set.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)
}

fn mean_symmetric_distance(a: &[Point2<f64>], b: &[Point2<f64>]) -> f64 {
    let ab: f64 = a.iter().map(|p| nearest(p, b)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|p| nearest(p, a)).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

#[test]
fn fitted_arc_projects_onto_rendered_centerline() {
    let gen = GenerateConfig::default();
    let geo = GeometryConfig::default();
    let cam = gen.camera;
    for i in 0..4 {
        let poses = build_scene(&gen.specs, &gen.randomization, derive_seed(100, i)).unwrap();
        let s = render(&poses, &cam, &gen.specs, &gen.randomization).unwrap();
        let a = analyze_frame(&s.depth, &s.seg, &cam, &geo).unwrap();
        let c = a.circle.expect("needle visible in generated frames");

        let (center, _) = poses.needle_circle_in_camera();
        assert!((c.center - center).norm() < 0.5);
        assert!((c.radius - gen.specs.needle.circle_radius).abs() < 0.2);

        let k = 200;
        let fitted: Vec<Point2<f64>> = (0..=k)
            .filter_map(|j| cam.project(&c.point_at(c.arc_start + c.arc_span() * j as f64 / k as f64)))
            .collect();
        let arc = gen.specs.needle.arc_angle();
        let truth: Vec<Point2<f64>> = (0..=k)
            .filter_map(|j| cam.project(&poses.needle_point_in_camera(&gen.specs.needle, arc * j as f64 / k as f64)))
            .collect();
        let d = mean_symmetric_distance(&fitted, &truth);
        assert!(d < 2.0, "frame {i}: mean symmetric distance {d:.3} px");
    }
}

#[test]
fn center_marker_lands_on_projected_center() {
    let gen = GenerateConfig::default();
    let geo = GeometryConfig::default();
    let cam = gen.camera;
    let poses = build_scene(&gen.specs, &gen.randomization, derive_seed(100, 0)).unwrap();
    let s = render(&poses, &cam, &gen.specs, &gen.randomization).unwrap();
    let a = analyze_frame(&s.depth, &s.seg, &cam, &geo).unwrap();
    let c = a.circle.unwrap();
    let px = cam.project(&c.center).unwrap();
    // Pinhole projection by hand.
    let (u, v) = (cam.fx * c.center.x / c.center.z + cam.cx, cam.fy * c.center.y / c.center.z + cam.cy);
    assert!((px.x - u).abs() < 1e-9 && (px.y - v).abs() < 1e-9);

    let base = quantize_rgb(&s.rgb);
    let img = render_overlay(&base, &cam, &a, &geo, &OverlayStyle::default());
    let (x, y) = (px.x.round() as u32, px.y.round() as u32);
    assert_ne!(img.get_pixel(x, y), base.get_pixel(x, y), "no marker drawn at the circle center");
}

#[test]
fn background_only_frame_gets_a_banner_and_no_fits() {
    let gen = GenerateConfig::default();
    let cam = gen.camera;
    let poses = build_scene(&gen.specs, &gen.randomization, 5).unwrap();
    let s = render(&poses, &cam, &gen.specs, &gen.randomization).unwrap();
    let mut seg = s.seg.clone();
    seg.pixels_mut().for_each(|p| p.0[0] = class::BACKGROUND);
    let geo = GeometryConfig::default();
    let a = analyze_frame(&s.depth, &seg, &cam, &geo).unwrap();
    assert!(!a.detected());
    assert!(a.circle.is_none() && a.axis.is_none() && a.metrics.is_none());

    let base: RgbImage = quantize_rgb(&s.rgb);
    let img = render_overlay(&base, &cam, &a, &geo, &OverlayStyle::default());
    let changed = img.pixels().zip(base.pixels()).filter(|(a, b)| a != b).count();
    assert!(changed > 0, "banner missing");
    // Only a band at the top of the frame is touched.
    let rows_changed = (0..img.height())
        .filter(|&y| (0..img.width()).any(|x| img.get_pixel(x, y) != base.get_pixel(x, y)))
        .max()
        .unwrap();
    assert!(rows_changed < img.height() / 4);
}

#[test]
fn mismatched_maps_are_rejected() {
    let gen = GenerateConfig::default();
    let poses = build_scene(&gen.specs, &gen.randomization, 1).unwrap();
    let s = render(&poses, &gen.camera, &gen.specs, &gen.randomization).unwrap();
    let small = image::imageops::crop_imm(&s.seg, 0, 0, 10, 10).to_image();
    let r = analyze_frame(&s.depth, &small, &gen.camera, &GeometryConfig::default());
    assert!(matches!(r, Err(Error::Shape(_))), "{r:?}");
}
