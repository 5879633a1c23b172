//! Fits the needle circle and holder axis on rendered frames using their
//! exact depth and labels, and compares against the sampled poses.
//!
//! cargo run --release --example fit_needle -- [frames] [seed]

use std::f64::consts::TAU;

use suturekit::geometry::{analyze_frame, GeometryConfig};
use suturekit::scenegen::{build_scene, render, GenerateConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>());
    let frames = args.next().transpose()?.unwrap_or(10);
    let seed = args.next().transpose()?.unwrap_or(0);

    let gen = GenerateConfig::default();
    let geo = GeometryConfig::default();
    println!("frame  center_err  radius_err  normal_err  axis_err  grasp(true/est)");
    for i in 0..frames {
        let poses = build_scene(&gen.specs, &gen.randomization, suturekit::derive_seed(seed, i))?;
        let sample = render(&poses, &gen.camera, &gen.specs, &gen.randomization)?;
        let a = analyze_frame(&sample.depth, &sample.seg, &gen.camera, &geo)?;
        let Some(circle) = a.circle else {
            println!("{i:5}  no circle ({:?})", a.notes);
            continue;
        };
        let (center, normal) = poses.needle_circle_in_camera();
        let normal_err = circle.normal.dot(&normal).abs().min(1.0).acos().to_degrees();
        let grasp = match (poses.grasp_fraction, a.metrics) {
            (Some(t), Some(m)) => format!("{t:.3}/{:.3}{}", m.grasp_fraction, if m.tip_ambiguous { " ?" } else { "" }),
            (None, _) => "free".into(),
            _ => "no axis".into(),
        };
        let axis_err = a.axis.map_or(f64::NAN, |ax| {
            let (_, dir) = poses.instrument_axis_in_camera();
            ax.direction.dot(&dir).abs().min(1.0).acos().to_degrees()
        });
        println!(
            "{i:5}  {:9.3}  {:10.3}  {:10.3}  {axis_err:8.3}  {grasp}   span {:.1} deg",
            (circle.center - center).norm(),
            (circle.radius - gen.specs.needle.circle_radius).abs(),
            normal_err,
            circle.arc_span() * 360.0 / TAU
        );
    }
    Ok(())
}
