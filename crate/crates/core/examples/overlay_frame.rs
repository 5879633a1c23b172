//! Renders a scene, fits the needle circle, holder axis and pad plane from
//! its exact depth and labels, and draws the measurements over the frame.
//!
//! cargo run --release --example overlay_frame -- [seed] [out.png]

use suturekit::geometry::{analyze_frame, render_overlay, GeometryConfig, OverlayStyle};
use suturekit::imageio::quantize_rgb;
use suturekit::scenegen::{build_scene, render, GenerateConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let out = args.next().unwrap_or_else(|| "overlay.png".into());

    let gen = GenerateConfig::default();
    let geo = GeometryConfig::default();
    let poses = build_scene(&gen.specs, &gen.randomization, seed)?;
    let sample = render(&poses, &gen.camera, &gen.specs, &gen.randomization)?;
    let analysis = analyze_frame(&sample.depth, &sample.seg, &gen.camera, &geo)?;

    if let Some(m) = &analysis.metrics {
        println!("grasp fraction   {:.3} (sampled {:?})", m.grasp_fraction, poses.grasp_fraction);
        println!("grasp angle      {:.1} deg", m.grasp_angle_deg);
        println!("plane/instrument {:.1} deg", m.plane_instrument_angle_deg);
        if let Some(e) = m.entry_angle_deg {
            println!("entry angle      {e:.1} deg");
        }
    }
    for note in &analysis.notes {
        println!("note: {note}");
    }
    let img = render_overlay(&quantize_rgb(&sample.rgb), &gen.camera, &analysis, &geo, &OverlayStyle::default());
    img.save(&out)?;
    println!("wrote {out}");
    Ok(())
}
