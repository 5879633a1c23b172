//! Dice and depth MAE on hand-made masks, then a report table for a few
//! scored samples.
//!
//! cargo run --example metrics

use suturekit::eval::{dice, mae_depth, score_sample, summarize, DiceAverage};
use suturekit::manifest::Provenance;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two 2x2 blocks on a 4x4 grid sharing one column.
    let block = |x0: usize| -> Vec<bool> { (0..16).map(|i| (x0..x0 + 2).contains(&(i % 4)) && i / 4 < 2).collect() };
    println!("adjacent blocks: dice {:.3}", dice(&block(0), &block(1))?);
    println!("mae example:     {:.3} mm", mae_depth(&[10.0, 20.0, 30.0], &[12.0, 18.0, 33.0], &[true; 3])?);

    let gt: Vec<u8> = (0..16).map(|i| if i % 4 == 0 { 1 } else if i % 4 == 1 { 2 } else { 0 }).collect();
    let mut samples = Vec::new();
    for (k, shift) in [0usize, 1, 2].into_iter().enumerate() {
        let pred: Vec<u8> = (0..16).map(|i| gt[(i + shift) % 16]).collect();
        let depth_gt: Vec<f64> = (0..16).map(|i| 100.0 + i as f64).collect();
        let depth_pred: Vec<f64> = depth_gt.iter().map(|d| d + k as f64).collect();
        samples.push(score_sample(&format!("s{k}"), Provenance::Synthetic, &pred, &gt, Some((&depth_pred, &depth_gt)))?);
    }
    samples.push(score_sample("r0", Provenance::Real, &gt, &gt, None)?);
    print!("{}", summarize("", samples, DiceAverage::Macro).to_table());
    Ok(())
}
