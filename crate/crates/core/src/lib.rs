//! Monocular suturing support: synthetic scene generation with exact depth
//! and segmentation ground truth, a shared-encoder network that predicts
//! both from a single RGB frame, two-phase training, Dice/MAE evaluation,
//! and a geometry stage that turns predictions into needle and holder
//! measurements with overlay frames.

pub mod camera;
pub mod cli;
pub mod dataset;
mod error;
pub mod eval;
pub mod geometry;
pub mod imageio;
pub mod manifest;
pub mod model;
pub mod scenegen;
pub mod training;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed (splitmix64 mixing).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
