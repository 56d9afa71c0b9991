//! Region-query active learning for semantic segmentation.
//!
//! Images are over-segmented into superpixel regions, an oracle replays
//! ground-truth masks to answer region queries with either the dominant class
//! or the full set of classes present, and a two-stage learner turns the
//! resulting partial labels into a pixel classifier:
//!
//! 1. train directly on region labels with cross-entropy on single-class
//!    regions plus merged-positive and prototypical-pixel losses on
//!    multi-class regions;
//! 2. disambiguate multi-class regions into pixel-wise pseudo labels via
//!    nearest-prototype localization and threshold-gated expansion into
//!    adjacent unlabeled regions, then continue training on them.
//!
//! Acquisition scores rank unlabeled regions by class-balanced
//! best-versus-second-best uncertainty under a click budget.

pub mod acquisition;
pub mod dataio;
pub mod error;
pub mod evalrun;
pub mod model;
pub mod oracle;
pub mod pseudolabel;
pub mod superpixel;
pub mod training;

pub use error::{Error, Result};

/// Deterministic 64-bit mixer (SplitMix64 finalizer) used to derive
/// sub-seeds and hash-based scores.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a sequence of integer tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(seed), |acc, &t| mix64(acc ^ mix64(t)))
}
