//! End-to-end spoken-intent classification from audio.
//!
//! The pipeline: WAV → MFCC+CMN features → stacked (bi)recurrent encoder →
//! representation layer with average pooling → per-slot softmax classifiers,
//! either independent or chained through conditioning columns. Training uses
//! the summed slot cross-entropy with scheduled sampling; decoding offers
//! greedy and valid-intent-constrained beam search.

pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod features;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Result, SluError};

/// Derive an independent RNG stream from a base seed (splitmix64 mixing).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
