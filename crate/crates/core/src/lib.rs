pub mod deform;
pub mod dataio;
pub mod dual;
pub mod error;
pub mod evalmetrics;
pub mod mlp;
pub mod neural_sdf;
pub mod objective;
pub mod mc_tables;
pub mod ply;
pub mod skeleton;
pub mod surface;
pub mod trainer;

pub use error::{Error, Result};

/// Deterministic seed derivation (splitmix64 finaliser over the pair).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
