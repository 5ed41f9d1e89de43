//! Pooled low-rank adapters over a frozen decoder-only transformer.
//!
//! The crate implements the full method pipeline:
//!
//! - [`numerics`]: deterministic dense linear algebra, PCA, k-means.
//! - [`model`]: a desk-scale transformer with manual forward/backward and
//!   hooks for additive low-rank weight deltas.
//! - [`adapters`]: the adapter pool, indicator set, and blending algebra.
//! - [`train`]: base-model pretraining and joint pool training.
//! - [`custom`]: the device/server customization protocol (alphas-only wire
//!   exchange, deployment packages).
//! - [`hybrid`]: output signatures, prototype routing, threshold calibration.
//!
//! Everything is generic over [`real::Real`] (`f32` default, `f64` for
//! gradient checks and bit-exactness tests) and seeded through
//! [`rng::SplitMix64`], so runs are reproducible end to end.

pub mod adapters;
pub mod custom;
pub mod hybrid;
pub mod model;
pub mod numerics;
pub mod real;
pub mod rng;
pub mod tensor_io;
pub mod train;

/// FNV-1a 64-bit seed.
pub(crate) fn fnv1a64_init() -> u64 {
    0xcbf2_9ce4_8422_2325
}

pub(crate) fn fnv1a64_update(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// FNV-1a 64-bit hash of a byte slice; used for artifact fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_update(fnv1a64_init(), bytes)
}
