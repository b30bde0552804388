//! Counter-based random number generation.
//!
//! Every random draw in this crate is a pure function of a [`StreamKey`] and a
//! counter. There is no mutable generator state, so any compressor stream can
//! be replayed exactly: re-quantizing slot 3 of step 17 with the same key
//! reproduces the identical rounding noise, independent of evaluation order.
//! That replay property is what lets the sensitivity estimator hold every
//! stream fixed except one.

use serde::{Deserialize, Serialize};

/// Identifies one random stream: a run-level seed plus a stream id
/// (one stream per context slot).
///
/// Identical `(seed, stream_id, counter)` triples always yield the identical
/// draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub stream_id: u64,
}

impl StreamKey {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        StreamKey { seed, stream_id }
    }

    /// Derives a child key by folding `salt` into the seed. Used to produce
    /// fresh per-step keys from a run seed without touching stream ids.
    pub fn derive(self, salt: u64) -> Self {
        StreamKey {
            seed: mix64(self.seed ^ salt.wrapping_mul(0xa076_1d64_78bd_642f)),
            stream_id: self.stream_id,
        }
    }
}

/// 64-bit finalizer with full avalanche (splitmix64).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)`, a pure function of `(key, counter)`.
#[inline]
pub fn counter_rng(key: StreamKey, counter: u64) -> f64 {
    let bits = counter_rng_u64(key, counter);
    // 53 high bits -> [0, 1) with full double resolution.
    ((bits >> 11) as f64) * (1.0 / (1u64 << 53) as f64)
}

/// Raw 64-bit output of the counter stream.
#[inline]
pub fn counter_rng_u64(key: StreamKey, counter: u64) -> u64 {
    let mut h = mix64(key.seed);
    h = mix64(h ^ key.stream_id.wrapping_mul(0xff51_afd7_ed55_8ccd));
    mix64(h ^ counter.wrapping_mul(0xc4ce_b9fe_1a85_ec53))
}

/// Standard normal draw via Box-Muller on two counter positions.
///
/// Consumes counters `2n` and `2n+1` of the stream for draw index `n`.
pub fn counter_normal(key: StreamKey, index: u64) -> f64 {
    let u1 = counter_rng(key, 2 * index).max(f64::MIN_POSITIVE);
    let u2 = counter_rng(key, 2 * index + 1);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
