//! Counter-based randomness.
//!
//! Noise cells are a pure function of `(seed, k, j)`; per-sample path streams
//! are ChaCha generators keyed by a hash of `(master seed, tag, index)`. Neither
//! depends on evaluation order, which is what makes results independent of
//! the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_B: u64 = 0x94D0_49BB_1331_11EB;
const LANE: u64 = 0xD6E8_FEB8_6659_FD93;

/// splitmix64 finalizer: a bijective avalanche on 64 bits.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
    z ^ (z >> 31)
}

/// Key for one time slab; cell hashes within the slab extend it.
#[inline(always)]
pub fn slab_key(seed: u64, k: i64) -> u64 {
    mix64(mix64(seed.wrapping_add(GOLDEN)) ^ (k as u64).wrapping_mul(LANE))
}

/// Absorbs one coordinate into a running cell hash.
#[inline(always)]
pub fn absorb(h: u64, ji: i64) -> u64 {
    let h = (h ^ (ji as u64)).wrapping_mul(LANE);
    h ^ (h >> 29)
}

/// Completes a hash whose leading coordinates were absorbed into `prefix`.
#[inline(always)]
pub fn finish(prefix: u64, last: i64) -> u64 {
    mix64(absorb(prefix, last).wrapping_add(GOLDEN))
}

/// Hash of a spatial index within a slab.
#[inline(always)]
pub fn cell_hash(slab: u64, j: &[i64]) -> u64 {
    let (last, head) = j.split_last().expect("cell index has at least one coordinate");
    finish(head.iter().fold(slab, |h, &ji| absorb(h, ji)), *last)
}

/// Uniform on the open interval (0, 1) from the top 52 bits.
#[inline(always)]
pub fn open_unit(h: u64) -> f64 {
    ((h >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Inverse standard normal CDF (Acklam's rational approximation).
///
/// Relative error below 1.2e-9 over the whole open unit interval.
#[inline]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal variate determined by a hash value.
#[inline(always)]
pub fn normal_from_hash(h: u64) -> f64 {
    inverse_normal_cdf(open_unit(h))
}

/// Derive an independent 64-bit seed from a master seed, a purpose tag and an index.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    mix64(mix64(mix64(master ^ GOLDEN).wrapping_add(tag.wrapping_mul(LANE))) ^ index.wrapping_mul(MIX_B))
}

/// Private random stream for one Monte Carlo sample.
pub fn sample_stream(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}

/// Purpose tags for derived streams, kept distinct so that no two consumers
/// of the same master seed share randomness by accident.
pub mod tag {
    pub const PATH: u64 = 1;
    pub const PATH_SECOND: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const POINT: u64 = 5;
    pub const REPLICA: u64 = 6;
}
