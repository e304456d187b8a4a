//! Seeded random generators. Every stochastic routine in the crate derives
//! its stream from an explicit `u64` seed through these helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor3};

pub type DetRng = ChaCha8Rng;

pub fn rng(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream label and an index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tensor with i.i.d. uniform entries in `[lo, hi)`.
pub fn uniform_tensor<T: Real>(
    h: usize,
    w: usize,
    c: usize,
    lo: f64,
    hi: f64,
    rng: &mut DetRng,
) -> Tensor3<T> {
    Tensor3::from_fn(h, w, c, |_, _, _| T::lit(rng.random_range(lo..hi)))
}
