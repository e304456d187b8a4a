//! Deterministic fixtures shared by the unit tests.

use crate::conv::ConvSpec;
use crate::tensor::Tensor3;

pub use crate::gradcheck::rel_err;

fn lcg(state: &mut u64) -> f64 {
    *state = state
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// Values uniform in `[-1, 1)`.
pub fn lcg_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor3<f64> {
    let mut s = seed ^ 0x5DEECE66D;
    lcg(&mut s);
    Tensor3::from_fn(h, w, c, |_, _, _| lcg(&mut s))
}

pub fn lcg_conv(k: usize, cin: usize, cout: usize, seed: u64) -> ConvSpec<f64> {
    let mut s = seed ^ 0xA5A5_5A5A;
    lcg(&mut s);
    let weights = (0..k * k * cin * cout).map(|_| lcg(&mut s)).collect();
    let bias = (0..cout).map(|_| 0.5 * lcg(&mut s)).collect();
    ConvSpec::new(k, cin, cout, weights, bias).unwrap()
}
