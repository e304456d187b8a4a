//! Analytic operation counts for one upsampling pass.
//!
//! Every multiply-add counts as two FLOPs, so a length-`C` dot product costs
//! `2C`. Activations, softmax normalization and key pooling are linear in the
//! number of pixels or logits and are left out.

use serde::{Deserialize, Serialize};

use crate::attention::AttnConfig;
use crate::encoder::EncoderParams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub encoder: f64,
    pub rope: f64,
    pub logits: f64,
    pub aggregation: f64,
    pub total: f64,
    /// Logits of the full-attention equivalent, where every query sees every
    /// low-resolution cell.
    pub dense_logits: f64,
    /// `logits / dense_logits`.
    pub logits_ratio: f64,
}

/// Counts for upsampling an `h_lr x w_lr x d` feature map by `cfg.scale`.
/// The neighborhood size is the nominal `k * k`.
pub fn flops_estimate<T: Real>(cfg: &AttnConfig, enc: &EncoderParams<T>, h_lr: usize, w_lr: usize, d: usize) -> FlopBreakdown {
    let hr = (h_lr * cfg.scale * w_lr * cfg.scale) as f64;
    let c = enc.guidance_channels as f64;
    let encoder = enc
        .pixel_branch
        .iter()
        .chain(&enc.context_branch)
        .map(|l| 2.0 * hr * (l.kernel_size * l.kernel_size * l.in_channels * l.out_channels) as f64)
        .sum::<f64>();
    // a 2D rotation per channel pair: four products and two sums
    let rope = hr * 3.0 * c;
    let n = (cfg.kernel * cfg.kernel) as f64;
    let logits = hr * n * 2.0 * c;
    let aggregation = hr * n * 2.0 * d as f64;
    let dense_logits = hr * (h_lr * w_lr) as f64 * 2.0 * c;
    FlopBreakdown {
        encoder,
        rope,
        logits,
        aggregation,
        total: encoder + rope + logits + aggregation,
        dense_logits,
        logits_ratio: logits / dense_logits,
    }
}
