//! Wall-time benchmarks of the upsampler.
//!
//! Each measurement runs once as a discarded warm-up and then `repeats`
//! times; the median is reported. Absolute times depend on the machine, so
//! only relative scaling is meaningful.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{dense_reference, naf_forward, AttnConfig};
use crate::encoder::EncoderParams;
use crate::error::{config_err, Result};
use crate::random::{derive_seed, rng, uniform_tensor};
use crate::rope::RopeConfig;
use crate::tensor::Tensor3;

pub const MIN_REPEATS: usize = 5;

/// Median wall time of `f` in seconds over `repeats` runs after one warm-up.
pub fn median_time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if repeats == 0 {
        return config_err("repeats must be positive");
    }
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Peak resident set size of this process in KiB (Linux only).
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.split_whitespace().next()?.parse().ok())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub lr_size: usize,
    pub hr_size: usize,
    pub median_seconds: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Whether median time is non-decreasing in output area. Timing noise
    /// can break this, so it is reported rather than enforced.
    pub monotone: bool,
    pub peak_rss_kib: Option<u64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr_size,hr_size,median_seconds,repeats\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.lr_size, r.hr_size, r.median_seconds, r.repeats).expect("writing to a string");
        }
        out
    }
}

fn bench_inputs(lr: usize, d: usize, scale: usize, seed: u64) -> (Tensor3, Tensor3) {
    let f_lr = uniform_tensor(lr, lr, d, -1.0, 1.0, &mut rng(derive_seed(seed, 1, lr as u64)));
    let img = uniform_tensor(lr * scale, lr * scale, 3, 0.0, 1.0, &mut rng(derive_seed(seed, 2, lr as u64)));
    (f_lr, img)
}

/// Times one forward pass of square `lr x lr x d` features at each size.
pub fn bench_throughput(
    cfg: &AttnConfig,
    enc: &EncoderParams,
    rope: &RopeConfig,
    d: usize,
    lr_sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return config_err(format!("repeats must be at least {MIN_REPEATS}, got {repeats}"));
    }
    cfg.validate()?;
    let mut sizes = lr_sizes.to_vec();
    sizes.sort_unstable();
    let mut rows = Vec::with_capacity(sizes.len());
    for &lr in &sizes {
        let (f_lr, img) = bench_inputs(lr, d, cfg.scale, seed);
        let median_seconds = median_time(repeats, || naf_forward(&f_lr, &img, enc, rope, cfg).map(drop))?;
        rows.push(BenchRow {
            lr_size: lr,
            hr_size: lr * cfg.scale,
            median_seconds,
            repeats,
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].median_seconds >= w[0].median_seconds);
    Ok(BenchReport {
        rows,
        monotone,
        peak_rss_kib: peak_rss_kib(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseComparison {
    pub neighborhood_seconds: f64,
    pub dense_seconds: f64,
    pub speedup: f64,
}

/// Median times of the windowed path and of the full-attention oracle on the
/// same inputs.
pub fn compare_with_dense(
    cfg: &AttnConfig,
    enc: &EncoderParams,
    rope: &RopeConfig,
    d: usize,
    lr: usize,
    repeats: usize,
    seed: u64,
) -> Result<DenseComparison> {
    let (f_lr, img) = bench_inputs(lr, d, cfg.scale, seed);
    let neighborhood_seconds = median_time(repeats, || naf_forward(&f_lr, &img, enc, rope, cfg).map(drop))?;
    let dense_seconds = median_time(repeats, || dense_reference(&f_lr, &img, enc, rope, cfg).map(drop))?;
    Ok(DenseComparison {
        neighborhood_seconds,
        dense_seconds,
        speedup: dense_seconds / neighborhood_seconds,
    })
}
