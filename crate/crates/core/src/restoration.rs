//! Image restoration with the same attention operator: noise models,
//! PSNR / SSIM metrics, the combined L1 + L2 + SSIM loss and denoising.
//!
//! For denoising the scale is 1, so the keys equal the queries and every
//! pixel attends to a `k x k` window of noisy pixels whose RGB values are the
//! attention values.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{naf_backward, naf_forward, AttnConfig};
use crate::encoder::EncoderParams;
use crate::error::{config_err, shape_err, Result};
use crate::model::NafModel;
use crate::random::{derive_seed, rng};
use crate::rope::RopeConfig;
use crate::tensor::{Real, Tensor3};
use crate::training::{run_schedule, ImageSource, SampleGrad, TrainConfig, TrainOutcome};

/// Window used by denoisers unless configured otherwise.
pub const DENOISE_KERNEL: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    ChannelSaltPepper,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "channel_salt_pepper" | "salt-pepper" | "salt_pepper" => Ok(Self::ChannelSaltPepper),
            other => Err(format!("unknown noise kind {other:?}")),
        }
    }
}

/// `level` is the standard deviation for gaussian noise and the corruption
/// probability for salt-pepper noise. With `level_range` set, training draws
/// a level per sample uniformly from the range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub level_range: Option<(f64, f64)>,
    pub seed: u64,
}

const LEVEL_STREAM: u64 = 0x1e7e1;
const NOISE_STREAM: u64 = 0x9015e;
const EVAL_STREAM: u64 = 0xe7a1;

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            level: sigma,
            level_range: None,
            seed,
        }
    }

    pub fn salt_pepper(p: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::ChannelSaltPepper,
            level: p,
            level_range: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| match self.kind {
            NoiseKind::Gaussian => v >= 0.0 && v.is_finite(),
            NoiseKind::ChannelSaltPepper => (0.0..=1.0).contains(&v),
        };
        if !ok(self.level) {
            return config_err(format!("noise level {} is out of range for {:?}", self.level, self.kind));
        }
        if let Some((lo, hi)) = self.level_range {
            if !(lo <= hi) || !ok(lo) || !ok(hi) {
                return config_err(format!("invalid noise level range ({lo}, {hi})"));
            }
        }
        Ok(())
    }

    /// Concrete noise for one sample: the level is drawn from the range when
    /// one is given and the seed is derived from `stream` and `index`.
    fn instance(&self, stream: u64, index: u64) -> Self {
        let level = match self.level_range {
            Some((lo, hi)) if hi > lo => rng(derive_seed(self.seed, LEVEL_STREAM ^ stream, index)).random_range(lo..=hi),
            Some((lo, _)) => lo,
            None => self.level,
        };
        Self {
            kind: self.kind,
            level,
            level_range: None,
            seed: derive_seed(self.seed, stream, index),
        }
    }
}

/// `img + sigma * z` with standard normal `z`; values are not clipped.
pub fn add_gaussian_noise<T: Real>(img: &Tensor3<T>, spec: &NoiseSpec) -> Result<Tensor3<T>> {
    if spec.kind != NoiseKind::Gaussian {
        return config_err("add_gaussian_noise needs a gaussian noise spec");
    }
    spec.validate()?;
    let mut r = rng(spec.seed);
    let sigma = spec.level;
    Ok(img.map(|v| {
        let z: f64 = r.sample(StandardNormal);
        v + T::lit(sigma * z)
    }))
}

/// Each value is independently replaced with probability `p`, by 0 or 1
/// with equal chance.
pub fn add_channel_salt_pepper<T: Real>(img: &Tensor3<T>, spec: &NoiseSpec) -> Result<Tensor3<T>> {
    if spec.kind != NoiseKind::ChannelSaltPepper {
        return config_err("add_channel_salt_pepper needs a salt-pepper noise spec");
    }
    spec.validate()?;
    let mut r = rng(spec.seed);
    let p = spec.level;
    Ok(img.map(|v| {
        if r.random_bool(p) {
            if r.random_bool(0.5) {
                T::one()
            } else {
                T::zero()
            }
        } else {
            v
        }
    }))
}

pub fn corrupt<T: Real>(img: &Tensor3<T>, spec: &NoiseSpec) -> Result<Tensor3<T>> {
    match spec.kind {
        NoiseKind::Gaussian => add_gaussian_noise(img, spec),
        NoiseKind::ChannelSaltPepper => add_channel_salt_pepper(img, spec),
    }
}

fn check_same<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("images {:?} and {:?} differ in shape", a.dims(), b.dims()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB after clamping both images to
/// `[0, peak]`; identical images give `+inf`.
pub fn psnr<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    if !(peak > 0.0) {
        return config_err("peak must be positive");
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64().clamp(0.0, peak) - y.as_f64().clamp(0.0, peak);
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-(i as f64 - mid).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    g
}

/// Separable Gaussian filter over the windows that fit inside the plane.
fn blur_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            tmp[y * ow + ox] = (0..SSIM_WINDOW).map(|j| g[j] * p[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|i| g[i] * tmp[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Adjoint of `blur_valid`.
fn blur_valid_t(m: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for oy in 0..oh {
        for i in 0..SSIM_WINDOW {
            for ox in 0..ow {
                tmp[(oy + i) * ow + ox] += g[i] * m[oy * ow + ox];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for ox in 0..ow {
            let v = tmp[y * ow + ox];
            for j in 0..SSIM_WINDOW {
                out[y * w + ox + j] += g[j] * v;
            }
        }
    }
    out
}

/// Mean SSIM of `x` against `y` and, when asked, its gradient with respect
/// to `x`.
fn ssim_core<T: Real>(x: &Tensor3<T>, y: &Tensor3<T>, clamp: bool, want_grad: bool) -> Result<(f64, Option<Tensor3<T>>)> {
    check_same(x, y)?;
    let (h, w, c) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let g = ssim_kernel();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let n = (oh * ow * c) as f64;
    let val = |v: T| {
        let v = v.as_f64();
        if clamp {
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    };
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor3::<T>::zeros(h, w, c));
    for ch in 0..c {
        let xs: Vec<f64> = (0..h * w).map(|i| val(x.data()[i * c + ch])).collect();
        let ys: Vec<f64> = (0..h * w).map(|i| val(y.data()[i * c + ch])).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = blur_valid(&xs, h, w, &g);
        let my = blur_valid(&ys, h, w, &g);
        let mxx = blur_valid(&prod(&xs, &xs), h, w, &g);
        let myy = blur_valid(&prod(&ys, &ys), h, w, &g);
        let mxy = blur_valid(&prod(&xs, &ys), h, w, &g);
        let mut alpha = vec![0.0; oh * ow];
        let mut beta = vec![0.0; oh * ow];
        let mut gamma = vec![0.0; oh * ow];
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_mu = 2.0 * uy * a2 / (b1 * b2) - 2.0 * s * ux / b1;
                let d_var = -s / b2;
                let d_cov = 2.0 * a1 / (b1 * b2);
                alpha[i] = d_mu - 2.0 * d_var * ux - d_cov * uy;
                beta[i] = 2.0 * d_var;
                gamma[i] = d_cov;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let ta = blur_valid_t(&alpha, h, w, &g);
            let tb = blur_valid_t(&beta, h, w, &g);
            let tc = blur_valid_t(&gamma, h, w, &g);
            for i in 0..h * w {
                grad.data_mut()[i * c + ch] = T::lit((ta[i] + xs[i] * tb[i] + ys[i] * tc[i]) / n);
            }
        }
    }
    Ok((total / n, grad))
}

/// Mean structural similarity (11x11 Gaussian window, sigma 1.5, peak 1),
/// averaged over channels, after clamping both images to `[0, 1]`.
pub fn ssim<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<f64> {
    Ok(ssim_core(a, b, true, false)?.0)
}

/// Unclamped SSIM of `pred` against `target` and its gradient with respect
/// to `pred`.
pub fn ssim_with_grad<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>) -> Result<(f64, Tensor3<T>)> {
    let (v, g) = ssim_core(pred, target, false, true)?;
    Ok((v, g.expect("gradient requested")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 5.0,
            ssim: 0.2,
        }
    }
}

/// `l1 * mean|d| + l2 * mean d^2 + ssim * (1 - SSIM)` with the default
/// weights, and its gradient with respect to `pred`.
pub fn restoration_loss<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>) -> Result<(f64, Tensor3<T>)> {
    restoration_loss_weighted(pred, target, LossWeights::default())
}

pub fn restoration_loss_weighted<T: Real>(
    pred: &Tensor3<T>,
    target: &Tensor3<T>,
    weights: LossWeights,
) -> Result<(f64, Tensor3<T>)> {
    let (s, sg) = ssim_with_grad(pred, target)?;
    let n = pred.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    let mut grad = sg;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p.as_f64() - t.as_f64();
        l1 += d.abs();
        l2 += d * d;
        // the L1 subgradient at zero is taken as zero
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = T::lit((weights.l1 * sign + 2.0 * weights.l2 * d) / n - weights.ssim * g.as_f64());
    }
    let loss = weights.l1 * l1 / n + weights.l2 * l2 / n + weights.ssim * (1.0 - s);
    Ok((loss, grad))
}

/// Self-attention of the noisy image over its own pixels: scale 1, keys
/// equal to the queries, values the noisy RGB.
pub fn denoise_forward<T: Real>(
    noisy: &Tensor3<T>,
    enc: &EncoderParams<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
) -> Result<Tensor3<T>> {
    if cfg.scale != 1 {
        return config_err(format!("denoising runs at scale 1, got {}", cfg.scale));
    }
    naf_forward(noisy, noisy, enc, rope, cfg)
}

pub fn denoise(model: &NafModel, noisy: &Tensor3) -> Result<Tensor3> {
    denoise_forward(noisy, &model.encoder, &model.config.rope()?, &model.config.attn(1, model.sigma))
}

struct DenoiseSample {
    noisy: Tensor3,
    clean: Tensor3,
}

fn denoise_grad(model: &NafModel, rope: &RopeConfig, s: &DenoiseSample) -> Result<SampleGrad> {
    let attn = model.config.attn(1, model.sigma);
    let pred = denoise_forward(&s.noisy, &model.encoder, rope, &attn)?;
    let (loss, grad) = restoration_loss(&pred, &s.clean)?;
    let grads = naf_backward(&s.noisy, &s.noisy, &model.encoder, rope, &attn, &grad)?;
    Ok(SampleGrad {
        loss,
        encoder: grads.encoder.to_flat(),
        sigma: grads.sigma as f64,
    })
}

/// Trains a denoiser on clean images from `source`, corrupted on the fly.
/// Each stage runs at its target size; input sizes are not used. Losses are
/// logged like `training::train`.
pub fn train_denoiser(
    config: &TrainConfig,
    noise: &NoiseSpec,
    source: &dyn ImageSource,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    noise.validate()?;
    if config.batch_size == 0 {
        return config_err("batch size must be at least 1");
    }
    if config.stages.is_empty() {
        return config_err("training needs at least one stage");
    }
    if !(config.adam.learning_rate >= 0.0) {
        return config_err("learning rate must be non-negative");
    }
    if let Some(st) = config.stages.iter().find(|st| st.target_size < SSIM_WINDOW) {
        return config_err(format!(
            "denoising crops must be at least {SSIM_WINDOW} pixels, got {}",
            st.target_size
        ));
    }
    run_schedule(
        config,
        source,
        log,
        |img, _, sample| {
            let noisy = corrupt(img, &noise.instance(NOISE_STREAM, sample))?;
            Ok(DenoiseSample {
                noisy,
                clean: img.clone(),
            })
        },
        denoise_grad,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub noisy_psnr: f64,
    pub denoised_psnr: f64,
    pub noisy_ssim: f64,
    pub denoised_ssim: f64,
    pub images: usize,
}

/// Mean PSNR and SSIM of the noisy and denoised images over `count` images
/// starting at `first`. Evaluation noise comes from its own seed stream.
pub fn evaluate_denoiser(
    model: &NafModel,
    noise: &NoiseSpec,
    source: &dyn ImageSource,
    first: usize,
    count: usize,
    size: usize,
) -> Result<DenoiseReport> {
    noise.validate()?;
    if count == 0 {
        return config_err("evaluation needs at least one image");
    }
    let mut r = DenoiseReport {
        noisy_psnr: 0.0,
        denoised_psnr: 0.0,
        noisy_ssim: 0.0,
        denoised_ssim: 0.0,
        images: count,
    };
    for i in first..first + count {
        let clean = source.image(i, size)?;
        let noisy = corrupt(&clean, &noise.instance(EVAL_STREAM, i as u64))?;
        let out = denoise(model, &noisy)?;
        r.noisy_psnr += psnr(&noisy, &clean, 1.0)?;
        r.denoised_psnr += psnr(&out, &clean, 1.0)?;
        r.noisy_ssim += ssim(&noisy, &clean)?;
        r.denoised_ssim += ssim(&out, &clean)?;
    }
    let k = count as f64;
    r.noisy_psnr /= k;
    r.denoised_psnr /= k;
    r.noisy_ssim /= k;
    r.denoised_ssim /= k;
    Ok(r)
}
