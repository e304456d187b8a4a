//! Cross-scale neighborhood attention.
//!
//! For every high-resolution pixel `p` the output is a softmax-weighted mean
//! of the low-resolution features in a `k x k` window of cells centered on the
//! cell containing `p`:
//!
//! ```text
//! out_p = sum_{q in N(p)} softmax_q(logit(p, q)) * F_q
//! logit(p, q) = logit_scale * <Q_p, K_q>  [- dist(p, q) / (2 sigma^2)]
//! ```
//!
//! Queries are the (rotary-encoded) guidance map at full resolution; keys are
//! the same map pooled onto the low-resolution grid. Windows are truncated at
//! the borders and the softmax renormalizes over the cells that remain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_backward_cached, encode_with_cache, EncoderCache, EncoderParams};
use crate::error::{config_err, shape_err, NafError, Result};
use crate::resample::{
    block_avg_pool, block_avg_pool_backward, block_max_pool, block_max_pool_backward, resize,
    resize_bilinear_backward, ResizeMode,
};
use crate::rope::{apply_rope, apply_rope_backward, normalize_coord, RopeConfig};
use crate::tensor::{Real, Tensor3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    #[default]
    Rope,
    Gaussian,
    Manhattan,
    None,
}

impl std::str::FromStr for PositionalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rope" => Ok(Self::Rope),
            "gaussian" => Ok(Self::Gaussian),
            "manhattan" => Ok(Self::Manhattan),
            "none" => Ok(Self::None),
            other => Err(format!("unknown positional mode {other:?}")),
        }
    }
}

impl PositionalMode {
    pub const ALL: [Self; 4] = [Self::Rope, Self::Gaussian, Self::Manhattan, Self::None];

    pub fn uses_sigma(self) -> bool {
        matches!(self, Self::Gaussian | Self::Manhattan)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyMode {
    #[default]
    AvgPool,
    MaxPool,
    Bilinear,
}

impl std::str::FromStr for KeyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "avgpool" => Ok(Self::AvgPool),
            "maxpool" => Ok(Self::MaxPool),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(format!("unknown key mode {other:?}")),
        }
    }
}

impl KeyMode {
    pub const ALL: [Self; 3] = [Self::AvgPool, Self::MaxPool, Self::Bilinear];
}

pub const DEFAULT_KERNEL: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    /// Integer upsampling factor `s`.
    pub scale: usize,
    /// Window side length in low-resolution cells (odd).
    pub kernel: usize,
    pub positional: PositionalMode,
    pub keys: KeyMode,
    /// Multiplier on `<Q, K>`; `None` means `1 / sqrt(C)`.
    pub logit_scale: Option<f64>,
    /// Width of the explicit spatial kernel (gaussian / manhattan modes only),
    /// in normalized `[-1, 1]` coordinates.
    pub sigma: f64,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            scale: 1,
            kernel: DEFAULT_KERNEL,
            positional: PositionalMode::Rope,
            keys: KeyMode::AvgPool,
            logit_scale: None,
            sigma: 0.5,
        }
    }
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return config_err("scale must be at least 1");
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return config_err(format!("kernel must be odd, got {}", self.kernel));
        }
        if let Some(ls) = self.logit_scale {
            if !(ls > 0.0) || !ls.is_finite() {
                return config_err(format!("logit scale must be positive, got {ls}"));
            }
        }
        if self.positional.uses_sigma() && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return config_err(format!("sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn resolved_logit_scale(&self, guidance_channels: usize) -> f64 {
        self.logit_scale
            .unwrap_or_else(|| 1.0 / (guidance_channels as f64).sqrt())
    }
}

/// The window of low-resolution cells attended by one high-resolution pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub anchor: (usize, usize),
    /// In-bounds cells in row-major order.
    pub cells: Vec<(usize, usize)>,
}

/// Inclusive row and column ranges of the truncated window.
#[derive(Clone, Copy, Debug)]
struct Window {
    rows: (usize, usize),
    cols: (usize, usize),
}

impl Window {
    #[inline]
    fn new(anchor: (usize, usize), k: usize, h_lr: usize, w_lr: usize) -> Self {
        let r = k / 2;
        Self {
            rows: (anchor.0.saturating_sub(r), (anchor.0 + r).min(h_lr - 1)),
            cols: (anchor.1.saturating_sub(r), (anchor.1 + r).min(w_lr - 1)),
        }
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.rows.0..=self.rows.1).flat_map(move |r| (self.cols.0..=self.cols.1).map(move |c| (r, c)))
    }
}

pub fn neighborhood(
    p: (usize, usize),
    s: usize,
    k: usize,
    h_lr: usize,
    w_lr: usize,
) -> Result<NeighborIndex> {
    if s == 0 || k == 0 || k % 2 == 0 {
        return config_err(format!("invalid scale {s} or kernel {k}"));
    }
    if p.0 >= s * h_lr || p.1 >= s * w_lr {
        return Err(NafError::Bounds {
            row: p.0,
            col: p.1,
            height: s * h_lr,
            width: s * w_lr,
        });
    }
    let anchor = (p.0 / s, p.1 / s);
    let window = Window::new(anchor, k, h_lr, w_lr);
    Ok(NeighborIndex {
        anchor,
        cells: window.cells().collect(),
    })
}

/// Keys plus what the backward pass needs to undo the pooling.
#[derive(Clone, Debug)]
struct PooledKeys<T> {
    keys: Tensor3<T>,
    argmax: Option<Vec<usize>>,
}

fn pool_keys<T: Real>(g: &Tensor3<T>, s: usize, mode: KeyMode) -> Result<PooledKeys<T>> {
    if s == 0 || g.height() % s != 0 || g.width() % s != 0 {
        return shape_err(format!(
            "guidance {}x{} is not divisible by scale {s}",
            g.height(),
            g.width()
        ));
    }
    Ok(match mode {
        KeyMode::AvgPool => PooledKeys {
            keys: block_avg_pool(g, s)?,
            argmax: None,
        },
        KeyMode::MaxPool => {
            let (keys, argmax) = block_max_pool(g, s)?;
            PooledKeys {
                keys,
                argmax: Some(argmax),
            }
        }
        KeyMode::Bilinear => PooledKeys {
            keys: resize(g, g.height() / s, g.width() / s, ResizeMode::Bilinear)?,
            argmax: None,
        },
    })
}

/// Pools the (rotary-encoded) guidance map onto the low-resolution grid.
pub fn compute_keys<T: Real>(rope_guidance: &Tensor3<T>, s: usize, mode: KeyMode) -> Result<Tensor3<T>> {
    pool_keys(rope_guidance, s, mode).map(|k| k.keys)
}

/// Grid sizes needed by the explicit spatial kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub hr_h: usize,
    pub hr_w: usize,
    pub scale: usize,
}

impl Geometry {
    /// Distance between pixel `p` and the high-resolution center of `cell`,
    /// in normalized coordinates: squared L2 for gaussian, L1 for manhattan.
    pub fn distance(&self, p: (usize, usize), cell: (usize, usize), mode: PositionalMode) -> f64 {
        let half = (self.scale as f64 - 1.0) / 2.0;
        let py = normalize_coord(p.0 as f64, self.hr_h);
        let px = normalize_coord(p.1 as f64, self.hr_w);
        let cy = normalize_coord((cell.0 * self.scale) as f64 + half, self.hr_h);
        let cx = normalize_coord((cell.1 * self.scale) as f64 + half, self.hr_w);
        match mode {
            PositionalMode::Gaussian => (py - cy).powi(2) + (px - cx).powi(2),
            PositionalMode::Manhattan => (py - cy).abs() + (px - cx).abs(),
            PositionalMode::Rope | PositionalMode::None => 0.0,
        }
    }
}

/// Attention logit between one query and one key.
///
/// In rope mode `query` and `key` must already be rotary-encoded. The
/// gaussian and manhattan modes need the grid `geometry` to place `p` and the
/// center of `cell`.
pub fn attention_logits<T: Real>(
    query: &[T],
    key: &[T],
    p: (usize, usize),
    cell: (usize, usize),
    cfg: &AttnConfig,
    geometry: Option<&Geometry>,
) -> Result<T> {
    if query.len() != key.len() {
        return shape_err("query and key lengths differ");
    }
    let scale = T::lit(cfg.resolved_logit_scale(query.len()));
    let dot: T = query.iter().zip(key).map(|(&a, &b)| a * b).sum();
    let mut logit = scale * dot;
    if cfg.positional.uses_sigma() {
        let Some(geo) = geometry else {
            return config_err(format!(
                "{:?} positional mode needs the grid geometry",
                cfg.positional
            ));
        };
        let d = geo.distance(p, cell, cfg.positional);
        logit -= T::lit(d / (2.0 * cfg.sigma * cfg.sigma));
    }
    Ok(logit)
}

/// Everything derived from the image that the attention itself consumes.
struct Prepared<T> {
    /// Rotary-encoded guidance in rope mode, raw guidance otherwise.
    queries: Tensor3<T>,
    keys: PooledKeys<T>,
    geometry: Geometry,
    mode: PositionalMode,
    logit_scale: T,
    /// `1 / (2 sigma^2)`, zero when no explicit spatial kernel is used.
    inv_two_sigma_sq: T,
    kernel: usize,
}

impl<T: Real> Prepared<T> {
    fn from_guidance(guidance: &Tensor3<T>, rope: &RopeConfig, cfg: &AttnConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.scale;
        let (h, w, c) = guidance.dims();
        let queries = if cfg.positional == PositionalMode::Rope {
            let rope = rope.with_grid(h, w);
            if rope.channels != c {
                return shape_err(format!(
                    "guidance has {c} channels, RoPE is configured for {}",
                    rope.channels
                ));
            }
            apply_rope(guidance, &rope)?
        } else {
            guidance.clone()
        };
        let keys = pool_keys(&queries, s, cfg.keys)?;
        let inv_two_sigma_sq = if cfg.positional.uses_sigma() {
            T::lit(1.0 / (2.0 * cfg.sigma * cfg.sigma))
        } else {
            T::zero()
        };
        Ok(Self {
            queries,
            keys,
            geometry: Geometry {
                hr_h: h,
                hr_w: w,
                scale: s,
            },
            mode: cfg.positional,
            logit_scale: T::lit(cfg.resolved_logit_scale(c)),
            inv_two_sigma_sq,
            kernel: cfg.kernel,
        })
    }

    #[inline]
    fn lr_dims(&self) -> (usize, usize) {
        (self.keys.keys.height(), self.keys.keys.width())
    }

    #[inline]
    fn window(&self, p: (usize, usize)) -> Window {
        let (h, w) = self.lr_dims();
        let s = self.geometry.scale;
        Window::new((p.0 / s, p.1 / s), self.kernel, h, w)
    }

    /// Logit and spatial distance for one (query, cell) pair.
    #[inline]
    fn logit(&self, p: (usize, usize), cell: (usize, usize)) -> (T, T) {
        let q = self.queries.pixel(p.0, p.1);
        let k = self.keys.keys.pixel(cell.0, cell.1);
        let mut dot = T::zero();
        for (&a, &b) in q.iter().zip(k) {
            dot += a * b;
        }
        let mut logit = self.logit_scale * dot;
        let mut dist = T::zero();
        if self.mode.uses_sigma() {
            dist = T::lit(self.geometry.distance(p, cell, self.mode));
            logit -= dist * self.inv_two_sigma_sq;
        }
        (logit, dist)
    }

    /// Softmax weights over the window of `p`, written into `weights`
    /// (row-major window order). Returns the window.
    fn weights_into(&self, p: (usize, usize), weights: &mut Vec<T>, dists: &mut Vec<T>) -> Window {
        let window = self.window(p);
        weights.clear();
        dists.clear();
        let mut max = T::neg_infinity();
        for cell in window.cells() {
            let (l, d) = self.logit(p, cell);
            max = max.max(l);
            weights.push(l);
            dists.push(d);
        }
        let mut total = T::zero();
        for w in weights.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        window
    }
}

fn check_inputs<T: Real>(f_lr: &Tensor3<T>, image: &Tensor3<T>, cfg: &AttnConfig) -> Result<()> {
    cfg.validate()?;
    if image.channels() != 3 {
        return shape_err(format!(
            "guidance image must be RGB, got {} channels",
            image.channels()
        ));
    }
    let (h, w) = (image.height(), image.width());
    let (hl, wl) = (f_lr.height(), f_lr.width());
    if h % hl != 0 || w % wl != 0 || h / hl != w / wl {
        return config_err(format!(
            "image {h}x{w} is not an integer multiple of features {hl}x{wl}"
        ));
    }
    if h / hl != cfg.scale {
        return shape_err(format!(
            "image {h}x{w} implies scale {}, configuration says {}",
            h / hl,
            cfg.scale
        ));
    }
    Ok(())
}

fn aggregate<T: Real>(prep: &Prepared<T>, f_lr: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (prep.geometry.hr_h, prep.geometry.hr_w);
    let d = f_lr.channels();
    let s = prep.geometry.scale;
    let mut out = Tensor3::zeros(h, w, d);
    out.data_mut()
        .par_chunks_mut(w * d)
        .enumerate()
        .for_each(|(y, row)| {
            let mut weights = Vec::with_capacity(prep.kernel * prep.kernel);
            let mut dists = Vec::with_capacity(prep.kernel * prep.kernel);
            for x in 0..w {
                let window = prep.weights_into((y, x), &mut weights, &mut dists);
                let acc = &mut row[x * d..(x + 1) * d];
                // offsets from the anchor value keep constant inputs exact
                let base = f_lr.pixel(y / s, x / s);
                for (cell, &wt) in window.cells().zip(&weights) {
                    for ((a, &v), &b) in acc.iter_mut().zip(f_lr.pixel(cell.0, cell.1)).zip(base) {
                        *a += wt * (v - b);
                    }
                }
                for (a, &b) in acc.iter_mut().zip(base) {
                    *a += b;
                }
            }
        });
    out
}

/// Upsamples `f_lr` by `cfg.scale`, guided by `image`.
pub fn naf_forward<T: Real>(
    f_lr: &Tensor3<T>,
    image: &Tensor3<T>,
    enc: &EncoderParams<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
) -> Result<Tensor3<T>> {
    check_inputs(f_lr, image, cfg)?;
    let (guidance, _) = encode_with_cache(image, enc)?;
    let prep = Prepared::from_guidance(&guidance, rope, cfg)?;
    Ok(aggregate(&prep, f_lr))
}

/// Same as [`naf_forward`] with a precomputed guidance map.
pub fn naf_forward_from_guidance<T: Real>(
    f_lr: &Tensor3<T>,
    guidance: &Tensor3<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
) -> Result<Tensor3<T>> {
    cfg.validate()?;
    if guidance.height() != f_lr.height() * cfg.scale || guidance.width() != f_lr.width() * cfg.scale {
        return shape_err(format!(
            "guidance {}x{} is not {} x features {}x{}",
            guidance.height(),
            guidance.width(),
            cfg.scale,
            f_lr.height(),
            f_lr.width()
        ));
    }
    let prep = Prepared::from_guidance(guidance, rope, cfg)?;
    Ok(aggregate(&prep, f_lr))
}

/// Softmax weights of pixel `p` laid out on the `k x k` window around its
/// anchor (`k x k x 1`); cells outside the low-resolution grid are zero.
pub fn attention_map_from_guidance<T: Real>(
    guidance: &Tensor3<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
    p: (usize, usize),
) -> Result<Tensor3<T>> {
    let prep = Prepared::from_guidance(guidance, rope, cfg)?;
    if p.0 >= guidance.height() || p.1 >= guidance.width() {
        return Err(NafError::Bounds {
            row: p.0,
            col: p.1,
            height: guidance.height(),
            width: guidance.width(),
        });
    }
    let k = cfg.kernel;
    let r = k / 2;
    let (mut weights, mut dists) = (Vec::new(), Vec::new());
    let window = prep.weights_into(p, &mut weights, &mut dists);
    let anchor = (p.0 / cfg.scale, p.1 / cfg.scale);
    let mut map = Tensor3::zeros(k, k, 1);
    for (cell, &w) in window.cells().zip(&weights) {
        map.set(cell.0 + r - anchor.0, cell.1 + r - anchor.1, 0, w);
    }
    Ok(map)
}

/// Gradients of `<grad_out, naf_forward(..)>`.
#[derive(Clone, Debug)]
pub struct NafGrads<T = f32> {
    pub f_lr: Tensor3<T>,
    pub encoder: EncoderParams<T>,
    /// Zero unless the positional mode has an explicit spatial kernel.
    pub sigma: T,
}

/// Forward pass that also returns the encoder cache needed by the backward pass.
struct ForwardState<T> {
    cache: EncoderCache<T>,
    prep: Prepared<T>,
}

fn forward_state<T: Real>(
    f_lr: &Tensor3<T>,
    image: &Tensor3<T>,
    enc: &EncoderParams<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
) -> Result<ForwardState<T>> {
    check_inputs(f_lr, image, cfg)?;
    let (guidance, cache) = encode_with_cache(image, enc)?;
    let prep = Prepared::from_guidance(&guidance, rope, cfg)?;
    Ok(ForwardState { cache, prep })
}

/// Forward output together with exact reverse-mode gradients.
pub fn naf_forward_backward<T: Real>(
    f_lr: &Tensor3<T>,
    image: &Tensor3<T>,
    enc: &EncoderParams<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
    grad_out: &Tensor3<T>,
) -> Result<NafGrads<T>> {
    let state = forward_state(f_lr, image, enc, rope, cfg)?;
    let prep = &state.prep;
    let (h, w) = (prep.geometry.hr_h, prep.geometry.hr_w);
    let d = f_lr.channels();
    if grad_out.dims() != (h, w, d) {
        return shape_err(format!(
            "grad_out has shape {:?}, expected {:?}",
            grad_out.dims(),
            (h, w, d)
        ));
    }
    let c = prep.queries.channels();
    let (hl, wl) = prep.lr_dims();

    let mut grad_f = Tensor3::zeros(hl, wl, d);
    let mut grad_q = Tensor3::zeros(h, w, c);
    let mut grad_k = Tensor3::zeros(hl, wl, c);
    let mut grad_sigma_acc = T::zero();

    let kk = prep.kernel * prep.kernel;
    let (mut weights, mut dists) = (Vec::with_capacity(kk), Vec::with_capacity(kk));
    let mut dw = Vec::with_capacity(kk);
    // row-major over queries: fixed accumulation order into shared buffers
    for y in 0..h {
        for x in 0..w {
            let g = grad_out.pixel(y, x);
            let window = prep.weights_into((y, x), &mut weights, &mut dists);
            dw.clear();
            let mut mean_dw = T::zero();
            for (cell, &wt) in window.cells().zip(&weights) {
                let f = f_lr.pixel(cell.0, cell.1);
                let v: T = f.iter().zip(g).map(|(&a, &b)| a * b).sum();
                dw.push(v);
                mean_dw += wt * v;
                for (a, &b) in grad_f.pixel_mut(cell.0, cell.1).iter_mut().zip(g) {
                    *a += wt * b;
                }
            }
            for (i, cell) in window.cells().enumerate() {
                let dl = weights[i] * (dw[i] - mean_dw);
                if dl == T::zero() {
                    continue;
                }
                let sdl = prep.logit_scale * dl;
                let key = prep.keys.keys.pixel(cell.0, cell.1);
                for (a, &kv) in grad_q.pixel_mut(y, x).iter_mut().zip(key) {
                    *a += sdl * kv;
                }
                let query = prep.queries.pixel(y, x);
                for (a, &qv) in grad_k.pixel_mut(cell.0, cell.1).iter_mut().zip(query) {
                    *a += sdl * qv;
                }
                // d/dsigma of -dist/(2 sigma^2) = dist / sigma^3
                grad_sigma_acc += dl * dists[i];
            }
        }
    }

    let s = prep.geometry.scale;
    let pooled_back = match (prep.keys.argmax.as_ref(), cfg.keys) {
        (_, KeyMode::AvgPool) => block_avg_pool_backward(&grad_k, s),
        (Some(argmax), KeyMode::MaxPool) => block_max_pool_backward(&grad_k, argmax, h, w),
        (_, KeyMode::Bilinear) => resize_bilinear_backward(&grad_k, h, w),
        (None, KeyMode::MaxPool) => unreachable!("max pooling always records argmax"),
    };
    let mut grad_r = grad_q;
    for (a, &b) in grad_r.data_mut().iter_mut().zip(pooled_back.data()) {
        *a += b;
    }
    let grad_g = if cfg.positional == PositionalMode::Rope {
        apply_rope_backward(&grad_r, &rope.with_grid(h, w))?
    } else {
        grad_r
    };
    let (grad_enc, _) = encode_backward_cached(enc, &state.cache, &grad_g)?;
    let grad_sigma = if cfg.positional.uses_sigma() {
        grad_sigma_acc * T::lit(1.0 / cfg.sigma.powi(3))
    } else {
        T::zero()
    };
    Ok(NafGrads {
        f_lr: grad_f,
        encoder: grad_enc,
        sigma: grad_sigma,
    })
}

/// Reverse-mode gradients of `<grad_out, naf_forward(..)>` with respect to the
/// low-resolution features, the encoder parameters and sigma.
pub fn naf_backward<T: Real>(
    f_lr: &Tensor3<T>,
    image: &Tensor3<T>,
    enc: &EncoderParams<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
    grad_out: &Tensor3<T>,
) -> Result<NafGrads<T>> {
    naf_forward_backward(f_lr, image, enc, rope, cfg, grad_out)
}

/// Dense oracle: attention from every pixel to every low-resolution cell with
/// logits outside the window set to `-inf` before the softmax.
///
/// Costs `O(H W h w C)`; meant for small grids and benchmarks against the
/// windowed path.
pub fn dense_reference<T: Real>(
    f_lr: &Tensor3<T>,
    image: &Tensor3<T>,
    enc: &EncoderParams<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
) -> Result<Tensor3<T>> {
    check_inputs(f_lr, image, cfg)?;
    let (guidance, _) = encode_with_cache(image, enc)?;
    let prep = Prepared::from_guidance(&guidance, rope, cfg)?;
    let (h, w) = (prep.geometry.hr_h, prep.geometry.hr_w);
    let (hl, wl) = prep.lr_dims();
    let d = f_lr.channels();
    let s = cfg.scale;
    let r = (cfg.kernel / 2) as isize;
    let geometry = prep.geometry;
    let mut out = Tensor3::zeros(h, w, d);
    out.data_mut()
        .par_chunks_mut(w * d)
        .enumerate()
        .for_each(|(y, row)| {
            let mut logits = vec![T::zero(); hl * wl];
            for x in 0..w {
                let q = prep.queries.pixel(y, x);
                for cy in 0..hl {
                    for cx in 0..wl {
                        let k = prep.keys.keys.pixel(cy, cx);
                        let mut l = prep.logit_scale * q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>();
                        if cfg.positional.uses_sigma() {
                            l -= T::lit(
                                geometry.distance((y, x), (cy, cx), cfg.positional)
                                    / (2.0 * cfg.sigma * cfg.sigma),
                            );
                        }
                        logits[cy * wl + cx] = l;
                    }
                }
                let (ay, ax) = ((y / s) as isize, (x / s) as isize);
                for cy in 0..hl {
                    for cx in 0..wl {
                        if (cy as isize - ay).abs() > r || (cx as isize - ax).abs() > r {
                            logits[cy * wl + cx] = T::neg_infinity();
                        }
                    }
                }
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
                let z: T = exps.iter().copied().sum();
                let acc = &mut row[x * d..(x + 1) * d];
                for (i, &e) in exps.iter().enumerate() {
                    let f = f_lr.pixel(i / wl, i % wl);
                    let wt = e / z;
                    for (a, &v) in acc.iter_mut().zip(f) {
                        *a += wt * v;
                    }
                }
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::gradcheck::check_gradient;
    use crate::rope::DEFAULT_ROPE_BASE;
    use crate::testing::lcg_tensor;

    fn rope(c: usize) -> RopeConfig {
        RopeConfig::new(c, DEFAULT_ROPE_BASE, 1, 1).unwrap()
    }

    fn cfg(s: usize, k: usize, pos: PositionalMode, keys: KeyMode) -> AttnConfig {
        AttnConfig {
            scale: s,
            kernel: k,
            positional: pos,
            keys,
            logit_scale: None,
            sigma: 0.4,
        }
    }

    /// Encoder with amplified weights so logits are far from uniform.
    fn sharp_encoder(c: usize, seed: u64) -> EncoderParams<f64> {
        let mut e = init_encoder(1, c, seed).unwrap().cast::<f64>();
        for l in e.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w *= 1.5);
            for (i, b) in l.bias.iter_mut().enumerate() {
                *b = 0.1 * ((i % 3) as f64 - 1.0);
            }
        }
        e
    }

    #[test]
    fn neighborhood_examples() {
        let n = neighborhood((0, 0), 4, 3, 8, 8).unwrap();
        assert_eq!(n.anchor, (0, 0));
        assert_eq!(n.cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let n = neighborhood((18, 18), 4, 3, 8, 8).unwrap();
        assert_eq!(n.anchor, (4, 4));
        let expected: Vec<_> = (3..6).flat_map(|r| (3..6).map(move |c| (r, c))).collect();
        assert_eq!(n.cells, expected);
        for p in [(0, 0), (5, 30), (31, 31)] {
            let n = neighborhood(p, 4, 1, 8, 8).unwrap();
            assert_eq!(n.cells, vec![n.anchor]);
        }
        assert!(matches!(
            neighborhood((32, 0), 4, 3, 8, 8),
            Err(NafError::Bounds { .. })
        ));
        assert!(neighborhood((0, 0), 2, 4, 8, 8).is_err());
    }

    #[test]
    fn keys_identity_at_scale_one_and_constant_preserved() {
        let g = lcg_tensor(4, 6, 8, 1);
        for mode in KeyMode::ALL {
            assert_eq!(compute_keys(&g, 1, mode).unwrap(), g);
            let c = Tensor3::<f64>::filled(8, 8, 4, 0.3);
            let k = compute_keys(&c, 4, mode).unwrap();
            assert!(k.data().iter().all(|&v| v == 0.3));
        }
        let g = lcg_tensor(8, 8, 4, 2);
        assert_eq!(
            compute_keys(&g, 2, KeyMode::AvgPool).unwrap(),
            block_avg_pool(&g, 2).unwrap()
        );
        assert!(compute_keys(&lcg_tensor(6, 6, 4, 0), 4, KeyMode::AvgPool).is_err());
    }

    #[test]
    fn logit_examples() {
        let q = [0.5, -1.0, 2.0, 0.25];
        let c = cfg(1, 3, PositionalMode::Rope, KeyMode::AvgPool);
        let l: f64 = attention_logits(&q, &q, (1, 1), (1, 1), &c, None).unwrap();
        let norm2: f64 = q.iter().map(|v| v * v).sum();
        assert!((l - norm2 / 2.0).abs() < 1e-12);

        let none = cfg(1, 3, PositionalMode::None, KeyMode::AvgPool);
        let z: f64 = attention_logits(&[1.0, 0.0], &[0.0, 1.0], (0, 0), (0, 0), &none, None).unwrap();
        assert_eq!(z, 0.0);

        let geo = Geometry { hr_h: 5, hr_w: 5, scale: 1 };
        let gauss = cfg(1, 3, PositionalMode::Gaussian, KeyMode::AvgPool);
        let a: f64 = attention_logits(&q, &q, (2, 2), (2, 2), &gauss, Some(&geo)).unwrap();
        let b: f64 = attention_logits(&q, &q, (2, 2), (2, 2), &none, None).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            attention_logits(&q, &q, (2, 2), (2, 2), &gauss, None),
            Err(NafError::Config(_))
        ));
        // one pixel away on a 5-wide grid is 0.5 in normalized units
        let m = cfg(1, 3, PositionalMode::Manhattan, KeyMode::AvgPool);
        let off: f64 = attention_logits(&q, &q, (2, 2), (2, 3), &m, Some(&geo)).unwrap();
        assert!((b - off - 0.5 / (2.0 * 0.16)).abs() < 1e-12);
    }

    #[test]
    fn constant_features_reproduce_exactly() {
        let enc = init_encoder(1, 8, 3).unwrap();
        let img = lcg_tensor(8, 12, 3, 4).cast::<f32>();
        let f = Tensor3::<f32>::filled(2, 3, 5, 0.731);
        for pos in PositionalMode::ALL {
            for keys in KeyMode::ALL {
                let out = naf_forward(&f, &img, &enc, &rope(8), &cfg(4, 3, pos, keys)).unwrap();
                assert!(out.data().iter().all(|&v| v == 0.731), "{pos:?} {keys:?}");
            }
        }
    }

    #[test]
    fn single_neighbor_at_scale_one_is_identity() {
        let enc = init_encoder(1, 8, 3).unwrap();
        let img = lcg_tensor(5, 4, 3, 4).cast::<f32>();
        let f = lcg_tensor(5, 4, 6, 5).cast::<f32>();
        let out = naf_forward(&f, &img, &enc, &rope(8), &cfg(1, 1, PositionalMode::Rope, KeyMode::AvgPool)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn matches_dense_reference() {
        let enc = sharp_encoder(8, 1);
        let img = lcg_tensor(8, 8, 3, 2).map(|v| 0.5 + 0.5 * v);
        let f = lcg_tensor(4, 4, 5, 3);
        for pos in PositionalMode::ALL {
            let c = cfg(2, 3, pos, KeyMode::AvgPool);
            let a = naf_forward(&f, &img, &enc, &rope(8), &c).unwrap();
            let b = dense_reference(&f, &img, &enc, &rope(8), &c).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12, "{pos:?}");
        }
    }

    #[test]
    fn huge_kernel_equals_unmasked_attention() {
        let enc = sharp_encoder(8, 2);
        let img = lcg_tensor(6, 9, 3, 2);
        let f = lcg_tensor(2, 3, 2, 3);
        let c = cfg(3, 7, PositionalMode::Rope, KeyMode::AvgPool);
        let out = dense_reference(&f, &img, &enc, &rope(8), &c).unwrap();
        // plain softmax over all cells, written out directly
        let g = crate::encoder::encode(&img, &enc).unwrap();
        let q = apply_rope(&g, &rope(8).with_grid(6, 9)).unwrap();
        let k = block_avg_pool(&q, 3).unwrap();
        for y in 0..6 {
            for x in 0..9 {
                let logits: Vec<f64> = (0..6)
                    .map(|i| {
                        let (cy, cx) = (i / 3, i % 3);
                        q.pixel(y, x).iter().zip(k.pixel(cy, cx)).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for ch in 0..2 {
                    let v: f64 = (0..6).map(|i| logits[i].exp() / z * f.get(i / 3, i % 3, ch)).sum();
                    assert!((out.get(y, x, ch) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn locality_outside_window_is_bit_exact() {
        let enc = init_encoder(1, 8, 5).unwrap();
        let img = lcg_tensor(12, 12, 3, 6).cast::<f32>();
        let f = lcg_tensor(6, 6, 3, 7).cast::<f32>();
        let c = cfg(2, 3, PositionalMode::Rope, KeyMode::AvgPool);
        let base = naf_forward(&f, &img, &enc, &rope(8), &c).unwrap();
        let mut g = f.clone();
        g.set(5, 5, 1, 100.0);
        let moved = naf_forward(&g, &img, &enc, &rope(8), &c).unwrap();
        // cell (5,5) is outside the window of every pixel anchored at rows/cols <= 3
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(base.pixel(y, x), moved.pixel(y, x));
            }
        }
        assert_ne!(base.pixel(11, 11), moved.pixel(11, 11));
    }

    #[test]
    fn shape_and_scale_errors() {
        let enc = init_encoder(1, 8, 5).unwrap();
        let f = Tensor3::<f32>::zeros(3, 3, 2);
        let c = cfg(2, 3, PositionalMode::Rope, KeyMode::AvgPool);
        assert!(matches!(
            naf_forward(&f, &Tensor3::zeros(7, 6, 3), &enc, &rope(8), &c),
            Err(NafError::Config(_))
        ));
        assert!(matches!(
            naf_forward(&f, &Tensor3::zeros(9, 9, 3), &enc, &rope(8), &c),
            Err(NafError::Shape(_))
        ));
        assert!(naf_forward(&f, &Tensor3::zeros(6, 6, 1), &enc, &rope(8), &c).is_err());
    }

    #[test]
    fn backward_zero_and_constant_cases() {
        let enc = sharp_encoder(8, 1);
        let img = lcg_tensor(6, 6, 3, 2);
        let c = cfg(2, 3, PositionalMode::Gaussian, KeyMode::AvgPool);
        let f = lcg_tensor(3, 3, 2, 3);
        let g = naf_backward(&f, &img, &enc, &rope(8), &c, &Tensor3::zeros(6, 6, 2)).unwrap();
        assert!(g.f_lr.data().iter().all(|&v| v == 0.0));
        assert!(g.encoder.to_flat().iter().all(|&v| v == 0.0));
        assert_eq!(g.sigma, 0.0);

        let constant = Tensor3::filled(3, 3, 2, 0.4);
        let go = lcg_tensor(6, 6, 2, 9);
        let g = naf_backward(&constant, &img, &enc, &rope(8), &c, &go).unwrap();
        assert!(g.encoder.to_flat().iter().all(|&v| v.abs() < 1e-14));
        assert!(g.sigma.abs() < 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences_all_modes() {
        for (i, pos) in PositionalMode::ALL.into_iter().enumerate() {
            for (j, keys) in KeyMode::ALL.into_iter().enumerate() {
                let seed = (i * 3 + j) as u64;
                let enc = sharp_encoder(8, seed);
                let img = lcg_tensor(6, 6, 3, seed + 1).map(|v| 0.5 + 0.5 * v);
                let f = lcg_tensor(3, 3, 2, seed + 2);
                let go = lcg_tensor(6, 6, 2, seed + 3);
                let c = cfg(2, 3, pos, keys);
                let g = naf_backward(&f, &img, &enc, &rope(8), &c, &go).unwrap();
                let loss = |f: &Tensor3<f64>, e: &EncoderParams<f64>, c: &AttnConfig| -> f64 {
                    naf_forward(f, &img, e, &rope(8), c)
                        .unwrap()
                        .data()
                        .iter()
                        .zip(go.data())
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let mut e2 = enc.clone();
                let r = check_gradient(&enc.to_flat(), &g.encoder.to_flat(), 1e-6, |x| {
                    e2.set_flat(x);
                    loss(&f, &e2, &c)
                });
                assert!(r.max_rel_err < 1e-4, "{pos:?}/{keys:?} encoder: {r:?}");
                let mut f2 = f.clone();
                let r = check_gradient(f.data(), g.f_lr.data(), 1e-6, |x| {
                    f2.data_mut().copy_from_slice(x);
                    loss(&f2, &enc, &c)
                });
                assert!(r.max_rel_err < 1e-4, "{pos:?}/{keys:?} features: {r:?}");
                if pos.uses_sigma() {
                    let r = check_gradient(&[c.sigma], &[g.sigma], 1e-6, |x| {
                        loss(&f, &enc, &AttnConfig { sigma: x[0], ..c })
                    });
                    assert!(r.max_rel_err < 1e-4, "{pos:?}/{keys:?} sigma: {r:?}");
                }
            }
        }
    }

    #[test]
    fn attention_map_sums_to_one() {
        let enc = init_encoder(1, 8, 1).unwrap().cast::<f64>();
        let img = lcg_tensor(8, 8, 3, 1);
        let g = crate::encoder::encode(&img, &enc).unwrap();
        let c = cfg(2, 5, PositionalMode::Rope, KeyMode::AvgPool);
        let m = attention_map_from_guidance(&g, &rope(8), &c, (0, 0)).unwrap();
        assert_eq!(m.dims(), (5, 5, 1));
        let total: f64 = m.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // top-left corner: rows/cols above/left of the anchor are outside the grid
        assert_eq!(m.get(0, 0, 0), 0.0);
        assert_eq!(m.get(1, 4, 0), 0.0);
    }
}
