//! Resizing and block pooling.
//!
//! Resizing follows the half-pixel-center convention (`align_corners = false`):
//! output index `i` samples the input at `(i + 0.5) * in / out - 0.5`.
//! Interpolation is written as `base + w * (other - base)` so constant inputs
//! come back bit-exact.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for ResizeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "bicubic" => Ok(Self::Bicubic),
            other => Err(format!("unknown resize mode {other:?}")),
        }
    }
}

const CUBIC_A: f64 = -0.5;

/// Source coordinate of output index `i` under half-pixel centers.
#[inline]
fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Two-tap linear interpolation along one axis: `(lo, hi, frac)`.
fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = source_coord(i, in_len, out_len).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn nearest_taps(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * in_len as f64 / out_len as f64;
            (src.floor() as usize).min(in_len - 1)
        })
        .collect()
}

fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Four taps per output index with replicated borders: `([indices], [weights])`.
fn cubic_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..out_len)
        .map(|i| {
            let src = source_coord(i, in_len, out_len);
            let base = src.floor();
            let t = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let offset = k as f64 - 1.0;
                let j = (base + offset).clamp(0.0, (in_len - 1) as f64) as usize;
                idx[k] = j;
                w[k] = cubic_weight(t - offset);
            }
            (idx, w)
        })
        .collect()
}

pub fn resize<T: Real>(t: &Tensor3<T>, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor3<T>> {
    if out_h == 0 || out_w == 0 {
        return shape_err(format!("resize target {out_h}x{out_w} must be positive"));
    }
    let (h, w, c) = t.dims();
    let mut out = Tensor3::zeros(out_h, out_w, c);
    match mode {
        ResizeMode::Nearest => {
            let ys = nearest_taps(h, out_h);
            let xs = nearest_taps(w, out_w);
            for (oy, &sy) in ys.iter().enumerate() {
                for (ox, &sx) in xs.iter().enumerate() {
                    out.pixel_mut(oy, ox).copy_from_slice(t.pixel(sy, sx));
                }
            }
        }
        ResizeMode::Bilinear => {
            let ys = linear_taps(h, out_h);
            let xs = linear_taps(w, out_w);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::lit(fx);
                    for ch in 0..c {
                        let a = t.get(y0, x0, ch);
                        let top = a + fx * (t.get(y0, x1, ch) - a);
                        let b = t.get(y1, x0, ch);
                        let bottom = b + fx * (t.get(y1, x1, ch) - b);
                        out.set(oy, ox, ch, top + fy * (bottom - top));
                    }
                }
            }
        }
        ResizeMode::Bicubic => {
            let ys = cubic_taps(h, out_h);
            let xs = cubic_taps(w, out_w);
            for (oy, (yi, yw)) in ys.iter().enumerate() {
                for (ox, (xi, xw)) in xs.iter().enumerate() {
                    // anchor at the sample nearest the left/top of the support
                    let (ay, ax) = (yi[1], xi[1]);
                    for ch in 0..c {
                        let anchor = t.get(ay, ax, ch);
                        let mut acc = T::zero();
                        for (ky, &sy) in yi.iter().enumerate() {
                            let mut row = T::zero();
                            for (kx, &sx) in xi.iter().enumerate() {
                                row += T::lit(xw[kx]) * (t.get(sy, sx, ch) - anchor);
                            }
                            acc += T::lit(yw[ky]) * row;
                        }
                        out.set(oy, ox, ch, anchor + acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of bilinear [`resize`]: scatters `grad_out` back onto an
/// `in_h x in_w` grid.
pub fn resize_bilinear_backward<T: Real>(grad_out: &Tensor3<T>, in_h: usize, in_w: usize) -> Tensor3<T> {
    let (out_h, out_w, c) = grad_out.dims();
    let ys = linear_taps(in_h, out_h);
    let xs = linear_taps(in_w, out_w);
    let mut grad = Tensor3::zeros(in_h, in_w, c);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for (sy, sx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::lit(wt);
                for ch in 0..c {
                    let g = grad_out.get(oy, ox, ch);
                    let i = grad.index(sy, sx, ch);
                    grad.data_mut()[i] += wt * g;
                }
            }
        }
    }
    grad
}

fn check_divisible<T: Real>(t: &Tensor3<T>, s: usize) -> Result<()> {
    if s == 0 {
        return shape_err("pooling factor must be at least 1");
    }
    if t.height() % s != 0 || t.width() % s != 0 {
        return shape_err(format!(
            "{}x{} is not divisible by pooling factor {s}",
            t.height(),
            t.width()
        ));
    }
    Ok(())
}

/// Mean over non-overlapping `s x s` blocks.
pub fn block_avg_pool<T: Real>(t: &Tensor3<T>, s: usize) -> Result<Tensor3<T>> {
    check_divisible(t, s)?;
    if s == 1 {
        return Ok(t.clone());
    }
    let (h, w, c) = t.dims();
    let (oh, ow) = (h / s, w / s);
    let n = T::lit((s * s) as f64);
    let mut out = Tensor3::zeros(oh, ow, c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                // shifted sum keeps constant blocks exact
                let first = t.get(oy * s, ox * s, ch);
                let mut acc = T::zero();
                for dy in 0..s {
                    for dx in 0..s {
                        acc += t.get(oy * s + dy, ox * s + dx, ch) - first;
                    }
                }
                out.set(oy, ox, ch, first + acc / n);
            }
        }
    }
    Ok(out)
}

pub fn block_avg_pool_backward<T: Real>(grad_out: &Tensor3<T>, s: usize) -> Tensor3<T> {
    let (oh, ow, c) = grad_out.dims();
    let inv = T::one() / T::lit((s * s) as f64);
    Tensor3::from_fn(oh * s, ow * s, c, |y, x, ch| grad_out.get(y / s, x / s, ch) * inv)
}

/// Per-channel maximum over `s x s` blocks. Also returns, for each output
/// element, the flat input index that won (first occurrence in row-major order).
pub fn block_max_pool<T: Real>(t: &Tensor3<T>, s: usize) -> Result<(Tensor3<T>, Vec<usize>)> {
    check_divisible(t, s)?;
    let (h, w, c) = t.dims();
    let (oh, ow) = (h / s, w / s);
    let mut out = Tensor3::zeros(oh, ow, c);
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = t.index(oy * s, ox * s, ch);
                for dy in 0..s {
                    for dx in 0..s {
                        let i = t.index(oy * s + dy, ox * s + dx, ch);
                        if t.data()[i] > t.data()[best] {
                            best = i;
                        }
                    }
                }
                let o = out.index(oy, ox, ch);
                out.data_mut()[o] = t.data()[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn block_max_pool_backward<T: Real>(
    grad_out: &Tensor3<T>,
    argmax: &[usize],
    in_h: usize,
    in_w: usize,
) -> Tensor3<T> {
    let mut grad = Tensor3::zeros(in_h, in_w, grad_out.channels());
    for (g, &i) in grad_out.data().iter().zip(argmax) {
        grad.data_mut()[i] += *g;
    }
    grad
}
