//! Zero-padded "same" 2D convolutions with 1x1 or 3x3 kernels.
//!
//! Weights are laid out `[ky][kx][in][out]`. Every output element accumulates
//! its taps in the same fixed order, and the parameter gradients are reduced
//! over fixed blocks of rows in row order, so results do not depend on how
//! many worker threads run.

use rayon::prelude::*;

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Real, Tensor3};

/// Rows per partial-gradient block in the backward pass.
const GRAD_BLOCK_ROWS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T = f32> {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvSpec<T> {
    pub fn new(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if kernel_size != 1 && kernel_size != 3 {
            return config_err(format!("kernel size must be 1 or 3, got {kernel_size}"));
        }
        if in_channels == 0 || out_channels == 0 {
            return config_err("convolution channel counts must be positive");
        }
        let expected = kernel_size * kernel_size * in_channels * out_channels;
        if weights.len() != expected {
            return shape_err(format!(
                "expected {expected} weights for {kernel_size}x{kernel_size} {in_channels}->{out_channels}, got {}",
                weights.len()
            ));
        }
        if bias.len() != out_channels {
            return shape_err(format!(
                "expected {out_channels} biases, got {}",
                bias.len()
            ));
        }
        Ok(Self {
            kernel_size,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size,
            in_channels,
            out_channels,
            weights: vec![T::zero(); kernel_size * kernel_size * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Identity 1x1 convolution on `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let mut spec = Self::zeros(1, channels, channels);
        for c in 0..channels {
            spec.weights[c * channels + c] = T::one();
        }
        spec
    }

    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kernel_size + kx) * self.in_channels + ci) * self.out_channels + co
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> ConvSpec<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        ConvSpec {
            kernel_size: self.kernel_size,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: conv(&self.weights),
            bias: conv(&self.bias),
        }
    }
}

/// Gradients of a single convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor3<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_forward<T: Real>(t: &Tensor3<T>, spec: &ConvSpec<T>) -> Result<Tensor3<T>> {
    if t.channels() != spec.in_channels {
        return shape_err(format!(
            "input has {} channels, convolution expects {}",
            t.channels(),
            spec.in_channels
        ));
    }
    let (h, w, cin) = t.dims();
    let cout = spec.out_channels;
    let k = spec.kernel_size;
    let r = k / 2;
    let mut out = Tensor3::zeros(h, w, cout);
    out.data_mut()
        .par_chunks_mut(w * cout)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let acc = &mut row[x * cout..(x + 1) * cout];
                for ky in 0..k {
                    let Some(sy) = (y + ky).checked_sub(r).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(sx) = (x + kx).checked_sub(r).filter(|&v| v < w) else {
                            continue;
                        };
                        let px = t.pixel(sy, sx);
                        for (ci, &v) in px.iter().enumerate().take(cin) {
                            let base = spec.weight_index(ky, kx, ci, 0);
                            let wrow = &spec.weights[base..base + cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += v * wv;
                            }
                        }
                    }
                }
                for (a, &b) in acc.iter_mut().zip(&spec.bias) {
                    *a += b;
                }
            }
        });
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    t: &Tensor3<T>,
    spec: &ConvSpec<T>,
    grad_out: &Tensor3<T>,
) -> Result<ConvGrads<T>> {
    if t.channels() != spec.in_channels {
        return shape_err("input channels do not match convolution");
    }
    if grad_out.dims() != (t.height(), t.width(), spec.out_channels) {
        return shape_err(format!(
            "grad_out has shape {:?}, expected {:?}",
            grad_out.dims(),
            (t.height(), t.width(), spec.out_channels)
        ));
    }
    let (h, w, cin) = t.dims();
    let cout = spec.out_channels;
    let k = spec.kernel_size;
    let r = k / 2;

    // Input gradient: each input element gathers from the outputs it fed.
    let mut grad_in = Tensor3::zeros(h, w, cin);
    grad_in
        .data_mut()
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(iy, row)| {
            for ix in 0..w {
                let acc = &mut row[ix * cin..(ix + 1) * cin];
                for ky in 0..k {
                    // output y with y + ky - r == iy
                    let Some(oy) = (iy + r).checked_sub(ky).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ox) = (ix + r).checked_sub(kx).filter(|&v| v < w) else {
                            continue;
                        };
                        let g = grad_out.pixel(oy, ox);
                        for (ci, a) in acc.iter_mut().enumerate() {
                            let base = spec.weight_index(ky, kx, ci, 0);
                            let wrow = &spec.weights[base..base + cout];
                            let mut s = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(g) {
                                s += wv * gv;
                            }
                            *a += s;
                        }
                    }
                }
            }
        });

    // Parameter gradients: fixed row blocks, reduced in block order.
    let n_blocks = h.div_ceil(GRAD_BLOCK_ROWS);
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut gw = vec![T::zero(); spec.weights.len()];
            let mut gb = vec![T::zero(); cout];
            let y_end = ((b + 1) * GRAD_BLOCK_ROWS).min(h);
            for y in b * GRAD_BLOCK_ROWS..y_end {
                for x in 0..w {
                    let g = grad_out.pixel(y, x);
                    for (a, &gv) in gb.iter_mut().zip(g) {
                        *a += gv;
                    }
                    for ky in 0..k {
                        let Some(sy) = (y + ky).checked_sub(r).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(sx) = (x + kx).checked_sub(r).filter(|&v| v < w) else {
                                continue;
                            };
                            let px = t.pixel(sy, sx);
                            for (ci, &v) in px.iter().enumerate() {
                                let base = spec.weight_index(ky, kx, ci, 0);
                                for (a, &gv) in gw[base..base + cout].iter_mut().zip(g) {
                                    *a += v * gv;
                                }
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![T::zero(); spec.weights.len()];
    let mut grad_b = vec![T::zero(); cout];
    for (gw, gb) in partials {
        for (a, v) in grad_w.iter_mut().zip(gw) {
            *a += v;
        }
        for (a, v) in grad_b.iter_mut().zip(gb) {
            *a += v;
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{lcg_conv, lcg_tensor, rel_err};

    /// Direct nested-loop convolution used as the oracle.
    fn conv_oracle(t: &Tensor3<f64>, spec: &ConvSpec<f64>) -> Tensor3<f64> {
        let (h, w, _) = t.dims();
        let r = spec.kernel_size as isize / 2;
        Tensor3::from_fn(h, w, spec.out_channels, |y, x, co| {
            let mut s = spec.bias[co];
            for ky in 0..spec.kernel_size {
                for kx in 0..spec.kernel_size {
                    let sy = y as isize + ky as isize - r;
                    let sx = x as isize + kx as isize - r;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    for ci in 0..spec.in_channels {
                        s += t.get(sy as usize, sx as usize, ci)
                            * spec.weights[spec.weight_index(ky, kx, ci, co)];
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let t = lcg_tensor(4, 5, 3, 9);
        let out = conv2d_forward(&t, &ConvSpec::identity(3)).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut spec = ConvSpec::<f32>::zeros(3, 2, 4);
        spec.bias = vec![1.5; 4];
        let out = conv2d_forward(&lcg_tensor(5, 5, 2, 3).cast(), &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        for seed in 0..5 {
            let t = lcg_tensor(5, 5, 2, seed);
            let spec = lcg_conv(3, 2, 3, seed + 100);
            let out = conv2d_forward(&t, &spec).unwrap();
            assert!(out.max_abs_diff(&conv_oracle(&t, &spec)) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let spec = ConvSpec::<f64>::zeros(1, 3, 2);
        assert!(conv2d_forward(&lcg_tensor(2, 2, 2, 0), &spec).is_err());
    }

    #[test]
    fn rejects_bad_kernel_and_weights() {
        assert!(ConvSpec::<f32>::new(5, 1, 1, vec![0.0; 25], vec![0.0]).is_err());
        assert!(ConvSpec::<f32>::new(3, 1, 1, vec![0.0; 8], vec![0.0]).is_err());
    }

    #[test]
    fn linear_in_input_without_bias() {
        let mut spec = lcg_conv(3, 2, 2, 5);
        spec.bias = vec![0.0; 2];
        let x = lcg_tensor(6, 4, 2, 1);
        let y = lcg_tensor(6, 4, 2, 2);
        let (a, b) = (0.7, -1.3);
        let mix = Tensor3::new(6, 4, 2, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv2d_forward(&mix, &spec).unwrap();
        let fx = conv2d_forward(&x, &spec).unwrap();
        let fy = conv2d_forward(&y, &spec).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_of_zero_grad_is_zero() {
        let t = lcg_tensor(4, 4, 2, 0);
        let spec = lcg_conv(3, 2, 3, 1);
        let g = conv2d_backward(&t, &spec, &Tensor3::zeros(4, 4, 3)).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_identity_passes_gradient_through() {
        let t = lcg_tensor(3, 3, 4, 0);
        let g = lcg_tensor(3, 3, 4, 1);
        let grads = conv2d_backward(&t, &ConvSpec::identity(4), &g).unwrap();
        assert_eq!(grads.input, g);
    }

    #[test]
    fn backward_matches_central_differences() {
        // loss = <grad_out, conv(t)>, step 1e-3 on f64
        for seed in 0..20 {
            let t = lcg_tensor(4, 5, 2, seed);
            let spec = lcg_conv(3, 2, 3, seed + 50);
            let go = lcg_tensor(4, 5, 3, seed + 99);
            let loss = |t: &Tensor3<f64>, s: &ConvSpec<f64>| -> f64 {
                let o = conv2d_forward(t, s).unwrap();
                o.data().iter().zip(go.data()).map(|(a, b)| a * b).sum()
            };
            let grads = conv2d_backward(&t, &spec, &go).unwrap();
            let h = 1e-3;
            let mut worst = 0.0f64;
            for i in 0..t.len() {
                let (mut p, mut m) = (t.clone(), t.clone());
                p.data_mut()[i] += h;
                m.data_mut()[i] -= h;
                let fd = (loss(&p, &spec) - loss(&m, &spec)) / (2.0 * h);
                worst = worst.max(rel_err(grads.input.data()[i], fd));
            }
            for i in 0..spec.weights.len() {
                let (mut p, mut m) = (spec.clone(), spec.clone());
                p.weights[i] += h;
                m.weights[i] -= h;
                let fd = (loss(&t, &p) - loss(&t, &m)) / (2.0 * h);
                worst = worst.max(rel_err(grads.weights[i], fd));
            }
            for i in 0..spec.bias.len() {
                let (mut p, mut m) = (spec.clone(), spec.clone());
                p.bias[i] += h;
                m.bias[i] -= h;
                let fd = (loss(&t, &p) - loss(&t, &m)) / (2.0 * h);
                worst = worst.max(rel_err(grads.bias[i], fd));
            }
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }
}
