//! Dual-branch guidance encoder.
//!
//! Both branches stack `L` blocks (convolution followed by an activation) and
//! end with an activation-free 1x1 projection to `C/2` channels:
//!
//! ```text
//! pixel:   [1x1 3->C, act] [1x1 C->C, act] x (L-1)  1x1 C->C/2
//! context: [3x3 3->C, act] [3x3 C->C, act] x (L-1)  1x1 C->C/2
//! ```
//!
//! The guidance map is `concat(pixel, context)` along channels.

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::error::{config_err, shape_err, Result};
use crate::random::rng;
use crate::tensor::{Real, Tensor3};

use rand::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth alternative, `ln(1 + e^x)`.
    Softplus,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Softplus => {
                // numerically stable ln(1 + e^z)
                z.max(T::zero()) + (-z.abs()).exp().ln_1p()
            }
        }
    }

    #[inline]
    fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => T::one() / (T::one() + (-z).exp()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub pixel_branch: Vec<ConvSpec<T>>,
    pub context_branch: Vec<ConvSpec<T>>,
    pub depth: usize,
    pub guidance_channels: usize,
    pub activation: Activation,
}

fn check_arch(depth: usize, channels: usize) -> Result<()> {
    if depth == 0 {
        return config_err("encoder depth must be at least 1");
    }
    if channels < 4 || channels % 2 != 0 {
        return config_err(format!(
            "guidance channels must be even and >= 4, got {channels}"
        ));
    }
    Ok(())
}

fn kaiming_uniform(k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> ConvSpec<f32> {
    let bound = (6.0 / (k * k * cin) as f64).sqrt();
    let weights = (0..k * k * cin * cout)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    ConvSpec::new(k, cin, cout, weights, vec![0.0; cout]).expect("valid layer shape")
}

/// Kaiming-uniform weights, zero biases, fully determined by `seed`.
pub fn init_encoder(depth: usize, channels: usize, seed: u64) -> Result<EncoderParams> {
    check_arch(depth, channels)?;
    let mut r = rng(seed);
    let branch = |k: usize, r: &mut crate::random::DetRng| {
        let mut layers = Vec::with_capacity(depth + 1);
        layers.push(kaiming_uniform(k, 3, channels, r));
        for _ in 1..depth {
            layers.push(kaiming_uniform(k, channels, channels, r));
        }
        layers.push(kaiming_uniform(1, channels, channels / 2, r));
        layers
    };
    let pixel_branch = branch(1, &mut r);
    let context_branch = branch(3, &mut r);
    Ok(EncoderParams {
        pixel_branch,
        context_branch,
        depth,
        guidance_channels: channels,
        activation: Activation::Relu,
    })
}

pub fn param_count<T: Real>(params: &EncoderParams<T>) -> usize {
    params
        .pixel_branch
        .iter()
        .chain(&params.context_branch)
        .map(ConvSpec::param_count)
        .sum()
}

impl<T: Real> EncoderParams<T> {
    pub fn validate(&self) -> Result<()> {
        check_arch(self.depth, self.guidance_channels)?;
        let c = self.guidance_channels;
        for (name, branch, trunk_k) in [
            ("pixel", &self.pixel_branch, 1),
            ("context", &self.context_branch, 3),
        ] {
            if branch.len() != self.depth + 1 {
                return shape_err(format!(
                    "{name} branch has {} layers, expected {}",
                    branch.len(),
                    self.depth + 1
                ));
            }
            for (i, layer) in branch.iter().enumerate() {
                let is_proj = i == self.depth;
                let (k, cin, cout) = match (i, is_proj) {
                    (_, true) => (1, c, c / 2),
                    (0, false) => (trunk_k, 3, c),
                    _ => (trunk_k, c, c),
                };
                if (layer.kernel_size, layer.in_channels, layer.out_channels) != (k, cin, cout) {
                    return shape_err(format!(
                        "{name} layer {i} is {}x{} {}->{}, expected {k}x{k} {cin}->{cout}",
                        layer.kernel_size, layer.kernel_size, layer.in_channels, layer.out_channels
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvSpec<T>> {
        self.pixel_branch.iter().chain(&self.context_branch)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvSpec<T>> {
        self.pixel_branch.iter_mut().chain(&mut self.context_branch)
    }

    /// Same architecture with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for layer in z.layers_mut() {
            layer.weights.iter_mut().for_each(|v| *v = T::zero());
            layer.bias.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// All parameters in layer order, each layer as weights then bias.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(param_count(self));
        for layer in self.layers() {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn set_flat(&mut self, values: &[T]) {
        assert_eq!(values.len(), param_count(self), "flat parameter length mismatch");
        let mut off = 0;
        for layer in self.layers_mut() {
            let n = layer.weights.len();
            layer.weights.copy_from_slice(&values[off..off + n]);
            off += n;
            let n = layer.bias.len();
            layer.bias.copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    /// Flat index range occupied by the context branch.
    pub fn context_range(&self) -> std::ops::Range<usize> {
        let start: usize = self.pixel_branch.iter().map(ConvSpec::param_count).sum();
        start..param_count(self)
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            pixel_branch: self.pixel_branch.iter().map(ConvSpec::cast).collect(),
            context_branch: self.context_branch.iter().map(ConvSpec::cast).collect(),
            depth: self.depth,
            guidance_channels: self.guidance_channels,
            activation: self.activation,
        }
    }
}

/// Intermediate values of one branch, kept for the backward pass.
#[derive(Clone, Debug)]
struct BranchCache<T> {
    /// Input of each layer (the image, then post-activation maps).
    inputs: Vec<Tensor3<T>>,
    /// Pre-activation output of each trunk block.
    preacts: Vec<Tensor3<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T = f32> {
    pixel: BranchCache<T>,
    context: BranchCache<T>,
}

impl<T: Real> EncoderCache<T> {
    /// Every pre-activation value of the trunk blocks.
    pub fn preactivations(&self) -> impl Iterator<Item = T> + '_ {
        self.pixel
            .preacts
            .iter()
            .chain(&self.context.preacts)
            .flat_map(|t| t.data().iter().copied())
    }
}

fn branch_forward<T: Real>(
    img: &Tensor3<T>,
    layers: &[ConvSpec<T>],
    act: Activation,
) -> Result<(Tensor3<T>, BranchCache<T>)> {
    let (trunk, proj) = layers.split_at(layers.len() - 1);
    let mut cache = BranchCache {
        inputs: Vec::with_capacity(layers.len()),
        preacts: Vec::with_capacity(trunk.len()),
    };
    let mut x = img.clone();
    for layer in trunk {
        let z = conv2d_forward(&x, layer)?;
        let a = z.map(|v| act.apply(v));
        cache.inputs.push(x);
        cache.preacts.push(z);
        x = a;
    }
    let out = conv2d_forward(&x, &proj[0])?;
    cache.inputs.push(x);
    Ok((out, cache))
}

fn branch_backward<T: Real>(
    layers: &[ConvSpec<T>],
    cache: &BranchCache<T>,
    act: Activation,
    grad_out: &Tensor3<T>,
    grads: &mut [ConvSpec<T>],
) -> Result<Tensor3<T>> {
    let n = layers.len();
    let g = conv2d_backward(&cache.inputs[n - 1], &layers[n - 1], grad_out)?;
    grads[n - 1].weights = g.weights;
    grads[n - 1].bias = g.bias;
    let mut grad_x = g.input;
    for i in (0..n - 1).rev() {
        let z = &cache.preacts[i];
        let mut grad_z = grad_x;
        for (gv, &zv) in grad_z.data_mut().iter_mut().zip(z.data()) {
            *gv *= act.derivative(zv);
        }
        let g = conv2d_backward(&cache.inputs[i], &layers[i], &grad_z)?;
        grads[i].weights = g.weights;
        grads[i].bias = g.bias;
        grad_x = g.input;
    }
    Ok(grad_x)
}

fn check_image<T: Real>(img: &Tensor3<T>) -> Result<()> {
    if img.channels() != 3 {
        return shape_err(format!(
            "encoder expects an RGB image, got {} channels",
            img.channels()
        ));
    }
    Ok(())
}

pub fn encode_with_cache<T: Real>(
    img: &Tensor3<T>,
    params: &EncoderParams<T>,
) -> Result<(Tensor3<T>, EncoderCache<T>)> {
    check_image(img)?;
    params.validate()?;
    let (p, pixel) = branch_forward(img, &params.pixel_branch, params.activation)?;
    let (c, context) = branch_forward(img, &params.context_branch, params.activation)?;
    Ok((p.concat_channels(&c)?, EncoderCache { pixel, context }))
}

/// Guidance map `Enc(img)` of shape `(H, W, C)`.
pub fn encode<T: Real>(img: &Tensor3<T>, params: &EncoderParams<T>) -> Result<Tensor3<T>> {
    encode_with_cache(img, params).map(|(g, _)| g)
}

/// Reverse-mode gradients of `<grad_out, Enc(img)>` with respect to the
/// parameters and the image.
pub fn encode_backward<T: Real>(
    img: &Tensor3<T>,
    params: &EncoderParams<T>,
    grad_out: &Tensor3<T>,
) -> Result<(EncoderParams<T>, Tensor3<T>)> {
    let (_, cache) = encode_with_cache(img, params)?;
    encode_backward_cached(params, &cache, grad_out)
}

pub fn encode_backward_cached<T: Real>(
    params: &EncoderParams<T>,
    cache: &EncoderCache<T>,
    grad_out: &Tensor3<T>,
) -> Result<(EncoderParams<T>, Tensor3<T>)> {
    let img = &cache.pixel.inputs[0];
    let c = params.guidance_channels;
    if grad_out.dims() != (img.height(), img.width(), c) {
        return shape_err(format!(
            "grad_out has shape {:?}, expected {:?}",
            grad_out.dims(),
            (img.height(), img.width(), c)
        ));
    }
    let mut grads = params.zeros_like();
    let g_pixel = grad_out.channel_slice(0, c / 2)?;
    let g_context = grad_out.channel_slice(c / 2, c / 2)?;
    let gi_pixel = branch_backward(
        &params.pixel_branch,
        &cache.pixel,
        params.activation,
        &g_pixel,
        &mut grads.pixel_branch,
    )?;
    let gi_context = branch_backward(
        &params.context_branch,
        &cache.context,
        params.activation,
        &g_context,
        &mut grads.context_branch,
    )?;
    let mut grad_img = gi_pixel;
    for (a, b) in grad_img.data_mut().iter_mut().zip(gi_context.data()) {
        *a += *b;
    }
    Ok((grads, grad_img))
}
