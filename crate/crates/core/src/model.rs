//! Model configuration, the trainable parameter bundle, and checkpoints.
//!
//! A checkpoint is a directory holding one NPY file per parameter tensor
//! (weights as `(k*k, in, out)`, biases as `(1, 1, out)`) and a
//! `manifest.json` describing the architecture.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{naf_forward, AttnConfig, KeyMode, PositionalMode, DEFAULT_KERNEL};
use crate::conv::ConvSpec;
use crate::encoder::{init_encoder, Activation, EncoderParams};
use crate::error::{shape_err, NafError, Result};
use crate::npy::{load_npy, save_npy};
use crate::rope::{RopeConfig, DEFAULT_ROPE_BASE};
use crate::tensor::Tensor3;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub channels: usize,
    pub rope_base: f64,
    pub kernel: usize,
    pub activation: Activation,
    pub positional: PositionalMode,
    pub keys: KeyMode,
    pub logit_scale: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            channels: 256,
            rope_base: DEFAULT_ROPE_BASE,
            kernel: DEFAULT_KERNEL,
            activation: Activation::Relu,
            positional: PositionalMode::Rope,
            keys: KeyMode::AvgPool,
            logit_scale: None,
        }
    }
}

impl ModelConfig {
    /// RoPE settings; the grid is filled in per input.
    pub fn rope(&self) -> Result<RopeConfig> {
        if self.positional == PositionalMode::Rope {
            RopeConfig::new(self.channels, self.rope_base, 1, 1)
        } else {
            // unused outside rope mode, but keep the struct valid
            Ok(RopeConfig {
                channels: self.channels,
                base: self.rope_base,
                grid_h: 1,
                grid_w: 1,
            })
        }
    }

    pub fn attn(&self, scale: usize, sigma: f64) -> AttnConfig {
        AttnConfig {
            scale,
            kernel: self.kernel,
            positional: self.positional,
            keys: self.keys,
            logit_scale: self.logit_scale,
            sigma,
        }
    }
}

/// Encoder weights plus the learnable width of the explicit spatial kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct NafModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub sigma: f64,
}

pub const DEFAULT_SIGMA: f64 = 0.5;

impl NafModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut encoder = init_encoder(config.depth, config.channels, seed)?;
        encoder.activation = config.activation;
        config.rope()?;
        Ok(Self {
            config,
            encoder,
            sigma: DEFAULT_SIGMA,
        })
    }

    pub fn upsample(&self, f_lr: &Tensor3, image: &Tensor3, scale: usize) -> Result<Tensor3> {
        naf_forward(f_lr, image, &self.encoder, &self.config.rope()?, &self.config.attn(scale, self.sigma))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(dir, self)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        load_checkpoint(dir)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub rope_base: f64,
    pub kernel_size: usize,
    pub tensor_names: Vec<String>,
    pub activation: Activation,
    pub positional: PositionalMode,
    pub keys: KeyMode,
    #[serde(default)]
    pub logit_scale: Option<f64>,
    pub sigma: f64,
}

/// `(name, kernel, in, out)` for every layer, pixel branch first.
fn layer_layout(depth: usize, channels: usize) -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    for (branch, k) in [("pixel", 1), ("context", 3)] {
        for i in 0..depth {
            let cin = if i == 0 { 3 } else { channels };
            out.push((format!("{branch}.{i}"), k, cin, channels));
        }
        out.push((format!("{branch}.{depth}"), 1, channels, channels / 2));
    }
    out
}

fn tensor_names(depth: usize, channels: usize) -> Vec<String> {
    layer_layout(depth, channels)
        .into_iter()
        .flat_map(|(n, ..)| [format!("{n}.weight"), format!("{n}.bias")])
        .collect()
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &NafModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let cfg = &model.config;
    let names = tensor_names(cfg.depth, cfg.channels);
    let mut names_iter = names.iter();
    for layer in model.encoder.layers() {
        let kk = layer.kernel_size * layer.kernel_size;
        let w = Tensor3::new(kk, layer.in_channels, layer.out_channels, layer.weights.clone())?;
        let b = Tensor3::new(1, 1, layer.out_channels, layer.bias.clone())?;
        for t in [w, b] {
            let name = names_iter.next().expect("one name per tensor");
            save_npy(&t, dir.join(format!("{name}.npy")))?;
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        depth: cfg.depth,
        channels: cfg.channels,
        rope_base: cfg.rope_base,
        kernel_size: cfg.kernel,
        tensor_names: names,
        activation: cfg.activation,
        positional: cfg.positional,
        keys: cfg.keys,
        logit_scale: cfg.logit_scale,
        sigma: model.sigma,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<NafModel> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(NafError::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let config = ModelConfig {
        depth: manifest.depth,
        channels: manifest.channels,
        rope_base: manifest.rope_base,
        kernel: manifest.kernel_size,
        activation: manifest.activation,
        positional: manifest.positional,
        keys: manifest.keys,
        logit_scale: manifest.logit_scale,
    };
    // validates depth and channels before the layout is trusted
    let template = init_encoder(config.depth, config.channels, 0)?;
    if manifest.tensor_names != tensor_names(config.depth, config.channels) {
        return Err(NafError::Format(
            "manifest tensor names do not match the declared architecture".into(),
        ));
    }
    let mut layers = Vec::new();
    for (name, k, cin, cout) in layer_layout(config.depth, config.channels) {
        let w = load_npy(dir.join(format!("{name}.weight.npy")))?;
        if w.dims() != (k * k, cin, cout) {
            return shape_err(format!(
                "{name}.weight has shape {:?}, expected {:?}",
                w.dims(),
                (k * k, cin, cout)
            ));
        }
        let b = load_npy(dir.join(format!("{name}.bias.npy")))?;
        if b.dims() != (1, 1, cout) {
            return shape_err(format!(
                "{name}.bias has shape {:?}, expected {:?}",
                b.dims(),
                (1, 1, cout)
            ));
        }
        layers.push(ConvSpec::new(k, cin, cout, w.into_data(), b.into_data())?);
    }
    let split = template.pixel_branch.len();
    let context_branch = layers.split_off(split);
    let encoder = EncoderParams {
        pixel_branch: layers,
        context_branch,
        depth: config.depth,
        guidance_channels: config.channels,
        activation: config.activation,
    };
    encoder.validate()?;
    Ok(NafModel {
        config,
        encoder,
        sigma: manifest.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            depth: 2,
            channels: 8,
            kernel: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = NafModel::init(small(), 4).unwrap();
        m.sigma = 0.37;
        m.save(dir.path()).unwrap();
        assert_eq!(NafModel::load(dir.path()).unwrap(), m);
        let names = tensor_names(2, 8);
        assert_eq!(names.len(), 12);
        assert_eq!(names[0], "pixel.0.weight");
        assert!(dir.path().join("context.2.bias.npy").exists());
    }

    #[test]
    fn sigma_survives_the_manifest_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        for sigma in [0.1 + 0.2, 1.0 / 3.0, 0.123_456_789_012_345_67] {
            let mut m = NafModel::init(small(), 2).unwrap();
            m.sigma = sigma;
            m.save(dir.path()).unwrap();
            assert_eq!(NafModel::load(dir.path()).unwrap().sigma.to_bits(), sigma.to_bits());
        }
    }

    #[test]
    fn manifest_has_architecture_fields() {
        let dir = tempfile::tempdir().unwrap();
        NafModel::init(small(), 1).unwrap().save(dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        for key in ["version", "L", "C", "rope_base", "kernel_size", "tensor_names"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["L"], 2);
        assert_eq!(v["C"], 8);
    }

    #[test]
    fn wrong_tensor_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        NafModel::init(small(), 1).unwrap().save(dir.path()).unwrap();
        save_npy(&Tensor3::zeros(1, 1, 5), dir.path().join("pixel.1.bias.npy")).unwrap();
        assert!(matches!(NafModel::load(dir.path()), Err(NafError::Shape(_))));
    }

    #[test]
    fn missing_tensor_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        NafModel::init(small(), 1).unwrap().save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("context.0.weight.npy")).unwrap();
        assert!(matches!(NafModel::load(dir.path()), Err(NafError::Io(_))));
    }
}
