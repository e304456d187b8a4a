//! Self-supervised training of the guidance encoder.
//!
//! Pairs come from a single image: the teacher's features of the image are
//! the target and the teacher's features of a downsampled copy are the
//! low-resolution input. The upsampler is trained to map one onto the other
//! with a mean squared error and Adam.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{error, info};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{naf_backward, naf_forward, AttnConfig, KeyMode, PositionalMode};
use crate::encoder::{encode_backward, encode_with_cache, init_encoder, EncoderParams};
use crate::error::{config_err, shape_err, NafError, Result};
use crate::gradcheck::{check_gradient, GradCheckReport};
use crate::image_io::load_png;
use crate::model::{ModelConfig, NafModel};
use crate::random::{derive_seed, rng, uniform_tensor};
use crate::resample::{block_avg_pool, resize, ResizeMode};
use crate::rope::{apply_rope, apply_rope_backward, RopeConfig, DEFAULT_ROPE_BASE};
use crate::tensor::{Real, Tensor3};

/// Fixed random patch projection standing in for a pretrained backbone:
/// non-overlapping `patch x patch` RGB patches map linearly to `out_dim`
/// features.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTeacher {
    pub patch: usize,
    pub out_dim: usize,
    /// `[py][px][rgb][d]`
    pub weights: Vec<f32>,
    pub seed: u64,
}

impl SyntheticTeacher {
    pub fn new(patch: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || out_dim == 0 {
            return config_err("teacher patch and output dimension must be positive");
        }
        let fan_in = patch * patch * 3;
        let bound = (3.0 / fan_in as f64).sqrt() * 2.0;
        let mut r = rng(seed);
        let weights = (0..fan_in * out_dim)
            .map(|_| r.random_range(-bound..bound) as f32)
            .collect();
        Ok(Self {
            patch,
            out_dim,
            weights,
            seed,
        })
    }
}

pub fn teacher_features<T: Real>(img: &Tensor3<T>, teacher: &SyntheticTeacher) -> Result<Tensor3<T>> {
    let p = teacher.patch;
    let (h, w, c) = img.dims();
    if c != 3 {
        return shape_err(format!("teacher expects RGB input, got {c} channels"));
    }
    if h % p != 0 || w % p != 0 {
        return shape_err(format!("image {h}x{w} is not divisible by patch {p}"));
    }
    let d = teacher.out_dim;
    let weights: Vec<T> = teacher.weights.iter().map(|&v| T::lit(v as f64)).collect();
    let mut out = Tensor3::zeros(h / p, w / p, d);
    for fy in 0..h / p {
        for fx in 0..w / p {
            let acc = out.pixel_mut(fy, fx);
            for py in 0..p {
                for px in 0..p {
                    let rgb = img.pixel(fy * p + py, fx * p + px);
                    let base = (py * p + px) * 3 * d;
                    for (ch, &v) in rgb.iter().enumerate() {
                        let wrow = &weights[base + ch * d..base + (ch + 1) * d];
                        for (a, &wt) in acc.iter_mut().zip(wrow) {
                            *a += v * wt;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(img_hr, f_lr, f_hr_target)` with the input taken from a half-size
/// bilinear downsample.
pub fn make_pair<T: Real>(
    img_hr: &Tensor3<T>,
    teacher: &SyntheticTeacher,
) -> Result<(Tensor3<T>, Tensor3<T>, Tensor3<T>)> {
    let two_p = 2 * teacher.patch;
    if img_hr.height() % two_p != 0 || img_hr.width() % two_p != 0 {
        return shape_err(format!(
            "image {}x{} is not divisible by twice the patch size {two_p}",
            img_hr.height(),
            img_hr.width()
        ));
    }
    let (f_lr, target) = make_pair_sized(img_hr, (img_hr.height() / 2, img_hr.width() / 2), teacher)?;
    Ok((img_hr.clone(), f_lr, target))
}

/// Low-resolution input from an image downsampled to `input_size`, and the
/// target from the full image.
pub fn make_pair_sized<T: Real>(
    img_hr: &Tensor3<T>,
    input_size: (usize, usize),
    teacher: &SyntheticTeacher,
) -> Result<(Tensor3<T>, Tensor3<T>)> {
    let small = resize(img_hr, input_size.0, input_size.1, ResizeMode::Bilinear)?;
    Ok((teacher_features(&small, teacher)?, teacher_features(img_hr, teacher)?))
}

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn l2_loss<T: Real>(pred: &Tensor3<T>, target: &Tensor3<T>) -> Result<(f64, Tensor3<T>)> {
    if pred.dims() != target.dims() {
        return shape_err(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            target.dims()
        ));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let scale = T::lit(2.0 / n);
    let mut grad = pred.clone();
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let diff = *g - t;
        loss += diff.as_f64() * diff.as_f64();
        *g = scale * diff;
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
            params[i] -= update;
        }
    }
}

/// One phase of the schedule. Each sample draws its input size uniformly
/// from `input_sizes`; targets are always `target_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub iterations: usize,
    pub input_sizes: Vec<usize>,
    pub target_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Train the explicit spatial kernel width (gaussian / manhattan only).
    pub learn_sigma: bool,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                depth: 1,
                channels: 32,
                kernel: 3,
                ..ModelConfig::default()
            },
            stages: vec![Stage {
                iterations: 500,
                input_sizes: vec![32],
                target_size: 64,
            }],
            batch_size: 1,
            adam: AdamConfig::default(),
            learn_sigma: true,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Adds a second stage with a tenth of the first stage's iterations,
    /// targets of `target_size` and inputs at every integer downscale that
    /// keeps whole teacher patches.
    pub fn with_refinement_stage(mut self, target_size: usize, patch: usize) -> Self {
        let iterations = (self.stages.first().map_or(0, |s| s.iterations) / 10).max(1);
        let cells = target_size / patch;
        let input_sizes = (2..=cells)
            .filter(|f| cells % f == 0)
            .map(|f| target_size / f)
            .collect();
        self.stages.push(Stage {
            iterations,
            input_sizes,
            target_size,
        });
        self
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if self.stages.is_empty() {
            return config_err("training needs at least one stage");
        }
        if !(self.adam.learning_rate >= 0.0) {
            return config_err("learning rate must be non-negative");
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.input_sizes.is_empty() {
                return config_err(format!("stage {} lists no input sizes", i + 1));
            }
            if st.target_size % patch != 0 {
                return config_err(format!(
                    "stage {} target size {} is not divisible by patch {patch}",
                    i + 1,
                    st.target_size
                ));
            }
            for &inp in &st.input_sizes {
                if inp == 0 || inp % patch != 0 || st.target_size % inp != 0 {
                    return config_err(format!(
                        "stage {} input size {inp} must divide {} and be divisible by patch {patch}",
                        i + 1,
                        st.target_size
                    ));
                }
            }
            if i == 0 && st.input_sizes.iter().any(|&inp| 2 * inp != st.target_size) {
                return config_err("the first stage must use inputs at half the target size");
            }
        }
        Ok(())
    }
}

/// Random-access image provider; `index` selects the image and `size` the
/// square resolution it is delivered at.
pub trait ImageSource: Sync {
    fn len(&self) -> Option<usize>;

    fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    fn image(&self, index: usize, size: usize) -> Result<Tensor3>;
}

/// PNG files of a directory in lexicographic order, cycled.
#[derive(Clone, Debug)]
pub struct DirectorySource {
    files: Vec<PathBuf>,
}

impl DirectorySource {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        files.sort();
        Ok(Self { files })
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }
}

impl ImageSource for DirectorySource {
    fn len(&self) -> Option<usize> {
        Some(self.files.len())
    }

    fn image(&self, index: usize, size: usize) -> Result<Tensor3> {
        if self.files.is_empty() {
            return config_err("image directory contains no PNG files");
        }
        let img = load_png(&self.files[index % self.files.len()])?;
        if img.height() == size && img.width() == size {
            Ok(img)
        } else {
            resize(&img, size, size, ResizeMode::Bilinear)
        }
    }
}

/// Seeded generator of smooth random color fields, optionally crossed by a
/// soft straight edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticImages {
    pub seed: u64,
    pub edges: bool,
}

const IMAGE_STREAM: u64 = 0x1a6e;

impl SyntheticImages {
    pub fn new(seed: u64) -> Self {
        Self { seed, edges: true }
    }
}

impl ImageSource for SyntheticImages {
    fn len(&self) -> Option<usize> {
        None
    }

    fn image(&self, index: usize, size: usize) -> Result<Tensor3> {
        Ok(smooth_field(size, size, derive_seed(self.seed, IMAGE_STREAM, index as u64), self.edges))
    }
}

/// Piecewise-smooth color field: a few low-frequency colored cosines (at most
/// one cycle across the image) plus, optionally, one soft straight edge with
/// a fixed contrast of 0.5 along a random color direction. Clamped to `[0, 1]`.
pub fn smooth_field(h: usize, w: usize, seed: u64, edge: bool) -> Tensor3 {
    use std::f64::consts::{PI, TAU};
    let mut r = rng(seed);
    let base: [f64; 3] = std::array::from_fn(|_| r.random_range(0.3..0.7));
    struct Wave {
        fy: f64,
        fx: f64,
        phase: f64,
        color: [f64; 3],
    }
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let amp = r.random_range(0.02..0.08);
            Wave {
                fy: r.random_range(-1.0..1.0),
                fx: r.random_range(-1.0..1.0),
                phase: r.random_range(0.0..TAU),
                color: std::array::from_fn(|_| amp * r.random_range(-1.0..1.0)),
            }
        })
        .collect();
    let edge_params = edge.then(|| {
        let theta: f64 = r.random_range(0.0..PI);
        let cy = r.random_range(0.25..0.75) * h as f64;
        let cx = r.random_range(0.25..0.75) * w as f64;
        let dir: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        let delta: [f64; 3] = std::array::from_fn(|c| 0.5 * dir[c] / norm);
        (theta.sin(), theta.cos(), cy, cx, delta)
    });
    Tensor3::from_fn(h, w, 3, |y, x, c| {
        let (v, u) = (y as f64 / h as f64, x as f64 / w as f64);
        let mut val = base[c];
        for wave in &waves {
            val += wave.color[c] * (TAU * (wave.fy * v + wave.fx * u) + wave.phase).cos();
        }
        if let Some((sn, cs, cy, cx, delta)) = edge_params {
            let dist = (y as f64 + 0.5 - cy) * cs - (x as f64 + 0.5 - cx) * sn;
            val += delta[c] / (1.0 + (-dist).exp());
        }
        val.clamp(0.0, 1.0) as f32
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NafModel,
    pub history: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Mean of `values[start..start + len]`, clipped to the slice.
pub fn window_mean(values: &[f64], start: usize, len: usize) -> f64 {
    let end = (start + len).min(values.len());
    let start = start.min(end);
    if start == end {
        return f64::NAN;
    }
    values[start..end].iter().sum::<f64>() / (end - start) as f64
}

struct Sample {
    guidance: Tensor3,
    f_lr: Tensor3,
    target: Tensor3,
    scale: usize,
}

fn build_sample(img: &Tensor3, input_size: usize, teacher: &SyntheticTeacher) -> Result<Sample> {
    let (f_lr, target) = make_pair_sized(img, (input_size, input_size), teacher)?;
    let guidance = block_avg_pool(img, teacher.patch)?;
    let scale = target.height() / f_lr.height();
    Ok(Sample {
        guidance,
        f_lr,
        target,
        scale,
    })
}

fn sample_grad(model: &NafModel, rope: &RopeConfig, s: &Sample) -> Result<SampleGrad> {
    let attn = model.config.attn(s.scale, model.sigma);
    let pred = naf_forward(&s.f_lr, &s.guidance, &model.encoder, rope, &attn)?;
    let (loss, grad) = l2_loss(&pred, &s.target)?;
    let grads = naf_backward(&s.f_lr, &s.guidance, &model.encoder, rope, &attn, &grad)?;
    Ok(SampleGrad {
        loss,
        encoder: grads.encoder.to_flat(),
        sigma: grads.sigma as f64,
    })
}

fn write_log(log: &mut Option<&mut dyn Write>, rec: &LossRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        writeln!(w, "{},{},{}", rec.iteration, rec.stage, rec.loss)?;
    }
    Ok(())
}

const SIZE_STREAM: u64 = 0x5173;
const SIGMA_FLOOR: f64 = 1e-3;

/// Runs the configured schedule from a fresh initialization.
///
/// Losses are appended to `log` as `iteration,stage,loss` CSV rows (after a
/// header). The result is fully determined by the configuration, the teacher
/// and the image source.
pub fn train(
    config: &TrainConfig,
    teacher: &SyntheticTeacher,
    source: &dyn ImageSource,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate(teacher.patch)?;
    run_schedule(
        config,
        source,
        log,
        |img, stage, sample| {
            let pick = if stage.input_sizes.len() == 1 {
                0
            } else {
                let seed = derive_seed(config.seed, SIZE_STREAM, sample);
                rng(seed).random_range(0..stage.input_sizes.len())
            };
            build_sample(img, stage.input_sizes[pick], teacher)
        },
        sample_grad,
    )
}

/// Per-sample loss and gradients with respect to the flattened encoder and
/// the spatial kernel width.
pub(crate) struct SampleGrad {
    pub loss: f64,
    pub encoder: Vec<f32>,
    pub sigma: f64,
}

/// Shared optimization loop. `make` turns a clean image into a sample given
/// its stage and global sample index; `grad` evaluates one sample. Samples of
/// a batch run in parallel and are reduced in batch order.
pub(crate) fn run_schedule<S, M, G>(
    config: &TrainConfig,
    source: &dyn ImageSource,
    mut log: Option<&mut dyn Write>,
    mut make: M,
    grad: G,
) -> Result<TrainOutcome>
where
    S: Sync,
    M: FnMut(&Tensor3, &Stage, u64) -> Result<S>,
    G: Fn(&NafModel, &RopeConfig, &S) -> Result<SampleGrad> + Sync,
{
    if source.is_empty() {
        return config_err("image source is empty");
    }
    let mut model = NafModel::init(config.model, config.seed)?;
    let rope = config.model.rope()?;
    let learn_sigma = config.learn_sigma && config.model.positional.uses_sigma();
    let n_enc = model.encoder.to_flat().len();
    let mut params: Vec<f64> = model.encoder.to_flat().iter().map(|&v| v as f64).collect();
    if learn_sigma {
        params.push(model.sigma);
    }
    let mut adam = Adam::new(params.len(), config.adam);
    if let Some(w) = log.as_mut() {
        writeln!(w, "iteration,stage,loss")?;
    }
    let mut history = Vec::new();
    let mut iteration = 0usize;
    let mut image_index = 0usize;
    for (stage_idx, stage) in config.stages.iter().enumerate() {
        let stage_no = stage_idx + 1;
        info!(
            "stage {stage_no}: {} iterations, targets {}, inputs {:?}",
            stage.iterations, stage.target_size, stage.input_sizes
        );
        for _ in 0..stage.iterations {
            let mut samples = Vec::with_capacity(config.batch_size);
            for b in 0..config.batch_size {
                let img = source.image(image_index, stage.target_size)?;
                image_index += 1;
                samples.push(make(&img, stage, (iteration * config.batch_size + b) as u64)?);
            }
            let grads: Vec<SampleGrad> = samples
                .par_iter()
                .map(|s| grad(&model, &rope, s))
                .collect::<Result<_>>()?;
            // fixed-order reduction keeps the result independent of threading
            let inv = 1.0 / config.batch_size as f64;
            let mut loss = 0.0;
            let mut total = vec![0.0f64; params.len()];
            for g in &grads {
                loss += g.loss;
                for (t, &v) in total.iter_mut().zip(&g.encoder) {
                    *t += v as f64;
                }
                if learn_sigma {
                    total[n_enc] += g.sigma;
                }
            }
            loss *= inv;
            total.iter_mut().for_each(|t| *t *= inv);
            let rec = LossRecord {
                iteration,
                stage: stage_no,
                loss,
            };
            write_log(&mut log, &rec)?;
            if !loss.is_finite() {
                error!("loss became {loss} at iteration {iteration} (stage {stage_no})");
                if let Some(dir) = &config.checkpoint_dir {
                    model.save(dir.join("diverged"))?;
                }
                return Err(NafError::Diverged {
                    stage: stage_no,
                    iteration,
                    loss,
                });
            }
            history.push(rec);
            adam.step(&mut params, &total);
            let enc: Vec<f32> = params[..n_enc].iter().map(|&v| v as f32).collect();
            model.encoder.set_flat(&enc);
            if learn_sigma {
                params[n_enc] = params[n_enc].max(SIGMA_FLOOR);
                model.sigma = params[n_enc];
            }
            iteration += 1;
        }
    }
    if let Some(dir) = &config.checkpoint_dir {
        model.save(dir)?;
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub naf_mse: f64,
    pub bilinear_mse: f64,
    pub images: usize,
}

/// Mean squared error of the model and of bilinear upsampling against the
/// teacher targets over `count` images starting at `first`.
pub fn evaluate(
    model: &NafModel,
    teacher: &SyntheticTeacher,
    source: &dyn ImageSource,
    first: usize,
    count: usize,
    input_size: usize,
    target_size: usize,
) -> Result<EvalReport> {
    let rope = model.config.rope()?;
    let mut naf = 0.0;
    let mut bil = 0.0;
    for i in first..first + count {
        let img = source.image(i, target_size)?;
        let s = build_sample(&img, input_size, teacher)?;
        let attn = model.config.attn(s.scale, model.sigma);
        let pred = naf_forward(&s.f_lr, &s.guidance, &model.encoder, &rope, &attn)?;
        naf += l2_loss(&pred, &s.target)?.0;
        let up = resize(&s.f_lr, s.target.height(), s.target.width(), ResizeMode::Bilinear)?;
        bil += l2_loss(&up, &s.target)?.0;
    }
    Ok(EvalReport {
        naf_mse: naf / count as f64,
        bilinear_mse: bil / count as f64,
        images: count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradScope {
    Encoder,
    Attention,
    Rope,
    Full,
}

impl std::str::FromStr for GradScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "attention" => Ok(Self::Attention),
            "rope" => Ok(Self::Rope),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown gradient-check scope {other:?}")),
        }
    }
}

/// Small f64 encoder whose activations all stay at least `margin` away from
/// the ReLU kink on `img`, so central differences never straddle it.
fn kink_free_encoder(img: &Tensor3<f64>, depth: usize, channels: usize, seed: u64, margin: f64) -> EncoderParams<f64> {
    let mut best: Option<(f64, EncoderParams<f64>)> = None;
    for attempt in 0..1000u64 {
        let s = derive_seed(seed, 0x6c, attempt);
        let mut enc = init_encoder(depth, channels, s).expect("valid architecture").cast::<f64>();
        let mut r = rng(s ^ 1);
        for layer in enc.layers_mut() {
            layer.bias.iter_mut().for_each(|b| *b = r.random_range(-0.2..0.2));
        }
        let (_, cache) = encode_with_cache(img, &enc).expect("valid shapes");
        let closest = cache.preactivations().map(f64::abs).fold(f64::INFINITY, f64::min);
        if closest >= margin {
            return enc;
        }
        if best.as_ref().is_none_or(|(c, _)| closest > *c) {
            best = Some((closest, enc));
        }
    }
    best.expect("at least one attempt").1
}

fn image_f64(h: usize, w: usize, seed: u64) -> Tensor3<f64> {
    uniform_tensor(h, w, 3, 0.0, 1.0, &mut rng(seed))
}

fn dot(a: &Tensor3<f64>, b: &Tensor3<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_naf(
    f_lr: &Tensor3<f64>,
    img: &Tensor3<f64>,
    enc: &EncoderParams<f64>,
    rope: &RopeConfig,
    attn: &AttnConfig,
    grad_out: &Tensor3<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    let g = naf_backward(f_lr, img, enc, rope, attn, grad_out)?;
    let loss = |f: &Tensor3<f64>, e: &EncoderParams<f64>, a: &AttnConfig| {
        naf_forward(f, img, e, rope, a).map(|o| dot(&o, grad_out)).unwrap_or(f64::NAN)
    };
    let mut e2 = enc.clone();
    let mut report = check_gradient(&enc.to_flat(), &g.encoder.to_flat(), eps, |x| {
        e2.set_flat(x);
        loss(f_lr, &e2, attn)
    });
    let n = enc.to_flat().len();
    let mut f2 = f_lr.clone();
    let r = check_gradient(f_lr.data(), g.f_lr.data(), eps, |x| {
        f2.data_mut().copy_from_slice(x);
        loss(&f2, enc, attn)
    });
    report = report.merge(r, n);
    if attn.positional.uses_sigma() {
        let r = check_gradient(&[attn.sigma], &[g.sigma], eps, |x| {
            loss(f_lr, enc, &AttnConfig { sigma: x[0], ..*attn })
        });
        report = report.merge(r, n + f_lr.len());
    }
    Ok(report)
}

/// Compares analytic gradients with central differences on a tiny f64
/// instance. Indices in the report are flat positions in the concatenation
/// of all checked quantities.
pub fn grad_check(scope: GradScope, seed: u64, eps: f64) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&eps) {
        return config_err(format!("eps must lie in [1e-5, 1e-2], got {eps}"));
    }
    let margin = (4.0 * eps).max(1e-3);
    let c = 8;
    let rope = RopeConfig::new(c, DEFAULT_ROPE_BASE, 1, 1)?;
    match scope {
        GradScope::Encoder => {
            let img = image_f64(5, 5, derive_seed(seed, 1, 0));
            let enc = kink_free_encoder(&img, 2, c, seed, margin);
            let go = uniform_tensor(5, 5, c, -1.0, 1.0, &mut rng(derive_seed(seed, 2, 0)));
            let (g_enc, g_img) = encode_backward(&img, &enc, &go)?;
            let loss = |e: &EncoderParams<f64>, i: &Tensor3<f64>| {
                crate::encoder::encode(i, e).map(|o| dot(&o, &go)).unwrap_or(f64::NAN)
            };
            let mut e2 = enc.clone();
            let report = check_gradient(&enc.to_flat(), &g_enc.to_flat(), eps, |x| {
                e2.set_flat(x);
                loss(&e2, &img)
            });
            let mut i2 = img.clone();
            let r = check_gradient(img.data(), g_img.data(), eps, |x| {
                i2.data_mut().copy_from_slice(x);
                loss(&enc, &i2)
            });
            Ok(report.merge(r, g_enc.to_flat().len()))
        }
        GradScope::Rope => {
            let cfg = rope.with_grid(4, 5);
            let mut r = rng(derive_seed(seed, 3, 0));
            let g = uniform_tensor(4, 5, c, -1.0, 1.0, &mut r);
            let go = uniform_tensor(4, 5, c, -1.0, 1.0, &mut r);
            let analytic = apply_rope_backward(&go, &cfg)?;
            let mut g2 = g.clone();
            Ok(check_gradient(g.data(), analytic.data(), eps, |x| {
                g2.data_mut().copy_from_slice(x);
                apply_rope(&g2, &cfg).map(|o| dot(&o, &go)).unwrap_or(f64::NAN)
            }))
        }
        GradScope::Attention => {
            let img = image_f64(6, 6, derive_seed(seed, 4, 0));
            let enc = kink_free_encoder(&img, 1, c, seed, margin);
            let mut r = rng(derive_seed(seed, 5, 0));
            let f_lr = uniform_tensor(3, 3, 2, -1.0, 1.0, &mut r);
            let go = uniform_tensor(6, 6, 2, -1.0, 1.0, &mut r);
            let mut report: Option<GradCheckReport> = None;
            for (pos, keys) in [
                (PositionalMode::Gaussian, KeyMode::AvgPool),
                (PositionalMode::Manhattan, KeyMode::Bilinear),
                (PositionalMode::Rope, KeyMode::AvgPool),
            ] {
                let attn = AttnConfig {
                    scale: 2,
                    kernel: 3,
                    positional: pos,
                    keys,
                    logit_scale: None,
                    sigma: 0.6,
                };
                let rep = check_naf(&f_lr, &img, &enc, &rope, &attn, &go, eps)?;
                report = Some(match report {
                    None => rep,
                    Some(prev) => prev.merge(rep, 0),
                });
            }
            Ok(report.expect("three configurations"))
        }
        GradScope::Full => {
            let teacher = SyntheticTeacher::new(2, 3, derive_seed(seed, 6, 0))?;
            let img_full = image_f64(16, 16, derive_seed(seed, 7, 0));
            let (_, f_lr, target) = make_pair(&img_full, &teacher)?;
            let guidance = block_avg_pool(&img_full, teacher.patch)?;
            let enc = kink_free_encoder(&guidance, 1, c, seed, margin);
            let attn = AttnConfig {
                scale: 2,
                kernel: 3,
                ..AttnConfig::default()
            };
            let pred = naf_forward(&f_lr, &guidance, &enc, &rope, &attn)?;
            let (_, grad) = l2_loss(&pred, &target)?;
            let g = naf_backward(&f_lr, &guidance, &enc, &rope, &attn, &grad)?;
            let loss = |f: &Tensor3<f64>, e: &EncoderParams<f64>| {
                naf_forward(f, &guidance, e, &rope, &attn)
                    .and_then(|p| l2_loss(&p, &target))
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            };
            let mut e2 = enc.clone();
            let report = check_gradient(&enc.to_flat(), &g.encoder.to_flat(), eps, |x| {
                e2.set_flat(x);
                loss(&f_lr, &e2)
            });
            let mut f2 = f_lr.clone();
            let r = check_gradient(f_lr.data(), g.f_lr.data(), eps, |x| {
                f2.data_mut().copy_from_slice(x);
                loss(&f2, &enc)
            });
            Ok(report.merge(r, g.encoder.to_flat().len()))
        }
    }
}
