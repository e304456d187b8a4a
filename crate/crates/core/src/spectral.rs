//! Per-channel-pair decomposition of rotary attention scores.
//!
//! With rotary encoding the score between pixels `p` and `q` splits into one
//! term per channel pair `c`:
//!
//! ```text
//! A_c = dot_c cos(dphi_c) - cross_c sin(dphi_c) = r_p r_q cos(psi_c + dphi_c)
//! ```
//!
//! where `dot_c` and `cross_c` compare the raw guidance pairs and
//! `dphi_c = phi_c(q) - phi_c(p)`. The guidance acts as a set of Fourier
//! coefficients on the relative-phase basis.

use std::path::Path;

use crate::attention::{attention_map_from_guidance, AttnConfig};
use crate::encoder::{encode, EncoderParams};
use crate::error::{config_err, NafError, Result};
use crate::image_io::save_heatmap_png;
use crate::npy::save_npy;
use crate::rope::{relative_phase, RopeConfig};
use crate::tensor::{Real, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelTerm {
    pub pair_index: usize,
    pub dot: f64,
    pub cross: f64,
    pub delta_phi: f64,
    pub a_c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarTerm {
    pub r_p: f64,
    pub r_q: f64,
    /// Angle from the pair at `p` to the pair at `q`; zero if either is zero.
    pub psi: f64,
    pub delta_phi: f64,
}

impl PolarTerm {
    pub fn value(&self) -> f64 {
        self.r_p * self.r_q * (self.psi + self.delta_phi).cos()
    }
}

fn grid_rope<T: Real>(guidance: &Tensor3<T>, rope: &RopeConfig) -> Result<RopeConfig> {
    let cfg = rope.with_grid(guidance.height(), guidance.width());
    cfg.validate()?;
    if cfg.channels != guidance.channels() {
        return config_err(format!(
            "guidance has {} channels, RoPE is configured for {}",
            guidance.channels(),
            cfg.channels
        ));
    }
    Ok(cfg)
}

fn check_pos<T: Real>(g: &Tensor3<T>, p: (usize, usize)) -> Result<()> {
    if p.0 >= g.height() || p.1 >= g.width() {
        return Err(NafError::Bounds {
            row: p.0,
            col: p.1,
            height: g.height(),
            width: g.width(),
        });
    }
    Ok(())
}

fn pair<T: Real>(g: &Tensor3<T>, p: (usize, usize), c: usize) -> (f64, f64) {
    let px = g.pixel(p.0, p.1);
    (px[2 * c].as_f64(), px[2 * c + 1].as_f64())
}

fn terms_with(
    guidance: &Tensor3<impl Real>,
    rope: &RopeConfig,
    p: (usize, usize),
    q: (usize, usize),
) -> Result<Vec<ChannelTerm>> {
    let phases = relative_phase(rope, p, q)?;
    Ok(phases
        .angles
        .iter()
        .enumerate()
        .map(|(c, &delta_phi)| {
            let (a0, a1) = pair(guidance, p, c);
            let (b0, b1) = pair(guidance, q, c);
            let dot = a0 * b0 + a1 * b1;
            let cross = a0 * b1 - a1 * b0;
            ChannelTerm {
                pair_index: c,
                dot,
                cross,
                delta_phi,
                a_c: dot * delta_phi.cos() - cross * delta_phi.sin(),
            }
        })
        .collect())
}

/// One [`ChannelTerm`] per channel pair for the score between `p` and `q_prime`.
pub fn channel_decomposition<T: Real>(
    guidance: &Tensor3<T>,
    rope: &RopeConfig,
    p: (usize, usize),
    q_prime: (usize, usize),
) -> Result<Vec<ChannelTerm>> {
    let rope = grid_rope(guidance, rope)?;
    check_pos(guidance, p)?;
    check_pos(guidance, q_prime)?;
    terms_with(guidance, &rope, p, q_prime)
}

pub fn polar_form<T: Real>(
    guidance: &Tensor3<T>,
    rope: &RopeConfig,
    p: (usize, usize),
    q_prime: (usize, usize),
    c: usize,
) -> Result<PolarTerm> {
    let rope = grid_rope(guidance, rope)?;
    check_pos(guidance, p)?;
    check_pos(guidance, q_prime)?;
    if c >= rope.pairs() {
        return Err(NafError::Bounds {
            row: c,
            col: 0,
            height: rope.pairs(),
            width: 1,
        });
    }
    let (a0, a1) = pair(guidance, p, c);
    let (b0, b1) = pair(guidance, q_prime, c);
    let r_p = a0.hypot(a1);
    let r_q = b0.hypot(b1);
    let psi = if r_p == 0.0 || r_q == 0.0 {
        0.0
    } else {
        (a0 * b1 - a1 * b0).atan2(a0 * b0 + a1 * b1)
    };
    let delta_phi = relative_phase(&rope, p, q_prime)?.angles[c];
    Ok(PolarTerm {
        r_p,
        r_q,
        psi,
        delta_phi,
    })
}

/// Mean of the decomposed score between `p` and the `s x s` high-resolution
/// pixels of `lr_cell`; equal to the unscaled average-pooled attention logit.
pub fn pooled_score<T: Real>(
    guidance: &Tensor3<T>,
    rope: &RopeConfig,
    p: (usize, usize),
    lr_cell: (usize, usize),
    s: usize,
) -> Result<f64> {
    let rope = grid_rope(guidance, rope)?;
    check_pos(guidance, p)?;
    if s == 0 {
        return config_err("scale must be at least 1");
    }
    let (hl, wl) = (guidance.height() / s, guidance.width() / s);
    if lr_cell.0 >= hl || lr_cell.1 >= wl {
        return Err(NafError::Bounds {
            row: lr_cell.0,
            col: lr_cell.1,
            height: hl,
            width: wl,
        });
    }
    let mut total = 0.0;
    for dy in 0..s {
        for dx in 0..s {
            let q = (lr_cell.0 * s + dy, lr_cell.1 * s + dx);
            total += terms_with(guidance, &rope, p, q)?.iter().map(|t| t.a_c).sum::<f64>();
        }
    }
    Ok(total / (s * s) as f64)
}

/// Writes the attention weights of pixel `p` as a `k x k x 1` NPY grid
/// (out-of-bounds cells are zero) and a grayscale heat map.
pub fn export_attention_map<T: Real>(
    image: &Tensor3<T>,
    enc: &EncoderParams<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
    p: (usize, usize),
    npy_path: &Path,
    png_path: &Path,
) -> Result<Tensor3<T>> {
    let guidance = encode(image, enc)?;
    export_attention_map_from_guidance(&guidance, rope, cfg, p, npy_path, png_path)
}

pub fn export_attention_map_from_guidance<T: Real>(
    guidance: &Tensor3<T>,
    rope: &RopeConfig,
    cfg: &AttnConfig,
    p: (usize, usize),
    npy_path: &Path,
    png_path: &Path,
) -> Result<Tensor3<T>> {
    let map = attention_map_from_guidance(guidance, rope, cfg, p)?;
    let as_f32 = map.cast::<f32>();
    save_npy(&as_f32, npy_path)?;
    save_heatmap_png(&as_f32, png_path)?;
    Ok(map)
}

/// Means over channel pairs of `cos(dphi)` and `sin(dphi)` for every offset
/// of a `window x window` neighborhood on the configured grid, as
/// `(cos_map, sin_map)` with shape `window x window x 1`.
pub fn mean_trig_maps(rope: &RopeConfig, window: usize) -> Result<(Tensor3<f64>, Tensor3<f64>)> {
    rope.validate()?;
    if window % 2 == 0 {
        return config_err(format!("window must be odd, got {window}"));
    }
    let r = window / 2;
    // phases are linear in the offset, so measure from the grid origin
    let grid = rope.with_grid(rope.grid_h.max(r + 1), rope.grid_w.max(r + 1));
    let mut cos_map = Tensor3::zeros(window, window, 1);
    let mut sin_map = Tensor3::zeros(window, window, 1);
    let n = grid.pairs() as f64;
    for i in 0..window {
        for j in 0..window {
            let (dy, dx) = (i as isize - r as isize, j as isize - r as isize);
            let (p, q) = (
                ((-dy).max(0) as usize, (-dx).max(0) as usize),
                (dy.max(0) as usize, dx.max(0) as usize),
            );
            let phases = relative_phase(&grid, p, q)?;
            cos_map.set(i, j, 0, phases.angles.iter().map(|a| a.cos()).sum::<f64>() / n);
            sin_map.set(i, j, 0, phases.angles.iter().map(|a| a.sin()).sum::<f64>() / n);
        }
    }
    Ok((cos_map, sin_map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{compute_keys, KeyMode, PositionalMode};
    use crate::rope::{apply_rope, DEFAULT_ROPE_BASE};
    use crate::testing::lcg_tensor;

    fn rope(c: usize) -> RopeConfig {
        RopeConfig::new(c, DEFAULT_ROPE_BASE, 1, 1).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn decomposition_sums_to_rotated_inner_product() {
        let g = lcg_tensor(7, 9, 16, 3);
        let rotated = apply_rope(&g, &rope(16).with_grid(7, 9)).unwrap();
        let mut state = 17u64;
        let mut next = |n: usize| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as usize) % n
        };
        for _ in 0..100 {
            let p = (next(7), next(9));
            let q = (next(7), next(9));
            let terms = channel_decomposition(&g, &rope(16), p, q).unwrap();
            assert_eq!(terms.len(), 8);
            let sum: f64 = terms.iter().map(|t| t.a_c).sum();
            assert!((sum - dot(rotated.pixel(p.0, p.1), rotated.pixel(q.0, q.1))).abs() < 1e-5);
            for t in &terms {
                let polar = polar_form(&g, &rope(16), p, q, t.pair_index).unwrap();
                assert!((polar.value() - t.a_c).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn same_position_gives_squared_norm() {
        let g = lcg_tensor(4, 4, 8, 1);
        let terms = channel_decomposition(&g, &rope(8), (2, 1), (2, 1)).unwrap();
        assert!(terms.iter().all(|t| t.delta_phi == 0.0));
        let sum: f64 = terms.iter().map(|t| t.a_c).sum();
        let norm: f64 = g.pixel(2, 1).iter().map(|v| v * v).sum();
        assert!((sum - norm).abs() < 1e-12);
        assert!(channel_decomposition(&g, &rope(8), (4, 0), (0, 0)).is_err());
    }

    #[test]
    fn parallel_pairs_have_no_cross_term() {
        let g = Tensor3::from_fn(3, 3, 4, |y, x, c| (1 + y + x) as f64 * [1.0, 2.0, -0.5, 0.3][c]);
        for t in channel_decomposition(&g, &rope(4), (0, 0), (2, 1)).unwrap() {
            assert!(t.cross.abs() < 1e-12);
            assert!((t.a_c - t.dot * t.delta_phi.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn polar_degenerate_and_unit_cases() {
        let mut g = lcg_tensor(3, 3, 4, 2);
        g.pixel_mut(0, 0).iter_mut().for_each(|v| *v = 0.0);
        let t = polar_form(&g, &rope(4), (0, 0), (1, 2), 1).unwrap();
        assert_eq!((t.r_p, t.psi), (0.0, 0.0));
        assert_eq!(t.value(), 0.0);
        let u = Tensor3::from_fn(3, 3, 4, |_, _, c| if c % 2 == 0 { 1.0 } else { 0.0 });
        let t = polar_form(&u, &rope(4), (1, 1), (1, 1), 0).unwrap();
        assert_eq!(t.value(), 1.0);
        assert!(polar_form(&u, &rope(4), (1, 1), (1, 1), 2).is_err());
    }

    #[test]
    fn pooled_score_matches_attention_logits() {
        let g = lcg_tensor(8, 12, 8, 5);
        let cfg = rope(8).with_grid(8, 12);
        let keys = compute_keys(&apply_rope(&g, &cfg).unwrap(), 4, KeyMode::AvgPool).unwrap();
        let q = apply_rope(&g, &cfg).unwrap();
        for p in [(0, 0), (3, 7), (7, 11)] {
            for cell in [(0, 0), (1, 2), (0, 1)] {
                let s = pooled_score(&g, &rope(8), p, cell, 4).unwrap();
                let logit = dot(q.pixel(p.0, p.1), keys.pixel(cell.0, cell.1));
                assert!((s - logit).abs() < 1e-5);
            }
        }
        let direct: f64 = channel_decomposition(&g, &rope(8), (1, 1), (2, 3))
            .unwrap()
            .iter()
            .map(|t| t.a_c)
            .sum();
        assert!((pooled_score(&g, &rope(8), (1, 1), (2, 3), 1).unwrap() - direct).abs() < 1e-12);
        assert!(pooled_score(&g, &rope(8), (1, 1), (2, 0), 4).is_err());
    }

    #[test]
    fn constant_guidance_pooled_score_is_cosine_mean() {
        let g = Tensor3::filled(3, 3, 4, 0.5);
        let cfg = rope(4).with_grid(3, 3);
        let lambdas = crate::rope::wavelengths(&cfg);
        // 3x3 grid, p at the center: normalized offsets are -1, 0, 1 on each axis
        let s = pooled_score(&g, &rope(4), (1, 1), (0, 0), 3).unwrap();
        let mut expected = 0.0;
        for dy in [-1.0f64, 0.0, 1.0] {
            for dx in [-1.0f64, 0.0, 1.0] {
                let phy = std::f64::consts::TAU * dy / lambdas[0];
                let phx = std::f64::consts::TAU * dx / lambdas[0];
                expected += 0.5 * phy.cos() + 0.5 * phx.cos();
            }
        }
        assert!((s - expected / 9.0).abs() < 1e-12);
    }

    #[test]
    fn trig_maps_center_symmetry_and_monotone_decay() {
        assert!(mean_trig_maps(&rope(8), 4).is_err());
        let cfg = RopeConfig::new(256, DEFAULT_ROPE_BASE, 64, 64).unwrap();
        let (cos_map, sin_map) = mean_trig_maps(&cfg, 9).unwrap();
        assert_eq!(cos_map.get(4, 4, 0), 1.0);
        assert_eq!(sin_map.get(4, 4, 0), 0.0);
        for i in 0..9 {
            for j in 0..9 {
                assert!((sin_map.get(i, j, 0) + sin_map.get(8 - i, 8 - j, 0)).abs() < 1e-9);
            }
        }
        for k in 0..4 {
            assert!(cos_map.get(4, 4 + k + 1, 0) < cos_map.get(4, 4 + k, 0));
            assert!(cos_map.get(4 + k + 1, 4, 0) < cos_map.get(4 + k, 4, 0));
            assert!(cos_map.get(4, 4 - k - 1, 0) < cos_map.get(4, 4 - k, 0));
        }
    }

    #[test]
    fn exported_map_is_normalized_and_rotation_symmetric() {
        let dir = tempfile::tempdir().unwrap();
        let (npy, png) = (dir.path().join("m.npy"), dir.path().join("m.png"));
        let g = Tensor3::<f64>::filled(11, 11, 16, 1.0);
        let cfg = AttnConfig {
            scale: 1,
            kernel: 5,
            positional: PositionalMode::Rope,
            ..AttnConfig::default()
        };
        let map = export_attention_map_from_guidance(&g, &rope(16), &cfg, (5, 5), &npy, &png).unwrap();
        let loaded = crate::npy::load_npy(&npy).unwrap();
        assert_eq!(loaded.dims(), (5, 5, 1));
        assert!((loaded.data().iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(png.exists());
        for i in 0..5 {
            for j in 0..5 {
                assert!((map.get(i, j, 0) - map.get(j, 4 - i, 0)).abs() < 1e-5);
            }
        }
        let one = AttnConfig { kernel: 1, ..cfg };
        let m = export_attention_map_from_guidance(&g, &rope(16), &one, (2, 3), &npy, &png).unwrap();
        assert_eq!(m.data(), &[1.0]);
    }
}
