//! Two-dimensional axial rotary position embeddings.
//!
//! Channels are grouped into adjacent pairs `(2c, 2c + 1)`. The first quarter
//! of the pairs rotates with the normalized row coordinate, the second quarter
//! with the normalized column coordinate:
//!
//! ```text
//! phi_c(p) = 2*pi * p_y / lambda_c           for c <  C/4
//! phi_c(p) = 2*pi * p_x / lambda_{c - C/4}   for c >= C/4
//! lambda_i = base^(i / (C/4))
//! ```
//!
//! Coordinates are mapped affinely onto `[-1, 1]` with both ends included; a
//! grid axis of length one maps to `0`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, NafError, Result};
use crate::tensor::{Real, Tensor3};

pub const DEFAULT_ROPE_BASE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub channels: usize,
    pub base: f64,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// One rotation angle per channel pair, in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVector {
    pub angles: Vec<f64>,
}

impl RopeConfig {
    pub fn new(channels: usize, base: f64, grid_h: usize, grid_w: usize) -> Result<Self> {
        let cfg = Self {
            channels,
            base,
            grid_h,
            grid_w,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return config_err(format!(
                "RoPE channels must be a positive multiple of 4, got {}",
                self.channels
            ));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return config_err(format!("RoPE base must be > 1, got {}", self.base));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return config_err("RoPE grid must be non-empty");
        }
        Ok(())
    }

    /// Same frequencies, normalized against another grid.
    pub fn with_grid(&self, grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            ..*self
        }
    }

    pub fn pairs(&self) -> usize {
        self.channels / 2
    }

    /// Frequency bands per axis.
    pub fn bands(&self) -> usize {
        self.channels / 4
    }

    fn check_position(&self, (row, col): (usize, usize)) -> Result<()> {
        if row >= self.grid_h || col >= self.grid_w {
            return Err(NafError::Bounds {
                row,
                col,
                height: self.grid_h,
                width: self.grid_w,
            });
        }
        Ok(())
    }
}

/// Maps index `i` of an axis of length `n` onto `[-1, 1]`.
#[inline]
pub fn normalize_coord(i: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i / (n - 1) as f64
    }
}

pub fn wavelengths(cfg: &RopeConfig) -> Vec<f64> {
    let n = cfg.bands();
    (0..n).map(|i| cfg.base.powf(i as f64 / n as f64)).collect()
}

fn angles_at(cfg: &RopeConfig, lambdas: &[f64], row: usize, col: usize) -> Vec<f64> {
    let py = normalize_coord(row as f64, cfg.grid_h);
    let px = normalize_coord(col as f64, cfg.grid_w);
    lambdas
        .iter()
        .map(|l| TAU * py / l)
        .chain(lambdas.iter().map(|l| TAU * px / l))
        .collect()
}

pub fn phase_angles(cfg: &RopeConfig, row: usize, col: usize) -> Result<PhaseVector> {
    cfg.validate()?;
    cfg.check_position((row, col))?;
    Ok(PhaseVector {
        angles: angles_at(cfg, &wavelengths(cfg), row, col),
    })
}

/// `phi(q) - phi(p)` per pair.
pub fn relative_phase(cfg: &RopeConfig, p: (usize, usize), q: (usize, usize)) -> Result<PhaseVector> {
    let a = phase_angles(cfg, p.0, p.1)?;
    let b = phase_angles(cfg, q.0, q.1)?;
    Ok(PhaseVector {
        angles: b.angles.iter().zip(&a.angles).map(|(x, y)| x - y).collect(),
    })
}

/// Per-axis `(cos, sin)` tables: `rows[r][i]` for height bands and
/// `cols[c][i]` for width bands.
struct TrigTables<T> {
    rows: Vec<Vec<(T, T)>>,
    cols: Vec<Vec<(T, T)>>,
}

impl<T: Real> TrigTables<T> {
    fn new(cfg: &RopeConfig, sign: f64) -> Self {
        let lambdas = wavelengths(cfg);
        let table = |n: usize| -> Vec<Vec<(T, T)>> {
            (0..n)
                .map(|i| {
                    let p = normalize_coord(i as f64, n);
                    lambdas
                        .iter()
                        .map(|l| {
                            let a = sign * TAU * p / l;
                            (T::lit(a.cos()), T::lit(a.sin()))
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            rows: table(cfg.grid_h),
            cols: table(cfg.grid_w),
        }
    }
}

fn rotate<T: Real>(g: &Tensor3<T>, cfg: &RopeConfig, sign: f64) -> Result<Tensor3<T>> {
    cfg.validate()?;
    if g.channels() != cfg.channels {
        return shape_err(format!(
            "tensor has {} channels, RoPE is configured for {}",
            g.channels(),
            cfg.channels
        ));
    }
    if g.height() != cfg.grid_h || g.width() != cfg.grid_w {
        return shape_err(format!(
            "tensor grid {}x{} does not match RoPE grid {}x{}",
            g.height(),
            g.width(),
            cfg.grid_h,
            cfg.grid_w
        ));
    }
    let tables = TrigTables::<T>::new(cfg, sign);
    let bands = cfg.bands();
    let mut out = g.clone();
    for y in 0..g.height() {
        for x in 0..g.width() {
            let px = out.pixel_mut(y, x);
            for c in 0..2 * bands {
                let (cos, sin) = if c < bands {
                    tables.rows[y][c]
                } else {
                    tables.cols[x][c - bands]
                };
                let (a, b) = (px[2 * c], px[2 * c + 1]);
                px[2 * c] = cos * a - sin * b;
                px[2 * c + 1] = sin * a + cos * b;
            }
        }
    }
    Ok(out)
}

/// Rotates every channel pair of `g` by its position's phase.
pub fn apply_rope<T: Real>(g: &Tensor3<T>, cfg: &RopeConfig) -> Result<Tensor3<T>> {
    rotate(g, cfg, 1.0)
}

/// Adjoint of [`apply_rope`]: rotation by the negated phase.
pub fn apply_rope_backward<T: Real>(grad_out: &Tensor3<T>, cfg: &RopeConfig) -> Result<Tensor3<T>> {
    rotate(grad_out, cfg, -1.0)
}
