//! Joint bilateral filtering and joint bilateral upsampling.
//!
//! Window sums are accumulated column pair by column pair (`-j` together with
//! `+j`), so mirroring both inputs horizontally mirrors the output exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Real, Tensor3};

pub const DEFAULT_RADIUS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilateralConfig {
    /// Spatial width: pixels for [`jbf`], low-resolution cells for [`jbu`].
    pub sigma_s: f64,
    /// Range width in guidance units.
    pub sigma_r: f64,
    pub radius: usize,
}

impl Default for BilateralConfig {
    fn default() -> Self {
        Self {
            sigma_s: 2.0,
            sigma_r: 0.1,
            radius: DEFAULT_RADIUS,
        }
    }
}

impl BilateralConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s > 0.0) || !(self.sigma_r > 0.0) {
            return config_err(format!(
                "sigma_s and sigma_r must be positive, got {} and {}",
                self.sigma_s, self.sigma_r
            ));
        }
        Ok(())
    }
}

fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    let mut d = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        d += (x - y) * (x - y);
    }
    d
}

/// Running `(sum w, sum w (v - base))` for one output position.
struct Accum<T> {
    weight: T,
    value: Vec<T>,
}

impl<T: Real> Accum<T> {
    fn new(channels: usize) -> Self {
        Self {
            weight: T::zero(),
            value: vec![T::zero(); channels],
        }
    }

    fn add(&mut self, other: &Self) {
        self.weight += other.weight;
        for (a, &b) in self.value.iter_mut().zip(&other.value) {
            *a += b;
        }
    }

    fn clear(&mut self) {
        self.weight = T::zero();
        self.value.iter_mut().for_each(|v| *v = T::zero());
    }

    fn push(&mut self, w: T, v: &[T], base: &[T]) {
        self.weight += w;
        for ((a, &x), &b) in self.value.iter_mut().zip(v).zip(base) {
            *a += w * (x - b);
        }
    }

    fn finish(&self, base: &[T], out: &mut [T]) {
        for ((o, &a), &b) in out.iter_mut().zip(&self.value).zip(base) {
            *o = b + a / self.weight;
        }
    }
}

/// Visits the window columns `center - r ..= center + r` (clipped to
/// `0..width`) in mirror-symmetric pairs: `acc` receives `visit(center)`, then
/// `visit(center - j) + visit(center + j)` for `j = 1..=r`.
fn paired_columns<T: Real>(
    center: usize,
    radius: usize,
    width: usize,
    acc: &mut Accum<T>,
    left: &mut Accum<T>,
    right: &mut Accum<T>,
    mut visit: impl FnMut(usize, &mut Accum<T>),
) {
    visit(center, acc);
    for j in 1..=radius {
        left.clear();
        right.clear();
        if center >= j {
            visit(center - j, left);
        }
        if center + j < width {
            visit(center + j, right);
        }
        left.add(right);
        acc.add(left);
    }
}

/// Joint bilateral filter of `signal` steered by `guidance`.
pub fn jbf<T: Real>(signal: &Tensor3<T>, guidance: &Tensor3<T>, cfg: &BilateralConfig) -> Result<Tensor3<T>> {
    cfg.validate()?;
    let (h, w, d) = signal.dims();
    if guidance.height() != h || guidance.width() != w {
        return shape_err(format!(
            "signal is {h}x{w}, guidance is {}x{}",
            guidance.height(),
            guidance.width()
        ));
    }
    let r = cfg.radius;
    let inv_s = T::lit(1.0 / (2.0 * cfg.sigma_s * cfg.sigma_s));
    let inv_r = T::lit(1.0 / (2.0 * cfg.sigma_r * cfg.sigma_r));
    let mut out = Tensor3::zeros(h, w, d);
    out.data_mut().par_chunks_mut(w * d).enumerate().for_each(|(y, row)| {
        let (mut total, mut acc, mut left, mut right) =
            (Accum::new(d), Accum::new(d), Accum::new(d), Accum::new(d));
        for x in 0..w {
            let gp = guidance.pixel(y, x);
            let base = signal.pixel(y, x);
            total.clear();
            for qy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                let dy = T::lit((qy as f64 - y as f64).powi(2));
                acc.clear();
                paired_columns(x, r, w, &mut acc, &mut left, &mut right, |qx, a| {
                    let dx = T::lit((qx as f64 - x as f64).powi(2));
                    let range = squared_distance(gp, guidance.pixel(qy, qx));
                    let wt = (-(dx + dy) * inv_s - range * inv_r).exp();
                    a.push(wt, signal.pixel(qy, qx), base);
                });
                total.add(&acc);
            }
            total.finish(base, &mut row[x * d..(x + 1) * d]);
        }
    });
    Ok(out)
}

/// Plain normalized Gaussian filter over a `(2r+1)^2` window truncated at
/// the borders.
pub fn gaussian_filter<T: Real>(signal: &Tensor3<T>, sigma: f64, radius: usize) -> Result<Tensor3<T>> {
    if !(sigma > 0.0) {
        return config_err(format!("sigma must be positive, got {sigma}"));
    }
    let (h, w, d) = signal.dims();
    let mut out = Tensor3::zeros(h, w, d);
    for y in 0..h {
        for x in 0..w {
            let mut z = 0.0;
            let mut acc = vec![0.0; d];
            for qy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                for qx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                    let dy = qy as f64 - y as f64;
                    let dx = qx as f64 - x as f64;
                    let wt = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    z += wt;
                    for (a, v) in acc.iter_mut().zip(signal.pixel(qy, qx)) {
                        *a += wt * v.as_f64();
                    }
                }
            }
            for (o, a) in out.pixel_mut(y, x).iter_mut().zip(acc) {
                *o = T::lit(a / z);
            }
        }
    }
    Ok(out)
}

/// Guidance value at the center of low-resolution `cell`: the mean of the
/// one, two or four central high-resolution pixels.
fn cell_center_guidance<T: Real>(g: &Tensor3<T>, cell: (usize, usize), s: usize, out: &mut [T]) {
    let (r0, r1) = (cell.0 * s + (s - 1) / 2, cell.0 * s + s / 2);
    let (c0, c1) = (cell.1 * s + (s - 1) / 2, cell.1 * s + s / 2);
    let quarter = T::lit(0.25);
    for (ch, o) in out.iter_mut().enumerate() {
        let top = g.get(r0, c0, ch) + g.get(r0, c1, ch);
        let bottom = g.get(r1, c0, ch) + g.get(r1, c1, ch);
        *o = (top + bottom) * quarter;
    }
}

/// Joint bilateral upsampling of `f_lr` by `s` with high-resolution guidance.
///
/// The spatial term measures the distance from `p` (mapped to low-resolution
/// units with half-pixel centers) to each cell center; the range term compares
/// the guidance at `p` with the guidance at each cell's center.
pub fn jbu<T: Real>(
    f_lr: &Tensor3<T>,
    guidance_hr: &Tensor3<T>,
    s: usize,
    cfg: &BilateralConfig,
) -> Result<Tensor3<T>> {
    cfg.validate()?;
    if s == 0 {
        return config_err("scale must be at least 1");
    }
    let (hl, wl, d) = f_lr.dims();
    let (h, w) = (hl * s, wl * s);
    if guidance_hr.height() != h || guidance_hr.width() != w {
        return shape_err(format!(
            "guidance is {}x{}, expected {h}x{w} for scale {s}",
            guidance_hr.height(),
            guidance_hr.width()
        ));
    }
    let gc = guidance_hr.channels();
    let mut centers = Tensor3::zeros(hl, wl, gc);
    for cy in 0..hl {
        for cx in 0..wl {
            cell_center_guidance(guidance_hr, (cy, cx), s, centers.pixel_mut(cy, cx));
        }
    }
    let r = cfg.radius;
    // offsets are kept in units of 1/(2s) low-res cells so they stay exact
    // integers: (2p + 1) - (2c + 1) s
    let scale_sq = (2 * s * 2 * s) as f64;
    let inv_s = T::lit(1.0 / (2.0 * cfg.sigma_s * cfg.sigma_s * scale_sq));
    let inv_r = T::lit(1.0 / (2.0 * cfg.sigma_r * cfg.sigma_r));
    let offset = |p: usize, c: usize| (2 * p + 1) as f64 - ((2 * c + 1) * s) as f64;
    let mut out = Tensor3::zeros(h, w, d);
    out.data_mut().par_chunks_mut(w * d).enumerate().for_each(|(y, row)| {
        let (mut total, mut acc, mut left, mut right) =
            (Accum::new(d), Accum::new(d), Accum::new(d), Accum::new(d));
        let ay = y / s;
        for x in 0..w {
            let ax = x / s;
            let gp = guidance_hr.pixel(y, x);
            let base = f_lr.pixel(ay, ax);
            total.clear();
            for cy in ay.saturating_sub(r)..=(ay + r).min(hl - 1) {
                let oy = T::lit(offset(y, cy).powi(2));
                acc.clear();
                paired_columns(ax, r, wl, &mut acc, &mut left, &mut right, |cx, a| {
                    let ox = T::lit(offset(x, cx).powi(2));
                    let range = squared_distance(gp, centers.pixel(cy, cx));
                    let wt = (-(ox + oy) * inv_s - range * inv_r).exp();
                    a.push(wt, f_lr.pixel(cy, cx), base);
                });
                total.add(&acc);
            }
            total.finish(base, &mut row[x * d..(x + 1) * d]);
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::lcg_tensor;
    use proptest::prelude::*;

    fn cfg(sigma_s: f64, sigma_r: f64, radius: usize) -> BilateralConfig {
        BilateralConfig {
            sigma_s,
            sigma_r,
            radius,
        }
    }

    #[test]
    fn constant_guidance_huge_sigma_is_box_mean() {
        let sig = lcg_tensor(7, 6, 2, 1);
        let g = Tensor3::filled(7, 6, 3, 0.5);
        let out = jbf(&sig, &g, &cfg(1e9, 0.1, 2)).unwrap();
        for y in 0..7usize {
            for x in 0..6usize {
                for ch in 0..2 {
                    let (mut s, mut n) = (0.0, 0.0);
                    for qy in y.saturating_sub(2)..=(y + 2).min(6) {
                        for qx in x.saturating_sub(2)..=(x + 2).min(5) {
                            s += sig.get(qy, qx, ch);
                            n += 1.0;
                        }
                    }
                    assert!((out.get(y, x, ch) - s / n).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn constant_signal_is_exact() {
        let sig = Tensor3::<f32>::filled(6, 5, 3, 0.37);
        let g = lcg_tensor(6, 5, 3, 2).cast::<f32>();
        let out = jbf(&sig, &g, &cfg(1.5, 0.2, 3)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.37));
        let lr = Tensor3::<f32>::filled(3, 3, 2, -0.81);
        let hr = lcg_tensor(6, 6, 3, 3).cast::<f32>();
        let out = jbu(&lr, &hr, 2, &cfg(1.0, 0.2, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == -0.81));
    }

    #[test]
    fn impulse_response_is_gaussian_kernel() {
        let mut sig = Tensor3::<f64>::zeros(5, 5, 1);
        sig.set(2, 2, 0, 1.0);
        let g = Tensor3::filled(5, 5, 1, 0.0);
        let out = jbf(&sig, &g, &cfg(1.0, 1.0, 2)).unwrap();
        let z: f64 = (-2i32..=2)
            .flat_map(|i| (-2i32..=2).map(move |j| (-((i * i + j * j) as f64) / 2.0).exp()))
            .sum();
        // the center pixel sees the full window; its value is exp(0)/Z
        assert!((out.get(2, 2, 0) - 1.0 / z).abs() < 1e-12);
        // every pixel sees the impulse; off-center windows are truncated
        for y in 0..5usize {
            for x in 0..5usize {
                let zy: f64 = (y.saturating_sub(2)..=(y + 2).min(4))
                    .flat_map(|qy| (x.saturating_sub(2)..=(x + 2).min(4)).map(move |qx| (qy, qx)))
                    .map(|(qy, qx)| {
                        let d = (qy as f64 - y as f64).powi(2) + (qx as f64 - x as f64).powi(2);
                        (-d / 2.0).exp()
                    })
                    .sum();
                let d = (y as f64 - 2.0).powi(2) + (x as f64 - 2.0).powi(2);
                assert!((out.get(y, x, 0) - (-d / 2.0).exp() / zy).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jbu_identity_at_scale_one_radius_zero() {
        let f = lcg_tensor(4, 5, 3, 1).cast::<f32>();
        let g = lcg_tensor(4, 5, 3, 2).cast::<f32>();
        assert_eq!(jbu(&f, &g, 1, &cfg(1.0, 0.1, 0)).unwrap(), f);
    }

    #[test]
    fn jbu_matches_nested_loop_oracle() {
        let f = lcg_tensor(3, 3, 2, 5);
        let g = lcg_tensor(6, 6, 3, 6).map(|v| 0.5 + 0.5 * v);
        let (ss, sr, r) = (1.3, 0.4, 1usize);
        let out = jbu(&f, &g, 2, &cfg(ss, sr, r)).unwrap();
        for y in 0..6usize {
            for x in 0..6usize {
                let (ay, ax) = (y / 2, x / 2);
                let (py, px) = ((y as f64 + 0.5) / 2.0 - 0.5, (x as f64 + 0.5) / 2.0 - 0.5);
                let mut z = 0.0;
                let mut acc = [0.0; 2];
                for cy in ay.saturating_sub(r)..=(ay + r).min(2) {
                    for cx in ax.saturating_sub(r)..=(ax + r).min(2) {
                        let mut gc = [0.0; 3];
                        for (ch, v) in gc.iter_mut().enumerate() {
                            *v = (g.get(2 * cy, 2 * cx, ch)
                                + g.get(2 * cy, 2 * cx + 1, ch)
                                + g.get(2 * cy + 1, 2 * cx, ch)
                                + g.get(2 * cy + 1, 2 * cx + 1, ch))
                                / 4.0;
                        }
                        let range: f64 = (0..3).map(|ch| (g.get(y, x, ch) - gc[ch]).powi(2)).sum();
                        let sp = (py - cy as f64).powi(2) + (px - cx as f64).powi(2);
                        let wt = (-sp / (2.0 * ss * ss) - range / (2.0 * sr * sr)).exp();
                        z += wt;
                        for ch in 0..2 {
                            acc[ch] += wt * f.get(cy, cx, ch);
                        }
                    }
                }
                for ch in 0..2 {
                    assert!((out.get(y, x, ch) - acc[ch] / z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn range_limit_is_gaussian_filter() {
        let sig = lcg_tensor(9, 8, 2, 3);
        let g = lcg_tensor(9, 8, 3, 4);
        let a = jbf(&sig, &g, &cfg(1.7, 1e6, 3)).unwrap();
        let b = gaussian_filter(&sig, 1.7, 3).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-4);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor3::<f32>::zeros(4, 4, 1);
        assert!(jbf(&a, &Tensor3::zeros(4, 5, 3), &BilateralConfig::default()).is_err());
        assert!(jbu(&a, &Tensor3::zeros(7, 8, 3), 2, &BilateralConfig::default()).is_err());
        assert!(jbf(&a, &a, &cfg(0.0, 1.0, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_are_convex_and_mirror_exact(seed in 0u64..1000, s in 1usize..4, r in 0usize..3) {
            let f = lcg_tensor(3, 4, 2, seed).cast::<f32>();
            let g = lcg_tensor(3 * s, 4 * s, 3, seed + 1).cast::<f32>();
            let c = cfg(1.0, 0.3, r);
            let up = jbu(&f, &g, s, &c).unwrap();
            let mirrored = jbu(&f.flip_horizontal(), &g.flip_horizontal(), s, &c).unwrap();
            prop_assert_eq!(&mirrored, &up.flip_horizontal());
            let (lo, hi): (Vec<_>, Vec<_>) = f.channel_range().into_iter().unzip();
            for px in up.data().chunks(2) {
                for ch in 0..2 {
                    prop_assert!(px[ch] >= lo[ch] - 1e-6 && px[ch] <= hi[ch] + 1e-6);
                }
            }

            let sig = lcg_tensor(5, 6, 2, seed + 2).cast::<f32>();
            let gg = lcg_tensor(5, 6, 3, seed + 3).cast::<f32>();
            let out = jbf(&sig, &gg, &c).unwrap();
            let m = jbf(&sig.flip_horizontal(), &gg.flip_horizontal(), &c).unwrap();
            prop_assert_eq!(&m, &out.flip_horizontal());
            let (lo, hi): (Vec<_>, Vec<_>) = sig.channel_range().into_iter().unzip();
            for px in out.data().chunks(2) {
                for ch in 0..2 {
                    prop_assert!(px[ch] >= lo[ch] - 1e-6 && px[ch] <= hi[ch] + 1e-6);
                }
            }
        }
    }
}
