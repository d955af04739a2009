//! Bicubic resampling and Laplacian pyramids at fractional ratios.
//!
//! Downsampling by a non-integer ratio is done in one step: the bicubic kernel
//! is stretched by the scale factor, which folds the lowpass filter into the
//! interpolation. Each pyramid level is therefore
//!
//! ```text
//! y[k+1] = resample(y[k], size[k] / rho)
//! z[k]   = y[k] - resample(y[k+1], size[k])
//! z[K]   = y[K]
//! ```
//!
//! and folding `y[k] = z[k] + resample(y[k+1], size[k])` from the residual
//! upward recovers the input up to rounding.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;

/// Catmull-Rom parameter of the cubic convolution kernel.
pub const BICUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = BICUBIC_A`.
#[inline]
pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// `floor(x + 0.5)`, i.e. round half up.
#[inline]
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Source taps (clamped index, normalized weight) for one output position.
type Taps = Vec<(usize, f64)>;

/// Taps for every output sample along one axis.
///
/// Output sample `o` sits at source coordinate `(o + 0.5) * in/out - 0.5`
/// (half-pixel centers). When shrinking, the kernel is widened by the scale
/// factor so it also acts as the anti-aliasing lowpass. Out-of-range source
/// indices are clamped to the edge.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let radius = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - radius).floor() as i64;
            let hi = (center + radius).ceil() as i64;
            let mut taps: Taps = (lo..=hi)
                .filter_map(|i| {
                    let w = cubic_kernel((i as f64 - center) / stretch);
                    (w != 0.0).then(|| (i.clamp(0, in_len as i64 - 1) as usize, w))
                })
                .collect();
            let sum: f64 = taps.iter().map(|&(_, w)| w).sum();
            for t in &mut taps {
                t.1 /= sum;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resampling of every channel to `out_h × out_w`.
pub fn bicubic_resample<T: Float>(img: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("resample target must be positive, got {out_h}x{out_w}"));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let cast = |v: f64| T::from(v).unwrap();
    let x_taps: Vec<Vec<(usize, T)>> = axis_taps(w, out_w)
        .into_iter()
        .map(|t| t.into_iter().map(|(i, wt)| (i, cast(wt))).collect())
        .collect();
    let y_taps: Vec<Vec<(usize, T)>> = axis_taps(h, out_h)
        .into_iter()
        .map(|t| t.into_iter().map(|(i, wt)| (i, cast(wt))).collect())
        .collect();

    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = vec![T::zero(); h * out_w];
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            let dst = &mut rows[y * out_w..(y + 1) * out_w];
            for (d, taps) in dst.iter_mut().zip(&x_taps) {
                *d = taps.iter().fold(T::zero(), |acc, &(i, wt)| acc + wt * src[i]);
            }
        }
        for taps in &y_taps {
            for x in 0..out_w {
                out.push(
                    taps.iter()
                        .fold(T::zero(), |acc, &(i, wt)| acc + wt * rows[i * out_w + x]),
                );
            }
        }
    }
    Image::new(c, out_h, out_w, out)
}

/// How the per-level downsampling ratio is derived from the frame and base sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RhoMode {
    /// `min(H, W) / (min(Hb, Wb) * K)`.
    #[default]
    Linear,
    /// `(min(H, W) / min(Hb, Wb))^(1/K)`: level `K` lands on the base size.
    Geometric,
}

/// Per-level downsampling ratio, clamped below at 1 (pyramids never upsample).
pub fn compute_rho(
    h: usize,
    w: usize,
    hb: usize,
    wb: usize,
    k_levels: usize,
    mode: RhoMode,
) -> Result<f64> {
    if h == 0 || w == 0 || hb == 0 || wb == 0 || k_levels == 0 {
        return Err(invalid!(
            "compute_rho needs positive inputs, got h={h} w={w} hb={hb} wb={wb} k={k_levels}"
        ));
    }
    let actual = h.min(w) as f64;
    let base = hb.min(wb) as f64;
    let rho = match mode {
        RhoMode::Linear => actual / (base * k_levels as f64),
        RhoMode::Geometric => (actual / base).powf(1.0 / k_levels as f64),
    };
    Ok(rho.max(1.0))
}

/// Sizes of levels `0..=k_levels` under the `max(1, round(size / rho))` recursion.
pub fn level_sizes(h: usize, w: usize, rho: f64, k_levels: usize) -> Vec<(usize, usize)> {
    let mut sizes = Vec::with_capacity(k_levels + 1);
    let (mut ch, mut cw) = (h, w);
    sizes.push((ch, cw));
    for _ in 0..k_levels {
        ch = round_half_up(ch as f64 / rho).max(1);
        cw = round_half_up(cw as f64 / rho).max(1);
        sizes.push((ch, cw));
    }
    sizes
}

#[derive(Debug, Clone)]
pub struct LaplacianPyramid<T = f32> {
    /// Bandpass subbands `z[0..K]`, finest first.
    pub subbands: Vec<Image<T>>,
    /// Lowpass residual `z[K] = y[K]`.
    pub residual: Image<T>,
    /// `(height, width)` of `y[0..=K]`.
    pub level_sizes: Vec<(usize, usize)>,
    pub rho: f64,
}

impl<T: Float> LaplacianPyramid<T> {
    pub fn levels(&self) -> usize {
        self.subbands.len()
    }

    /// Folds the subbands back onto the residual, finest level last.
    pub fn reconstruct(&self) -> Result<Image<T>> {
        let mut y = self.residual.clone();
        for (z, &(h, w)) in self.subbands.iter().zip(&self.level_sizes).rev() {
            y = z.add(&bicubic_resample(&y, h, w)?);
        }
        Ok(y)
    }
}

/// Decomposes `frame` into `k_levels` bandpass subbands and a lowpass residual.
pub fn build_pyramid<T: Float>(
    frame: &Image<T>,
    rho: f64,
    k_levels: usize,
) -> Result<LaplacianPyramid<T>> {
    if k_levels == 0 {
        return Err(invalid!("pyramid needs at least one level"));
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(invalid!("pyramid ratio must be positive and finite, got {rho}"));
    }
    let sizes = level_sizes(frame.height(), frame.width(), rho, k_levels);
    let mut subbands = Vec::with_capacity(k_levels);
    let mut current = frame.clone();
    for k in 0..k_levels {
        let (nh, nw) = sizes[k + 1];
        if nh == 0 || nw == 0 {
            return Err(invalid!("pyramid level {} collapsed below 1x1", k + 1));
        }
        let next = bicubic_resample(&current, nh, nw)?;
        let up = bicubic_resample(&next, sizes[k].0, sizes[k].1)?;
        subbands.push(current.sub(&up));
        current = next;
    }
    Ok(LaplacianPyramid {
        subbands,
        residual: current,
        level_sizes: sizes,
        rho,
    })
}

/// Brings every bandpass subband to `h × w`; the residual is dropped.
pub fn upsample_subbands<T: Float>(
    pyramid: &LaplacianPyramid<T>,
    h: usize,
    w: usize,
) -> Result<Vec<Image<T>>> {
    pyramid
        .subbands
        .iter()
        .map(|z| bicubic_resample(z, h, w))
        .collect()
}
