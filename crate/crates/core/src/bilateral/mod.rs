//! Edge-preserving bilateral filtering.
//!
//! Two paths share one weight definition, `g_σ(x) = exp(-x²/σ²)`:
//!
//! * images (`[H, W, C]`, per-channel): an exact windowed filter, a
//!   bilateral-grid approximation, and the base/residual decomposition built
//!   on the latter;
//! * feature maps (`[N, C, H, W]`): the deep bilateral operator, a
//!   differentiable range-only (optionally range × space) filter recorded on
//!   the tape.
//!
//! Border windows are clipped to valid pixels and the normaliser `k` sums
//! only the weights that were applied.

mod dbo;
mod grid;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dbo::{apply_dbo, dbo, dbo_forward, dbo_full, DboParams};
pub use grid::{bilateral_base_fast, GridSampling};

#[inline]
pub(crate) fn gaussian(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (sigma * sigma)).exp()
}

/// Image-path filter parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilateralParams {
    /// Spatial scale in pixels.
    pub sigma_s: f64,
    /// Range scale in intensity units.
    pub sigma_r: f64,
    /// Odd window side in pixels.
    pub window: usize,
}

impl BilateralParams {
    pub fn new(sigma_s: f64, sigma_r: f64, window: usize) -> Result<Self> {
        let p = BilateralParams {
            sigma_s,
            sigma_r,
            window,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma_s must be > 0, got {}", self.sigma_s)));
        }
        if !(self.sigma_r > 0.0) {
            return Err(Error::InvalidParam(format!("sigma_r must be > 0, got {}", self.sigma_r)));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "window must be odd and >= 1, got {}",
                self.window
            )));
        }
        Ok(())
    }

    /// Window covering ±2σs: `2·ceil(2σs) + 1`.
    pub fn window_for(sigma_s: f64) -> usize {
        2 * (2.0 * sigma_s).ceil() as usize + 1
    }

    /// `σs = min(H, W)/16`, `σr = (max − min)/10`, window `2·ceil(2σs)+1`.
    ///
    /// A constant image has no dynamic range; `σr` then falls back to 1, which
    /// every filter path treats as a no-op anyway.
    pub fn defaults_for(image: &Tensor<f32>) -> Result<Self> {
        let [h, w, _] = image_dims(image)?;
        let sigma_s = h.min(w) as f64 / 16.0;
        let (lo, hi) = min_max(image.data());
        let range = (hi - lo) as f64;
        let sigma_r = if range > 0.0 { range / 10.0 } else { 1.0 };
        Self::new(sigma_s, sigma_r, Self::window_for(sigma_s))
    }
}

/// Base (smoothed) and residual (detail) layers. `base + residual` rebuilds
/// the input because the residual is defined as the difference.
#[derive(Clone, Debug)]
pub struct BilateralDecomposition {
    pub base: Tensor<f32>,
    pub residual: Tensor<f32>,
}

impl BilateralDecomposition {
    pub fn reconstruct(&self) -> Tensor<f32> {
        let data = self
            .base
            .data()
            .iter()
            .zip(self.residual.data())
            .map(|(b, r)| b + r)
            .collect();
        Tensor::new(self.base.shape().to_vec(), data).expect("same shape")
    }
}

pub(crate) fn image_dims(image: &Tensor<f32>) -> Result<[usize; 3]> {
    match image.shape()[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok([h, w, c]),
        _ => Err(Error::shape(
            "bilateral",
            format!("expected an [H, W, C] image, got {:?}", image.shape()),
        )),
    }
}

pub(crate) fn min_max(data: &[f32]) -> (f32, f32) {
    data.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Exact windowed bilateral filter, each channel independent.
pub fn bilateral_base_direct(image: &Tensor<f32>, p: &BilateralParams) -> Result<Tensor<f32>> {
    p.validate()?;
    let [h, w, c] = image_dims(image)?;
    let r = (p.window / 2) as isize;
    let side = p.window;
    let spatial: Vec<f64> = (0..side * side)
        .map(|i| {
            let dy = (i / side) as f64 - r as f64;
            let dx = (i % side) as f64 - r as f64;
            gaussian((dy * dy + dx * dx).sqrt(), p.sigma_s)
        })
        .collect();
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h as isize {
        let y0 = (y - r).max(0);
        let y1 = (y + r).min(h as isize - 1);
        for x in 0..w as isize {
            let x0 = (x - r).max(0);
            let x1 = (x + r).min(w as isize - 1);
            for ch in 0..c {
                let centre = src[(y as usize * w + x as usize) * c + ch] as f64;
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for qy in y0..=y1 {
                    let srow = ((qy - y + r) as usize) * side;
                    for qx in x0..=x1 {
                        let v = src[(qy as usize * w + qx as usize) * c + ch] as f64;
                        let wt = spatial[srow + (qx - x + r) as usize] * gaussian(v - centre, p.sigma_r);
                        num += wt * v;
                        den += wt;
                    }
                }
                out[(y as usize * w + x as usize) * c + ch] = (num / den) as f32;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Base layer from the fast filter; residual is `image − base`.
pub fn bilateral_decompose(image: &Tensor<f32>, p: &BilateralParams) -> Result<BilateralDecomposition> {
    let base = bilateral_base_fast(image, p)?;
    let residual = image
        .data()
        .iter()
        .zip(base.data())
        .map(|(i, b)| i - b)
        .collect();
    Ok(BilateralDecomposition {
        residual: Tensor::new(image.shape().to_vec(), residual)?,
        base,
    })
}

/// Peak signal-to-noise ratio in dB for signals with unit peak.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x as f64) - (*y as f64);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
