//! Bilateral-grid approximation of the image filter.
//!
//! Each channel is splatted into a coarse 3-D grid (x, y, intensity) of
//! homogeneous `(value·w, w)` pairs with trilinear weights, the grid is
//! blurred by separable kernels built from the same Gaussians as the exact
//! filter, and the result is sliced back out with trilinear interpolation.

use super::{gaussian, image_dims, min_max, BilateralParams};
use crate::error::Result;
use crate::tensor::Tensor;

/// How finely the grid samples each axis, as divisions per sigma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSampling {
    pub spatial: f64,
    pub range: f64,
}

impl Default for GridSampling {
    fn default() -> Self {
        GridSampling {
            spatial: 2.0,
            range: 4.0,
        }
    }
}

/// Range blur is truncated where the weight drops below `exp(-9)`.
const RANGE_EXTENT_SIGMAS: f64 = 3.0;

struct Grid {
    nx: usize,
    ny: usize,
    nz: usize,
    /// Interleaved (weighted value, weight).
    cells: Vec<[f64; 2]>,
}

impl Grid {
    fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Grid {
            nx,
            ny,
            nz,
            cells: vec![[0.0; 2]; nx * ny * nz],
        }
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    /// Trilinear corner weights for a continuous position.
    #[inline]
    fn corners(&self, fx: f64, fy: f64, fz: f64) -> [(usize, f64); 8] {
        let (x0, y0, z0) = (fx.floor(), fy.floor(), fz.floor());
        let (tx, ty, tz) = (fx - x0, fy - y0, fz - z0);
        let (x0, y0, z0) = (x0 as usize, y0 as usize, z0 as usize);
        let mut out = [(0usize, 0.0f64); 8];
        for (i, slot) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = (i & 1, (i >> 1) & 1, (i >> 2) & 1);
            let wx = if dx == 1 { tx } else { 1.0 - tx };
            let wy = if dy == 1 { ty } else { 1.0 - ty };
            let wz = if dz == 1 { tz } else { 1.0 - tz };
            *slot = (self.idx(x0 + dx, y0 + dy, z0 + dz), wx * wy * wz);
        }
        out
    }

    fn blur_axis(&mut self, axis: usize, kernel: &[f64]) {
        let r = (kernel.len() / 2) as isize;
        let (len, stride) = match axis {
            0 => (self.nx, 1),
            1 => (self.ny, self.nx),
            _ => (self.nz, self.nx * self.ny),
        };
        let mut line = vec![[0.0f64; 2]; len];
        let lines: Vec<usize> = (0..self.cells.len())
            .filter(|&i| {
                let coord = match axis {
                    0 => i % self.nx,
                    1 => (i / self.nx) % self.ny,
                    _ => i / (self.nx * self.ny),
                };
                coord == 0
            })
            .collect();
        for start in lines {
            for (j, slot) in line.iter_mut().enumerate() {
                *slot = self.cells[start + j * stride];
            }
            for j in 0..len as isize {
                let mut acc = [0.0f64; 2];
                for (t, &kw) in kernel.iter().enumerate() {
                    let src = j + t as isize - r;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let c = line[src as usize];
                    acc[0] += kw * c[0];
                    acc[1] += kw * c[1];
                }
                self.cells[start + j as usize * stride] = acc;
            }
        }
    }
}

fn kernel(radius: usize, step: f64, sigma: f64) -> Vec<f64> {
    (0..=2 * radius)
        .map(|i| gaussian((i as f64 - radius as f64) * step, sigma))
        .collect()
}

/// Fast approximation of [`super::bilateral_base_direct`] with default grid
/// sampling.
pub fn bilateral_base_fast(image: &Tensor<f32>, p: &BilateralParams) -> Result<Tensor<f32>> {
    bilateral_base_grid(image, p, GridSampling::default())
}

/// Bilateral-grid filter with explicit sampling. Channels with no dynamic
/// range are returned unchanged.
pub fn bilateral_base_grid(
    image: &Tensor<f32>,
    p: &BilateralParams,
    sampling: GridSampling,
) -> Result<Tensor<f32>> {
    p.validate()?;
    let [h, w, c] = image_dims(image)?;
    let src = image.data();
    let mut out = src.to_vec();

    let ss = p.sigma_s / sampling.spatial;
    let sr = p.sigma_r / sampling.range;
    let half_window = (p.window / 2) as f64;
    let rs = (half_window / ss).round().max(1.0) as usize;
    let rr = (RANGE_EXTENT_SIGMAS * p.sigma_r / sr).ceil().max(1.0) as usize;
    let ks = kernel(rs, ss, p.sigma_s);
    let kr = kernel(rr, sr, p.sigma_r);

    let mut channel = vec![0.0f32; h * w];
    for ch in 0..c {
        for (i, v) in channel.iter_mut().enumerate() {
            *v = src[i * c + ch];
        }
        let (lo, hi) = min_max(&channel);
        if hi <= lo {
            continue;
        }
        let lo = lo as f64;
        let nx = ((w - 1) as f64 / ss).floor() as usize + 2 + 2 * rs;
        let ny = ((h - 1) as f64 / ss).floor() as usize + 2 + 2 * rs;
        let nz = ((hi as f64 - lo) / sr).floor() as usize + 2 + 2 * rr;
        let mut grid = Grid::new(nx, ny, nz);
        let pos = |y: usize, x: usize, v: f32| {
            (
                x as f64 / ss + rs as f64,
                y as f64 / ss + rs as f64,
                (v as f64 - lo) / sr + rr as f64,
            )
        };

        for y in 0..h {
            for x in 0..w {
                let v = channel[y * w + x];
                let (fx, fy, fz) = pos(y, x, v);
                for (i, wt) in grid.corners(fx, fy, fz) {
                    grid.cells[i][0] += wt * v as f64;
                    grid.cells[i][1] += wt;
                }
            }
        }
        grid.blur_axis(0, &ks);
        grid.blur_axis(1, &ks);
        grid.blur_axis(2, &kr);

        for y in 0..h {
            for x in 0..w {
                let v = channel[y * w + x];
                let (fx, fy, fz) = pos(y, x, v);
                let (mut num, mut den) = (0.0, 0.0);
                for (i, wt) in grid.corners(fx, fy, fz) {
                    num += wt * grid.cells[i][0];
                    den += wt * grid.cells[i][1];
                }
                out[(y * w + x) * c + ch] = if den > 0.0 { (num / den) as f32 } else { v };
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::super::{bilateral_base_direct, psnr};
    use super::*;

    #[test]
    fn constant_image_unchanged() {
        let img = Tensor::<f32>::full([20, 30, 3], 0.6);
        let p = BilateralParams::defaults_for(&img).unwrap();
        assert_eq!(bilateral_base_fast(&img, &p).unwrap(), img);
    }

    #[test]
    fn impulse_close_to_direct() {
        let mut img = Tensor::<f32>::zeros([5, 5, 1]);
        img.data_mut()[12] = 1.0;
        let p = BilateralParams::defaults_for(&img).unwrap();
        let fast = bilateral_base_fast(&img, &p).unwrap();
        let direct = bilateral_base_direct(&img, &p).unwrap();
        assert!(fast.max_abs_diff(&direct) < 1e-2, "{}", fast.max_abs_diff(&direct));
    }

    #[test]
    fn smooth_ramp_close_to_direct() {
        let img = Tensor::<f32>::from_fn([48, 48, 1], |i| {
            let (y, x) = (i / 48, i % 48);
            ((x as f32 * 0.13).sin() * 0.3 + y as f32 / 96.0 + 0.2).clamp(0.0, 1.0)
        });
        let p = BilateralParams::defaults_for(&img).unwrap();
        let fast = bilateral_base_fast(&img, &p).unwrap();
        let direct = bilateral_base_direct(&img, &p).unwrap();
        assert!(psnr(&fast, &direct) > 40.0, "{}", psnr(&fast, &direct));
    }
}
