//! Same-padded, stride-1 2-D convolution via im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::{Backward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Convolution layer geometry. Stride is always 1 and padding is always
/// `kernel / 2`, so output spatial size equals input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "conv kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidParam("conv channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Unfolds one `[c, h, w]` sample into `[c·k·k, h·w]` columns.
fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let plane = h * w;
    for ci in 0..c {
        let img = &src[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let line = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..x0].fill(T::zero());
                    line[x1..].fill(T::zero());
                    let s = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    line[x0..x1].copy_from_slice(&img[s + sx0..s + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `[c, h, w]`, adding.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = k / 2;
    let plane = h * w;
    for ci in 0..c {
        let img = &mut dst[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    img[s + sx0..s + sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<[usize; 4]> {
    spec.validate()?;
    let dims = input.dims4()?;
    if dims[1] != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, layer expects {}",
                dims[1], spec.in_channels
            ),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight shape {:?}, expected {:?}",
                weight.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected [{}]", bias.shape(), spec.out_channels),
        ));
    }
    Ok(dims)
}

/// Forward convolution without recording.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_conv(input, spec, weight, bias)?;
    let k = spec.kernel;
    let co = spec.out_channels;
    let plane = h * w;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); n * co * plane];
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for s in 0..n {
        let src = &input.data()[s * c * plane..(s + 1) * c * plane];
        let dst = &mut out[s * co * plane..(s + 1) * co * plane];
        for (o, &b) in bias.data().iter().enumerate() {
            dst[o * plane..(o + 1) * plane].fill(b);
        }
        let b_mat: &[T] = if k == 1 {
            src
        } else {
            im2col(src, c, h, w, k, &mut cols);
            &cols
        };
        T::gemm(co, ckk, plane, weight.data(), false, b_mat, false, dst, true);
    }
    Tensor::new([n, co, h, w], out)
}

struct ConvBack {
    spec: ConvSpec,
}

impl<T: Scalar> Backward<T> for ConvBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, weight) = (inputs[0], inputs[1]);
        let [n, c, h, w] = x.dims4().expect("conv input is 4-D");
        let k = self.spec.kernel;
        let co = self.spec.out_channels;
        let plane = h * w;
        let ckk = c * k * k;

        let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut gw = needs[1].then(|| vec![T::zero(); weight.len()]);
        let mut gb = needs[2].then(|| vec![T::zero(); co]);
        let mut cols = vec![T::zero(); if k == 1 { 0 } else { ckk * plane }];
        let mut gcols = vec![T::zero(); if gx.is_some() && k != 1 { ckk * plane } else { 0 }];

        for s in 0..n {
            let gs = &g[s * co * plane..(s + 1) * co * plane];
            if let Some(gb) = gb.as_mut() {
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += gs[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
                }
            }
            let src = &x.data()[s * c * plane..(s + 1) * c * plane];
            if let Some(gw) = gw.as_mut() {
                let b_mat: &[T] = if k == 1 {
                    src
                } else {
                    im2col(src, c, h, w, k, &mut cols);
                    &cols
                };
                T::gemm(co, plane, ckk, gs, false, b_mat, true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[s * c * plane..(s + 1) * c * plane];
                if k == 1 {
                    T::gemm(ckk, co, plane, weight.data(), true, gs, false, dst, true);
                } else {
                    T::gemm(ckk, co, plane, weight.data(), true, gs, false, &mut gcols, false);
                    col2im(&gcols, c, h, w, k, dst);
                }
            }
        }
        vec![gx, gw, gb]
    }
}

impl<T: Scalar> Tape<T> {
    /// Zero-padded "same" convolution, NCHW in and out.
    pub fn conv2d(&mut self, input: Var, spec: &ConvSpec, weight: Var, bias: Var) -> Result<Var> {
        let out = conv2d_forward(self.value(input), spec, self.value(weight), self.value(bias))?;
        self.record(
            "conv2d",
            out,
            vec![input, weight, bias],
            ConvBack { spec: *spec },
        )
    }
}
