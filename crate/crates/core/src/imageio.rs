//! PNG reading and writing, and layout conversions between `[H, W, C]`
//! images and `[N, C, H, W]` tensors.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit RGB image as `[H, W, 3]` in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new([h as usize, w as usize, 3], data)
}

/// 8-bit grayscale image as `[H, W, 1]` in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new([h as usize, w as usize, 1], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[H, W, 1]` or `[H, W, 3]` image in `[0, 1]` as an 8-bit PNG.
/// Values outside the unit range are clamped.
pub fn save_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [h, w, c] = match image.shape() {
        &[h, w, c] if c == 1 || c == 3 => [h, w, c],
        s => return Err(Error::shape("save_png", format!("expected [H, W, 1|3], got {s:?}"))),
    };
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    let result = if c == 1 {
        GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized").save(path)
    } else {
        RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized").save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Shifts and scales into `[0, 1]` for display; constant images map to zero.
pub fn normalize_for_display(image: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Tensor::zeros(image.shape().to_vec());
    }
    image.map(|v| (v - lo) / (hi - lo))
}

/// Block average of an `[H, W, C]` image by an integer factor.
pub fn area_downsample(image: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let [h, w, c] = match image.shape() {
        &[h, w, c] => [h, w, c],
        s => return Err(Error::shape("area_downsample", format!("expected [H, W, C], got {s:?}"))),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "area_downsample",
            format!("{h}×{w} is not divisible by {factor}"),
        ));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let src = image.data();
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[((y * factor + dy) * w + x * factor + dx) * c + ch] as f64;
                    }
                }
                out[(y * ow + x) * c + ch] = (acc * inv) as f32;
            }
        }
    }
    Tensor::new([oh, ow, c], out)
}

/// Resizes a square map to `size × size` by block averaging.
pub fn fit_square(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[0], image.shape().get(1).copied().unwrap_or(0));
    if h != w || size == 0 || h % size != 0 {
        return Err(Error::shape(
            "fit_square",
            format!("cannot fit a {h}×{w} map to {size}×{size}"),
        ));
    }
    area_downsample(image, h / size)
}

/// `[H, W, C]` to `[1, C, H, W]`.
pub fn hwc_to_nchw<T: Scalar>(image: &Tensor<f32>) -> Result<Tensor<T>> {
    let [h, w, c] = match image.shape() {
        &[h, w, c] => [h, w, c],
        s => return Err(Error::shape("hwc_to_nchw", format!("expected [H, W, C], got {s:?}"))),
    };
    let src = image.data();
    Ok(Tensor::from_fn([1, c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        T::lit(src[p * c + ch] as f64)
    }))
}

/// Sample `n` of an `[N, C, H, W]` tensor as `[H, W, C]`.
pub fn nchw_to_hwc<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Tensor<f32>> {
    let [_, c, h, w] = t.dims4()?;
    let base = n * c * h * w;
    let src = t.data();
    Ok(Tensor::from_fn([h, w, c], |i| {
        let (p, ch) = (i / c, i % c);
        src[base + ch * h * w + p].as_f64() as f32
    }))
}

/// Stacks `[1, C, H, W]` tensors of equal shape along the batch axis.
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::shape("stack", "nothing to stack"))?;
    let [_, c, h, w] = first.dims4()?;
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape(
                "stack",
                format!("{:?} does not match {:?}", t.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new([items.len(), c, h, w], data)
}
