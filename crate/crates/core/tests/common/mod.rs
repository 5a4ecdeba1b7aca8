//! Brute-force reference implementations shared by the integration tests.
//! Everything here is written as plain nested loops in `f64` over flat
//! row-major buffers and does not call into the library's kernels.

#![allow(dead_code)]

use bcn_fas::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn g(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (sigma * sigma)).exp()
}

/// `[H, W, C]` windowed bilateral filter with clipped borders.
pub fn bilateral(img: &[f64], h: usize, w: usize, c: usize, sigma_s: f64, sigma_r: f64, window: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    let mut out = vec![0.0; img.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for ch in 0..c {
                let p = img[(y as usize * w + x as usize) * c + ch];
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qy, qx) = (y + dy, x + dx);
                        if qy < 0 || qx < 0 || qy >= h as i64 || qx >= w as i64 {
                            continue;
                        }
                        let q = img[(qy as usize * w + qx as usize) * c + ch];
                        let d = ((dy * dy + dx * dx) as f64).sqrt();
                        let wt = g(d, sigma_s) * g(q - p, sigma_r);
                        num += wt * q;
                        den += wt;
                    }
                }
                out[(y as usize * w + x as usize) * c + ch] = num / den;
            }
        }
    }
    out
}

/// Feature-map bilateral operator on `[N, C, H, W]`; `sigma_s = None` drops
/// the spatial term.
pub fn dbo(x: &Tensor<f64>, sigma_r: f64, sigma_s: Option<f64>, window: usize) -> Vec<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let r = (window / 2) as i64;
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let p = x.at4(s, ch, i as usize, j as usize);
                    let (mut num, mut den) = (0.0, 0.0);
                    for a in -r..=r {
                        for b in -r..=r {
                            let (qi, qj) = (i + a, j + b);
                            if qi < 0 || qj < 0 || qi >= h as i64 || qj >= w as i64 {
                                continue;
                            }
                            let q = x.at4(s, ch, qi as usize, qj as usize);
                            let mut wt = g(p - q, sigma_r);
                            if let Some(ss) = sigma_s {
                                wt *= g(((a * a + b * b) as f64).sqrt(), ss);
                            }
                            num += wt * q;
                            den += wt;
                        }
                    }
                    out[((s * c + ch) * h as usize + i as usize) * w as usize + j as usize] = num / den;
                }
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution: weight `[Co, Ci, K, K]`.
pub fn conv2d(x: &Tensor<f64>, weight: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
    let [n, ci, h, w] = x.dims4().unwrap();
    let [co, _, k, _] = weight.dims4().unwrap();
    let r = (k / 2) as i64;
    let mut out = vec![0.0; n * co * h * w];
    for s in 0..n {
        for o in 0..co {
            for y in 0..h as i64 {
                for xx in 0..w as i64 {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        for ky in 0..k as i64 {
                            for kx in 0..k as i64 {
                                let (sy, sx) = (y + ky - r, xx + kx - r);
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                acc += weight.at4(o, i, ky as usize, kx as usize) * x.at4(s, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out[((s * co + o) * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
    }
    out
}

pub fn maxpool2(x: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at4(s, ch, 2 * y + dy, 2 * xx + dx));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Kernel reassembly with zero padding; kernels are `[N, K², H, W]`.
pub fn refine(f: &Tensor<f64>, kernels: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = f.dims4().unwrap();
    let k = (kernels.shape()[1] as f64).sqrt() as usize;
    let r = (k / 2) as i64;
    let mut out = vec![0.0; f.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let mut acc = 0.0;
                    for a in -r..=r {
                        for b in -r..=r {
                            let (qi, qj) = (i + a, j + b);
                            if qi < 0 || qj < 0 || qi >= h as i64 || qj >= w as i64 {
                                continue;
                            }
                            let idx = ((a + r) * k as i64 + (b + r)) as usize;
                            acc += kernels.at4(s, idx, i as usize, j as usize) * f.at4(s, ch, qi as usize, qj as usize);
                        }
                    }
                    out[((s * c + ch) * h + i as usize) * w + j as usize] = acc;
                }
            }
        }
    }
    out
}

/// Per-location softmax over the channel axis.
pub fn softmax_channels(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let m = (0..c).map(|ch| x.at4(s, ch, i, j)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (x.at4(s, ch, i, j) - m).exp()).sum();
                for ch in 0..c {
                    out[((s * c + ch) * h + i) * w + j] = (x.at4(s, ch, i, j) - m).exp() / z;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn mse(p: &[f64], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc += (p[i] - t[i]).powi(2);
    }
    acc / p.len() as f64
}

const EPS: f64 = 1e-7;

pub fn bce(p: &[f64], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        let q = p[i].clamp(EPS, 1.0 - EPS);
        acc -= t[i] * q.ln() + (1.0 - t[i]) * (1.0 - q).ln();
    }
    acc / p.len() as f64
}

/// Probabilities `[N, K, H, W]`, class indices `[N, 1, H, W]`.
pub fn categorical_ce(p: &Tensor<f64>, classes: &Tensor<f64>) -> f64 {
    let [n, _, h, w] = p.dims4().unwrap();
    let mut acc = 0.0;
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let cls = classes.at4(s, 0, i, j) as usize;
                acc -= p.at4(s, cls, i, j).clamp(EPS, 1.0 - EPS).ln();
            }
        }
    }
    acc / (n * h * w) as f64
}

/// EER and AUC by testing every candidate threshold; `scores` with `live`
/// flags, accepted as live when `score >= t`.
pub fn sweep_eer(scores: &[(f64, bool)]) -> f64 {
    let mut ts: Vec<f64> = scores.iter().map(|s| s.0).collect();
    ts.push(f64::INFINITY);
    let nl = scores.iter().filter(|s| s.1).count() as f64;
    let na = scores.len() as f64 - nl;
    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &ts {
        let a = scores.iter().filter(|s| !s.1 && s.0 >= t).count() as f64 / na;
        let b = scores.iter().filter(|s| s.1 && s.0 < t).count() as f64 / nl;
        let key = ((a - b).abs(), (a + b) / 2.0, t);
        if best.is_none_or(|bk| key < bk) {
            best = Some(key);
        }
    }
    best.unwrap().1
}

pub fn pairwise_auc(scores: &[(f64, bool)]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for l in scores.iter().filter(|s| s.1) {
        for a in scores.iter().filter(|s| !s.1) {
            den += 1.0;
            if l.0 > a.0 {
                num += 1.0;
            } else if l.0 == a.0 {
                num += 0.5;
            }
        }
    }
    num / den
}
