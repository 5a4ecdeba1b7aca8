//! Synthetic live and spoof faces with matching supervision maps.
//!
//! A live image is a shaded ellipsoid "face" with darker eyes and mouth over
//! a gradient background, plus fine per-pixel skin noise. Spoofs render a
//! fresh face the same way and pass it through a simulated carrier: print
//! (blur, reduced contrast, warm tint, blocky paper grain) or replay (blur,
//! moiré stripes, a specular band, cool tint).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, area_downsample};
use crate::manifest::{write_manifest, ManifestEntry};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 256;
pub const MAP_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Live,
    Print,
    Replay,
}

impl SampleKind {
    pub fn is_live(self) -> bool {
        self == SampleKind::Live
    }

    fn tag(self) -> &'static str {
        match self {
            SampleKind::Live => "live",
            SampleKind::Print => "print",
            SampleKind::Replay => "replay",
        }
    }
}

/// One rendered sample: `[256, 256, 3]` image, `[32, 32, 1]` depth and
/// `[32, 32, 3]` reflection, all in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub kind: SampleKind,
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub reflection: Tensor<f32>,
}

struct Face {
    image: Vec<f32>,
    /// Ellipsoid height, 0 off the face.
    z: Vec<f32>,
}

fn render_face(rng: &mut ChaCha8Rng) -> Face {
    let n = IMAGE_SIZE;
    let cx = 128.0 + rng.random_range(-12.0..12.0);
    let cy = 128.0 + rng.random_range(-10.0..10.0);
    let a: f64 = rng.random_range(62.0..80.0);
    let b: f64 = rng.random_range(84.0..104.0);
    let c = 0.8 * a;
    let bright = rng.random_range(-0.1..0.1);
    let tone = [0.78, 0.58, 0.47].map(|t: f64| t + bright + rng.random_range(-0.04..0.04));
    let light = {
        let l = [rng.random_range(-0.5..0.5), rng.random_range(-0.6..0.2), 1.0f64];
        let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        l.map(|v| v / norm)
    };
    let bg_top = [0; 3].map(|_| rng.random_range(0.1..0.5f64));
    let bg_bottom = [0; 3].map(|_| rng.random_range(0.1..0.5f64));
    let skin = Normal::new(0.0, 0.025).expect("valid sigma");

    let in_ellipse = |x: f64, y: f64, ex: f64, ey: f64, rx: f64, ry: f64| {
        let (u, v) = ((x - ex) / rx, (y - ey) / ry);
        u * u + v * v < 1.0
    };

    let mut image = vec![0.0f32; n * n * 3];
    let mut z = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = yf / n as f64;
            let bg: [f64; 3] = std::array::from_fn(|k| bg_top[k] * (1.0 - t) + bg_bottom[k] * t);
            let (u, v) = ((xf - cx) / a, (yf - cy) / b);
            let r2 = u * u + v * v;
            let mut px = bg;
            if r2 < 1.0 {
                let h = (1.0 - r2).sqrt();
                z[y * n + x] = h as f32;
                let nrm = [u / a, v / b, h / c];
                let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
                let lambert = (nrm[0] * light[0] + nrm[1] * light[1] + nrm[2] * light[2]) / len;
                let shade = 0.3 + 0.7 * lambert.max(0.0);
                let mut face: [f64; 3] = std::array::from_fn(|k| tone[k] * shade);
                let eye_y = cy - 0.2 * b;
                if in_ellipse(xf, yf, cx - 0.38 * a, eye_y, 0.16 * a, 0.07 * b)
                    || in_ellipse(xf, yf, cx + 0.38 * a, eye_y, 0.16 * a, 0.07 * b)
                {
                    face = face.map(|v| v * 0.45);
                }
                if in_ellipse(xf, yf, cx, cy + 0.45 * b, 0.3 * a, 0.05 * b) {
                    face = [face[0] * 0.8, face[1] * 0.45, face[2] * 0.45];
                }
                let noise = skin.sample(rng);
                face = face.map(|v| v + noise);
                // soften the silhouette over the outer rim
                let edge = ((1.0 - r2) / 0.08).min(1.0);
                px = std::array::from_fn(|k| bg[k] * (1.0 - edge) + face[k] * edge);
            }
            for k in 0..3 {
                image[(y * n + x) * 3 + k] = px[k] as f32;
            }
        }
    }
    Face { image, z }
}

fn box_blur3(src: &[f32]) -> Vec<f32> {
    let n = IMAGE_SIZE as isize;
    let mut out = vec![0.0f32; src.len()];
    for y in 0..n {
        for x in 0..n {
            for k in 0..3 {
                let (mut acc, mut cnt) = (0.0f32, 0.0f32);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < n && xx < n {
                            acc += src[((yy * n + xx) * 3) as usize + k];
                            cnt += 1.0;
                        }
                    }
                }
                out[((y * n + x) * 3) as usize + k] = acc / cnt;
            }
        }
    }
    out
}

fn print_attack(img: &mut Vec<f32>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = IMAGE_SIZE;
    *img = box_blur3(img);
    let contrast = rng.random_range(0.55..0.75f32);
    let tint = [1.04f32, 1.0, 0.82];
    let grain = Normal::new(0.0f32, 0.035).expect("valid sigma");
    let fine = Normal::new(0.0f32, 0.01).expect("valid sigma");
    let blocks: Vec<f32> = (0..(n / 4) * (n / 4)).map(|_| grain.sample(rng)).collect();
    for y in 0..n {
        for x in 0..n {
            let g = blocks[(y / 4) * (n / 4) + x / 4] + fine.sample(rng);
            for k in 0..3 {
                let v = &mut img[(y * n + x) * 3 + k];
                *v = (0.5 + (*v - 0.5) * contrast) * tint[k] + g;
            }
        }
    }
    // matte carrier: flat reflection with mild noise
    let refl = Normal::new(0.0f32, 0.02).expect("valid sigma");
    (0..MAP_SIZE * MAP_SIZE * 3).map(|_| 0.6 + refl.sample(rng)).collect()
}

fn replay_attack(img: &mut Vec<f32>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = IMAGE_SIZE;
    *img = box_blur3(img);
    let period = rng.random_range(5.0..9.0f64);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let band_angle = rng.random_range(0.0..std::f64::consts::PI);
    let (bn_x, bn_y) = (band_angle.cos(), band_angle.sin());
    let (px, py) = (rng.random_range(64.0..192.0), rng.random_range(64.0..192.0));
    let width = rng.random_range(20.0..35.0f64);
    let tint = [0.92f32, 0.97, 1.08];
    let band = |x: f64, y: f64| {
        let d = (x - px) * bn_x + (y - py) * bn_y;
        (-d * d / (2.0 * width * width)).exp()
    };
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let moire = 0.06 * (2.0 * std::f64::consts::PI * (xf * ct + yf * st) / period).sin();
            let spec = 0.3 * band(xf, yf);
            for k in 0..3 {
                let v = &mut img[(y * n + x) * 3 + k];
                *v = *v * tint[k] + (moire + spec) as f32;
            }
        }
    }
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    let scale = (IMAGE_SIZE / MAP_SIZE) as f64;
    (0..MAP_SIZE * MAP_SIZE * 3)
        .map(|i| {
            let p = i / 3;
            let (y, x) = ((p / MAP_SIZE) as f64 + 0.5, (p % MAP_SIZE) as f64 + 0.5);
            0.45 + 0.5 * band(x * scale, y * scale) as f32 + noise.sample(rng)
        })
        .collect()
}

fn clamp_quantize(v: &mut [f32]) {
    for x in v {
        *x = (x.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Renders sample `index` of `kind` from `seed`. Each (seed, kind, index)
/// has its own random stream.
pub fn render(kind: SampleKind, seed: u64, index: u64) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind_id = match kind {
        SampleKind::Live => 0u64,
        SampleKind::Print => 1,
        SampleKind::Replay => 2,
    };
    rng.set_stream((kind_id << 40) | index);
    let face = render_face(&mut rng);
    let mut image = face.image;
    let zero_refl = || vec![0.0f32; MAP_SIZE * MAP_SIZE * 3];
    let reflection = match kind {
        SampleKind::Live => zero_refl(),
        SampleKind::Print => print_attack(&mut image, &mut rng),
        SampleKind::Replay => replay_attack(&mut image, &mut rng),
    };
    clamp_quantize(&mut image);
    let mut reflection = reflection;
    clamp_quantize(&mut reflection);
    let depth = if kind.is_live() {
        let z = Tensor::new([IMAGE_SIZE, IMAGE_SIZE, 1], face.z).expect("sized");
        let mut d = area_downsample(&z, IMAGE_SIZE / MAP_SIZE).expect("divisible").into_data();
        clamp_quantize(&mut d);
        d
    } else {
        vec![0.0; MAP_SIZE * MAP_SIZE]
    };
    SynthSample {
        kind,
        image: Tensor::new([IMAGE_SIZE, IMAGE_SIZE, 3], image).expect("sized"),
        depth: Tensor::new([MAP_SIZE, MAP_SIZE, 1], depth).expect("sized"),
        reflection: Tensor::new([MAP_SIZE, MAP_SIZE, 3], reflection).expect("sized"),
    }
}

/// Spoof `j` alternates print and replay.
pub fn spoof_kind(j: usize) -> SampleKind {
    if j % 2 == 0 {
        SampleKind::Print
    } else {
        SampleKind::Replay
    }
}

/// Writes `n_live + n_spoof` samples with their maps under `out_dir` and a
/// `manifest.jsonl` with relative paths. Returns the manifest path.
pub fn synth_dataset(n_live: usize, n_spoof: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if n_live == 0 || n_spoof == 0 {
        return Err(Error::InvalidParam("synth needs at least one live and one spoof sample".into()));
    }
    for sub in ["images", "depth", "reflection"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let jobs: Vec<(SampleKind, usize)> = (0..n_live)
        .map(|i| (SampleKind::Live, i))
        .chain((0..n_spoof).map(|j| (spoof_kind(j), j)))
        .collect();
    use rayon::prelude::*;
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(kind, i)| -> Result<ManifestEntry> {
            let s = render(kind, seed, i as u64);
            let stem = format!("{}_{i:05}", if kind.is_live() { "live" } else { "spoof" });
            let rel = |dir: &str| PathBuf::from(dir).join(format!("{stem}.png"));
            imageio::save_png(&out_dir.join(rel("images")), &s.image)?;
            imageio::save_png(&out_dir.join(rel("depth")), &s.depth)?;
            imageio::save_png(&out_dir.join(rel("reflection")), &s.reflection)?;
            Ok(ManifestEntry {
                image_path: rel("images"),
                label: if kind.is_live() { "live" } else { "spoof" }.into(),
                attack_type: (!kind.is_live()).then(|| kind.tag().to_string()),
                depth_map_path: Some(rel("depth")),
                reflection_map_path: Some(rel("reflection")),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f32], b: &[f32]) -> f64 {
    let mut a: Vec<f32> = a.to_vec();
    let mut b: Vec<f32> = b.to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
