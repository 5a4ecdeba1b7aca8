//! Multi-level feature refinement.
//!
//! For each backbone level: compress channels with a 1×1 convolution, encode
//! `K²` kernel logits per pixel with a 5×5 convolution, softmax them over the
//! kernel axis, and replace every feature by the kernel-weighted sum of its
//! `K×K` neighbourhood (one kernel per pixel, shared by all channels,
//! zero-padded at borders). Refined levels are average-pooled to the coarsest
//! resolution and concatenated along channels.

use serde::{Deserialize, Serialize};

use crate::bcn::{BcnConfig, LevelFeatures, LEVELS};
use crate::error::{Error, Result};
use crate::params::{ConvLayer, ParamSpec, ParamVars};
use crate::tensor::{Backward, ConvSpec, Scalar, Tape, Tensor, Var};

pub const LEVEL_NAMES: [&str; LEVELS] = ["low", "mid", "high"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfrmConfig {
    /// Channels after the 1×1 compressor.
    pub compressed_channels: usize,
    /// Side of the refinement kernel (odd).
    pub kernel_size: usize,
    /// Side of the content-encoder convolution (odd).
    pub encoder_kernel: usize,
}

impl Default for MfrmConfig {
    fn default() -> Self {
        MfrmConfig {
            compressed_channels: 20,
            kernel_size: 5,
            encoder_kernel: 5,
        }
    }
}

/// Bound weights for one level.
#[derive(Clone, Copy, Debug)]
pub struct RefinerLayers {
    pub compress: ConvLayer,
    pub encode: ConvLayer,
}

impl MfrmConfig {
    pub fn validate(&self, bcn: &BcnConfig) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.encoder_kernel % 2 == 0 {
            return Err(Error::InvalidParam("MFRM kernel sizes must be odd".into()));
        }
        if self.compressed_channels == 0 {
            return Err(Error::InvalidParam("compressed_channels must be > 0".into()));
        }
        for (name, c) in LEVEL_NAMES.iter().zip(bcn.level_output_channels()) {
            if self.compressed_channels > c {
                return Err(Error::InvalidParam(format!(
                    "compressed_channels {} exceeds the {c} channels of level {name}",
                    self.compressed_channels
                )));
            }
        }
        Ok(())
    }

    pub fn compress_spec(&self, in_channels: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels: self.compressed_channels,
            kernel: 1,
        }
    }

    pub fn encode_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.compressed_channels,
            out_channels: self.kernel_size * self.kernel_size,
            kernel: self.encoder_kernel,
        }
    }

    pub fn param_specs(&self, bcn: &BcnConfig) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (name, c) in LEVEL_NAMES.iter().zip(bcn.level_output_channels()) {
            out.extend(ParamSpec::conv(&format!("mfrm.{name}.compress"), &self.compress_spec(c)));
            out.extend(ParamSpec::conv(&format!("mfrm.{name}.encode"), &self.encode_spec()));
        }
        out
    }

    pub fn bind_level(&self, vars: &ParamVars, bcn: &BcnConfig, level: usize) -> Result<RefinerLayers> {
        let name = LEVEL_NAMES[level];
        let c = bcn.level_output_channels()[level];
        Ok(RefinerLayers {
            compress: vars.conv(&format!("mfrm.{name}.compress"), self.compress_spec(c))?,
            encode: vars.conv(&format!("mfrm.{name}.encode"), self.encode_spec())?,
        })
    }

    /// Channels of the fused output.
    pub fn fused_channels(&self, bcn: &BcnConfig) -> usize {
        bcn.level_output_channels().iter().sum()
    }
}

/// 1×1 convolution from `C` down to `C'` channels.
pub fn channel_compress<T: Scalar>(tape: &mut Tape<T>, f: Var, layer: &ConvLayer) -> Result<Var> {
    let c = tape.value(f).dims4()?[1];
    if c < layer.spec.out_channels {
        return Err(Error::shape(
            "channel_compress",
            format!("cannot compress {c} channels to {}", layer.spec.out_channels),
        ));
    }
    layer.forward(tape, f)
}

/// Kernel logits, `K²` per pixel.
pub fn content_encode<T: Scalar>(tape: &mut Tape<T>, compressed: Var, layer: &ConvLayer) -> Result<Var> {
    layer.forward(tape, compressed)
}

/// Softmax over the `K²` kernel axis at every pixel.
pub fn kernel_normalize<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    tape.softmax_channel(logits)
}

fn kernel_side(k2: usize) -> Result<usize> {
    let k = (k2 as f64).sqrt().round() as usize;
    if k * k != k2 || k % 2 == 0 {
        return Err(Error::shape(
            "refine",
            format!("kernel channel count {k2} is not an odd square"),
        ));
    }
    Ok(k)
}

fn check_refine(f: &Tensor<impl Scalar>, kernels: &Tensor<impl Scalar>) -> Result<([usize; 4], usize)> {
    let [n, c, h, w] = f.dims4()?;
    let [kn, k2, kh, kw] = kernels.dims4()?;
    if (kn, kh, kw) != (n, h, w) {
        return Err(Error::shape(
            "refine",
            format!("kernels {:?} are not aligned with features {:?}", kernels.shape(), f.shape()),
        ));
    }
    Ok(([n, c, h, w], kernel_side(k2)?))
}

/// Reassembly without recording:
/// `out[c, i, j] = Σ_{a,b} W[(a+r)·K + (b+r), i, j] · F[c, i+a, j+b]`, with
/// `F` zero outside the map.
pub fn refine_forward<T: Scalar>(f: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let ([n, c, h, w], k) = check_refine(f, kernels)?;
    let r = (k / 2) as isize;
    let plane = h * w;
    let k2 = k * k;
    let mut out = vec![T::zero(); f.len()];
    for s in 0..n {
        let kern = &kernels.data()[s * k2 * plane..(s + 1) * k2 * plane];
        for ch in 0..c {
            let src = &f.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            let dst = &mut out[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            for t in 0..k2 {
                let (da, db) = ((t / k) as isize - r, (t % k) as isize - r);
                let kt = &kern[t * plane..(t + 1) * plane];
                let (i0, i1) = ((-da).max(0) as usize, (h as isize - da).min(h as isize).max(0) as usize);
                let (j0, j1) = ((-db).max(0) as usize, (w as isize - db).min(w as isize).max(0) as usize);
                for i in i0..i1 {
                    let si = (i as isize + da) as usize;
                    for j in j0..j1 {
                        let sj = (j as isize + db) as usize;
                        dst[i * w + j] += kt[i * w + j] * src[si * w + sj];
                    }
                }
            }
        }
    }
    Tensor::new(f.shape().to_vec(), out)
}

struct RefineBack;

impl<T: Scalar> Backward<T> for RefineBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (f, kernels) = (inputs[0], inputs[1]);
        let ([n, c, h, w], k) = check_refine(f, kernels).expect("checked in forward");
        let r = (k / 2) as isize;
        let plane = h * w;
        let k2 = k * k;
        let mut gf = needs[0].then(|| vec![T::zero(); f.len()]);
        let mut gk = needs[1].then(|| vec![T::zero(); kernels.len()]);
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let src = &f.data()[off..off + plane];
                let gout = &g[off..off + plane];
                for t in 0..k2 {
                    let (da, db) = ((t / k) as isize - r, (t % k) as isize - r);
                    let koff = (s * k2 + t) * plane;
                    let kt = &kernels.data()[koff..koff + plane];
                    let (i0, i1) = ((-da).max(0) as usize, (h as isize - da).min(h as isize).max(0) as usize);
                    let (j0, j1) = ((-db).max(0) as usize, (w as isize - db).min(w as isize).max(0) as usize);
                    for i in i0..i1 {
                        let si = (i as isize + da) as usize;
                        for j in j0..j1 {
                            let sj = (j as isize + db) as usize;
                            let go = gout[i * w + j];
                            if let Some(gf) = gf.as_mut() {
                                gf[off + si * w + sj] += kt[i * w + j] * go;
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[koff + i * w + j] += src[si * w + sj] * go;
                            }
                        }
                    }
                }
            }
        }
        vec![gf, gk]
    }
}

/// Records the reassembly; differentiable in both the features and the
/// kernels.
pub fn refine<T: Scalar>(tape: &mut Tape<T>, f: Var, kernels: Var) -> Result<Var> {
    let out = refine_forward(tape.value(f), tape.value(kernels))?;
    tape.record("refine", out, vec![f, kernels], RefineBack)
}

/// Full compress → encode → normalise → reassemble pipeline for one level.
/// Returns `(refined, normalised kernels)`.
pub fn refine_level<T: Scalar>(tape: &mut Tape<T>, f: Var, layers: &RefinerLayers) -> Result<(Var, Var)> {
    let compressed = channel_compress(tape, f, &layers.compress)?;
    let logits = content_encode(tape, compressed, &layers.encode)?;
    let kernels = kernel_normalize(tape, logits)?;
    Ok((refine(tape, f, kernels)?, kernels))
}

/// Refines all three levels and fuses them at the `high` resolution.
pub fn mfrm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    levels: &LevelFeatures,
    vars: &ParamVars,
    bcn: &BcnConfig,
    cfg: &MfrmConfig,
) -> Result<Var> {
    let target = tape.value(levels.high).dims4()?[2];
    let mut pooled = Vec::with_capacity(LEVELS);
    for (l, f) in levels.as_array().into_iter().enumerate() {
        let layers = cfg.bind_level(vars, bcn, l)?;
        let (refined, _) = refine_level(tape, f, &layers)?;
        let size = tape.value(refined).dims4()?[2];
        let factor = size / target;
        pooled.push(if factor > 1 { tape.avgpool(refined, factor)? } else { refined });
    }
    tape.concat_channels(&pooled)
}
