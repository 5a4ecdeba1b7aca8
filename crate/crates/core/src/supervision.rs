//! Depth, reflection and patch heads, their losses, target construction and
//! the fused liveness score.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::params::{ConvLayer, ParamSpec, ParamVars};
use crate::tensor::{Backward, ConvSpec, Scalar, Tape, Tensor, Var};

/// Probability clamp used by the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-7;

/// Material classes, in label-index order.
pub const MATERIAL_CLASSES: [&str; 5] = ["live", "replay", "print", "mask", "makeup"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// One sigmoid channel, live 1 / spoof 0.
    #[default]
    Binary,
    /// Five softmax channels over [`MATERIAL_CLASSES`].
    Material,
}

impl PatchMode {
    pub fn channels(self) -> usize {
        match self {
            PatchMode::Binary => 1,
            PatchMode::Material => MATERIAL_CLASSES.len(),
        }
    }
}

/// Per-sample label. Binary mode uses live/spoof, material mode a class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Live,
    Spoof,
    Material(usize),
}

impl Label {
    pub fn is_live(self) -> bool {
        matches!(self, Label::Live | Label::Material(0))
    }

    /// Parses a manifest label for the given mode.
    pub fn parse(s: &str, mode: PatchMode) -> Result<Label> {
        match mode {
            PatchMode::Binary => match s {
                "live" => Ok(Label::Live),
                "spoof" => Ok(Label::Spoof),
                _ => Err(Error::Dataset(format!("label `{s}` is not live or spoof"))),
            },
            PatchMode::Material => MATERIAL_CLASSES
                .iter()
                .position(|&c| c == s)
                .map(Label::Material)
                .ok_or_else(|| Error::Dataset(format!("label `{s}` is not one of {MATERIAL_CLASSES:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Live => f.write_str("live"),
            Label::Spoof => f.write_str("spoof"),
            Label::Material(i) => f.write_str(MATERIAL_CLASSES.get(*i).copied().unwrap_or("?")),
        }
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Label> {
        Label::parse(s, PatchMode::Binary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadsConfig {
    /// Hidden widths of each head before its output layer.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub patch_mode: PatchMode,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            hidden: vec![128, 64],
            patch_mode: PatchMode::Binary,
        }
    }
}

pub const HEAD_NAMES: [&str; 3] = ["depth", "reflection", "patch"];

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParam("head widths must be > 0".into()));
        }
        Ok(())
    }

    fn out_channels(&self, head: usize) -> usize {
        [1, 3, self.patch_mode.channels()][head]
    }

    /// Layer specs of one head, input to output.
    pub fn head_specs(&self, in_channels: usize, head: usize) -> Vec<ConvSpec> {
        let mut widths = vec![in_channels];
        widths.extend(&self.hidden);
        widths.push(self.out_channels(head));
        widths
            .windows(2)
            .map(|w| ConvSpec {
                in_channels: w[0],
                out_channels: w[1],
                kernel: 3,
            })
            .collect()
    }

    pub fn param_specs(&self, in_channels: usize) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (h, name) in HEAD_NAMES.iter().enumerate() {
            for (i, spec) in self.head_specs(in_channels, h).iter().enumerate() {
                out.extend(ParamSpec::conv(&format!("heads.{name}.{i}"), spec));
            }
        }
        out
    }

    fn bind_head(&self, vars: &ParamVars, in_channels: usize, head: usize) -> Result<Vec<ConvLayer>> {
        self.head_specs(in_channels, head)
            .into_iter()
            .enumerate()
            .map(|(i, spec)| vars.conv(&format!("heads.{}.{i}", HEAD_NAMES[head]), spec))
            .collect()
    }
}

/// Head predictions on the tape, `[N, C, S, S]` each.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub depth: Var,
    pub reflection: Var,
    pub patch: Var,
}

/// Head predictions detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T> {
    /// `[N, 1, S, S]`
    pub depth: Tensor<T>,
    /// `[N, 3, S, S]`
    pub reflection: Tensor<T>,
    /// `[N, 1, S, S]` probabilities, or `[N, 5, S, S]` class probabilities.
    pub patch: Tensor<T>,
    pub mode: PatchMode,
}

impl HeadVars {
    pub fn outputs<T: Scalar>(&self, tape: &Tape<T>, mode: PatchMode) -> HeadOutputs<T> {
        HeadOutputs {
            depth: tape.value(self.depth).clone(),
            reflection: tape.value(self.reflection).clone(),
            patch: tape.value(self.patch).clone(),
            mode,
        }
    }
}

fn run_head<T: Scalar>(tape: &mut Tape<T>, x: Var, layers: &[ConvLayer], softmax: bool) -> Result<Var> {
    let mut h = x;
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, h)?;
        h = if i < last {
            tape.relu(h)?
        } else if softmax {
            tape.softmax_channel(h)?
        } else {
            tape.sigmoid(h)?
        };
    }
    Ok(h)
}

/// Runs the three heads on the fused features.
pub fn heads_forward<T: Scalar>(tape: &mut Tape<T>, fused: Var, vars: &ParamVars, cfg: &HeadsConfig) -> Result<HeadVars> {
    let c = tape.value(fused).dims4()?[1];
    let mut out = [fused; 3];
    for (h, slot) in out.iter_mut().enumerate() {
        let layers = cfg.bind_head(vars, c, h)?;
        let softmax = h == 2 && cfg.patch_mode == PatchMode::Material;
        *slot = run_head(tape, fused, &layers, softmax)?;
    }
    Ok(HeadVars {
        depth: out[0],
        reflection: out[1],
        patch: out[2],
    })
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("prediction {:?} vs target {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

struct MseBack;

impl<T: Scalar> Backward<T> for MseBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let k = g[0] * T::lit(2.0 / p.len() as f64);
        let gp: Vec<T> = p.iter().zip(t).map(|(&p, &t)| k * (p - t)).collect();
        let gt = needs[1].then(|| gp.iter().map(|&v| -v).collect());
        vec![Some(gp), gt]
    }
}

/// Mean squared error over every element.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let (p, t) = (tape.value(pred), tape.value(target));
    check_same("mse", p, t)?;
    let sum = p.data().iter().zip(t.data()).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    let value = Tensor::scalar(sum / T::lit(p.len() as f64));
    tape.record("mse", value, vec![pred, target], MseBack)
}

/// Depth loss: mean squared error over the map.
pub fn loss_depth<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    mse(tape, pred, target)
}

/// Reflection loss: mean squared error over the map and its channels.
pub fn loss_reflection<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    mse(tape, pred, target)
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let (lo, hi) = (T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS));
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

struct BceBack;

impl<T: Scalar> Backward<T> for BceBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (p, t) = (inputs[0].data(), inputs[1].data());
        let k = g[0] / T::lit(p.len() as f64);
        let gp = p
            .iter()
            .zip(t)
            .map(|(&p, &t)| match clamp_prob(p) {
                (pc, true) => k * ((T::one() - t) / (T::one() - pc) - t / pc),
                _ => T::zero(),
            })
            .collect();
        vec![Some(gp), None]
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`. The
/// target is not differentiated.
pub fn loss_patch<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let (p, t) = (tape.value(pred), tape.value(target));
    check_same("loss_patch", p, t)?;
    let sum = p.data().iter().zip(t.data()).fold(T::zero(), |acc, (&p, &t)| {
        let (pc, _) = clamp_prob(p);
        acc - (t * pc.ln() + (T::one() - t) * (T::one() - pc).ln())
    });
    let value = Tensor::scalar(sum / T::lit(p.len() as f64));
    tape.record("bce", value, vec![pred, target], BceBack)
}

fn class_of<T: Scalar>(v: T, classes: usize) -> usize {
    let c = v.as_f64().round();
    assert!(c >= 0.0 && (c as usize) < classes, "class index {c} out of range");
    c as usize
}

struct CeBack;

impl<T: Scalar> Backward<T> for CeBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (p, t) = (inputs[0], inputs[1]);
        let [n, c, h, w] = p.dims4().expect("checked in forward");
        let plane = h * w;
        let k = g[0] / T::lit((n * plane) as f64);
        let mut gp = vec![T::zero(); p.len()];
        for s in 0..n {
            for i in 0..plane {
                let cls = class_of(t.data()[s * plane + i], c);
                let idx = (s * c + cls) * plane + i;
                if let (pc, true) = clamp_prob(p.data()[idx]) {
                    gp[idx] = -k / pc;
                }
            }
        }
        vec![Some(gp), None]
    }
}

/// Mean categorical cross-entropy of `[N, K, H, W]` class probabilities
/// against `[N, 1, H, W]` class indices.
pub fn loss_patch_material<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let (p, t) = (tape.value(pred), tape.value(target));
    let [n, c, h, w] = p.dims4()?;
    if t.shape() != [n, 1, h, w] {
        return Err(Error::shape(
            "loss_patch_material",
            format!("class map {:?} does not match probabilities {:?}", t.shape(), p.shape()),
        ));
    }
    let plane = h * w;
    let mut sum = T::zero();
    for s in 0..n {
        for i in 0..plane {
            let v = t.data()[s * plane + i].as_f64();
            if !(v >= 0.0 && (v.round() as usize) < c) {
                return Err(Error::InvalidParam(format!("class index {v} outside 0..{c}")));
            }
            let cls = v.round() as usize;
            sum -= clamp_prob(p.data()[(s * c + cls) * plane + i]).0.ln();
        }
    }
    let value = Tensor::scalar(sum / T::lit((n * plane) as f64));
    tape.record("categorical_ce", value, vec![pred, target], CeBack)
}

/// Unweighted sum of the loss terms.
pub fn loss_overall<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let mut total = *parts
        .first()
        .ok_or_else(|| Error::InvalidParam("loss_overall needs at least one term".into()))?;
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(total)
}

/// Loss values of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub depth: f64,
    pub reflection: f64,
    pub patch: f64,
    pub total: f64,
}

/// Builds the training loss. Material mode trains the patch head alone.
pub fn supervise<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &HeadVars,
    targets: &BatchTargets<T>,
    mode: PatchMode,
) -> Result<(Var, LossParts)> {
    match mode {
        PatchMode::Binary => {
            let d = tape.constant(targets.depth.clone());
            let r = tape.constant(targets.reflection.clone());
            let p = tape.constant(targets.patch.clone());
            let ld = loss_depth(tape, heads.depth, d)?;
            let lr = loss_reflection(tape, heads.reflection, r)?;
            let lp = loss_patch(tape, heads.patch, p)?;
            let total = loss_overall(tape, &[ld, lr, lp])?;
            let v = |tape: &Tape<T>, x| tape.value(x).item().as_f64();
            let parts = LossParts {
                depth: v(tape, ld),
                reflection: v(tape, lr),
                patch: v(tape, lp),
                total: v(tape, total),
            };
            Ok((total, parts))
        }
        PatchMode::Material => {
            let p = tape.constant(targets.patch.clone());
            let lp = loss_patch_material(tape, heads.patch, p)?;
            let patch = tape.value(lp).item().as_f64();
            Ok((lp, LossParts { patch, total: patch, ..Default::default() }))
        }
    }
}

/// Targets of one sample as `[1, C, S, S]` tensors in `[0, 1]`; material-mode
/// patch maps hold class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTargets {
    pub depth: Tensor<f32>,
    pub reflection: Tensor<f32>,
    pub patch: Tensor<f32>,
}

/// Stacked targets of a mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets<T> {
    pub depth: Tensor<T>,
    pub reflection: Tensor<T>,
    pub patch: Tensor<T>,
}

impl<T: Scalar> BatchTargets<T> {
    pub fn stack(items: &[&SupervisionTargets]) -> Result<Self> {
        let cast = |f: fn(&SupervisionTargets) -> &Tensor<f32>| -> Result<Tensor<T>> {
            let ts: Vec<Tensor<T>> = items.iter().map(|t| f(t).cast()).collect();
            imageio::stack(&ts.iter().collect::<Vec<_>>())
        };
        Ok(BatchTargets {
            depth: cast(|t| &t.depth)?,
            reflection: cast(|t| &t.reflection)?,
            patch: cast(|t| &t.patch)?,
        })
    }
}

/// Radially decaying bump scaled to `[0, 1]`, `[size, size, 1]`.
pub fn synthetic_depth(size: usize) -> Tensor<f32> {
    let c = (size as f64 - 1.0) / 2.0;
    let s = size as f64 * 0.35;
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(y * y + x * x) / (2.0 * s * s)).exp()
        })
        .collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Tensor::new([size, size, 1], raw.iter().map(|v| ((v - lo) / span) as f32).collect()).expect("sized")
}

/// Constant 0.6 per channel plus ±0.05 uniform noise, `[size, size, 3]`.
pub fn synthetic_reflection(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([size, size, 3], |_| 0.6 + rng.random_range(-0.05f32..0.05))
}

/// Loads a map file or falls back to the synthetic default.
fn load_map(
    path: Option<&Path>,
    size: usize,
    rgb: bool,
    what: &str,
    fallback: impl FnOnce() -> Tensor<f32>,
) -> Result<Tensor<f32>> {
    match path {
        Some(p) if p.exists() => {
            let img = if rgb { imageio::load_rgb(p)? } else { imageio::load_gray(p)? };
            imageio::fit_square(&img, size)
        }
        Some(p) => {
            log::warn!("{what} map {} not found, using the synthetic default", p.display());
            Ok(fallback())
        }
        None => {
            log::warn!("no {what} map given, using the synthetic default");
            Ok(fallback())
        }
    }
}

/// Builds the supervision targets of one sample at `size × size`.
///
/// Live samples get a depth map (from `depth_path`) and a zero reflection
/// map; spoof samples get a zero depth map and a reflection map (from
/// `reflection_path`). Files on the zeroed side are never read. The patch map
/// is the binary label, or the class index in material mode. `noise_seed`
/// drives the synthetic reflection fallback.
pub fn make_targets(
    label: Label,
    size: usize,
    depth_path: Option<&Path>,
    reflection_path: Option<&Path>,
    noise_seed: u64,
) -> Result<SupervisionTargets> {
    if size == 0 {
        return Err(Error::InvalidParam("target size must be > 0".into()));
    }
    let live = label.is_live();
    let depth = if live {
        load_map(depth_path, size, false, "depth", || synthetic_depth(size))?
    } else {
        Tensor::zeros([size, size, 1])
    };
    let reflection = if live {
        Tensor::zeros([size, size, 3])
    } else {
        load_map(reflection_path, size, true, "reflection", || synthetic_reflection(size, noise_seed))?
    };
    let fill = match label {
        Label::Live => 1.0,
        Label::Spoof => 0.0,
        Label::Material(c) if c < MATERIAL_CLASSES.len() => c as f32,
        Label::Material(c) => return Err(Error::InvalidParam(format!("material class {c} out of range"))),
    };
    Ok(SupervisionTargets {
        depth: imageio::hwc_to_nchw(&depth)?,
        reflection: imageio::hwc_to_nchw(&reflection)?,
        patch: Tensor::full([1, 1, size, size], fill),
    })
}

/// Liveness score per sample: `mean(D) + mean(1 − R) + mean(P)`, in `[0, 3]`.
pub fn score<T: Scalar>(outputs: &HeadOutputs<T>) -> Result<Vec<f64>> {
    if outputs.mode == PatchMode::Material {
        return Err(Error::Unsupported("score is undefined in material mode".into()));
    }
    let n = outputs.depth.dims4()?[0];
    let per_sample_mean = |t: &Tensor<T>| -> Vec<f64> {
        let k = t.len() / n;
        t.data()
            .chunks(k)
            .map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() / k as f64)
            .collect()
    };
    let (d, r, p) = (
        per_sample_mean(&outputs.depth),
        per_sample_mean(&outputs.reflection),
        per_sample_mean(&outputs.patch),
    );
    Ok((0..n).map(|i| d[i] + (1.0 - r[i]) + p[i]).collect())
}

/// Most probable material class per sample, by mean class probability.
pub fn material_prediction<T: Scalar>(outputs: &HeadOutputs<T>) -> Result<Vec<usize>> {
    let [n, c, h, w] = outputs.patch.dims4()?;
    if outputs.mode != PatchMode::Material {
        return Err(Error::Unsupported("material prediction needs material mode".into()));
    }
    let plane = h * w;
    Ok((0..n)
        .map(|s| {
            (0..c)
                .map(|k| {
                    let off = (s * c + k) * plane;
                    outputs.patch.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>()
                })
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect())
}
