//! Bilateral convolutional network backbone.
//!
//! A stem convolution is followed by three levels. Each level runs two
//! convolution stacks with identical structure and separate weights: a plain
//! `ConvBlock` that learns residual (detail) features and a
//! `BilateralConvBlock` that passes its input through the deep bilateral
//! operator first and learns base features. The two outputs are summed and
//! max-pooled, and the pooled map of each level is emitted.

use serde::{Deserialize, Serialize};

use crate::bilateral::{apply_dbo, DboParams};
use crate::error::{Error, Result};
use crate::params::{ConvLayer, ParamSpec, ParamVars};
use crate::tensor::{ConvSpec, Scalar, Tape, Var};

pub const LEVELS: usize = 3;

/// Where the bilateral branch applies its operator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DboPlacement {
    /// Filter the block input, then convolve.
    #[default]
    Input,
    /// Convolve, then filter the block output.
    Output,
    /// Identity in place of the operator (extra parameters, no filtering).
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcnConfig {
    /// Side of the square RGB input.
    pub input_size: usize,
    pub stem_channels: usize,
    /// Output channels of the three convolutions in each level's blocks.
    pub level_channels: [[usize; 3]; LEVELS],
    pub dbo: DboParams,
    #[serde(default)]
    pub dbo_placement: DboPlacement,
}

impl Default for BcnConfig {
    fn default() -> Self {
        BcnConfig {
            input_size: 256,
            stem_channels: 64,
            level_channels: [[128, 196, 128]; LEVELS],
            dbo: DboParams::range_only(1.0),
            dbo_placement: DboPlacement::Input,
        }
    }
}

/// Post-pool features of the three levels (input/2, input/4, input/8).
#[derive(Clone, Copy, Debug)]
pub struct LevelFeatures {
    pub low: Var,
    pub mid: Var,
    pub high: Var,
}

impl LevelFeatures {
    pub fn as_array(&self) -> [Var; LEVELS] {
        [self.low, self.mid, self.high]
    }
}

/// Bound weights of one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelLayers {
    pub conv_block: [ConvLayer; 3],
    pub bilateral_block: [ConvLayer; 3],
}

impl BcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % (1 << LEVELS) != 0 {
            return Err(Error::InvalidParam(format!(
                "input_size must be a positive multiple of {}, got {}",
                1 << LEVELS,
                self.input_size
            )));
        }
        if self.stem_channels == 0 || self.level_channels.iter().flatten().any(|&c| c == 0) {
            return Err(Error::InvalidParam("all BCN channel counts must be > 0".into()));
        }
        self.dbo.validate()
    }

    /// Channels entering level `l`.
    pub fn level_input_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.stem_channels
        } else {
            self.level_channels[l - 1][2]
        }
    }

    pub fn level_output_channels(&self) -> [usize; LEVELS] {
        [0, 1, 2].map(|l| self.level_channels[l][2])
    }

    pub fn stem_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: 3,
            out_channels: self.stem_channels,
            kernel: 3,
        }
    }

    pub fn block_specs(&self, l: usize) -> [ConvSpec; 3] {
        let [a, b, c] = self.level_channels[l];
        let cin = self.level_input_channels(l);
        [(cin, a), (a, b), (b, c)].map(|(i, o)| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: 3,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        out.extend(ParamSpec::conv("bcn.stem", &self.stem_spec()));
        for l in 0..LEVELS {
            for (i, spec) in self.block_specs(l).iter().enumerate() {
                out.extend(ParamSpec::conv(&format!("bcn.level{l}.conv_block.{i}"), spec));
                out.extend(ParamSpec::conv(&format!("bcn.level{l}.bilateral_block.{i}"), spec));
            }
        }
        out
    }

    pub fn bind_level(&self, vars: &ParamVars, l: usize) -> Result<LevelLayers> {
        let specs = self.block_specs(l);
        let layer = |branch: &str, i: usize| vars.conv(&format!("bcn.level{l}.{branch}.{i}"), specs[i]);
        Ok(LevelLayers {
            conv_block: [layer("conv_block", 0)?, layer("conv_block", 1)?, layer("conv_block", 2)?],
            bilateral_block: [
                layer("bilateral_block", 0)?,
                layer("bilateral_block", 1)?,
                layer("bilateral_block", 2)?,
            ],
        })
    }
}

/// Three conv(3×3, same) + ReLU layers, no pooling.
pub fn conv_block<T: Scalar>(tape: &mut Tape<T>, x: Var, layers: &[ConvLayer; 3]) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        let c = layer.forward(tape, h)?;
        h = tape.relu(c)?;
    }
    Ok(h)
}

/// [`conv_block`] with the deep bilateral operator at `placement`.
pub fn bilateral_conv_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layers: &[ConvLayer; 3],
    dbo: &DboParams,
    placement: DboPlacement,
) -> Result<Var> {
    match placement {
        DboPlacement::Input => {
            let filtered = apply_dbo(tape, x, dbo)?;
            conv_block(tape, filtered, layers)
        }
        DboPlacement::Output => {
            let h = conv_block(tape, x, layers)?;
            apply_dbo(tape, h, dbo)
        }
        DboPlacement::Disabled => conv_block(tape, x, layers),
    }
}

/// Sum of both branches, max-pooled by 2.
pub fn bcn_level<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layers: &LevelLayers,
    cfg: &BcnConfig,
) -> Result<Var> {
    let residual = conv_block(tape, x, &layers.conv_block)?;
    let base = bilateral_conv_block(tape, x, &layers.bilateral_block, &cfg.dbo, cfg.dbo_placement)?;
    let fused = tape.add(residual, base)?;
    tape.maxpool2(fused)
}

/// Stem plus three levels on an `[N, 3, S, S]` image batch.
pub fn bcn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    vars: &ParamVars,
    cfg: &BcnConfig,
) -> Result<LevelFeatures> {
    let [_, c, h, w] = tape.value(image).dims4()?;
    if c != 3 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::shape(
            "bcn_forward",
            format!(
                "expected [N, 3, {s}, {s}] input, got {:?}",
                tape.shape(image),
                s = cfg.input_size
            ),
        ));
    }
    let stem = vars.conv("bcn.stem", cfg.stem_spec())?.forward(tape, image)?;
    let mut x = tape.relu(stem)?;
    let mut outs = [x; LEVELS];
    for (l, slot) in outs.iter_mut().enumerate() {
        let layers = cfg.bind_level(vars, l)?;
        x = bcn_level(tape, x, &layers, cfg)?;
        *slot = x;
    }
    Ok(LevelFeatures {
        low: outs[0],
        mid: outs[1],
        high: outs[2],
    })
}
