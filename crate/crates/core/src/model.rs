//! The full network: backbone, refinement and heads.

use serde::{Deserialize, Serialize};

use crate::bcn::{bcn_forward, BcnConfig, DboPlacement, LEVELS};
use crate::bilateral::DboParams;
use crate::error::{Error, Result};
use crate::mfrm::{mfrm_forward, MfrmConfig};
use crate::params::{ModelParams, ParamSpec, ParamVars};
use crate::supervision::{heads_forward, HeadOutputs, HeadVars, HeadsConfig};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub bcn: BcnConfig,
    #[serde(default)]
    pub mfrm: MfrmConfig,
    #[serde(default)]
    pub heads: HeadsConfig,
}

impl ModelConfig {
    /// A small network for CPU-scale experiments on 32×32 inputs.
    pub fn tiny() -> Self {
        ModelConfig {
            bcn: BcnConfig {
                input_size: 32,
                stem_channels: 8,
                level_channels: [[8, 8, 8]; LEVELS],
                dbo: DboParams::range_only(1.0),
                dbo_placement: DboPlacement::Input,
            },
            mfrm: MfrmConfig {
                compressed_channels: 4,
                kernel_size: 5,
                encoder_kernel: 5,
            },
            heads: HeadsConfig {
                hidden: vec![16, 8],
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bcn.validate()?;
        self.mfrm.validate(&self.bcn)?;
        self.heads.validate()
    }

    /// Side of the predicted maps.
    pub fn map_size(&self) -> usize {
        self.bcn.input_size >> LEVELS
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.bcn.param_specs();
        specs.extend(self.mfrm.param_specs(&self.bcn));
        specs.extend(self.heads.param_specs(self.mfrm.fused_channels(&self.bcn)));
        specs
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ModelParams<T>> {
        self.validate()?;
        Ok(ModelParams::init_uniform(&self.param_specs(), seed))
    }

    /// Records the whole network on an `[N, 3, S, S]` batch.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, image: crate::Var, vars: &ParamVars) -> Result<HeadVars> {
        let levels = bcn_forward(tape, image, vars, &self.bcn)?;
        let fused = mfrm_forward(tape, &levels, vars, &self.bcn, &self.mfrm)?;
        heads_forward(tape, fused, vars, &self.heads)
    }

    /// Inference without gradients.
    pub fn predict<T: Scalar>(&self, params: &ModelParams<T>, images: &Tensor<T>) -> Result<HeadOutputs<T>> {
        params.check_layout(&self.param_specs())?;
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let heads = self.forward(&mut tape, x, &vars)?;
        Ok(heads.outputs(&tape, self.heads.patch_mode))
    }

    /// Checks that an image batch fits the configured input.
    pub fn check_input<T: Scalar>(&self, images: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = images.dims4()?;
        let s = self.bcn.input_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::shape("model", format!("expected [N, 3, {s}, {s}], got {:?}", images.shape())));
        }
        Ok(())
    }
}
