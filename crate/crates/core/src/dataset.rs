//! Decoded samples ready for training or scoring.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio;
use crate::manifest::ManifestEntry;
use crate::model::ModelConfig;
use crate::supervision::{make_targets, Label, SupervisionTargets};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 3, S, S]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub targets: SupervisionTargets,
    pub label: Label,
    pub attack_type: Option<String>,
}

/// Fits an `[H, W, 3]` image to the network input by block averaging.
pub fn fit_input(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let small = imageio::fit_square(image, size)?;
    imageio::hwc_to_nchw(&small)
}

pub fn load_image(path: &std::path::Path, size: usize) -> Result<Tensor<f32>> {
    let img = imageio::load_rgb(path)?;
    fit_input(&img, size).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Decodes every entry. The synthetic-reflection fallback of entry `i` is
/// seeded with `i`, so loading is deterministic.
pub fn load_samples(entries: &[ManifestEntry], model: &ModelConfig) -> Result<Vec<Sample>> {
    let size = model.bcn.input_size;
    let map = model.map_size();
    let mode = model.heads.patch_mode;
    entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let label = Label::parse(&e.label, mode)?;
            Ok(Sample {
                image: load_image(&e.image_path, size)?,
                targets: make_targets(
                    label,
                    map,
                    e.depth_map_path.as_deref(),
                    e.reflection_map_path.as_deref(),
                    i as u64,
                )?,
                label,
                attack_type: e.attack_type.clone(),
            })
        })
        .collect()
}
