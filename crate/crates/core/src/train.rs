//! Mini-batch training and scoring.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics::ScoredSample;
use crate::model::ModelConfig;
use crate::optim::{adam_step, lr_schedule, AdamConfig, AdamState};
use crate::params::ModelParams;
use crate::supervision::{score, supervise, BatchTargets, LossParts, PatchMode};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_halving_period: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Write `epoch_NNNNN.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 5e-5,
            batch_size: 7,
            max_epochs: 1300,
            lr_halving_period: 500,
            seed: 0,
            max_steps: None,
            checkpoint_every: 100,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 || self.lr_halving_period == 0 {
            return Err(Error::InvalidParam(
                "lr and batch_size and lr_halving_period must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A configuration file: training settings plus the network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_loss: LossParts,
}

/// Returned by the epoch callback.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Loss and gradients of one sample.
fn sample_grads(
    model: &ModelConfig,
    params: &ModelParams<f32>,
    sample: &Sample,
) -> Result<(ModelParams<f32>, LossParts)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(sample.image.clone());
    let heads = model.forward(&mut tape, x, &vars)?;
    let targets = BatchTargets::stack(&[&sample.targets])?;
    let (loss, parts) = supervise(&mut tape, &heads, &targets, model.heads.patch_mode)?;
    tape.backward(loss)?;
    Ok((vars.grads(&tape), parts))
}

/// Mean loss and gradient over a mini-batch. Samples run in parallel; the
/// reduction is sequential in batch order, so the result does not depend on
/// scheduling.
pub fn batch_grads(
    model: &ModelConfig,
    params: &ModelParams<f32>,
    batch: &[&Sample],
) -> Result<(ModelParams<f32>, LossParts)> {
    let per: Vec<(ModelParams<f32>, LossParts)> = batch
        .par_iter()
        .map(|s| sample_grads(model, params, s))
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f32;
    let mut iter = per.into_iter();
    let (mut acc, first) = iter.next().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let mut parts = first;
    for (g, p) in iter {
        for (name, a) in acc.iter_mut() {
            let src = g.get(name).expect("same layout");
            for (x, y) in a.data_mut().iter_mut().zip(src.data()) {
                *x += *y;
            }
        }
        parts.depth += p.depth;
        parts.reflection += p.reflection;
        parts.patch += p.patch;
        parts.total += p.total;
    }
    for (_, a) in acc.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    let n = batch.len() as f64;
    parts.depth /= n;
    parts.reflection /= n;
    parts.patch /= n;
    parts.total /= n;
    Ok((acc, parts))
}

fn check_classes(samples: &[Sample], mode: PatchMode) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if mode == PatchMode::Binary {
        let live = samples.iter().filter(|s| s.label.is_live()).count();
        if live == 0 || live == samples.len() {
            return Err(Error::Dataset("binary training needs both live and spoof samples".into()));
        }
    }
    Ok(())
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("epoch_{epoch:05}.ckpt"))
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
}

/// Trains from a seeded initialisation. With `out`, writes periodic and
/// final checkpoints and one JSON line per epoch. `on_epoch` sees the
/// parameters after each epoch and may stop the run early.
pub fn train(
    samples: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&RunDir>,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams<f32>) -> Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    check_classes(samples, model.heads.patch_mode)?;
    for s in samples {
        model.check_input(&s.image)?;
    }
    let mut params: ModelParams<f32> = model.init(cfg.seed)?;
    let mut state = AdamState::new(&params, cfg.adam);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(&dir.root)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.log())?))
        }
        None => None,
    };
    let meta = |epoch: usize, step: usize| serde_json::json!({ "epoch": epoch, "step": step, "seed": cfg.seed });

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0usize;
    'outer: for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg.lr, cfg.lr_halving_period);
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossParts::default();
        let mut n_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (grads, parts) = batch_grads(model, &params, &batch)?;
            adam_step(&mut params, &grads, &mut state, lr, cfg.weight_decay)?;
            steps.push(StepLog { step, epoch, lr, loss: parts });
            log::debug!("epoch {epoch} step {step} loss {:.5}", parts.total);
            sum.depth += parts.depth;
            sum.reflection += parts.reflection;
            sum.patch += parts.patch;
            sum.total += parts.total;
            n_steps += 1;
            step += 1;
        }
        if n_steps == 0 {
            break;
        }
        let k = n_steps as f64;
        let entry = EpochLog {
            epoch,
            steps: step,
            lr,
            mean_loss: LossParts {
                depth: sum.depth / k,
                reflection: sum.reflection / k,
                patch: sum.patch / k,
                total: sum.total / k,
            },
        };
        log::info!("epoch {epoch}: loss {:.5} (lr {lr:e})", entry.mean_loss.total);
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.epoch_checkpoint(epoch + 1), &params, model, meta(epoch + 1, step))?;
            }
        }
        epochs.push(entry);
        if on_epoch(&entry, &params) == Control::Stop {
            break 'outer;
        }
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&dir.final_checkpoint(), &params, model, meta(epochs.len(), step))?;
    }
    Ok(TrainOutcome { params, steps, epochs })
}

/// Scores samples in parallel chunks.
pub fn score_samples(model: &ModelConfig, params: &ModelParams<f32>, samples: &[Sample]) -> Result<Vec<ScoredSample>> {
    params.check_layout(&model.param_specs())?;
    let chunks: Vec<Vec<f64>> = samples
        .par_chunks(8)
        .map(|chunk| -> Result<Vec<f64>> {
            let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
            let batch = imageio::stack(&imgs)?;
            score(&model.predict(params, &batch)?)
        })
        .collect::<Result<_>>()?;
    Ok(chunks
        .into_iter()
        .flatten()
        .zip(samples)
        .map(|(score, s)| ScoredSample {
            score,
            live: s.label.is_live(),
            attack_type: s.attack_type.clone(),
        })
        .collect())
}
