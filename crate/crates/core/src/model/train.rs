use std::path::Path;

use log::{debug, info, warn};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{InputMode, LossConfig};
use super::network::{crop_input, crop_targets, loss, HeadAccuracy, MaskedPredictionModel};
use super::optim::{Adam, AdamConfig, Schedule};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::masking::{sample_mask, MaskConfig, MaskSpec};
use crate::seed::{derive_seed, rng_from};

/// One utterance with a target stream per head.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub utterance_id: String,
    /// Feature frames, or one column of samples in waveform mode.
    pub input: Array2<f64>,
    pub targets: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    /// Frames per random training crop; longer utterances are cut.
    pub crop_frames: usize,
    pub alpha: f64,
    pub mask: MaskConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            peak_lr: 2e-3,
            warmup_frac: 0.08,
            crop_frames: 100,
            alpha: 1.0,
            mask: MaskConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            total_steps: self.steps,
            warmup_frac: self.warmup_frac,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { alpha: self.alpha }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per weighted frame and head, one entry per step.
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

fn check_items(model: &MaskedPredictionModel, data: &[TrainItem]) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    data.iter()
        .map(|item| {
            let t = model.num_frames(item.input.nrows())?;
            if item.targets.len() != model.num_heads() {
                return Err(Error::Shape(format!(
                    "{}: {} target streams for {} heads",
                    item.utterance_id,
                    item.targets.len(),
                    model.num_heads()
                )));
            }
            for z in &item.targets {
                if z.len() != t {
                    return Err(Error::LengthMismatch {
                        utterance: item.utterance_id.clone(),
                        left: t,
                        right: z.len(),
                    });
                }
            }
            Ok(t)
        })
        .collect()
}

/// Gradient of the batch objective (summed loss divided by total frame weight).
pub struct BatchResult {
    pub loss: f64,
    pub weight: f64,
    pub grads: Vec<Array2<f64>>,
    pub accuracy: Vec<HeadAccuracy>,
}

/// Forward and backward over one utterance with a fixed mask.
pub fn item_gradients(
    model: &MaskedPredictionModel,
    input: ArrayView2<f64>,
    targets: &[Vec<u32>],
    mask: &MaskSpec,
    lc: &LossConfig,
    layerdrop: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<BatchResult> {
    let pass = model.forward_pass(input, mask, layerdrop)?;
    let z: Vec<&[u32]> = targets.iter().map(|v| v.as_slice()).collect();
    let out = loss(&pass.logits, &z, mask, lc)?;
    let grads = model.backward(&pass, &out.dlogits)?;
    Ok(BatchResult {
        loss: out.loss,
        weight: out.weight,
        grads,
        accuracy: out.accuracy,
    })
}

/// Trains in place. Batches, crops, masks and layerdrop are all drawn from
/// streams derived from `cfg.seed` and the step index.
pub fn train(
    model: &mut MaskedPredictionModel,
    data: &[TrainItem],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainReport> {
    let lengths = check_items(model, data)?;
    cfg.mask.validate()?;
    let lc = cfg.loss_config();
    lc.validate()?;
    if cfg.batch_size == 0 || cfg.crop_frames == 0 {
        return Err(Error::Config("batch_size and crop_frames must be at least 1".into()));
    }
    let schedule = cfg.schedule();
    let mut opt = Adam::new(cfg.adam, &model.params.values);
    let mut report = TrainReport::default();
    let heads = model.num_heads() as f64;
    for step in 0..cfg.steps {
        let lr = schedule.lr_at(step);
        let mut rng = rng_from(cfg.seed, &["batch".into(), step.into()]);
        let mut grads = model.params.zeros_like();
        let mut total_loss = 0.0;
        let mut total_weight = 0.0;
        for b in 0..cfg.batch_size {
            let i = rng.random_range(0..data.len());
            let t = lengths[i];
            let len = cfg.crop_frames.min(t);
            let start = rng.random_range(0..=t - len);
            let input = crop_input(&model.config, &data[i].input, start, len);
            let targets = crop_targets(&data[i].targets, start, len);
            let mask = sample_mask(
                len,
                &cfg.mask,
                derive_seed(cfg.seed, &["mask".into(), step.into(), b.into()]),
            )?;
            let mut drop_rng = rng_from(cfg.seed, &["layerdrop".into(), step.into(), b.into()]);
            let r = match item_gradients(model, input.view(), &targets, &mask, &lc, Some(&mut drop_rng)) {
                Ok(r) => r,
                Err(e @ (Error::NonFiniteActivation { .. } | Error::NonFiniteGradient { .. })) => {
                    warn!("step {step}: {e}");
                    return Err(diverged(model, step, checkpoint_path));
                }
                Err(e) => return Err(e),
            };
            total_loss += r.loss;
            total_weight += r.weight;
            for (g, d) in grads.iter_mut().zip(&r.grads) {
                *g += d;
            }
        }
        if !total_loss.is_finite() {
            return Err(diverged(model, step, checkpoint_path));
        }
        let norm = total_weight.max(1.0);
        for g in &mut grads {
            g.mapv_inplace(|v| v / norm);
        }
        let before = model.params.values.clone();
        opt.step(&mut model.params.values, &grads, lr);
        if !model.params.all_finite() {
            model.params.values = before;
            return Err(diverged(model, step, checkpoint_path));
        }
        model.step += 1;
        let mean = total_loss / (norm * heads);
        report.losses.push(mean);
        report.learning_rates.push(lr);
        if step % 100 == 0 || step + 1 == cfg.steps {
            debug!("step {step} lr {lr:.3e} loss {mean:.4}");
        }
        if cfg.checkpoint_every > 0 && model.step % cfg.checkpoint_every == 0 {
            if let Some(p) = checkpoint_path {
                checkpoint::save(model, p)?;
            }
        }
    }
    if let Some(last) = report.losses.last() {
        info!("trained {} steps, final loss {last:.4}", cfg.steps);
    }
    Ok(report)
}

fn diverged(model: &MaskedPredictionModel, step: u64, path: Option<&Path>) -> Error {
    let checkpoint = path.and_then(|p| checkpoint::save(model, p).ok().map(|_| p.to_path_buf()));
    Error::Diverged { step, checkpoint }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean loss per weighted frame and head.
    pub loss: f64,
    pub masked_accuracy: Vec<f64>,
    pub unmasked_accuracy: Vec<f64>,
    pub masked_frames: usize,
}

/// Eval-mode loss and accuracy on whole utterances, masks from `seed`.
pub fn evaluate(
    model: &MaskedPredictionModel,
    data: &[TrainItem],
    mask_cfg: &MaskConfig,
    lc: &LossConfig,
    seed: u64,
) -> Result<EvalReport> {
    let lengths = check_items(model, data)?;
    let mut acc = vec![HeadAccuracy::default(); model.num_heads()];
    let mut total = 0.0;
    let mut weight = 0.0;
    for (i, (item, &t)) in data.iter().zip(&lengths).enumerate() {
        let mask = sample_mask(t, mask_cfg, derive_seed(seed, &["eval-mask".into(), i.into()]))?;
        let pass = model.forward_pass(item.input.view(), &mask, None)?;
        let z: Vec<&[u32]> = item.targets.iter().map(|v| v.as_slice()).collect();
        let out = loss(&pass.logits, &z, &mask, lc)?;
        total += out.loss;
        weight += out.weight;
        for (a, b) in acc.iter_mut().zip(&out.accuracy) {
            a.add(b);
        }
    }
    Ok(EvalReport {
        loss: total / (weight.max(1.0) * model.num_heads() as f64),
        masked_accuracy: acc.iter().map(|a| a.masked()).collect(),
        unmasked_accuracy: acc.iter().map(|a| a.unmasked()).collect(),
        masked_frames: acc.first().map_or(0, |a| a.masked_total),
    })
}

/// Eval-mode hidden states of one layer, no masking.
pub fn extract_layer(model: &MaskedPredictionModel, input: ArrayView2<f64>, layer: usize) -> Result<Array2<f64>> {
    if layer > model.config.num_layers {
        return Err(Error::InvalidInput(format!(
            "layer {layer} out of range 0..={}",
            model.config.num_layers
        )));
    }
    let t = model.num_frames(input.nrows())?;
    let mut hidden = model.forward(input, &MaskSpec::empty(t))?;
    Ok(hidden.swap_remove(layer))
}

/// Layer features for every utterance, tagged with the layer index.
pub fn extract_features(
    model: &MaskedPredictionModel,
    inputs: &[(String, Array2<f64>)],
    layer: usize,
) -> Result<Vec<FeatureSequence>> {
    let rate = match model.config.input_mode {
        InputMode::Waveform => 16000 / model.config.total_stride() as u32,
        InputMode::Features => 50,
    };
    inputs
        .iter()
        .map(|(id, x)| {
            let h = extract_layer(model, x.view(), layer)?;
            FeatureSequence::new(h.mapv(|v| v as f32), rate, FeatureKind::EncoderLayer(layer as u8), id.clone())
        })
        .collect()
}
