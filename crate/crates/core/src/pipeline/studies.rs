//! Ablation harnesses: k-means stability, per-layer clustering quality,
//! loss-weight and mask-probability sweeps, and cluster ensembles.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{assign_all, data, fit_on_split, held_out_report, RunContext};
use crate::clustering::{pq_fit, select_utterances, ClusterEnsemble, FitConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::io::LabelLine;
use crate::masking::MaskConfig;
use crate::metrics::{AlignmentLabels, MetricsReport};
use crate::model::{
    evaluate, extract_features, train, EvalReport, LossConfig, MaskedPredictionModel, TrainConfig,
    TrainItem,
};
use crate::seed::{derive_seed, rng_from};

/// Replaces `round(fraction·T)` frames of every utterance with a uniformly
/// drawn different class.
pub fn corrupt_labels(lines: &[LabelLine], fraction: f64, num_classes: usize, seed: u64) -> Result<Vec<LabelLine>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    if num_classes < 2 {
        return Err(Error::Config("corruption needs at least two classes".into()));
    }
    lines
        .iter()
        .enumerate()
        .map(|(u, line)| {
            let mut rng = rng_from(seed, &["corrupt".into(), u.into()]);
            let t = line.labels.len();
            let n = ((fraction * t as f64).round() as usize).min(t);
            let mut labels = line.labels.clone();
            for i in sample(&mut rng, t, n) {
                let old = labels[i];
                if old as usize >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: old as usize,
                        size: num_classes,
                    });
                }
                let r = rng.random_range(0..num_classes as u32 - 1);
                labels[i] = if r >= old { r + 1 } else { r };
            }
            Ok(LabelLine {
                utterance_id: line.utterance_id.clone(),
                labels,
            })
        })
        .collect()
}

fn phone_lines(phones: &[AlignmentLabels]) -> Vec<LabelLine> {
    phones
        .iter()
        .map(|p| LabelLine {
            utterance_id: p.utterance_id.clone(),
            labels: p.labels.clone(),
        })
        .collect()
}

fn require_phones(ctx: &RunContext) -> Result<&[AlignmentLabels]> {
    ctx.corpus.phones.as_deref().ok_or(Error::DegeneratePhones)
}

// ---------------------------------------------------------------------------
// stability

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityGrid {
    pub ks: Vec<usize>,
    /// Fractions of the training utterances used for fitting.
    pub train_sizes: Vec<f64>,
    pub trials: usize,
    /// `mean[i][j]` is the mean held-out PNMI for `ks[i]`, `train_sizes[j]`.
    pub mean: Vec<Vec<f64>>,
    /// Population standard deviation over trials.
    pub std: Vec<Vec<f64>>,
}

/// Fits `trials` independent codebooks per (K, size) cell and scores each
/// on the held-out utterances.
#[allow(clippy::too_many_arguments)]
pub fn stability_study(
    features: &[FeatureSequence],
    phones: &[AlignmentLabels],
    split: &data::Split,
    ks: &[usize],
    train_sizes: &[f64],
    trials: usize,
    base: &FitConfig,
    seed: u64,
) -> Result<StabilityGrid> {
    if trials == 0 || ks.is_empty() || train_sizes.is_empty() {
        return Err(Error::Config("stability study needs K values, sizes and trials".into()));
    }
    let mut mean = vec![vec![0.0; train_sizes.len()]; ks.len()];
    let mut std = mean.clone();
    for (i, &k) in ks.iter().enumerate() {
        for (j, &size) in train_sizes.iter().enumerate() {
            let mut scores = Vec::with_capacity(trials);
            for trial in 0..trials {
                let fit = FitConfig {
                    k,
                    seed: derive_seed(seed, &["stability".into(), i.into(), j.into(), trial.into()]),
                    ..base.clone()
                };
                let cb = fit_on_split(features, &split.train, size, &fit)?;
                let units = assign_all(&cb, features)?;
                scores.push(held_out_report(phones, &units, &split.held_out)?.pnmi);
            }
            let m = scores.iter().sum::<f64>() / trials as f64;
            let var = scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / trials as f64;
            mean[i][j] = m;
            std[i][j] = var.sqrt();
        }
    }
    Ok(StabilityGrid {
        ks: ks.to_vec(),
        train_sizes: train_sizes.to_vec(),
        trials,
        mean,
        std,
    })
}

// ---------------------------------------------------------------------------
// layer sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepRow {
    pub layer: usize,
    pub k: usize,
    pub cluster_purity: f64,
    pub phone_purity: f64,
    pub pnmi: f64,
}

/// Clusters every layer `0..=num_layers` for every K; rows are ordered by
/// layer, then K.
#[allow(clippy::too_many_arguments)]
pub fn layer_sweep(
    model: &MaskedPredictionModel,
    inputs: &[(String, Array2<f64>)],
    phones: &[AlignmentLabels],
    split: &data::Split,
    ks: &[usize],
    subsample: f64,
    base: &FitConfig,
    seed: u64,
) -> Result<Vec<LayerSweepRow>> {
    let mut rows = Vec::new();
    for layer in 0..=model.config.num_layers {
        let feats = extract_features(model, inputs, layer)?;
        for &k in ks {
            let fit = FitConfig {
                k,
                seed: derive_seed(seed, &["layer-sweep".into(), k.into()]),
                ..base.clone()
            };
            let cb = fit_on_split(&feats, &split.train, subsample, &fit)?;
            let r = held_out_report(phones, &assign_all(&cb, &feats)?, &split.held_out)?;
            rows.push(LayerSweepRow {
                layer,
                k,
                cluster_purity: r.cluster_purity,
                phone_purity: r.phone_purity,
                pnmi: r.pnmi,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// training ablations

/// Where the training targets of an ablation come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherConfig {
    /// Ground-truth phones with a fraction of frames relabelled at random.
    /// Held-out accuracy is scored against the clean phones.
    NoisyPhones { corruption: f64 },
    /// k-means on the corpus features; scored against the same labels.
    Kmeans { clustering: FitConfig, subsample: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub teacher: TeacherConfig,
    /// Masks for held-out scoring; fixed across settings.
    pub eval_mask: MaskConfig,
    /// Layer clustered after training to report downstream PNMI.
    pub probe_layer: Option<usize>,
    pub probe_clustering: FitConfig,
    pub probe_subsample: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            teacher: TeacherConfig::NoisyPhones { corruption: 0.4 },
            eval_mask: MaskConfig::default(),
            probe_layer: Some(1),
            probe_clustering: FitConfig::default(),
            probe_subsample: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub alpha: f64,
    pub mask_prob: f64,
    pub final_loss: Option<f64>,
    pub held_out: EvalReport,
    pub probe: Option<MetricsReport>,
}

struct Teacher {
    targets: Vec<LabelLine>,
    scoring: Vec<LabelLine>,
    classes: usize,
}

fn build_teacher(ctx: &RunContext, cfg: &TeacherConfig, seed: u64) -> Result<Teacher> {
    match cfg {
        TeacherConfig::NoisyPhones { corruption } => {
            let clean = phone_lines(require_phones(ctx)?);
            let classes = clean.iter().flat_map(|l| l.labels.iter()).max().map_or(0, |&m| m as usize + 1);
            let targets = corrupt_labels(&clean, *corruption, classes, derive_seed(seed, &["corrupt".into()]))?;
            Ok(Teacher {
                targets,
                scoring: clean,
                classes,
            })
        }
        TeacherConfig::Kmeans { clustering, subsample } => {
            let fit = FitConfig {
                seed: derive_seed(seed, &["cluster".into()]),
                ..clustering.clone()
            };
            let cb = fit_on_split(&ctx.corpus.features, &ctx.split.train, *subsample, &fit)?;
            let targets = assign_all(&cb, &ctx.corpus.features)?;
            Ok(Teacher {
                scoring: targets.clone(),
                targets,
                classes: cb.k(),
            })
        }
    }
}

fn items(inputs: &[(String, Array2<f64>)], targets: &[Vec<Vec<u32>>], idx: &[usize]) -> Vec<TrainItem> {
    idx.iter()
        .map(|&u| TrainItem {
            utterance_id: inputs[u].0.clone(),
            input: inputs[u].1.clone(),
            targets: targets[u].clone(),
        })
        .collect()
}

fn single_head(lines: &[LabelLine]) -> Vec<Vec<Vec<u32>>> {
    lines.iter().map(|l| vec![l.labels.clone()]).collect()
}

fn run_setting(ctx: &RunContext, cfg: &AblationConfig, teacher: &Teacher, train_cfg: &TrainConfig) -> Result<SettingReport> {
    let root = derive_seed(ctx.config.seed, &["ablation".into()]);
    let mut model_cfg = ctx.config.model.clone();
    model_cfg.codebook_sizes = vec![teacher.classes];
    if model_cfg.input_mode == crate::model::InputMode::Features {
        model_cfg.input_dim = ctx.corpus.feature_dim();
    }
    let inputs = ctx.corpus.model_inputs(model_cfg.input_mode)?;
    let train_cfg = TrainConfig {
        seed: derive_seed(root, &["train".into()]),
        ..train_cfg.clone()
    };
    let mut model = MaskedPredictionModel::new(model_cfg, derive_seed(root, &["init".into()]))?;
    let report = train(
        &mut model,
        &items(&inputs, &single_head(&teacher.targets), &ctx.split.train),
        &train_cfg,
        None,
    )?;
    let held_out = evaluate(
        &model,
        &items(&inputs, &single_head(&teacher.scoring), &ctx.split.held_out),
        &cfg.eval_mask,
        &LossConfig { alpha: train_cfg.alpha },
        derive_seed(root, &["eval".into()]),
    )?;
    let probe = match (cfg.probe_layer, ctx.corpus.phones.as_deref()) {
        (Some(layer), Some(phones)) => {
            let feats = extract_features(&model, &inputs, layer)?;
            let fit = FitConfig {
                seed: derive_seed(root, &["probe".into()]),
                ..cfg.probe_clustering.clone()
            };
            let cb = fit_on_split(&feats, &ctx.split.train, cfg.probe_subsample, &fit)?;
            Some(held_out_report(phones, &assign_all(&cb, &feats)?, &ctx.split.held_out)?)
        }
        _ => None,
    };
    Ok(SettingReport {
        alpha: train_cfg.alpha,
        mask_prob: train_cfg.mask.p,
        final_loss: report.losses.last().copied(),
        held_out,
        probe,
    })
}

/// One model per α, all sharing teacher, initialisation and data order.
pub fn alpha_sweep(ctx: &RunContext, cfg: &AblationConfig, alphas: &[f64]) -> Result<Vec<SettingReport>> {
    let teacher = build_teacher(ctx, &cfg.teacher, derive_seed(ctx.config.seed, &["ablation-teacher".into()]))?;
    alphas
        .iter()
        .map(|&alpha| {
            let t = TrainConfig {
                alpha,
                ..cfg.train.clone()
            };
            run_setting(ctx, cfg, &teacher, &t)
        })
        .collect()
}

/// One model per mask start probability; held-out scoring keeps
/// `cfg.eval_mask` so settings are comparable.
pub fn mask_prob_sweep(ctx: &RunContext, cfg: &AblationConfig, probs: &[f64]) -> Result<Vec<SettingReport>> {
    let teacher = build_teacher(ctx, &cfg.teacher, derive_seed(ctx.config.seed, &["ablation-teacher".into()]))?;
    probs
        .iter()
        .map(|&p| {
            let mut t = cfg.train.clone();
            t.mask.p = p;
            run_setting(ctx, cfg, &teacher, &t)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ensembles

/// Codebooks used jointly as parallel targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleTeacher {
    /// Independent k-means codebooks of the given sizes over all dims.
    Kmeans { ks: Vec<usize> },
    /// Product quantization: one K-codebook per dimension subset.
    Product { partition: Vec<Vec<usize>>, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub codebook_sizes: Vec<usize>,
    pub head_count: usize,
    /// Held-out loss per masked frame and head before any update.
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub held_out: EvalReport,
    /// Held-out quality of each codebook's labels.
    pub teachers: Vec<MetricsReport>,
}

pub struct EnsembleOutput {
    pub ensemble: ClusterEnsemble,
    pub model: MaskedPredictionModel,
    pub report: EnsembleReport,
}

/// Trains iteration 1 of `ctx` with the multi-head loss over several
/// codebooks fitted on the corpus features. Seeds follow iteration 1 of the
/// plain pipeline, so a single K reproduces its model exactly.
pub fn ensemble_run(ctx: &RunContext, teacher: &EnsembleTeacher) -> Result<EnsembleOutput> {
    let it = ctx
        .config
        .iterations
        .first()
        .ok_or_else(|| Error::Config("no iteration configured".into()))?;
    let root = ctx.config.seed;
    let fit = FitConfig {
        seed: derive_seed(root, &["iteration".into(), 1usize.into(), "cluster".into()]),
        ..it.clustering.clone()
    };
    let feats = &ctx.corpus.features;
    let ensemble = match teacher {
        EnsembleTeacher::Kmeans { ks } => {
            if ks.is_empty() {
                return Err(Error::Config("ensemble needs at least one codebook".into()));
            }
            let codebooks = ks
                .iter()
                .map(|&k| fit_on_split(feats, &ctx.split.train, it.subsample, &FitConfig { k, ..fit.clone() }))
                .collect::<Result<Vec<_>>>()?;
            ClusterEnsemble { codebooks }
        }
        EnsembleTeacher::Product { partition, k } => {
            let picked = select_utterances(ctx.split.train.len(), it.subsample, fit.seed)?;
            let idx: Vec<usize> = picked.iter().map(|&j| ctx.split.train[j]).collect();
            let frames = data::stack_frames(feats, &idx)?;
            let kind = feats.first().map_or(crate::features::FeatureKind::Mfcc, |f| f.kind);
            pq_fit(frames.view(), partition, *k, kind, &fit)?
        }
    };
    let per_book: Vec<Vec<LabelLine>> = ensemble
        .codebooks
        .iter()
        .map(|cb| -> Result<Vec<LabelLine>> {
            feats
                .iter()
                .map(|f| {
                    Ok(LabelLine {
                        utterance_id: f.utterance_id.clone(),
                        labels: cb.assign(f)?.labels,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<Vec<u32>>> = (0..feats.len())
        .map(|u| per_book.iter().map(|b| b[u].labels.clone()).collect())
        .collect();

    let sizes: Vec<usize> = ensemble.codebooks.iter().map(|c| c.k()).collect();
    let mut model_cfg = ctx.config.model.clone();
    model_cfg.codebook_sizes = sizes.clone();
    if model_cfg.input_mode == crate::model::InputMode::Features {
        model_cfg.input_dim = ctx.corpus.feature_dim();
    }
    let train_cfg = TrainConfig {
        seed: derive_seed(root, &["iteration".into(), 1usize.into(), "train".into()]),
        ..it.train.clone()
    };
    let inputs = ctx.corpus.model_inputs(model_cfg.input_mode)?;
    let mut model = MaskedPredictionModel::new(
        model_cfg,
        derive_seed(root, &["iteration".into(), 1usize.into(), "init".into()]),
    )?;
    let held = items(&inputs, &targets, &ctx.split.held_out);
    let eval_seed = derive_seed(root, &["iteration".into(), 1usize.into(), "eval".into()]);
    let masked_only = LossConfig { alpha: 1.0 };
    let initial = evaluate(&model, &held, &train_cfg.mask, &masked_only, eval_seed)?;
    let report = train(&mut model, &items(&inputs, &targets, &ctx.split.train), &train_cfg, None)?;
    let held_out = evaluate(&model, &held, &train_cfg.mask, &LossConfig { alpha: train_cfg.alpha }, eval_seed)?;
    let teachers = match ctx.corpus.phones.as_deref() {
        Some(phones) => per_book
            .iter()
            .map(|b| held_out_report(phones, b, &ctx.split.held_out))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    Ok(EnsembleOutput {
        report: EnsembleReport {
            head_count: model.num_heads(),
            codebook_sizes: sizes,
            initial_loss: initial.loss,
            final_loss: report.losses.last().copied(),
            held_out,
            teachers,
        },
        ensemble,
        model,
    })
}
