//! Iterative refinement: cluster features, train on the units, extract a
//! layer of the trained model, cluster again.
//!
//! Work directory layout, one folder per iteration:
//!
//! ```text
//! <work_dir>/corpus/...            generated synthetic corpus (if any)
//! <work_dir>/it1/codebook.mucb
//! <work_dir>/it1/labels.txt
//! <work_dir>/it1/checkpoint.muck
//! <work_dir>/it1/train.json        loss curve and held-out accuracy
//! <work_dir>/it1/metrics.json      only when ground-truth phones exist
//! <work_dir>/it1/hashes.json       config hash per artifact
//! ```
//!
//! An artifact is reused when its file exists and its recorded hash matches
//! the hash of everything it depends on; otherwise it is rebuilt.

pub mod data;
pub mod stages;
pub mod studies;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{fit_codebook_matrix, select_utterances, Codebook, FitConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::io::{self, LabelLine, Manifest};
use crate::metrics::{build_contingency, MetricsReport};
use crate::model::{
    checkpoint, evaluate, extract_features, train, EvalReport, LossConfig, MaskedPredictionModel, ModelConfig,
    TrainConfig, TrainItem, TrainReport,
};
use crate::seed::derive_seed;

pub use data::{held_out_split, Corpus, Split};
pub use synthetic::{gen_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};

/// Features clustered at the start of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// The corpus features (MFCC or synthetic frames).
    Mfcc,
    /// Hidden layer of the previous iteration's checkpoint.
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationConfig {
    pub source: FeatureSource,
    pub clustering: FitConfig,
    /// Fraction of training utterances used to fit the codebook.
    pub subsample: f64,
    pub train: TrainConfig,
    /// Layer of this iteration's model that is clustered (with the same K)
    /// to score what the next iteration would see.
    pub probe_layer: Option<usize>,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            source: FeatureSource::Mfcc,
            clustering: FitConfig::default(),
            subsample: 0.1,
            train: TrainConfig::default(),
            probe_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSource {
    Synthetic(SyntheticCorpusSpec),
    Manifest {
        manifest: PathBuf,
        #[serde(default)]
        phones: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    /// Root of every derived random stream.
    pub seed: u64,
    pub held_out_fraction: f64,
    pub corpus: CorpusSource,
    pub model: ModelConfig,
    pub iterations: Vec<IterationConfig>,
    /// Settings shared by the alpha and mask-probability sweeps.
    pub ablation: studies::AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let middle = (model.num_layers / 2).max(1);
        let first = IterationConfig {
            probe_layer: Some(middle),
            ..IterationConfig::default()
        };
        let second = IterationConfig {
            source: FeatureSource::Layer(middle),
            ..first.clone()
        };
        Self {
            work_dir: PathBuf::from("work"),
            seed: 0,
            held_out_fraction: 0.2,
            corpus: CorpusSource::Synthetic(SyntheticCorpusSpec::default()),
            model,
            iterations: vec![first, second],
            ablation: studies::AblationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations.is_empty() {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if self.iterations[0].source != FeatureSource::Mfcc {
            return Err(Error::Config("iteration 1 must cluster mfcc features".into()));
        }
        for (i, it) in self.iterations.iter().enumerate().skip(1) {
            if let FeatureSource::Layer(l) = it.source {
                if l > self.model.num_layers {
                    return Err(Error::Config(format!(
                        "iteration {} uses layer {l}, model has {}",
                        i + 1,
                        self.model.num_layers
                    )));
                }
            } else {
                return Err(Error::Config(format!(
                    "iteration {} must cluster a layer of iteration {}",
                    i + 1,
                    i
                )));
            }
        }
        for it in &self.iterations {
            if it.probe_layer.is_some_and(|l| l > self.model.num_layers) {
                return Err(Error::Config("probe layer beyond the model depth".into()));
            }
        }
        Ok(())
    }

    pub fn iteration_dir(&self, i: usize) -> PathBuf {
        self.work_dir.join(format!("it{i}"))
    }
}

pub const CODEBOOK_FILE: &str = "codebook.mucb";
pub const LABELS_FILE: &str = "labels.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.muck";
pub const TRAIN_FILE: &str = "train.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const HASHES_FILE: &str = "hashes.json";

/// Hex SHA-256 over a sequence of serializable parts.
pub fn config_hash(parts: &[&dyn erased::Json]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.json_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

mod erased {
    pub trait Json {
        fn json_bytes(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn json_bytes(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("config values serialize")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: usize,
    pub k: usize,
    pub metrics: MetricsReport,
}

/// Held-out quality of an iteration's targets and of its model's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub source: FeatureSource,
    pub k: usize,
    pub teacher: MetricsReport,
    pub probe: Option<ProbeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub losses: Vec<f64>,
    pub held_out: EvalReport,
}

#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub dir: PathBuf,
    pub codebook: Codebook,
    pub labels: Vec<LabelLine>,
    pub checkpoint: PathBuf,
    pub train: TrainSummary,
    pub metrics: Option<IterationMetrics>,
}

/// Loaded corpus plus split, shared by all iterations of a run.
pub struct RunContext {
    pub config: PipelineConfig,
    pub corpus: Corpus,
    pub split: Split,
    corpus_hash: String,
}

impl RunContext {
    /// Loads (or generates) the corpus and draws the held-out split.
    pub fn prepare(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let (corpus, corpus_hash) = match &config.corpus {
            CorpusSource::Synthetic(spec) => {
                let dir = config.work_dir.join("corpus");
                let hash = config_hash(&[&"synthetic", spec]);
                let manifest_path = dir.join(synthetic::CORPUS_MANIFEST);
                let stamp = dir.join(HASHES_FILE);
                let fresh = read_hashes(&stamp).get("corpus") == Some(&hash) && manifest_path.exists();
                if !fresh {
                    gen_synthetic_corpus(spec)?.write(&dir)?;
                    write_hashes(&stamp, &BTreeMap::from([("corpus".to_string(), hash.clone())]))?;
                }
                let manifest = Manifest::read(&manifest_path)?;
                let corpus = Corpus::load(&manifest, Some(&dir.join(synthetic::CORPUS_PHONES)))?;
                (corpus, hash)
            }
            CorpusSource::Manifest { manifest, phones } => {
                let text = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
                let phone_bytes = match phones {
                    Some(p) if p.is_file() => fs::read(p).map_err(|e| Error::io(p, e))?,
                    _ => Vec::new(),
                };
                let corpus = Corpus::load(&Manifest::read(manifest)?, phones.as_deref())?;
                (corpus, config_hash(&[&"manifest", &text, &phone_bytes]))
            }
        };
        let split = held_out_split(corpus.len(), config.held_out_fraction, derive_seed(config.seed, &["split".into()]))?;
        Ok(Self {
            config,
            corpus,
            split,
            corpus_hash,
        })
    }

    fn model_config(&self, k: usize) -> ModelConfig {
        let mut m = self.config.model.clone();
        m.codebook_sizes = vec![k];
        if m.input_mode == crate::model::InputMode::Features {
            m.input_dim = self.corpus.feature_dim();
        }
        m
    }

    fn features_for(&self, i: usize) -> Result<(Vec<FeatureSequence>, String)> {
        let it = &self.config.iterations[i - 1];
        match it.source {
            FeatureSource::Mfcc => Ok((self.corpus.features.clone(), self.corpus_hash.clone())),
            FeatureSource::Layer(layer) => {
                let prev = self.config.iteration_dir(i - 1);
                let ckpt = prev.join(CHECKPOINT_FILE);
                if !ckpt.exists() {
                    return Err(Error::MissingArtifact(ckpt));
                }
                let prev_hash = read_hashes(&prev.join(HASHES_FILE))
                    .get("checkpoint")
                    .cloned()
                    .ok_or_else(|| Error::MissingArtifact(prev.join(HASHES_FILE)))?;
                let model = checkpoint::load(&ckpt)?;
                let inputs = self.corpus.model_inputs(model.config.input_mode)?;
                let feats = extract_features(&model, &inputs, layer)?;
                Ok((feats, config_hash(&[&prev_hash, &layer])))
            }
        }
    }

    /// Runs iteration `i` (1-based), reusing up-to-date artifacts.
    pub fn run_iteration(&self, i: usize) -> Result<IterationOutput> {
        if i == 0 || i > self.config.iterations.len() {
            return Err(Error::Config(format!("no iteration {i}")));
        }
        let it = &self.config.iterations[i - 1];
        let dir = self.config.iteration_dir(i);
        let hashes_path = dir.join(HASHES_FILE);
        let mut hashes = read_hashes(&hashes_path);
        let (feats, feat_hash) = self.features_for(i)?;
        let root = self.config.seed;
        let cluster_seed = derive_seed(root, &["iteration".into(), i.into(), "cluster".into()]);
        let fit = FitConfig {
            seed: cluster_seed,
            ..it.clustering.clone()
        };

        // codebook
        let cb_path = dir.join(CODEBOOK_FILE);
        let cb_hash = config_hash(&[&feat_hash, &fit, &it.subsample, &self.split.train]);
        let codebook = if fresh(&hashes, "codebook", &cb_hash, &cb_path) {
            Codebook::load(&cb_path)?
        } else {
            let cb = fit_on_split(&feats, &self.split.train, it.subsample, &fit)?;
            cb.save(&cb_path)?;
            hashes.insert("codebook".into(), cb_hash.clone());
            write_hashes(&hashes_path, &hashes)?;
            info!("iteration {i}: fitted K={} codebook", cb.k());
            cb
        };

        // labels
        let labels_path = dir.join(LABELS_FILE);
        let labels_hash = config_hash(&[&cb_hash]);
        let labels = if fresh(&hashes, "labels", &labels_hash, &labels_path) {
            data::align_labels(&feats, &io::read_label_file(&labels_path)?)?
        } else {
            let lines = assign_all(&codebook, &feats)?;
            io::write_label_file(&labels_path, lines.iter().map(|l| (l.utterance_id.as_str(), l.labels.as_slice())))?;
            hashes.insert("labels".into(), labels_hash.clone());
            write_hashes(&hashes_path, &hashes)?;
            lines
        };

        // checkpoint
        let model_cfg = self.model_config(codebook.k());
        let train_cfg = TrainConfig {
            seed: derive_seed(root, &["iteration".into(), i.into(), "train".into()]),
            ..it.train.clone()
        };
        let init_seed = derive_seed(root, &["iteration".into(), i.into(), "init".into()]);
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        let train_path = dir.join(TRAIN_FILE);
        let ckpt_hash = config_hash(&[&labels_hash, &model_cfg, &train_cfg, &init_seed]);
        let inputs = self.corpus.model_inputs(model_cfg.input_mode)?;
        let items = |idx: &[usize]| -> Vec<TrainItem> {
            idx.iter()
                .map(|&u| TrainItem {
                    utterance_id: inputs[u].0.clone(),
                    input: inputs[u].1.clone(),
                    targets: vec![labels[u].labels.clone()],
                })
                .collect()
        };
        let train_summary = if fresh(&hashes, "checkpoint", &ckpt_hash, &ckpt_path) && train_path.exists() {
            let text = fs::read_to_string(&train_path).map_err(|e| Error::io(&train_path, e))?;
            serde_json::from_str(&text)?
        } else {
            let mut model = MaskedPredictionModel::new(model_cfg, init_seed)?;
            let report: TrainReport = train(&mut model, &items(&self.split.train), &train_cfg, Some(&ckpt_path))?;
            checkpoint::save(&model, &ckpt_path)?;
            let stored = checkpoint::load(&ckpt_path)?;
            let held_out = evaluate(
                &stored,
                &items(&self.split.held_out),
                &train_cfg.mask,
                &LossConfig { alpha: train_cfg.alpha },
                derive_seed(root, &["iteration".into(), i.into(), "eval".into()]),
            )?;
            let summary = TrainSummary {
                steps: train_cfg.steps,
                final_loss: report.losses.last().copied(),
                losses: report.losses,
                held_out,
            };
            write_json(&train_path, &summary)?;
            hashes.insert("checkpoint".into(), ckpt_hash.clone());
            write_hashes(&hashes_path, &hashes)?;
            summary
        };

        // metrics
        let metrics_path = dir.join(METRICS_FILE);
        let metrics = match &self.corpus.phones {
            None => None,
            Some(phones) => {
                let m_hash = config_hash(&[&labels_hash, &ckpt_hash, &it.probe_layer]);
                if fresh(&hashes, "metrics", &m_hash, &metrics_path) {
                    let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
                    Some(serde_json::from_str(&text)?)
                } else {
                    let teacher = held_out_report(phones, &labels, &self.split.held_out)?;
                    let probe = match it.probe_layer {
                        None => None,
                        Some(layer) => {
                            let model = checkpoint::load(&ckpt_path)?;
                            let inputs = self.corpus.model_inputs(model.config.input_mode)?;
                            let lf = extract_features(&model, &inputs, layer)?;
                            let probe_fit = FitConfig {
                                seed: derive_seed(root, &["iteration".into(), (i + 1).into(), "cluster".into()]),
                                ..it.clustering.clone()
                            };
                            let cb = fit_on_split(&lf, &self.split.train, it.subsample, &probe_fit)?;
                            let lines = assign_all(&cb, &lf)?;
                            Some(ProbeReport {
                                layer,
                                k: cb.k(),
                                metrics: held_out_report(phones, &lines, &self.split.held_out)?,
                            })
                        }
                    };
                    let m = IterationMetrics {
                        iteration: i,
                        source: it.source,
                        k: codebook.k(),
                        teacher,
                        probe,
                    };
                    write_json(&metrics_path, &m)?;
                    hashes.insert("metrics".into(), m_hash);
                    write_hashes(&hashes_path, &hashes)?;
                    Some(m)
                }
            }
        };
        if let Some(m) = &metrics {
            info!(
                "iteration {i}: teacher PNMI {:.4}{}",
                m.teacher.pnmi,
                m.probe
                    .as_ref()
                    .map(|p| format!(", layer {} PNMI {:.4}", p.layer, p.metrics.pnmi))
                    .unwrap_or_default()
            );
        }
        Ok(IterationOutput {
            dir,
            codebook,
            labels,
            checkpoint: ckpt_path,
            train: train_summary,
            metrics,
        })
    }
}

/// Runs every configured iteration in order.
pub fn run_pipeline(config: PipelineConfig) -> Result<Vec<IterationOutput>> {
    let ctx = RunContext::prepare(config)?;
    (1..=ctx.config.iterations.len()).map(|i| ctx.run_iteration(i)).collect()
}

fn fresh(hashes: &BTreeMap<String, String>, key: &str, hash: &str, path: &Path) -> bool {
    path.exists() && hashes.get(key).is_some_and(|h| h == hash)
}

fn read_hashes(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

fn write_hashes(path: &Path, h: &BTreeMap<String, String>) -> Result<()> {
    write_json(path, h)
}

/// Pretty JSON with a trailing newline, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    io::write_bytes(path, s.as_bytes())
}

/// Fits a codebook on a subsample of the `train` utterances.
pub fn fit_on_split(feats: &[FeatureSequence], train: &[usize], subsample: f64, fit: &FitConfig) -> Result<Codebook> {
    let picked = select_utterances(train.len(), subsample, fit.seed)?;
    let mut idx: Vec<usize> = picked.iter().map(|&j| train[j]).collect();
    let frames: usize = idx.iter().map(|&u| feats[u].num_frames()).sum();
    if frames < fit.k {
        // too few frames in the subsample: fall back to the whole training side
        idx = train.to_vec();
    }
    let data = data::stack_frames(feats, &idx)?;
    let kind = feats.first().map_or(FeatureKind::Mfcc, |f| f.kind);
    Codebook::full(fit_codebook_matrix(data.view(), fit)?.0, kind)
}

pub fn assign_all(cb: &Codebook, feats: &[FeatureSequence]) -> Result<Vec<LabelLine>> {
    feats
        .iter()
        .map(|f| {
            Ok(LabelLine {
                utterance_id: f.utterance_id.clone(),
                labels: cb.assign(f)?.labels,
            })
        })
        .collect()
}

/// Scores unit labels against phones over the chosen utterances.
pub fn held_out_report(
    phones: &[crate::metrics::AlignmentLabels],
    units: &[LabelLine],
    idx: &[usize],
) -> Result<MetricsReport> {
    let table = build_contingency(idx.iter().map(|&i| (&phones[i], units[i].labels.as_slice())))?;
    MetricsReport::from_table(&table)
}
