//! Single stages of the pipeline operating on files, as exposed by the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{align_labels, Corpus};
use crate::clustering::{collect_frames, fit_codebook, select_utterances, ClusterEnsemble, Codebook, FeatureFiles, FitConfig};
use crate::error::{Error, Result};
use crate::features::{compute_mfcc, load_wav, splice, FeatureKind, MfccConfig};
use crate::io::{self, LabelLine, Manifest};
use crate::model::{checkpoint, extract_features, train, MaskedPredictionModel, ModelConfig, TrainConfig, TrainItem};
use crate::seed::derive_seed;

/// MFCCs (optionally spliced) for every manifest entry, written as
/// `<out_dir>/<utterance>.mulf`. Returns the written paths.
pub fn mfcc_stage(manifest: &Path, out_dir: &Path, splice_window: Option<usize>) -> Result<Vec<PathBuf>> {
    let m = Manifest::read(manifest)?;
    let cfg = MfccConfig::default();
    let mut written = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let mut w = load_wav(m.path_of(i))?;
        w.utterance_id = m.utterance_id(i);
        let mut f = compute_mfcc(&w, &cfg)?;
        if let Some(win) = splice_window {
            f = splice(&f, win)?;
        }
        let out = out_dir.join(format!("{}.{}", f.utterance_id, io::FEATURE_EXT));
        io::write_features(&out, &f)?;
        written.push(out);
    }
    Ok(written)
}

/// Options of the `cluster fit` stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFitOptions {
    pub fit: FitConfig,
    /// Fraction of utterances whose frames are used.
    pub subsample: f64,
}

/// Fits one codebook on a subsample of the feature files in `features`.
pub fn cluster_fit_stage(features: &Path, opts: &ClusterFitOptions, out: &Path) -> Result<Codebook> {
    let paths = io::list_feature_files(features)?;
    if paths.is_empty() {
        return Err(Error::MissingArtifact(features.to_path_buf()));
    }
    let kind = io::read_features(&paths[0])?.kind;
    let source = FeatureFiles { paths };
    let picked = select_utterances(source.paths.len(), opts.subsample, derive_seed(opts.fit.seed, &["subsample".into()]))?;
    let data = collect_frames(&source, &picked)?;
    let cb = fit_codebook(data.view(), kind, &opts.fit)?;
    cb.save(out)?;
    Ok(cb)
}

/// Label file paths written by [`cluster_assign_stage`]: `out` itself for a
/// single codebook, `<stem>.<i>.<ext>` per codebook for an ensemble.
pub fn assign_outputs(out: &Path, codebooks: usize) -> Vec<PathBuf> {
    if codebooks == 1 {
        return vec![out.to_path_buf()];
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "txt".into());
    (0..codebooks).map(|i| out.with_file_name(format!("{stem}.{i}.{ext}"))).collect()
}

/// Labels every feature file with a codebook file or an ensemble directory.
pub fn cluster_assign_stage(codebook: &Path, features: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    if !codebook.exists() {
        return Err(Error::MissingArtifact(codebook.to_path_buf()));
    }
    let ensemble = ClusterEnsemble::load_any(codebook)?;
    let paths = io::list_feature_files(features)?;
    let mut per_book: Vec<Vec<LabelLine>> = vec![Vec::with_capacity(paths.len()); ensemble.codebooks.len()];
    for p in &paths {
        let f = io::read_features(p)?;
        for (lines, seq) in per_book.iter_mut().zip(ensemble.assign(&f)?) {
            lines.push(LabelLine {
                utterance_id: seq.utterance_id,
                labels: seq.labels,
            });
        }
    }
    let outs = assign_outputs(out, ensemble.codebooks.len());
    for (path, lines) in outs.iter().zip(&per_book) {
        io::write_label_file(path, lines.iter().map(|l| (l.utterance_id.as_str(), l.labels.as_slice())))?;
    }
    Ok(outs)
}

/// Contents of the `--config` file of the `train` stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainStageConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainStageConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Command-line overrides of the `train` stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOverrides {
    pub alpha: Option<f64>,
    pub steps: Option<u64>,
    pub seed: u64,
}

/// Trains on every manifest utterance with one head per label file and
/// writes the checkpoint. Head sizes come from the config when it lists one
/// size per label file, otherwise from the largest label seen.
pub fn train_stage(
    manifest: &Path,
    labels: &[PathBuf],
    config: &TrainStageConfig,
    overrides: &TrainOverrides,
    out: &Path,
) -> Result<MaskedPredictionModel> {
    if labels.is_empty() {
        return Err(Error::Config("at least one label file is required".into()));
    }
    let corpus = Corpus::load(&Manifest::read(manifest)?, None)?;
    let mut streams = Vec::with_capacity(labels.len());
    for p in labels {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
        streams.push(align_labels(&corpus.features, &io::read_labels_path(p)?)?);
    }
    let mut model_cfg = config.model.clone();
    if model_cfg.codebook_sizes.len() != streams.len() {
        model_cfg.codebook_sizes = streams
            .iter()
            .map(|s| s.iter().flat_map(|l| l.labels.iter()).max().map_or(1, |&m| m as usize + 1))
            .collect();
    }
    if model_cfg.input_mode == crate::model::InputMode::Features {
        model_cfg.input_dim = corpus.feature_dim();
    }
    let mut train_cfg = config.train.clone();
    if let Some(a) = overrides.alpha {
        train_cfg.alpha = a;
    }
    if let Some(s) = overrides.steps {
        train_cfg.steps = s;
    }
    train_cfg.seed = derive_seed(overrides.seed, &["train".into()]);
    let inputs = corpus.model_inputs(model_cfg.input_mode)?;
    let items: Vec<TrainItem> = inputs
        .into_iter()
        .enumerate()
        .map(|(u, (id, input))| TrainItem {
            utterance_id: id,
            input,
            targets: streams.iter().map(|s| s[u].labels.clone()).collect(),
        })
        .collect();
    let mut model = MaskedPredictionModel::new(model_cfg, derive_seed(overrides.seed, &["init".into()]))?;
    train(&mut model, &items, &train_cfg, Some(out))?;
    checkpoint::save(&model, out)?;
    Ok(model)
}

/// Writes layer `layer` of the checkpoint's encoder for every manifest
/// utterance as `<out_dir>/<utterance>.mulf`.
pub fn extract_stage(checkpoint_path: &Path, manifest: &Path, layer: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !checkpoint_path.exists() {
        return Err(Error::MissingArtifact(checkpoint_path.to_path_buf()));
    }
    let model = checkpoint::load(checkpoint_path)?;
    let corpus = Corpus::load(&Manifest::read(manifest)?, None)?;
    let inputs = corpus.model_inputs(model.config.input_mode)?;
    let feats = extract_features(&model, &inputs, layer)?;
    feats
        .iter()
        .map(|f| {
            debug_assert_eq!(f.kind, FeatureKind::EncoderLayer(layer as u8));
            let out = out_dir.join(format!("{}.{}", f.utterance_id, io::FEATURE_EXT));
            io::write_features(&out, f)?;
            Ok(out)
        })
        .collect()
}
