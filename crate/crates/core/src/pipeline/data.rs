use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::features::{compute_mfcc, load_wav, FeatureSequence, MfccConfig, Waveform};
use crate::io::{self, LabelLine, Manifest};
use crate::metrics::AlignmentLabels;
use crate::model::{features_input, waveform_input, InputMode};
use crate::seed::rng_from;

/// Utterances of a run: clustering features, optional audio for waveform
/// models, optional ground-truth phones (aligned with `features`).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub features: Vec<FeatureSequence>,
    pub waveforms: Option<Vec<Waveform>>,
    pub phones: Option<Vec<AlignmentLabels>>,
}

fn is_wav(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

impl Corpus {
    /// Loads every manifest entry: `.wav` files get MFCC features, other
    /// files are read as feature files.
    pub fn load(manifest: &Manifest, phones: Option<&Path>) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::InvalidInput("manifest has no entries".into()));
        }
        let mut features = Vec::with_capacity(manifest.len());
        let mut waves = Vec::new();
        let mfcc = MfccConfig::default();
        for (i, path) in manifest.paths().iter().enumerate() {
            if is_wav(path) {
                let mut w = load_wav(path)?;
                w.utterance_id = manifest.utterance_id(i);
                features.push(compute_mfcc(&w, &mfcc)?);
                waves.push(w);
            } else {
                features.push(io::read_features(path)?);
            }
        }
        let waveforms = match waves.len() {
            0 => None,
            n if n == features.len() => Some(waves),
            _ => return Err(Error::InvalidInput("manifest mixes audio and feature files".into())),
        };
        let phones = phones
            .map(|p| align_labels(&features, &io::read_labels_path(p)?))
            .transpose()?
            .map(|lines| {
                lines
                    .into_iter()
                    .map(|l| AlignmentLabels {
                        labels: l.labels,
                        utterance_id: l.utterance_id,
                    })
                    .collect()
            });
        Ok(Self {
            features,
            waveforms,
            phones,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.features.iter().map(|f| f.utterance_id.clone()).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.dim())
    }

    /// Model inputs in corpus order.
    pub fn model_inputs(&self, mode: InputMode) -> Result<Vec<(String, Array2<f64>)>> {
        match mode {
            InputMode::Features => Ok(self
                .features
                .iter()
                .map(|f| (f.utterance_id.clone(), features_input(f)))
                .collect()),
            InputMode::Waveform => {
                let w = self
                    .waveforms
                    .as_ref()
                    .ok_or_else(|| Error::Config("waveform model needs an audio manifest".into()))?;
                Ok(w.iter().map(|w| (w.utterance_id.clone(), waveform_input(w))).collect())
            }
        }
    }
}

/// Reorders label lines to follow `features`, checking ids and lengths.
pub fn align_labels(features: &[FeatureSequence], lines: &[LabelLine]) -> Result<Vec<LabelLine>> {
    let by_id: BTreeMap<&str, &LabelLine> = lines.iter().map(|l| (l.utterance_id.as_str(), l)).collect();
    features
        .iter()
        .map(|f| {
            let l = by_id
                .get(f.utterance_id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("no labels for utterance {}", f.utterance_id)))?;
            if l.labels.len() != f.num_frames() {
                return Err(Error::LengthMismatch {
                    utterance: f.utterance_id.clone(),
                    left: f.num_frames(),
                    right: l.labels.len(),
                });
            }
            Ok((*l).clone())
        })
        .collect()
}

/// Disjoint train / held-out utterance indices, both sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Holds out `round(fraction·n)` utterances chosen by a seeded shuffle.
/// With a single utterance both sides use it.
pub fn held_out_split(n: usize, fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("held-out fraction {fraction} outside [0, 1)")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("cannot split an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed, &["split".into()]));
    let k = ((fraction * n as f64).round() as usize).min(n - 1);
    let mut held_out = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    held_out.sort_unstable();
    train.sort_unstable();
    if held_out.is_empty() {
        held_out = train.clone();
    }
    Ok(Split { train, held_out })
}

/// Stacks the frames of the chosen sequences.
pub fn stack_frames(seqs: &[FeatureSequence], idx: &[usize]) -> Result<Array2<f32>> {
    if idx.is_empty() {
        return Err(Error::NoFrames);
    }
    let views: Vec<_> = idx.iter().map(|&i| seqs[i].data.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}
