//! Synthetic corpus with known frame labels.
//!
//! Phones follow a first-order Markov chain with a sparse, seeded transition
//! matrix (no self loops). Each phone occupies a left-to-right run of
//! `states_per_phone` states, each lasting a uniform number of frames in
//! `frames_per_state`. Every frame is the phone's anchor plus isotropic
//! Gaussian noise. Anchors are scaled one-hot vectors, so any two sit
//! exactly `anchor_distance` apart.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::io::{self, Manifest, ManifestEntry};
use crate::metrics::AlignmentLabels;
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub num_phones: usize,
    pub states_per_phone: usize,
    /// Inclusive range of frames spent in each state.
    pub frames_per_state: (usize, usize),
    /// Frame dimension; at least `num_phones`.
    pub dim: usize,
    pub sigma: f64,
    pub anchor_distance: f64,
    pub num_utterances: usize,
    /// Utterance lengths are uniform in `[mean/2, 3·mean/2]`.
    pub mean_frames: usize,
    /// Concentration of the transition rows; small values give peaked,
    /// predictable successor distributions.
    pub transition_concentration: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_phones: 20,
            states_per_phone: 3,
            frames_per_state: (1, 3),
            dim: 24,
            sigma: 1.2,
            anchor_distance: 4.0,
            num_utterances: 200,
            mean_frames: 500,
            transition_concentration: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.frames_per_state;
        if self.num_phones < 2
            || self.dim < self.num_phones
            || self.states_per_phone == 0
            || lo == 0
            || hi < lo
            || self.num_utterances == 0
            || self.mean_frames < 2
            || !(self.sigma >= 0.0)
            || !(self.anchor_distance > 0.0)
            || !(self.transition_concentration > 0.0)
        {
            return Err(Error::Config(format!("invalid synthetic corpus spec: {self:?}")));
        }
        Ok(())
    }

    /// Reads a TOML spec; missing keys take their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Anchor of phone `i`: `anchor_distance / sqrt(2)` on coordinate `i`.
    pub fn anchors(&self) -> Array2<f64> {
        let scale = self.anchor_distance / std::f64::consts::SQRT_2;
        Array2::from_shape_fn((self.num_phones, self.dim), |(i, d)| if i == d { scale } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub features: Vec<FeatureSequence>,
    pub phones: Vec<AlignmentLabels>,
    pub transitions: Array2<f64>,
}

fn transition_matrix(spec: &SyntheticCorpusSpec) -> Array2<f64> {
    let n = spec.num_phones;
    let mut rng = rng_from(spec.seed, &["transitions".into()]);
    let gamma = Gamma::new(spec.transition_concentration, 1.0).expect("positive shape");
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..n {
            if i != j {
                // floor keeps every transition possible
                let w = gamma.sample(&mut rng) + 1e-3;
                m[[i, j]] = w;
                total += w;
            }
        }
        m.row_mut(i).mapv_inplace(|w| w / total);
    }
    m
}

fn draw(row: ndarray::ArrayView1<f64>, u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn utterance_id(i: usize) -> String {
    format!("utt{i:05}")
}

/// Generates the corpus in memory.
pub fn gen_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let transitions = transition_matrix(spec);
    let anchors = spec.anchors();
    let noise = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let (lo, hi) = spec.frames_per_state;
    let mut features = Vec::with_capacity(spec.num_utterances);
    let mut phones = Vec::with_capacity(spec.num_utterances);
    for u in 0..spec.num_utterances {
        let mut rng = rng_from(spec.seed, &["utterance".into(), u.into()]);
        let half = spec.mean_frames / 2;
        let t = rng.random_range(spec.mean_frames - half..=spec.mean_frames + half).max(1);
        let mut labels = Vec::with_capacity(t);
        let mut phone = rng.random_range(0..spec.num_phones);
        while labels.len() < t {
            for _ in 0..spec.states_per_phone {
                let d = rng.random_range(lo..=hi);
                labels.extend(std::iter::repeat_n(phone as u32, d));
            }
            phone = draw(transitions.row(phone), rng.random());
        }
        labels.truncate(t);
        let data = Array2::from_shape_fn((t, spec.dim), |(i, d)| {
            let n = if spec.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (anchors[[labels[i] as usize, d]] + n) as f32
        });
        let id = utterance_id(u);
        features.push(FeatureSequence::new(data, 50, FeatureKind::Mfcc, id.clone())?);
        phones.push(AlignmentLabels {
            labels,
            utterance_id: id,
        });
    }
    Ok(SyntheticCorpus {
        features,
        phones,
        transitions,
    })
}

/// File names inside a written corpus directory.
pub const CORPUS_MANIFEST: &str = "manifest.tsv";
pub const CORPUS_PHONES: &str = "phones.txt";
pub const CORPUS_FEATURES: &str = "features";

impl SyntheticCorpus {
    /// Writes `features/<id>.mulf`, `manifest.tsv` and `phones.txt` under
    /// `dir`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let feat_dir = dir.join(CORPUS_FEATURES);
        let mut entries = Vec::with_capacity(self.features.len());
        for f in &self.features {
            let name = format!("{}.{}", f.utterance_id, io::FEATURE_EXT);
            io::write_features(feat_dir.join(&name), f)?;
            entries.push(ManifestEntry {
                relative_path: PathBuf::from(&name),
                num_samples: f.num_frames() as u64,
            });
        }
        let manifest = Manifest {
            root: feat_dir,
            entries,
        };
        let path = dir.join(CORPUS_MANIFEST);
        manifest.write(&path)?;
        io::write_label_file(
            dir.join(CORPUS_PHONES),
            self.phones.iter().map(|p| (p.utterance_id.as_str(), p.labels.as_slice())),
        )?;
        Ok(path)
    }
}
