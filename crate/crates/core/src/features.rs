//! Acoustic front end: 16 kHz waveforms, 39-dim MFCC (13 cepstra plus first-
//! and second-order regression deltas) and frame splicing.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub utterance_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, utterance_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate: SAMPLE_RATE,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loads a mono 16-bit PCM 16 kHz RIFF/WAVE file. Samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedAudio {
            property: "sample rate",
            found: spec.sample_rate.to_string(),
            expected: SAMPLE_RATE.to_string(),
        });
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio {
            property: "channel count",
            found: spec.channels.to_string(),
            expected: "1".into(),
        });
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedAudio {
            property: "bit depth",
            found: format!("{} ({:?})", spec.bits_per_sample, spec.sample_format),
            expected: "16 (Int)".into(),
        });
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| Error::Wav {
            path: path.to_path_buf(),
            source,
        })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Waveform::new(samples, id)
}

/// Writes samples in [-1, 1] as mono 16-bit PCM at 16 kHz.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

/// What a feature matrix holds. Encoded as one byte in feature files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Mfcc,
    SplicedMfcc,
    EncoderLayer(u8),
}

impl FeatureKind {
    pub fn to_byte(self) -> u8 {
        match self {
            FeatureKind::Mfcc => 0,
            FeatureKind::SplicedMfcc => 1,
            FeatureKind::EncoderLayer(k) => 2u8.saturating_add(k),
        }
    }

    pub fn from_byte(b: u8) -> Self {
        match b {
            0 => FeatureKind::Mfcc,
            1 => FeatureKind::SplicedMfcc,
            k => FeatureKind::EncoderLayer(k - 2),
        }
    }
}

/// A T×D frame matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub data: Array2<f32>,
    pub frame_rate_hz: u32,
    pub kind: FeatureKind,
    pub utterance_id: String,
}

impl FeatureSequence {
    pub fn new(
        data: Array2<f32>,
        frame_rate_hz: u32,
        kind: FeatureKind,
        utterance_id: impl Into<String>,
    ) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "feature matrix must be non-empty, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            data,
            frame_rate_hz,
            kind,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    /// Analysis window in samples (25 ms).
    pub win_length: usize,
    /// Hop in samples (20 ms, one frame per encoder step).
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub preemphasis: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub delta_window: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            win_length: 400,
            hop_length: 320,
            n_fft: 512,
            n_mels: 23,
            n_ceps: 13,
            preemphasis: 0.97,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

impl MfccConfig {
    pub fn frame_rate_hz(&self) -> u32 {
        self.sample_rate / self.hop_length as u32
    }

    pub fn num_frames(&self, num_samples: usize) -> Option<usize> {
        (num_samples >= self.win_length).then(|| 1 + (num_samples - self.win_length) / self.hop_length)
    }

    fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.hop_length == 0 || self.n_fft < self.win_length {
            return Err(Error::Config(format!(
                "bad framing: win={} hop={} n_fft={}",
                self.win_length, self.hop_length, self.n_fft
            )));
        }
        if self.n_ceps == 0 || self.n_ceps > self.n_mels {
            return Err(Error::Config(format!(
                "n_ceps={} must be in 1..={}",
                self.n_ceps, self.n_mels
            )));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "bad mel range {}..{}",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank, DCT basis and FFT plan.
pub struct MfccExtractor {
    cfg: MfccConfig,
    window: Vec<f64>,
    /// n_mels × (n_fft/2 + 1)
    filters: Array2<f64>,
    /// n_ceps × n_mels
    dct: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_length;
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect();

        let n_bins = cfg.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(cfg.f_min);
        let mel_hi = hz_to_mel(cfg.f_max);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut filters = Array2::zeros((cfg.n_mels, n_bins));
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                let w = if f >= lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                filters[[m, k]] = w.max(0.0);
            }
        }

        let m = cfg.n_mels as f64;
        let mut dct = Array2::zeros((cfg.n_ceps, cfg.n_mels));
        for k in 0..cfg.n_ceps {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            for j in 0..cfg.n_mels {
                dct[[k, j]] =
                    scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m).cos();
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filters,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Static cepstra, T × n_ceps, in f64.
    pub fn cepstra(&self, samples: &[f32]) -> Result<Array2<f64>> {
        let cfg = &self.cfg;
        let t = cfg.num_frames(samples.len()).ok_or_else(|| {
            Error::InvalidInput(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                samples.len(),
                cfg.win_length
            ))
        })?;

        let mut emph = Vec::with_capacity(samples.len());
        emph.push(samples[0] as f64);
        for i in 1..samples.len() {
            emph.push(samples[i] as f64 - cfg.preemphasis * samples[i - 1] as f64);
        }

        let n_bins = cfg.n_fft / 2 + 1;
        let mut out = Array2::zeros((t, cfg.n_ceps));
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0f64; n_bins];
        let mut logmel = vec![0.0f64; cfg.n_mels];
        for frame in 0..t {
            let start = frame * cfg.hop_length;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < cfg.win_length {
                    Complex64::new(emph[start + i] * self.window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (m, lm) in logmel.iter_mut().enumerate() {
                let e: f64 = self
                    .filters
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                *lm = e.max(cfg.log_floor).ln();
            }
            for k in 0..cfg.n_ceps {
                out[[frame, k]] = self
                    .dct
                    .row(k)
                    .iter()
                    .zip(&logmel)
                    .map(|(d, l)| d * l)
                    .sum();
            }
        }
        Ok(out)
    }

    pub fn compute(&self, w: &Waveform) -> Result<FeatureSequence> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::UnsupportedAudio {
                property: "sample rate",
                found: w.sample_rate.to_string(),
                expected: self.cfg.sample_rate.to_string(),
            });
        }
        let stat = self.cepstra(&w.samples)?;
        let d1 = deltas(stat.view(), self.cfg.delta_window);
        let d2 = deltas(d1.view(), self.cfg.delta_window);
        let (t, c) = stat.dim();
        let mut data = Array2::<f32>::zeros((t, 3 * c));
        for (block, src) in [&stat, &d1, &d2].into_iter().enumerate() {
            data.slice_mut(s![.., block * c..(block + 1) * c])
                .assign(&src.mapv(|v| v as f32));
        }
        FeatureSequence::new(data, self.cfg.frame_rate_hz(), FeatureKind::Mfcc, &w.utterance_id)
    }
}

/// 39-dim MFCC with the given recipe.
pub fn compute_mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureSequence> {
    MfccExtractor::new(cfg.clone())?.compute(w)
}

/// Regression deltas over ±`window` frames with edge replication:
/// d_t = Σ n (c_{t+n} − c_{t−n}) / (2 Σ n²).
pub fn deltas(x: ArrayView2<f64>, window: usize) -> Array2<f64> {
    let (t, d) = x.dim();
    let mut out = Array2::zeros((t, d));
    if window == 0 {
        return out;
    }
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let last = t as isize - 1;
    for i in 0..t {
        for n in 1..=window {
            let fwd = (i as isize + n as isize).min(last) as usize;
            let back = (i as isize - n as isize).max(0) as usize;
            for j in 0..d {
                out[[i, j]] += n as f64 * (x[[fwd, j]] - x[[back, j]]);
            }
        }
        out.row_mut(i).mapv_inplace(|v| v / denom);
    }
    out
}

/// Concatenates each frame with its `(window-1)/2` neighbours on either side,
/// replicating edge frames. Output row t is `[x_{t-h}, ..., x_{t+h}]`.
pub fn splice(f: &FeatureSequence, window: usize) -> Result<FeatureSequence> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidInput(format!(
            "splice window must be a positive odd integer, got {window}"
        )));
    }
    if f.kind != FeatureKind::Mfcc {
        return Err(Error::InvalidInput(format!(
            "splice expects mfcc features, got {:?}",
            f.kind
        )));
    }
    if window == 1 {
        return Ok(f.clone());
    }
    let (t, d) = f.data.dim();
    let half = (window / 2) as isize;
    let mut data = Array2::<f32>::zeros((t, window * d));
    for i in 0..t {
        for (slot, off) in (-half..=half).enumerate() {
            let src = (i as isize + off).clamp(0, t as isize - 1) as usize;
            data.slice_mut(s![i, slot * d..(slot + 1) * d])
                .assign(&f.data.row(src));
        }
    }
    FeatureSequence::new(data, f.frame_rate_hz, FeatureKind::SplicedMfcc, &f.utterance_id)
}

/// Partition of a spliced MFCC vector into static / Δ / ΔΔ subspaces, each
/// gathering that coefficient group from every spliced frame.
pub fn derivative_partition(window: usize, n_ceps: usize) -> Vec<Vec<usize>> {
    let frame_dim = 3 * n_ceps;
    (0..3)
        .map(|order| {
            (0..window)
                .flat_map(|slot| {
                    let base = slot * frame_dim + order * n_ceps;
                    base..base + n_ceps
                })
                .collect()
        })
        .collect()
}
