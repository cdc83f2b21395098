//! Span masking: `round(p·T)` distinct start frames, each opening a span of
//! `l` frames; overlapping spans merge and spans clip at the sequence end.

use log::debug;
use ndarray::{Array1, ArrayView1};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Fraction of frames chosen as span starts.
    pub p: f64,
    /// Span length in frames.
    pub l: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { p: 0.08, l: 10 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) || self.l == 0 {
            return Err(Error::Config(format!(
                "mask needs 0 <= p <= 1 and l >= 1, got p={} l={}",
                self.p, self.l
            )));
        }
        Ok(())
    }

    /// Number of span starts, round-half-up of p·T.
    pub fn num_starts(&self, t: usize) -> usize {
        ((self.p * t as f64 + 0.5).floor() as usize).min(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Sorted, duplicate-free masked frame indices.
    pub masked: Vec<usize>,
    pub starts: Vec<usize>,
    pub t: usize,
    pub l: usize,
}

impl MaskSpec {
    pub fn empty(t: usize) -> Self {
        Self {
            masked: Vec::new(),
            starts: Vec::new(),
            t,
            l: 1,
        }
    }

    pub fn full(t: usize) -> Self {
        Self {
            masked: (0..t).collect(),
            starts: vec![0],
            t,
            l: t.max(1),
        }
    }

    /// Mask built from explicit indices (sorted and deduplicated).
    pub fn from_indices(t: usize, mut idx: Vec<usize>) -> Result<Self> {
        idx.sort_unstable();
        idx.dedup();
        if idx.last().is_some_and(|&i| i >= t) {
            return Err(Error::InvalidInput(format!("mask index beyond T={t}")));
        }
        Ok(Self {
            starts: idx.clone(),
            masked: idx,
            t,
            l: 1,
        })
    }

    /// Per-frame membership.
    pub fn indicator(&self) -> Vec<bool> {
        let mut m = vec![false; self.t];
        for &i in &self.masked {
            m[i] = true;
        }
        m
    }

    pub fn fraction(&self) -> f64 {
        if self.t == 0 {
            0.0
        } else {
            self.masked.len() as f64 / self.t as f64
        }
    }
}

/// Draws a span mask from the stream seeded by `seed`.
pub fn sample_mask(t: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskSpec> {
    if t == 0 {
        return Err(Error::InvalidInput("mask length T must be at least 1".into()));
    }
    cfg.validate()?;
    let n = cfg.num_starts(t);
    if n == 0 && cfg.p > 0.0 {
        debug!("round(p·T) = 0 for T={t}, p={}: empty mask", cfg.p);
    }
    let mut rng = rng_from(seed, &["mask".into()]);
    let mut starts = index::sample(&mut rng, t, n).into_vec();
    starts.sort_unstable();
    let mut hit = vec![false; t];
    for &s in &starts {
        for h in hit.iter_mut().take((s + cfg.l).min(t)).skip(s) {
            *h = true;
        }
    }
    Ok(MaskSpec {
        masked: (0..t).filter(|&i| hit[i]).collect(),
        starts,
        t,
        l: cfg.l,
    })
}

/// Replaces masked rows with `mask_embedding`; other rows are copied untouched.
pub fn corrupt(
    f: &FeatureSequence,
    m: &MaskSpec,
    mask_embedding: ArrayView1<f32>,
) -> Result<FeatureSequence> {
    if m.t != f.num_frames() {
        return Err(Error::Shape(format!(
            "mask covers {} frames, sequence has {}",
            m.t,
            f.num_frames()
        )));
    }
    if mask_embedding.len() != f.dim() {
        return Err(Error::Shape(format!(
            "mask embedding has {} dims, features have {}",
            mask_embedding.len(),
            f.dim()
        )));
    }
    let mut out = f.clone();
    for &i in &m.masked {
        out.data.row_mut(i).assign(&mask_embedding);
    }
    Ok(out)
}

/// Exact expected masked fraction under uniform start sampling without
/// replacement: frame t stays visible iff none of the `min(l, t+1)` start
/// positions that would cover it is drawn.
pub fn expected_masked_fraction(t: usize, cfg: &MaskConfig) -> f64 {
    let n = cfg.num_starts(t);
    let mut total = 0.0;
    for frame in 0..t {
        let w = cfg.l.min(frame + 1);
        // P(no start among w given positions) = C(T-w, n) / C(T, n)
        let mut p_clear = 1.0f64;
        for i in 0..n {
            let num = t as f64 - w as f64 - i as f64;
            if num <= 0.0 {
                p_clear = 0.0;
                break;
            }
            p_clear *= num / (t as f64 - i as f64);
        }
        total += 1.0 - p_clear;
    }
    total / t as f64
}

/// Same-length vector of `value`, handy for the all-zero mask embedding.
pub fn constant_embedding(dim: usize, value: f32) -> Array1<f32> {
    Array1::from_elem(dim, value)
}
