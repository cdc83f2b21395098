//! Frame sources and batch iterators feeding the streaming fitter.

use std::path::PathBuf;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::io;
use crate::seed::rng_from;

/// Utterance-indexed access to frame matrices.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Array2<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feature sequences held in memory, optionally restricted to some columns.
pub struct InMemorySource<'a> {
    pub sequences: &'a [FeatureSequence],
}

impl FrameSource for InMemorySource<'_> {
    fn len(&self) -> usize {
        self.sequences.len()
    }

    fn load(&self, index: usize) -> Result<Array2<f32>> {
        Ok(self.sequences[index].data.clone())
    }
}

/// Feature files on disk, read lazily.
pub struct FeatureFiles {
    pub paths: Vec<PathBuf>,
}

impl FrameSource for FeatureFiles {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn load(&self, index: usize) -> Result<Array2<f32>> {
        Ok(io::read_features(&self.paths[index])?.data)
    }
}

/// Bernoulli(`fraction`) selection of utterance indices, in order.
pub fn select_utterances(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut rng = rng_from(seed, &["subsample".into()]);
    Ok((0..n)
        .filter(|_| {
            let u: f64 = rng.random();
            fraction >= 1.0 || u < fraction
        })
        .collect())
}

/// Yields `batch_size`-frame batches from the selected utterances in source
/// order. The final batch may be shorter.
pub struct FrameBatches<'a, S: FrameSource + ?Sized> {
    source: &'a S,
    selected: Vec<usize>,
    next_utt: usize,
    buffer: Option<(Array2<f32>, usize)>,
    batch_size: usize,
}

impl<'a, S: FrameSource + ?Sized> FrameBatches<'a, S> {
    pub fn new(source: &'a S, selected: Vec<usize>, batch_size: usize) -> Self {
        Self {
            source,
            selected,
            next_utt: 0,
            buffer: None,
            batch_size: batch_size.max(1),
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }
}

impl<S: FrameSource + ?Sized> Iterator for FrameBatches<'_, S> {
    type Item = Result<Array2<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut rows: Vec<Array2<f32>> = Vec::new();
        let mut have = 0;
        while have < self.batch_size {
            if self.buffer.is_none() {
                let Some(&utt) = self.selected.get(self.next_utt) else {
                    break;
                };
                self.next_utt += 1;
                match self.source.load(utt) {
                    Ok(m) if m.nrows() > 0 => self.buffer = Some((m, 0)),
                    Ok(_) => continue,
                    Err(e) => return Some(Err(e)),
                }
            }
            let (m, pos) = self.buffer.as_mut().expect("filled above");
            let take = (self.batch_size - have).min(m.nrows() - *pos);
            rows.push(m.slice(ndarray::s![*pos..*pos + take, ..]).to_owned());
            have += take;
            *pos += take;
            if *pos >= m.nrows() {
                self.buffer = None;
            }
        }
        if rows.is_empty() {
            return None;
        }
        let views: Vec<ArrayView2<f32>> = rows.iter().map(|r| r.view()).collect();
        Some(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string())))
    }
}

/// Subsamples utterances and streams their frames in batches.
pub fn subsample_frames<S: FrameSource + ?Sized>(
    source: &S,
    fraction: f64,
    seed: u64,
    batch_size: usize,
) -> Result<FrameBatches<'_, S>> {
    let selected = select_utterances(source.len(), fraction, seed)?;
    Ok(FrameBatches::new(source, selected, batch_size))
}

/// Stacks all frames of the given utterances.
pub fn collect_frames<S: FrameSource + ?Sized>(source: &S, selected: &[usize]) -> Result<Array2<f32>> {
    let mats = selected
        .iter()
        .map(|&i| source.load(i))
        .collect::<Result<Vec<_>>>()?;
    if mats.is_empty() {
        return Err(Error::NoFrames);
    }
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Random mini-batches over an in-memory matrix: each epoch is a fresh
/// permutation cut into consecutive batches.
pub struct RandomBatches<'a> {
    data: ArrayView2<'a, f32>,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    remaining: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> RandomBatches<'a> {
    pub fn new(data: ArrayView2<'a, f32>, batch_size: usize, max_batches: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &["minibatch".into()]);
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        order.shuffle(&mut rng);
        Self {
            data,
            batch_size: batch_size.clamp(1, data.nrows().max(1)),
            order,
            pos: 0,
            remaining: max_batches,
            rng,
        }
    }
}

impl Iterator for RandomBatches<'_> {
    type Item = Result<Array2<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 || self.order.is_empty() {
            return None;
        }
        self.remaining -= 1;
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        Some(Ok(self.data.select(Axis(0), idx)))
    }
}
