//! Hidden-unit discovery.
//!
//! Codebooks are fitted with k-means++ seeding followed by streaming
//! mini-batch updates (or batch Lloyd iterations, which serve as the exact
//! reference). Product quantization fits one codebook per dimension subset.
//! Squared distances are accumulated in f64 over f32 storage.

mod kmeans;
mod pq;
mod stream;

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::io::{self, Reader};

pub use kmeans::{
    inertia, kmeanspp_init, kmeanspp_seed, lloyd_fit, minibatch_kmeans_fit, LloydFit,
    MiniBatchFit, MiniBatchParams, Seeding,
};
pub use pq::{pq_fit, validate_partition};
pub use stream::{
    collect_frames, select_utterances, subsample_frames, FeatureFiles, FrameBatches, FrameSource,
    InMemorySource, RandomBatches,
};

/// K centroids over a subset of input dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f32>,
    pub kind: FeatureKind,
    /// Input dimensions this codebook quantizes, in centroid-column order.
    pub dims: Vec<usize>,
}

impl Codebook {
    pub fn new(centroids: Array2<f32>, kind: FeatureKind, dims: Vec<usize>) -> Result<Self> {
        if centroids.nrows() == 0 {
            return Err(Error::InvalidInput("codebook needs at least one centroid".into()));
        }
        if dims.is_empty() || dims.len() != centroids.ncols() {
            return Err(Error::Shape(format!(
                "{} dims for {}-column centroids",
                dims.len(),
                centroids.ncols()
            )));
        }
        let mut sorted = dims.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("codebook dims contain duplicates".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite centroid".into()));
        }
        Ok(Self {
            centroids,
            kind,
            dims,
        })
    }

    /// Codebook over all `d` dimensions.
    pub fn full(centroids: Array2<f32>, kind: FeatureKind) -> Result<Self> {
        let d = centroids.ncols();
        Self::new(centroids, kind, (0..d).collect())
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    /// Nearest centroid of a vector already restricted to `dims`; ties go to the lowest index.
    pub fn nearest(&self, x: ArrayView1<f32>) -> (usize, f64) {
        nearest(self.centroids.view(), x)
    }

    /// Maps every frame to its nearest centroid.
    pub fn assign(&self, f: &FeatureSequence) -> Result<LabelSequence> {
        let labels = self.assign_matrix(f.data.view())?;
        Ok(LabelSequence {
            labels,
            codebook_id: String::new(),
            utterance_id: f.utterance_id.clone(),
        })
    }

    pub fn assign_matrix(&self, data: ArrayView2<f32>) -> Result<Vec<u32>> {
        let sub = self.project(data)?;
        Ok(sub
            .rows()
            .into_iter()
            .map(|r| self.nearest(r).0 as u32)
            .collect())
    }

    /// Restricts rows of `data` to this codebook's dims.
    pub fn project(&self, data: ArrayView2<f32>) -> Result<Array2<f32>> {
        if let Some(&bad) = self.dims.iter().find(|&&d| d >= data.ncols()) {
            return Err(Error::Shape(format!(
                "codebook dim {bad} outside {}-dim features",
                data.ncols()
            )));
        }
        if self.dims.len() == data.ncols() && self.dims.iter().enumerate().all(|(i, &d)| i == d) {
            return Ok(data.to_owned());
        }
        Ok(data.select(Axis(1), &self.dims))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, d) = self.centroids.dim();
        let mut buf = Vec::with_capacity(17 + 4 * d + 4 * k * d);
        buf.extend_from_slice(CODEBOOK_MAGIC);
        buf.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        buf.push(self.kind.to_byte());
        for &dim in &self.dims {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        io::put_f32s(&mut buf, self.centroids.iter().copied());
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = Reader::new(io::open(path)?, path);
        r.expect_magic(CODEBOOK_MAGIC)?;
        let v = r.u32()?;
        if v != CODEBOOK_VERSION {
            return Err(r.fail(format!("unsupported version {v}")));
        }
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let kind = FeatureKind::from_byte(r.u8()?);
        let dims = (0..d)
            .map(|_| r.u32().map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f32_vec(k * d)?;
        let centroids = Array2::from_shape_vec((k, d), data).map_err(|e| r.fail(e.to_string()))?;
        Codebook::new(centroids, kind, dims).map_err(|e| r.fail(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    MiniBatch,
    Lloyd,
}

/// Everything needed to fit one codebook on an in-memory matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k: usize,
    pub method: FitMethod,
    pub batch_size: usize,
    pub max_batches: usize,
    pub tol: f64,
    pub n_starts: usize,
    /// Run the whole fit once per start and keep the lowest inertia, instead
    /// of only picking the best k-means++ seeding.
    pub full_refit: bool,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 100,
            method: FitMethod::MiniBatch,
            batch_size: 10_000,
            max_batches: 100,
            tol: 1e-4,
            n_starts: 20,
            full_refit: false,
            max_iters: 100,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn lloyd(seed: u64) -> Self {
        Self {
            method: FitMethod::Lloyd,
            seed,
            ..Self::default()
        }
    }

    pub fn minibatch_params(&self) -> MiniBatchParams {
        MiniBatchParams {
            k: self.k,
            batch_size: self.batch_size,
            max_batches: self.max_batches,
            tol: self.tol,
            n_starts: self.n_starts,
            seed: self.seed,
        }
    }
}

fn fit_once(data: ArrayView2<f32>, cfg: &FitConfig) -> Result<Array2<f32>> {
    match cfg.method {
        FitMethod::Lloyd => Ok(lloyd_fit(data, cfg.k, cfg.n_starts, cfg.seed, cfg.max_iters)?.centroids),
        FitMethod::MiniBatch => {
            let stream = RandomBatches::new(data, cfg.batch_size, cfg.max_batches, cfg.seed);
            Ok(minibatch_kmeans_fit(stream, &cfg.minibatch_params())?.centroids)
        }
    }
}

/// Fits centroids on `data`; returns them with their inertia on `data`.
pub fn fit_codebook_matrix(data: ArrayView2<f32>, cfg: &FitConfig) -> Result<(Array2<f32>, f64)> {
    if data.nrows() < cfg.k {
        return Err(Error::TooFewPoints {
            points: data.nrows(),
            clusters: cfg.k,
        });
    }
    if !cfg.full_refit {
        let c = fit_once(data, cfg)?;
        let i = inertia(c.view(), data);
        return Ok((c, i));
    }
    let mut best: Option<(Array2<f32>, f64)> = None;
    for s in 0..cfg.n_starts.max(1) {
        let one = FitConfig {
            n_starts: 1,
            seed: crate::seed::derive_seed(cfg.seed, &["refit".into(), s.into()]),
            ..cfg.clone()
        };
        let c = fit_once(data, &one)?;
        let i = inertia(c.view(), data);
        if best.as_ref().is_none_or(|b| i < b.1) {
            best = Some((c, i));
        }
    }
    Ok(best.expect("at least one start"))
}

/// Fits a codebook over all columns of `data`.
pub fn fit_codebook(data: ArrayView2<f32>, kind: FeatureKind, cfg: &FitConfig) -> Result<Codebook> {
    Codebook::full(fit_codebook_matrix(data, cfg)?.0, kind)
}

pub const CODEBOOK_MAGIC: &[u8; 4] = b"MUCB";
pub const CODEBOOK_VERSION: u32 = 1;
const ENSEMBLE_INDEX: &str = "index.txt";

pub(crate) fn sq_dist(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub(crate) fn nearest(centroids: ArrayView2<f32>, x: ArrayView1<f32>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Frame-level unit labels of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    pub labels: Vec<u32>,
    pub codebook_id: String,
    pub utterance_id: String,
}

/// Ordered list of codebooks; for product quantization their dims partition
/// the feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEnsemble {
    pub codebooks: Vec<Codebook>,
}

impl ClusterEnsemble {
    pub fn partition(&self) -> Vec<Vec<usize>> {
        self.codebooks.iter().map(|c| c.dims.clone()).collect()
    }

    /// Size of the joint target space, the product of codebook sizes.
    pub fn target_space_size(&self) -> u128 {
        self.codebooks
            .iter()
            .fold(1u128, |acc, c| acc.saturating_mul(c.k() as u128))
    }

    /// Per-codebook labels for each frame.
    pub fn assign(&self, f: &FeatureSequence) -> Result<Vec<LabelSequence>> {
        self.codebooks
            .iter()
            .enumerate()
            .map(|(i, cb)| {
                let mut l = cb.assign(f)?;
                l.codebook_id = i.to_string();
                Ok(l)
            })
            .collect()
    }

    /// Writes `dir/index.txt` plus one codebook file per entry. Index lines are
    /// `file<TAB>comma-separated dims`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for (i, cb) in self.codebooks.iter().enumerate() {
            let name = format!("codebook{i}.mucb");
            cb.save(dir.join(&name))?;
            let dims: Vec<String> = cb.dims.iter().map(|d| d.to_string()).collect();
            index.push_str(&format!("{name}\t{}\n", dims.join(",")));
        }
        io::write_bytes(&dir.join(ENSEMBLE_INDEX), index.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join(ENSEMBLE_INDEX);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut codebooks = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (name, dims) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&index_path, "missing tab"))?;
            let cb = Codebook::load(dir.join(name))?;
            let listed: Vec<usize> = dims
                .split(',')
                .map(|d| d.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(&index_path, format!("bad dims for {name}")))?;
            if listed != cb.dims {
                return Err(Error::format(
                    &index_path,
                    format!("dims listed for {name} disagree with the codebook file"),
                ));
            }
            codebooks.push(cb);
        }
        Ok(Self { codebooks })
    }

    /// Loads either a single codebook file or an ensemble directory.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            Self::load(path)
        } else {
            Ok(Self {
                codebooks: vec![Codebook::load(path)?],
            })
        }
    }
}
