use log::debug;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{nearest, sq_dist};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Result of k-means++ seeding.
#[derive(Debug, Clone, PartialEq)]
pub struct Seeding {
    pub centroids: Array2<f32>,
    /// Row indices of the chosen seeds.
    pub indices: Vec<usize>,
    /// Sum of squared distances of all points to their nearest seed.
    pub potential: f64,
}

/// One k-means++ seeding (D² sampling). When every remaining point sits on a
/// seed, the next seed is drawn uniformly from the unchosen rows.
pub fn kmeanspp_seed<R: Rng>(data: ArrayView2<f32>, k: usize, rng: &mut R) -> Result<Seeding> {
    let n = data.nrows();
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints {
            points: n,
            clusters: k,
        });
    }
    let mut chosen = vec![false; n];
    let mut indices = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    chosen[first] = true;
    indices.push(first);
    let mut d2: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|r| sq_dist(r, data.row(first)))
        .collect();

    while indices.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        indices.push(next);
        let c = data.row(next);
        for (i, r) in data.rows().into_iter().enumerate() {
            let d = sq_dist(r, c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    let potential = d2.iter().sum();
    Ok(Seeding {
        centroids: data.select(ndarray::Axis(0), &indices),
        indices,
        potential,
    })
}

/// Runs `n_starts` seedings (start `s` uses the stream derived from
/// `(seed, "kmeans++", s)`) and keeps the one with the smallest potential;
/// ties keep the earliest start.
pub fn kmeanspp_init(data: ArrayView2<f32>, k: usize, n_starts: usize, seed: u64) -> Result<Seeding> {
    if n_starts == 0 {
        return Err(Error::InvalidInput("n_starts must be at least 1".into()));
    }
    let mut best: Option<Seeding> = None;
    for s in 0..n_starts {
        let mut rng = rng_from(seed, &["kmeans++".into(), s.into()]);
        let cand = kmeanspp_seed(data, k, &mut rng)?;
        if best.as_ref().is_none_or(|b| cand.potential < b.potential) {
            best = Some(cand);
        }
    }
    Ok(best.expect("n_starts >= 1"))
}

/// Sum of squared distances from each row to its nearest centroid.
pub fn inertia(centroids: ArrayView2<f32>, data: ArrayView2<f32>) -> f64 {
    data.rows()
        .into_iter()
        .map(|r| nearest(centroids, r).1)
        .sum()
}

fn nearest_f64(centroids: &Array2<f64>, x: ArrayView1<f32>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d: f64 = c
            .iter()
            .zip(x.iter())
            .map(|(&a, &b)| {
                let t = a - b as f64;
                t * t
            })
            .sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydFit {
    pub centroids: Array2<f32>,
    pub labels: Vec<u32>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl LloydFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment")
    }
}

/// Batch Lloyd iterations from a k-means++ start. Stops when assignments stop
/// changing or after `max_iters` updates. An empty cluster is moved onto the
/// point currently farthest from its own centroid.
pub fn lloyd_fit(
    data: ArrayView2<f32>,
    k: usize,
    n_starts: usize,
    seed: u64,
    max_iters: usize,
) -> Result<LloydFit> {
    let init = kmeanspp_init(data, k, n_starts, seed)?;
    let (n, d) = data.dim();
    let mut centroids = init.centroids.mapv(|v| v as f64);
    let mut labels = vec![u32::MAX; n];
    let mut d2 = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut converged = false;

    for iter in 0..=max_iters {
        let mut changed = false;
        for (i, r) in data.rows().into_iter().enumerate() {
            let (j, dist) = nearest_f64(&centroids, r);
            if labels[i] != j as u32 {
                changed = true;
                labels[i] = j as u32;
            }
            d2[i] = dist;
        }
        history.push(d2.iter().sum());
        if iter > 0 && !changed {
            converged = true;
            break;
        }
        if iter == max_iters {
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, r) in data.rows().into_iter().enumerate() {
            let j = labels[i] as usize;
            counts[j] += 1;
            for (s, &v) in sums.row_mut(j).iter_mut().zip(r.iter()) {
                *s += v as f64;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                centroids.row_mut(j).assign(&sums.row(j).mapv(|s| s / c));
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                centroids.row_mut(j).assign(&data.row(far).mapv(|v| v as f64));
                debug!("lloyd: reseeded empty cluster {j} at point {far}");
            }
        }
    }

    Ok(LloydFit {
        centroids: centroids.mapv(|v| v as f32),
        labels,
        inertia_history: history,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniBatchParams {
    pub k: usize,
    pub batch_size: usize,
    pub max_batches: usize,
    /// Stop once the largest centroid move over one batch falls below this.
    pub tol: f64,
    /// k-means++ seedings tried on the initialization sample.
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for MiniBatchParams {
    fn default() -> Self {
        Self {
            k: 100,
            batch_size: 10_000,
            max_batches: 100,
            tol: 1e-4,
            n_starts: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatchFit {
    pub centroids: Array2<f32>,
    /// Frames absorbed by each centroid over the whole run.
    pub counts: Vec<u64>,
    pub batches: usize,
    pub converged: bool,
    /// Inertia of the final batch against the centroids it was assigned to.
    pub last_batch_inertia: f64,
}

struct MiniBatchState {
    centroids: Array2<f64>,
    counts: Vec<u64>,
}

impl MiniBatchState {
    fn new(centroids: Array2<f64>) -> Self {
        let k = centroids.nrows();
        Self {
            centroids,
            counts: vec![0; k],
        }
    }

    /// Applies one batch; returns (largest centroid displacement, batch inertia).
    fn absorb(&mut self, batch: ArrayView2<f32>) -> Result<(f64, f64)> {
        let (k, dim) = self.centroids.dim();
        if batch.ncols() != dim {
            return Err(Error::Shape(format!(
                "batch has {} dims, expected {dim}",
                batch.ncols()
            )));
        }
        let n = batch.nrows();
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut bcount = vec![0u64; k];
        let mut d2 = vec![0.0f64; n];
        for (i, r) in batch.rows().into_iter().enumerate() {
            let (j, d) = nearest_f64(&self.centroids, r);
            d2[i] = d;
            bcount[j] += 1;
            for (s, &v) in sums.row_mut(j).iter_mut().zip(r.iter()) {
                *s += v as f64;
            }
        }
        let old = self.centroids.clone();
        for j in 0..k {
            if bcount[j] == 0 {
                continue;
            }
            let prev = self.counts[j] as f64;
            self.counts[j] += bcount[j];
            let total = self.counts[j] as f64;
            for (c, &s) in self.centroids.row_mut(j).iter_mut().zip(sums.row(j).iter()) {
                *c = (*c * prev + s) / total;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if self.counts[j] > 0 {
                continue;
            }
            if let Some(far) = (0..n)
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)))
            {
                taken[far] = true;
                self.centroids
                    .row_mut(j)
                    .assign(&batch.row(far).mapv(|v| v as f64));
                debug!("mini-batch: reseeded dead centroid {j} at batch point {far}");
            }
        }
        let disp = old
            .rows()
            .into_iter()
            .zip(self.centroids.rows())
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        Ok((disp, d2.iter().sum()))
    }
}

/// Streaming mini-batch k-means. Seeds with k-means++ on the first batches
/// (accumulated until they hold at least `k` frames), then for each batch
/// moves centroid j to `(c_j·n_j + Σ batch points of j) / (n_j + b_j)`, i.e.
/// per-centroid learning rate `b_j / count`.
pub fn minibatch_kmeans_fit<I>(stream: I, params: &MiniBatchParams) -> Result<MiniBatchFit>
where
    I: IntoIterator<Item = Result<Array2<f32>>>,
{
    if params.batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be at least 1".into()));
    }
    let k = params.k;
    let mut stream = stream.into_iter();

    let mut pending: Vec<Array2<f32>> = Vec::new();
    let mut seen = 0usize;
    while seen < k.max(1) {
        match stream.next() {
            Some(b) => {
                let b = b?;
                seen += b.nrows();
                if b.nrows() > 0 {
                    pending.push(b);
                }
            }
            None => break,
        }
    }
    if seen == 0 {
        return Err(Error::EmptyStream);
    }
    let dim = pending[0].ncols();
    if pending.iter().any(|b| b.ncols() != dim) {
        return Err(Error::Shape("batches disagree on dimension".into()));
    }
    let init_data = if pending.len() == 1 {
        pending[0].clone()
    } else {
        let views: Vec<_> = pending.iter().map(|b| b.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("same width")
    };
    let seeding = kmeanspp_init(init_data.view(), k, params.n_starts, params.seed)?;

    let mut state = MiniBatchState::new(seeding.centroids.mapv(|v| v as f64));
    let mut batches = 0usize;
    let mut converged = false;
    let mut last_inertia = 0.0;

    let mut first = Some(init_data);
    loop {
        let batch = match first.take() {
            Some(b) => b,
            None => match stream.next() {
                Some(b) => b?,
                None => break,
            },
        };
        if batch.nrows() == 0 {
            continue;
        }
        let (disp, inertia) = state.absorb(batch.view())?;
        last_inertia = inertia;
        batches += 1;
        if disp < params.tol {
            converged = true;
            break;
        }
        if params.max_batches > 0 && batches >= params.max_batches {
            break;
        }
    }
    debug!("mini-batch k-means: {batches} batches, converged={converged}");

    Ok(MiniBatchFit {
        centroids: state.centroids.mapv(|v| v as f32),
        counts: state.counts,
        batches,
        converged,
        last_batch_inertia: last_inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
    }

    #[test]
    fn too_few_points() {
        let x = gaussian(3, 2, 0);
        assert!(matches!(
            kmeanspp_init(x.view(), 4, 1, 0),
            Err(Error::TooFewPoints { points: 3, clusters: 4 })
        ));
        assert!(lloyd_fit(x.view(), 4, 1, 0, 10).is_err());
    }

    #[test]
    fn single_seed_potential() {
        let x = gaussian(40, 3, 1);
        let s = kmeanspp_init(x.view(), 1, 5, 9).unwrap();
        let c = x.row(s.indices[0]);
        let expect: f64 = x.rows().into_iter().map(|r| sq_dist(r, c)).sum();
        assert!((s.potential - expect).abs() <= 1e-9 * expect);
    }

    #[test]
    fn saturated_seeding_is_a_permutation() {
        let x = array![[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let s = kmeanspp_init(x.view(), 5, 3, 2).unwrap();
        assert_eq!(s.potential, 0.0);
        let mut idx = s.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn best_of_starts_is_reproducible() {
        let x = gaussian(200, 2, 4);
        let best = kmeanspp_init(x.view(), 5, 7, 11).unwrap();
        let min = (0..7usize)
            .map(|s| {
                let mut rng = rng_from(11, &["kmeans++".into(), s.into()]);
                kmeanspp_seed(x.view(), 5, &mut rng).unwrap().potential
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best.potential, min);
    }

    #[test]
    fn lloyd_single_cluster_is_mean() {
        let x = gaussian(100, 3, 5);
        let fit = lloyd_fit(x.view(), 1, 1, 0, 10).unwrap();
        for j in 0..3 {
            let mean = x.column(j).iter().map(|&v| v as f64).sum::<f64>() / 100.0;
            assert!((fit.centroids[[0, j]] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn lloyd_repeated_points_zero_inertia() {
        let pts = array![[0.0f32, 0.0], [5.0, 5.0], [-3.0, 2.0]];
        let x = Array2::from_shape_fn((30, 2), |(i, j)| pts[[i % 3, j]]);
        let fit = lloyd_fit(x.view(), 3, 1, 3, 50).unwrap();
        assert_eq!(fit.inertia(), 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn lloyd_inertia_monotone_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((100, 2), |_| rng.random_range(0.0f32..1.0));
        let fit = lloyd_fit(x.view(), 3, 1, 21, 100).unwrap();
        for w in fit.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.inertia_history);
        }
    }

    #[test]
    fn single_full_batch_is_one_lloyd_update() {
        let x = gaussian(300, 2, 6);
        let params = MiniBatchParams {
            k: 4,
            batch_size: 300,
            max_batches: 1,
            n_starts: 1,
            seed: 2,
            ..Default::default()
        };
        let fit = minibatch_kmeans_fit(std::iter::once(Ok(x.clone())), &params).unwrap();
        let seeds = kmeanspp_init(x.view(), 4, 1, 2).unwrap().centroids;
        // one exact assignment + mean update from the same seeds
        let mut sums = Array2::<f64>::zeros((4, 2));
        let mut cnt = [0f64; 4];
        for r in x.rows() {
            let (j, _) = nearest(seeds.view(), r);
            cnt[j] += 1.0;
            sums[[j, 0]] += r[0] as f64;
            sums[[j, 1]] += r[1] as f64;
        }
        for j in 0..4 {
            for d in 0..2 {
                let m = (sums[[j, d]] / cnt[j]) as f32;
                assert!((fit.centroids[[j, d]] - m).abs() <= 1e-6 * m.abs().max(1.0));
            }
        }
        assert_eq!(fit.counts.iter().sum::<u64>(), 300);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let params = MiniBatchParams::default();
        assert!(matches!(
            minibatch_kmeans_fit(std::iter::empty(), &params),
            Err(Error::EmptyStream)
        ));
    }

    #[test]
    fn dead_centroid_is_reseeded_to_farthest_point() {
        let mut state = MiniBatchState::new(array![[0.0, 0.0], [0.0, 0.0]]);
        let batch = array![[1.0f32, 0.0], [0.0, -2.0], [7.0, 0.0]];
        state.absorb(batch.view()).unwrap();
        // ties go to centroid 0, centroid 1 is dead and jumps to the farthest point
        assert_eq!(state.counts, vec![3, 0]);
        assert_eq!(state.centroids.row(1).to_vec(), vec![7.0, 0.0]);
    }
}
