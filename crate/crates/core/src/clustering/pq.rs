use ndarray::{ArrayView2, Axis};

use super::{fit_codebook_matrix, ClusterEnsemble, Codebook, FitConfig};
use crate::error::{Error, Result};
use crate::features::FeatureKind;

/// Checks that `partition` splits `0..dim` into disjoint, non-empty subsets.
pub fn validate_partition(partition: &[Vec<usize>], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    for (i, subset) in partition.iter().enumerate() {
        if subset.is_empty() {
            return Err(Error::InvalidInput(format!("subspace {i} is empty")));
        }
        for &d in subset {
            if d >= dim {
                return Err(Error::InvalidInput(format!(
                    "subspace {i} names dim {d} outside 0..{dim}"
                )));
            }
            if seen[d] {
                return Err(Error::InvalidInput(format!("partition overlaps at dim {d}")));
            }
            seen[d] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidInput(format!(
            "partition does not cover dim {missing}"
        )));
    }
    Ok(())
}

/// Product quantization: one codebook per subspace, each fitted on its own
/// columns with the same configuration and seed.
pub fn pq_fit(
    data: ArrayView2<f32>,
    partition: &[Vec<usize>],
    k_per_subspace: usize,
    kind: FeatureKind,
    cfg: &FitConfig,
) -> Result<ClusterEnsemble> {
    validate_partition(partition, data.ncols())?;
    let codebooks = partition
        .iter()
        .map(|dims| {
            let sub = data.select(Axis(1), dims);
            let mut c = cfg.clone();
            c.k = k_per_subspace;
            let centroids = fit_codebook_matrix(sub.view(), &c)?.0;
            Codebook::new(centroids, kind, dims.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterEnsemble { codebooks })
}
