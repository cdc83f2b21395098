//! Teacher quality: how well frame-level unit labels line up with phone labels.
//!
//! All three scores derive from the empirical joint distribution of
//! (phone, unit) over frames. Natural log throughout; `0·log 0 = 0`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, LabelLine};

/// Ground-truth phone class per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentLabels {
    pub labels: Vec<u32>,
    pub utterance_id: String,
}

/// |Y|×C frame counts of phone i co-occurring with unit j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<u64>,
    phones: usize,
    units: usize,
    total: u64,
}

impl ContingencyTable {
    pub fn from_counts(phones: usize, units: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != phones * units {
            return Err(Error::Shape(format!(
                "{} counts for a {phones}×{units} table",
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        if total == 0 {
            return Err(Error::NoFrames);
        }
        Ok(Self {
            counts,
            phones,
            units,
            total,
        })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let units = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != units) {
            return Err(Error::Shape("ragged contingency rows".into()));
        }
        Self::from_counts(rows.len(), units, rows.concat())
    }

    pub fn num_phones(&self) -> usize {
        self.phones
    }

    pub fn num_units(&self) -> usize {
        self.units
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, phone: usize, unit: usize) -> u64 {
        self.counts[phone * self.units + unit]
    }

    pub fn joint(&self, phone: usize, unit: usize) -> f64 {
        self.count(phone, unit) as f64 / self.total as f64
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.units).map(|r| r.to_vec()).collect()
    }

    /// p_y(i) = Σ_j p_yz(i, j)
    pub fn phone_marginal(&self) -> Vec<f64> {
        (0..self.phones)
            .map(|i| (0..self.units).map(|j| self.count(i, j)).sum::<u64>() as f64 / self.total as f64)
            .collect()
    }

    /// p_z(j) = Σ_i p_yz(i, j)
    pub fn unit_marginal(&self) -> Vec<f64> {
        (0..self.units)
            .map(|j| (0..self.phones).map(|i| self.count(i, j)).sum::<u64>() as f64 / self.total as f64)
            .collect()
    }

    /// Most likely unit for each phone, lowest index on ties.
    pub fn best_unit_per_phone(&self) -> Vec<usize> {
        (0..self.phones)
            .map(|i| argmax((0..self.units).map(|j| self.count(i, j))))
            .collect()
    }

    /// Most likely phone for each unit, lowest index on ties.
    pub fn best_phone_per_unit(&self) -> Vec<usize> {
        (0..self.units)
            .map(|j| argmax((0..self.phones).map(|i| self.count(i, j))))
            .collect()
    }
}

fn argmax(xs: impl Iterator<Item = u64>) -> usize {
    let mut best = (0, 0u64);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Counts (phone, unit) co-occurrences across all utterances.
pub fn build_contingency<'a, I>(pairs: I) -> Result<ContingencyTable>
where
    I: IntoIterator<Item = (&'a AlignmentLabels, &'a [u32])>,
{
    let mut obs: Vec<(u32, u32)> = Vec::new();
    for (phones, units) in pairs {
        if phones.labels.len() != units.len() {
            return Err(Error::LengthMismatch {
                utterance: phones.utterance_id.clone(),
                left: phones.labels.len(),
                right: units.len(),
            });
        }
        obs.extend(phones.labels.iter().copied().zip(units.iter().copied()));
    }
    if obs.is_empty() {
        return Err(Error::NoFrames);
    }
    let phones = obs.iter().map(|o| o.0).max().unwrap_or(0) as usize + 1;
    let units = obs.iter().map(|o| o.1).max().unwrap_or(0) as usize + 1;
    let mut counts = vec![0u64; phones * units];
    for (y, z) in obs {
        counts[y as usize * units + z as usize] += 1;
    }
    ContingencyTable::from_counts(phones, units, counts)
}

/// Pairs phone and unit label files by utterance id (unit file order).
pub fn pair_by_utterance(
    phones: &[LabelLine],
    units: &[LabelLine],
) -> Result<Vec<(AlignmentLabels, Vec<u32>)>> {
    let by_id: std::collections::BTreeMap<&str, &LabelLine> =
        phones.iter().map(|l| (l.utterance_id.as_str(), l)).collect();
    units
        .iter()
        .map(|u| {
            let p = by_id.get(u.utterance_id.as_str()).ok_or_else(|| {
                Error::InvalidInput(format!("no phone labels for utterance {}", u.utterance_id))
            })?;
            Ok((
                AlignmentLabels {
                    labels: p.labels.clone(),
                    utterance_id: p.utterance_id.clone(),
                },
                u.labels.clone(),
            ))
        })
        .collect()
}

/// E_{p_z(j)}[p_{y|z}(y*(j) | j)] = Σ_j max_i p_yz(i, j).
pub fn phone_purity(t: &ContingencyTable) -> f64 {
    (0..t.units)
        .map(|j| (0..t.phones).map(|i| t.count(i, j)).max().unwrap_or(0))
        .sum::<u64>() as f64
        / t.total as f64
}

/// E_{p_y(i)}[p_{z|y}(z*(i) | i)] = Σ_i max_j p_yz(i, j).
pub fn cluster_purity(t: &ContingencyTable) -> f64 {
    (0..t.phones)
        .map(|i| (0..t.units).map(|j| t.count(i, j)).max().unwrap_or(0))
        .sum::<u64>() as f64
        / t.total as f64
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// ln(num / den) after cancelling common factors, so equal ratios of
/// counts give bit-identical logarithms and a ratio of one gives exactly 0.
fn ln_ratio(num: u128, den: u128) -> f64 {
    let g = gcd(num, den);
    ((num / g) as f64 / (den / g) as f64).ln()
}

/// Phone-normalized mutual information I(y; z) / H(y).
///
/// Both terms are evaluated from integer counts: a table with one nonzero
/// cell per row and column scores exactly 1, an independent table exactly 0.
pub fn pnmi(t: &ContingencyTable) -> Result<f64> {
    let n = t.total as u128;
    let rows: Vec<u128> = (0..t.phones)
        .map(|i| (0..t.units).map(|j| t.count(i, j) as u128).sum())
        .collect();
    let cols: Vec<u128> = (0..t.units)
        .map(|j| (0..t.phones).map(|i| t.count(i, j) as u128).sum())
        .collect();
    let hy: f64 = rows
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 / n as f64 * ln_ratio(n, c))
        .sum();
    if hy <= 0.0 {
        return Err(Error::DegeneratePhones);
    }
    let mut mi = 0.0;
    for (i, &ci) in rows.iter().enumerate() {
        for (j, &cj) in cols.iter().enumerate() {
            let c = t.count(i, j) as u128;
            if c > 0 {
                mi += c as f64 / n as f64 * ln_ratio(c * n, ci * cj);
            }
        }
    }
    Ok((mi / hy).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phone_purity: f64,
    pub cluster_purity: f64,
    pub pnmi: f64,
    pub num_phones: usize,
    pub num_units: usize,
    pub num_frames: u64,
}

impl MetricsReport {
    pub fn from_table(t: &ContingencyTable) -> Result<Self> {
        Ok(Self {
            phone_purity: phone_purity(t),
            cluster_purity: cluster_purity(t),
            pnmi: pnmi(t)?,
            num_phones: t.num_phones(),
            num_units: t.num_units(),
            num_frames: t.total(),
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        io::write_bytes(path.as_ref(), s.as_bytes())
    }
}

/// Scores unit labels against phone labels read from files or directories.
pub fn evaluate_files(phones: impl AsRef<Path>, units: impl AsRef<Path>) -> Result<MetricsReport> {
    let p = io::read_labels_path(phones)?;
    let u = io::read_labels_path(units)?;
    let pairs = pair_by_utterance(&p, &u)?;
    let table = build_contingency(pairs.iter().map(|(a, z)| (a, z.as_slice())))?;
    MetricsReport::from_table(&table)
}
