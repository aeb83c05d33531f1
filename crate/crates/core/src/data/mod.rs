//! Labeled datasets, synthetic generation, non-IID partitioning and the
//! public/private splits used by the Distribute phase.

mod blobs;
mod io;
pub(crate) mod partition;

pub use blobs::make_blobs;
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC};
pub use partition::{
    dirichlet_partition, feature_skew_partition, sample_dirichlet, FeatureTransform, PartitionMode,
    PartitionPlan,
};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Feature matrix `[n x d]` with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "features must be [n x d], got {:?}",
                features.shape()
            )));
        }
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Data("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            features: Tensor::zeros(vec![0, dim]),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenates datasets in order. All parts must share `dim` and
    /// `num_classes`.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("concat of zero datasets".into()))?;
        let (d, c) = (first.dim(), first.num_classes);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != d || p.num_classes != c {
                return Err(Error::Shape(format!(
                    "cannot concat dim {}/{} classes with dim {}/{} classes",
                    p.dim(),
                    p.num_classes,
                    d,
                    c
                )));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        let n = labels.len();
        Dataset::new(Tensor::new(vec![n, d], data)?, labels, c)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Row indices grouped by class, ascending within each class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by[y].push(i);
        }
        by
    }

    pub fn within_range(&self, lo: f64, hi: f64) -> bool {
        self.features.data().iter().all(|&v| v >= lo && v <= hi)
    }
}

/// `ceil(fraction * n)` robust to the last-bit error of the product.
pub(crate) fn fraction_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Seeded stratified split. Each class `c` contributes
/// `ceil(fraction * n_c)` rows to the second part. Returns `(rest, taken)`,
/// each in ascending source-index order.
pub fn stratified_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (rest, taken) = stratified_indices(ds, fraction, seed)?;
    Ok((ds.subset(&rest), ds.subset(&taken)))
}

pub(crate) fn stratified_indices(
    ds: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(
            "fraction",
            format!("split fraction must lie in (0, 1), got {fraction}"),
        ));
    }
    let mut rest = Vec::new();
    let mut taken = Vec::new();
    for (c, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        let mut r = rng::stream(seed, &[c as u64]);
        idx.shuffle(&mut r);
        let k = fraction_count(fraction, idx.len()).min(idx.len());
        taken.extend_from_slice(&idx[..k]);
        rest.extend_from_slice(&idx[k..]);
    }
    rest.sort_unstable();
    taken.sort_unstable();
    Ok((rest, taken))
}

/// Splits a corpus into the private pool `P` and the global public set `G`.
/// `G` is stratified so it carries every class in proportion.
pub fn split_public_private(ds: &Dataset, public_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(public_fraction > 0.0 && public_fraction < 1.0) {
        return Err(Error::config(
            "public_fraction",
            format!("must lie in (0, 1), got {public_fraction}"),
        ));
    }
    let (rest, taken) = stratified_indices(ds, public_fraction, rng::derive_seed(seed, &[domain::SPLIT_PUBLIC]))?;
    if rest.is_empty() || taken.is_empty() {
        return Err(Error::config(
            "public_fraction",
            format!(
                "{public_fraction} leaves {} private and {} public rows",
                rest.len(),
                taken.len()
            ),
        ));
    }
    Ok((ds.subset(&rest), ds.subset(&taken)))
}

/// Size of each client's local public shard: `ceil(alpha * |G|)`.
pub fn local_public_size(public_len: usize, alpha: f64) -> usize {
    fraction_count(alpha, public_len).min(public_len)
}

/// Draws the local public shard `L_i` for one client and one exchange event:
/// a uniform sample without replacement of `ceil(alpha * |G|)` rows of `G`,
/// from a stream keyed by `(seed, client_id, round)`. Shards of different
/// clients may overlap.
pub fn sample_local_public(
    public: &Dataset,
    alpha: f64,
    client_id: usize,
    round: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config("alpha", format!("must lie in (0, 1], got {alpha}")));
    }
    let k = local_public_size(public.len(), alpha);
    if k == 0 {
        return Err(Error::config("alpha", "local public shard would be empty"));
    }
    let mut r = rng::stream(seed, &[domain::LOCAL_PUBLIC, client_id as u64, round as u64]);
    let idx: Vec<usize> = rand::seq::index::sample(&mut r, public.len(), k).into_vec();
    Ok(public.subset(&idx))
}
