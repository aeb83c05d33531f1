use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    Dirichlet { gamma: f64 },
    FeatureSkew,
}

/// Which source rows each client receives.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub mode: PartitionMode,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// True when the assignments are pairwise disjoint and cover `0..n`.
    pub fn is_complete_partition(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.assignments.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }

    pub fn client_datasets(&self, ds: &Dataset) -> Vec<Dataset> {
        self.assignments.iter().map(|a| ds.subset(a)).collect()
    }

    pub fn class_histograms(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|a| {
                let mut h = vec![0; ds.num_classes()];
                for &i in a {
                    h[ds.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Mean over clients of the largest single-class share of the client's data.
    pub fn mean_max_class_share(&self, ds: &Dataset) -> f64 {
        let shares: Vec<f64> = self
            .class_histograms(ds)
            .iter()
            .map(|h| {
                let total: usize = h.iter().sum();
                *h.iter().max().unwrap_or(&0) as f64 / total.max(1) as f64
            })
            .collect();
        shares.iter().sum::<f64>() / shares.len() as f64
    }
}

/// Draws `p ~ Dirichlet(concentration * 1_k)`.
///
/// Uses `Gamma(a) = Gamma(a + 1) * U^(1/a)` in log space, which stays
/// well-defined for concentrations far below 1 where plain gamma draws
/// underflow to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(concentration: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / concentration
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Label-skewed split: each class's shuffled indices are cut across the
/// clients by Dirichlet(gamma) proportions. The whole draw is repeated (up to
/// 100 times) whenever some client would end up with no data at all.
pub fn dirichlet_partition(ds: &Dataset, clients: usize, gamma: f64, seed: u64) -> Result<PartitionPlan> {
    if clients < 2 {
        return Err(Error::config("clients", format!("need at least 2 clients, got {clients}")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config("gamma", format!("must be finite and > 0, got {gamma}")));
    }
    let by_class = ds.indices_by_class();
    if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, idx)| idx.len() < clients) {
        return Err(Error::Partition(format!(
            "class {c} has {} examples, fewer than {clients} clients",
            idx.len()
        )));
    }

    let mut r = rng::stream(seed, &[domain::PARTITION]);
    for _ in 0..MAX_REDRAWS {
        let mut assignments = vec![Vec::new(); clients];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut r);
            let p = sample_dirichlet(gamma, clients, &mut r);
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (k, pk) in p.iter().enumerate() {
                cum += pk;
                let end = if k + 1 == clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                assignments[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(PartitionPlan {
                assignments,
                mode: PartitionMode::Dirichlet { gamma },
                seed,
            });
        }
    }
    Err(Error::Partition(format!(
        "no draw with all {clients} clients nonempty after {MAX_REDRAWS} attempts (gamma={gamma})"
    )))
}

/// Per-client domain shift applied to an IID shard.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureTransform {
    /// Givens rotation angle (radians) applied to each coordinate pair
    /// `(2j, 2j+1)` around the cube center.
    pub rotation: f64,
    /// Constant added to every feature.
    pub brightness: f64,
    /// Standard deviation of seeded Gaussian noise added per feature.
    pub noise_sigma: f64,
}

impl FeatureTransform {
    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.brightness == 0.0 && self.noise_sigma == 0.0
    }

    fn apply<R: Rng + ?Sized>(&self, row: &mut [f64], rng: &mut R) {
        if self.rotation != 0.0 {
            let (s, c) = self.rotation.sin_cos();
            for pair in row.chunks_exact_mut(2) {
                let (a, b) = (pair[0] - 0.5, pair[1] - 0.5);
                pair[0] = 0.5 + c * a - s * b;
                pair[1] = 0.5 + s * a + c * b;
            }
        }
        for v in row.iter_mut() {
            let noise = if self.noise_sigma > 0.0 {
                self.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            *v = (*v + self.brightness + noise).clamp(0.0, 1.0);
        }
    }
}

/// Feature-skewed split: an IID stratified deal of the rows across clients,
/// followed by client `k`'s transform on its shard.
pub fn feature_skew_partition(
    ds: &Dataset,
    clients: usize,
    transforms: &[FeatureTransform],
    seed: u64,
) -> Result<Vec<Dataset>> {
    Ok(feature_skew_plan(ds, clients, transforms, seed)?.1)
}

pub(crate) fn feature_skew_plan(
    ds: &Dataset,
    clients: usize,
    transforms: &[FeatureTransform],
    seed: u64,
) -> Result<(PartitionPlan, Vec<Dataset>)> {
    if clients == 0 {
        return Err(Error::config("clients", "must be positive"));
    }
    if transforms.len() != clients {
        return Err(Error::config(
            "transforms",
            format!("{} transforms for {clients} clients", transforms.len()),
        ));
    }
    let mut r = rng::stream(seed, &[domain::PARTITION]);
    let mut assignments = vec![Vec::new(); clients];
    let mut next = 0usize;
    for mut idx in ds.indices_by_class() {
        idx.shuffle(&mut r);
        for i in idx {
            assignments[next % clients].push(i);
            next += 1;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }

    let mut shards = Vec::with_capacity(clients);
    for (k, (a, t)) in assignments.iter().zip(transforms).enumerate() {
        let base = ds.subset(a);
        if t.is_identity() {
            shards.push(base);
            continue;
        }
        let mut noise = rng::stream(seed, &[domain::FEATURE_NOISE, k as u64]);
        let mut feats = base.features().clone();
        for i in 0..feats.rows() {
            t.apply(feats.row_mut(i), &mut noise);
        }
        let feats = Tensor::new(feats.shape().to_vec(), feats.into_data())?;
        shards.push(Dataset::new(feats, base.labels().to_vec(), ds.num_classes())?);
    }
    let plan = PartitionPlan {
        assignments,
        mode: PartitionMode::FeatureSkew,
        seed,
    };
    Ok((plan, shards))
}
