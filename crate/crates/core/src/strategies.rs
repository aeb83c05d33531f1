//! Local update regimes.
//!
//! | strategy  | private | local public          | ensemble (other clients) |
//! |-----------|---------|-----------------------|--------------------------|
//! | Baseline  | clean   | none (adv. private)   | none                     |
//! | EFNT      | clean   | clean                 | clean                    |
//! | EFNT+AT   | clean   | adversarial           | clean                    |
//! | EFAT      | clean   | adversarial           | adversarial              |
//!
//! The training loss is the sum over source groups of the mean cross-entropy
//! inside each group. Every mini-batch carries rows of every present group
//! in proportion to the group sizes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::ClientState;
use crate::mlp::{cross_entropy, forward, sgd_step, weighted_loss_and_gradients, MlpParams};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Baseline,
    Efnt,
    EfntAt,
    Efat,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Baseline,
        StrategyKind::Efnt,
        StrategyKind::EfntAt,
        StrategyKind::Efat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "baseline",
            StrategyKind::Efnt => "efnt",
            StrategyKind::EfntAt => "efnt_at",
            StrategyKind::Efat => "efat",
        }
    }

    /// Whether clients exchange public shards at all.
    pub fn exchanges(self) -> bool {
        self != StrategyKind::Baseline
    }

    /// Whether the client needs an adversarial version of its own public shard.
    pub fn needs_local_adv(self) -> bool {
        matches!(self, StrategyKind::EfntAt | StrategyKind::Efat)
    }

    /// Whether the shared shards are adversarial (otherwise clean).
    pub fn shares_adversarial(self) -> bool {
        self == StrategyKind::Efat
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "strategy",
                    format!("unknown strategy {s:?} (expected baseline, efnt, efnt_at or efat)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    PrivateClean,
    PrivateAdv,
    LocalPublicClean,
    LocalPublicAdv,
    EnsembleClean,
    EnsembleAdv,
}

impl Source {
    pub fn is_adversarial(self) -> bool {
        matches!(self, Source::PrivateAdv | Source::LocalPublicAdv | Source::EnsembleAdv)
    }

    pub fn from_public(self) -> bool {
        !matches!(self, Source::PrivateClean | Source::PrivateAdv)
    }
}

/// Rows of one source, each tagged with the id of the client that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub source: Source,
    pub data: Dataset,
    pub origin: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub groups: Vec<Group>,
    /// Clean private rows whose adversaries are refreshed every epoch (Baseline).
    refresh_pool: Option<Dataset>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, source: Source) -> Option<&Group> {
        self.groups.iter().find(|g| g.source == source)
    }

    /// All rows as one dataset, groups in order.
    pub fn merged(&self) -> Result<Dataset> {
        let parts: Vec<&Dataset> = self.groups.iter().map(|g| &g.data).collect();
        Dataset::concat(&parts)
    }
}

/// Per-batch row count for each source group.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub entries: Vec<(Source, usize)>,
}

impl BatchPlan {
    /// Splits `batch_size` across groups proportionally to their sizes,
    /// rounded, with at least one row per group. A batch never exceeds the
    /// total number of rows.
    pub fn proportional(groups: &[Group], batch_size: usize) -> Result<BatchPlan> {
        let sizes: Vec<usize> = groups.iter().map(|g| g.data.len()).collect();
        if sizes.contains(&0) {
            return Err(Error::Data("batch plan over an empty group".into()));
        }
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        if batch_size < groups.len() {
            return Err(Error::config(
                "batch_size",
                format!("{batch_size} cannot hold one row from each of {} groups", groups.len()),
            ));
        }
        let b = batch_size.min(total);
        let raw: Vec<f64> = sizes.iter().map(|&s| b as f64 * s as f64 / total as f64).collect();
        let mut counts: Vec<usize> = raw
            .iter()
            .zip(&sizes)
            .map(|(&r, &s)| (r.round() as usize).clamp(1, s))
            .collect();
        while counts.iter().sum::<usize>() > b {
            let (i, _) = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 1)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("batch holds one row per group");
            counts[i] -= 1;
        }
        while counts.iter().sum::<usize>() < b {
            let i = (0..counts.len())
                .filter(|&i| counts[i] < sizes[i])
                .max_by(|&a, &b| {
                    (raw[a] - counts[a] as f64)
                        .total_cmp(&(raw[b] - counts[b] as f64))
                        .then(b.cmp(&a))
                })
                .expect("b <= total rows");
            counts[i] += 1;
        }
        Ok(BatchPlan {
            entries: groups.iter().map(|g| g.source).zip(counts).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }
}

fn tagged(source: Source, data: &Dataset, origin: Vec<usize>) -> Option<Group> {
    (!data.is_empty()).then(|| Group {
        source,
        data: data.clone(),
        origin,
    })
}

/// Builds the client's training set for one local update.
///
/// `baseline_budget` is the number of private rows Baseline turns into
/// adversaries, matching the public rows the ensemble strategies train on. It
/// is capped at `|P_i|`. Strategies whose shared data has not arrived yet
/// (no exchange so far) train on the groups that are present.
pub fn compose_training_set(
    client: &ClientState,
    kind: StrategyKind,
    attack: &AttackConfig,
    baseline_budget: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let me = client.id;
    let mut groups = Vec::new();
    let mut refresh_pool = None;
    groups.extend(tagged(
        Source::PrivateClean,
        &client.private_data,
        vec![me; client.private_data.len()],
    ));

    match kind {
        StrategyKind::Baseline => {
            let k = baseline_budget.min(client.private_data.len());
            if k > 0 {
                let mut r = rng::stream(seed, &[domain::ATTACK, 0]);
                let mut idx = rand::seq::index::sample(&mut r, client.private_data.len(), k).into_vec();
                idx.sort_unstable();
                let pool = client.private_data.subset(&idx);
                let adv = attack_dataset(&client.params, &pool, attack, rng::derive_seed(seed, &[domain::ATTACK, 1]))?;
                groups.extend(tagged(Source::PrivateAdv, &adv, vec![me; k]));
                refresh_pool = Some(pool);
            }
        }
        StrategyKind::Efnt => {
            groups.extend(tagged(
                Source::LocalPublicClean,
                &client.local_public,
                vec![me; client.local_public.len()],
            ));
            groups.extend(tagged(
                Source::EnsembleClean,
                &client.ensemble_clean.data,
                client.ensemble_clean.origin.clone(),
            ));
        }
        StrategyKind::EfntAt | StrategyKind::Efat => {
            if let Some(l_adv) = &client.local_adv {
                groups.extend(tagged(Source::LocalPublicAdv, l_adv, vec![me; l_adv.len()]));
            }
            let (source, shard) = if kind == StrategyKind::Efat {
                (Source::EnsembleAdv, &client.ensemble_adv)
            } else {
                (Source::EnsembleClean, &client.ensemble_clean)
            };
            groups.extend(tagged(source, &shard.data, shard.origin.clone()));
        }
    }

    if groups.is_empty() {
        return Err(Error::Data(format!("client {me} has no training data")));
    }
    Ok(TrainingSet {
        groups,
        refresh_pool,
    })
}

/// Sum over groups of the mean cross-entropy within the group. Empty groups
/// contribute nothing.
pub fn local_loss(params: &MlpParams, groups: &[&Dataset]) -> Result<f64> {
    let mut total = 0.0;
    let mut any = false;
    for g in groups.iter().filter(|g| !g.is_empty()) {
        total += cross_entropy(&forward(params, g.features())?, g.labels())?;
        any = true;
    }
    if !any {
        return Err(Error::Data("local_loss over an empty batch".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub attack: AttackConfig,
    pub baseline_budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalReport {
    /// Mean per-batch `local_loss` over the last epoch (before each step).
    pub mean_loss: f64,
    pub steps: usize,
    pub max_grad_norm: f64,
    pub training_rows: usize,
}

/// Runs `epochs` of mini-batch SGD on the composed training set and stores
/// the result in `client.params`.
///
/// Baseline refreshes its private adversaries against the current parameters
/// at the start of every epoch; exchanged shards stay fixed.
pub fn local_update(
    client: &mut ClientState,
    kind: StrategyKind,
    opts: &LocalTraining,
    seed: u64,
) -> Result<LocalReport> {
    let mut set = compose_training_set(client, kind, &opts.attack, opts.baseline_budget, seed)?;
    let plan = BatchPlan::proportional(&set.groups, opts.batch_size)?;
    let mut report = LocalReport {
        training_rows: set.len(),
        ..LocalReport::default()
    };
    if opts.epochs == 0 {
        return Ok(report);
    }

    let mut params = client.params.clone();
    let batches_per_epoch = set.len().div_ceil(plan.batch_size());
    let dim = client.private_data.dim();

    for epoch in 0..opts.epochs {
        if epoch > 0 {
            if let Some(pool) = &set.refresh_pool {
                let fresh = attack_dataset(
                    &params,
                    pool,
                    &opts.attack,
                    rng::derive_seed(seed, &[domain::ATTACK, 2, epoch as u64]),
                )?;
                let g = set
                    .groups
                    .iter_mut()
                    .find(|g| g.source == Source::PrivateAdv)
                    .expect("refresh pool implies a private adversarial group");
                g.data = fresh;
            }
        }

        let mut r = rng::stream(seed, &[domain::SHUFFLE, epoch as u64]);
        let orders: Vec<Vec<usize>> = set
            .groups
            .iter()
            .map(|g| {
                let mut o: Vec<usize> = (0..g.data.len()).collect();
                o.shuffle(&mut r);
                o
            })
            .collect();
        let mut cursors = vec![0usize; set.groups.len()];
        let mut epoch_loss = 0.0;

        for _ in 0..batches_per_epoch {
            let mut feats = Vec::with_capacity(plan.batch_size() * dim);
            let mut labels = Vec::with_capacity(plan.batch_size());
            let mut weights = Vec::with_capacity(plan.batch_size());
            for (gi, &(_, count)) in plan.entries.iter().enumerate() {
                let g = &set.groups[gi].data;
                let order = &orders[gi];
                for j in 0..count {
                    let row = order[(cursors[gi] + j) % order.len()];
                    feats.extend_from_slice(g.features().row(row));
                    labels.push(g.labels()[row]);
                    weights.push(1.0 / count as f64);
                }
                cursors[gi] = (cursors[gi] + count) % order.len();
            }
            let x = crate::tensor::Tensor::new(vec![labels.len(), dim], feats)?;
            let (loss, grads) = weighted_loss_and_gradients(&params, &x, &labels, &weights, false)?;
            params = sgd_step(&params, &grads, opts.lr)?;
            epoch_loss += loss;
            report.steps += 1;
            report.max_grad_norm = report.max_grad_norm.max(grads.norm());
        }
        report.mean_loss = epoch_loss / batches_per_epoch as f64;
    }

    client.params = params;
    Ok(report)
}
