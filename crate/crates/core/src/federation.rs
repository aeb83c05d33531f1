//! Federated rounds: client selection, broadcast, the public-shard exchange,
//! local updates and FedAvg aggregation.
//!
//! Within a round, each selected client is touched by exactly one worker
//! between the exchange and aggregation barriers. Every random draw is keyed
//! by `(seed, client, round)`, so results do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, AttackConfig};
use crate::data::{local_public_size, sample_local_public, Dataset};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::mlp::MlpParams;
use crate::rng::{self, domain};
use crate::strategies::{local_update, LocalReport, LocalTraining, StrategyKind};

/// Rows received from other clients, tagged with the id of their producer.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub data: Dataset,
    pub origin: Vec<usize>,
}

impl Shard {
    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            data: Dataset::empty(dim, num_classes),
            origin: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub params: MlpParams,
    pub private_data: Dataset,
    pub local_public: Dataset,
    /// Adversarial version of `local_public`, produced at exchange events.
    pub local_adv: Option<Dataset>,
    pub ensemble_adv: Shard,
    /// Other clients' clean public shards (EFNT variants).
    pub ensemble_clean: Shard,
    pub rng_seed: u64,
}

impl ClientState {
    pub fn new(id: usize, params: MlpParams, private_data: Dataset, rng_seed: u64) -> Self {
        let (d, c) = (private_data.dim(), private_data.num_classes());
        Self {
            id,
            params,
            private_data,
            local_public: Dataset::empty(d, c),
            local_adv: None,
            ensemble_adv: Shard::empty(d, c),
            ensemble_clean: Shard::empty(d, c),
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_params: MlpParams,
    pub round: usize,
    pub history: Vec<MetricsReport>,
}

impl ServerState {
    pub fn new(global_params: MlpParams) -> Self {
        Self {
            global_params,
            round: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain mean over the participating clients.
    Uniform,
    /// Weighted by each client's number of private examples.
    BySize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub exchange_every: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of the public set sampled into each client's local shard.
    pub alpha: f64,
    pub strategy: StrategyKind,
    pub attack: AttackConfig,
    pub weighting: Weighting,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("clients", "must be positive"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(
                "participation",
                format!("must lie in (0, 1], got {}", self.participation),
            ));
        }
        if participants(self.num_clients, self.participation) == 0 {
            return Err(Error::config("participation", "floor(C * K) selects no client"));
        }
        if self.exchange_every == 0 {
            return Err(Error::config("exchange_every", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        self.attack.validate()
    }

    pub fn is_exchange_round(&self, round: usize) -> bool {
        self.strategy.exchanges() && round.is_multiple_of(self.exchange_every)
    }
}

/// `floor(C * K)`, tolerant to the last-bit error of the product.
pub fn participants(num_clients: usize, participation: f64) -> usize {
    ((participation * num_clients as f64) + 1e-9).floor() as usize
}

/// Seeded sample of `floor(C * K)` client ids without replacement, keyed by
/// `(seed, round)` and returned in ascending order.
pub fn select_clients(num_clients: usize, participation: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    let n = participants(num_clients, participation).min(num_clients);
    if n == 0 {
        return Err(Error::config("participation", "floor(C * K) selects no client"));
    }
    let mut r = rng::stream(seed, &[domain::SELECT, round as u64]);
    let mut ids = rand::seq::index::sample(&mut r, num_clients, n).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// FedAvg over `(params, n_k)` pairs.
///
/// Each aggregated value is clamped to the range of the client values it was
/// computed from, so averaging identical parameters returns them exactly.
pub fn fedavg(updates: &[(&MlpParams, usize)], weighting: Weighting) -> Result<MlpParams> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::Data("fedavg needs at least one update".into()))?;
    if updates.iter().any(|(p, _)| !p.same_shape(first)) {
        return Err(Error::Shape("fedavg over differently shaped models".into()));
    }
    let weights: Vec<f64> = match weighting {
        Weighting::Uniform => vec![1.0 / updates.len() as f64; updates.len()],
        Weighting::BySize => {
            let total: usize = updates.iter().map(|u| u.1).sum();
            if total == 0 {
                return Err(Error::Data("fedavg by_size with zero total examples".into()));
            }
            updates.iter().map(|u| u.1 as f64 / total as f64).collect()
        }
    };

    let mut out = (*first).clone();
    let columns: Vec<Vec<f64>> = updates.iter().map(|(p, _)| p.values().collect()).collect();
    for (k, v) in out.values_mut().enumerate() {
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (col, w) in columns.iter().zip(&weights) {
            acc += w * col[k];
            lo = lo.min(col[k]);
            hi = hi.max(col[k]);
        }
        *v = acc.clamp(lo, hi);
    }
    Ok(out)
}

fn exchange_among<F, G>(clients: &mut [&mut ClientState], shard_of: F, mut store: G) -> Result<()>
where
    F: Fn(&ClientState) -> Option<&Dataset>,
    G: FnMut(&mut ClientState, Shard),
{
    let mut shared: Vec<(usize, Dataset)> = Vec::with_capacity(clients.len());
    for c in clients.iter() {
        let s = shard_of(c).ok_or_else(|| {
            Error::Protocol(format!("client {} has no shard to share at this exchange", c.id))
        })?;
        shared.push((c.id, s.clone()));
    }
    shared.sort_by_key(|s| s.0);

    for c in clients.iter_mut() {
        let me = c.id;
        let others: Vec<&(usize, Dataset)> = shared.iter().filter(|s| s.0 != me).collect();
        let shard = if others.is_empty() {
            Shard::empty(c.private_data.dim(), c.private_data.num_classes())
        } else {
            let parts: Vec<&Dataset> = others.iter().map(|s| &s.1).collect();
            Shard {
                data: Dataset::concat(&parts)?,
                origin: others
                    .iter()
                    .flat_map(|s| std::iter::repeat_n(s.0, s.1.len()))
                    .collect(),
            }
        };
        store(c, shard);
    }
    Ok(())
}

/// Gives every client the concatenation (ascending id, own id excluded) of
/// the other clients' `local_adv`. Replaces the previous ensemble.
pub fn exchange_adversarial(clients: &mut [ClientState]) -> Result<()> {
    let mut refs: Vec<&mut ClientState> = clients.iter_mut().collect();
    exchange_adversarial_among(&mut refs)
}

fn exchange_adversarial_among(clients: &mut [&mut ClientState]) -> Result<()> {
    exchange_among(clients, |c| c.local_adv.as_ref(), |c, s| c.ensemble_adv = s)
}

/// Same as [`exchange_adversarial`] for the clean local public shards.
pub fn exchange_public(clients: &mut [ClientState]) -> Result<()> {
    let mut refs: Vec<&mut ClientState> = clients.iter_mut().collect();
    exchange_public_among(&mut refs)
}

fn exchange_public_among(clients: &mut [&mut ClientState]) -> Result<()> {
    exchange_among(clients, |c| Some(&c.local_public), |c, s| c.ensemble_clean = s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Zero-based index of the round that just ran.
    pub round: usize,
    pub selected: Vec<usize>,
    pub exchanged: bool,
    pub mean_local_loss: f64,
    pub local: Vec<LocalReport>,
}

fn local_seed(seed: u64, client: usize, round: usize) -> u64 {
    rng::derive_seed(seed, &[domain::CLIENT, client as u64, round as u64])
}

/// Runs one round:
///
/// 1. broadcast the global model to the selected clients;
/// 2. on exchange rounds, resample each selected client's `L_i` from the
///    public set, craft `L_i^adv` against the freshly broadcast model when the
///    strategy needs it, and exchange shards among the selected clients;
/// 3. local update on every selected client (in parallel);
/// 4. FedAvg of the selected clients into the new global model.
///
/// `clients` must be indexed by id.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    public: &Dataset,
    seed: u64,
) -> Result<RoundOutcome> {
    if clients.len() != cfg.num_clients || clients.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::Protocol("clients must be indexed 0..K by id".into()));
    }
    let round = server.round;
    let selected = select_clients(cfg.num_clients, cfg.participation, round, seed)?;
    let mut chosen: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| selected.binary_search(&c.id).is_ok())
        .collect();

    for c in chosen.iter_mut() {
        c.params = server.global_params.clone();
    }

    let exchanged = cfg.is_exchange_round(round);
    if exchanged {
        let strategy = cfg.strategy;
        chosen.par_iter_mut().try_for_each(|c| -> Result<()> {
            c.local_public = sample_local_public(public, cfg.alpha, c.id, round, seed)?;
            c.local_adv = if strategy.needs_local_adv() {
                let s = rng::derive_seed(seed, &[domain::ATTACK, c.id as u64, round as u64]);
                Some(attack_dataset(&c.params, &c.local_public, &cfg.attack, s)?)
            } else {
                None
            };
            Ok(())
        })?;
        if strategy.shares_adversarial() {
            exchange_adversarial_among(&mut chosen)?;
        } else {
            exchange_public_among(&mut chosen)?;
        }
    }

    let opts = LocalTraining {
        epochs: cfg.local_epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        attack: cfg.attack,
        baseline_budget: selected.len() * local_public_size(public.len(), cfg.alpha),
    };
    let local: Vec<LocalReport> = chosen
        .par_iter_mut()
        .map(|c| {
            let s = local_seed(seed, c.id, round);
            local_update(c, cfg.strategy, &opts, s)
        })
        .collect::<Result<_>>()?;

    let updates: Vec<(&MlpParams, usize)> = chosen
        .iter()
        .map(|c| (&c.params, c.private_data.len()))
        .collect();
    server.global_params = fedavg(&updates, cfg.weighting)?;
    server.round += 1;

    let mean_local_loss = local.iter().map(|r| r.mean_loss).sum::<f64>() / local.len() as f64;
    Ok(RoundOutcome {
        round,
        selected,
        exchanged,
        mean_local_loss,
        local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::mlp::{backward, init_params, sgd_step, Dense};
    use crate::tensor::Tensor;

    fn scalar(v: f64) -> MlpParams {
        MlpParams::from_layers(vec![Dense {
            weight: Tensor::new(vec![1, 1], vec![v]).unwrap(),
            bias: Tensor::new(vec![1], vec![v + 2.0]).unwrap(),
        }])
        .unwrap()
    }

    #[test]
    fn selection_counts_and_determinism() {
        assert_eq!(select_clients(5, 1.0, 3, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        let s = select_clients(10, 0.25, 0, 9).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, select_clients(10, 0.25, 0, 9).unwrap());
        assert!(select_clients(3, 0.2, 0, 0).is_err());
        assert_eq!(participants(10, 0.3), 3);
        assert_eq!(participants(100, 0.29), 29);
    }

    #[test]
    fn fedavg_examples() {
        let (a, b) = (scalar(1.0), scalar(3.0));
        let u = fedavg(&[(&a, 1), (&b, 1)], Weighting::Uniform).unwrap();
        assert_eq!(u.values().collect::<Vec<_>>(), vec![2.0, 4.0]);

        let (z, f) = (scalar(0.0), scalar(4.0));
        let w = fedavg(&[(&z, 1), (&f, 3)], Weighting::BySize).unwrap();
        assert_eq!(w.values().next().unwrap(), 3.0);

        for mode in [Weighting::Uniform, Weighting::BySize] {
            assert_eq!(fedavg(&[(&a, 7)], mode).unwrap(), a);
        }
    }

    #[test]
    fn fedavg_identical_is_exact() {
        let p = init_params(&[5, 7, 3], 4).unwrap();
        for mode in [Weighting::Uniform, Weighting::BySize] {
            let out = fedavg(&[(&p, 3), (&p, 5), (&p, 11)], mode).unwrap();
            assert_eq!(out, p);
        }
    }

    #[test]
    fn fedavg_shape_mismatch() {
        let a = init_params(&[2, 3], 0).unwrap();
        let b = init_params(&[2, 4], 0).unwrap();
        assert!(matches!(fedavg(&[(&a, 1), (&b, 1)], Weighting::Uniform), Err(Error::Shape(_))));
        assert!(fedavg(&[(&a, 0), (&a, 0)], Weighting::BySize).is_err());
    }

    fn toy_clients(n: usize, shard: usize) -> Vec<ClientState> {
        let ds = make_blobs(3, 4, 20, 0.2, 1).unwrap();
        (0..n)
            .map(|i| {
                let mut c = ClientState::new(i, init_params(&[4, 3], 0).unwrap(), ds.subset(&[i]), 0);
                let rows: Vec<usize> = (0..shard).map(|j| (i * shard + j) % ds.len()).collect();
                c.local_adv = Some(ds.subset(&rows));
                c
            })
            .collect()
    }

    #[test]
    fn pairwise_exchange() {
        let mut cs = toy_clients(2, 3);
        exchange_adversarial(&mut cs).unwrap();
        assert_eq!(cs[0].ensemble_adv.data, *cs[1].local_adv.as_ref().unwrap());
        assert_eq!(cs[1].ensemble_adv.data, *cs[0].local_adv.as_ref().unwrap());
    }

    #[test]
    fn exchange_counts_and_exclusion() {
        let mut cs = toy_clients(5, 4);
        exchange_adversarial(&mut cs).unwrap();
        for c in &cs {
            assert_eq!(c.ensemble_adv.len(), 16);
            assert!(c.ensemble_adv.origin.iter().all(|&o| o != c.id));
            assert!(c.ensemble_adv.origin.windows(2).all(|w| w[0] <= w[1]));
        }
        // a second exchange replaces rather than appends
        exchange_adversarial(&mut cs).unwrap();
        assert!(cs.iter().all(|c| c.ensemble_adv.len() == 16));
    }

    #[test]
    fn exchange_requires_local_adv() {
        let mut cs = toy_clients(3, 2);
        cs[1].local_adv = None;
        assert!(matches!(exchange_adversarial(&mut cs), Err(Error::Protocol(_))));
    }

    fn fed_cfg(strategy: StrategyKind) -> FederationConfig {
        FederationConfig {
            num_clients: 2,
            participation: 1.0,
            rounds: 1,
            local_epochs: 1,
            exchange_every: 5,
            lr: 0.3,
            batch_size: 1000,
            alpha: 0.5,
            strategy,
            attack: AttackConfig::pgd(0.0, 0.01, 2),
            weighting: Weighting::BySize,
        }
    }

    #[test]
    fn baseline_round_never_exchanges() {
        let ds = make_blobs(3, 4, 10, 0.2, 2).unwrap();
        let g = ds.subset(&(0..12).collect::<Vec<_>>());
        let mut cs: Vec<ClientState> = (0..2)
            .map(|i| ClientState::new(i, init_params(&[4, 3], 1).unwrap(), ds.subset(&[i, i + 10, i + 20]), i as u64))
            .collect();
        let mut server = ServerState::new(init_params(&[4, 3], 1).unwrap());
        let cfg = fed_cfg(StrategyKind::Baseline);
        let out = run_round(&mut server, &mut cs, &cfg, &g, 3).unwrap();
        assert!(!out.exchanged);
        assert!(cs.iter().all(|c| c.ensemble_adv.is_empty() && c.ensemble_clean.is_empty()));
        assert_eq!(server.round, 1);
    }

    #[test]
    fn identical_clients_match_single_node_step() {
        // Two clients with the same private data; the Baseline budget covers all
        // of P and the attack radius is zero, so each client takes one
        // full-batch step on 2 * mean-gradient(P).
        let ds = make_blobs(3, 4, 4, 0.3, 5).unwrap();
        let p: Vec<usize> = (0..ds.len()).step_by(2).collect();
        let private = ds.subset(&p);
        let public = ds.subset(&[1, 3, 5, 7, 9, 11]);
        let init = init_params(&[4, 5, 3], 2).unwrap();
        let mut cs: Vec<ClientState> = (0..2)
            .map(|i| ClientState::new(i, init.clone(), private.clone(), i as u64))
            .collect();
        let mut server = ServerState::new(init.clone());
        let cfg = fed_cfg(StrategyKind::Baseline);
        run_round(&mut server, &mut cs, &cfg, &public, 17).unwrap();

        let g = backward(&init, private.features(), private.labels()).unwrap();
        let expected = sgd_step(&init, &g, 2.0 * cfg.lr).unwrap();
        let worst = server
            .global_params
            .values()
            .zip(expected.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "max deviation {worst}");
    }

    #[test]
    fn exchange_cadence() {
        let mut cfg = fed_cfg(StrategyKind::Efat);
        let fired: Vec<usize> = (0..16).filter(|&r| cfg.is_exchange_round(r)).collect();
        assert_eq!(fired, vec![0, 5, 10, 15]);
        cfg.strategy = StrategyKind::Baseline;
        assert!((0..16).all(|r| !cfg.is_exchange_round(r)));
    }
}
