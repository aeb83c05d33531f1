//! Black-box evaluation.
//!
//! An independent adversary model is trained normally on data no client
//! holds. Its gradients drive PGD on the test set, and the resulting
//! examples are transferred to every evaluated model. Reported accuracies are
//! averages over the participating client models.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attacks::{attack_dataset, AttackConfig};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experiment::run_experiment;
use crate::mlp::{accuracy, init_params, sgd_step, weighted_loss_and_gradients, MlpParams};
use crate::rng::{self, domain};
use crate::strategies::StrategyKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedAttack {
    pub name: String,
    pub config: AttackConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientMetrics {
    pub id: usize,
    pub clean_acc: f64,
    /// One entry per attack, in `MetricsReport::attack_names` order.
    pub robust_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Number of completed rounds.
    pub round: usize,
    pub strategy: StrategyKind,
    pub adversary_id: String,
    pub attack_names: Vec<String>,
    pub clients: Vec<ClientMetrics>,
    pub clean_acc: f64,
    pub robust_acc: Vec<f64>,
    pub global_clean_acc: f64,
    pub global_robust_acc: Vec<f64>,
    pub mean_local_loss: f64,
    pub wall_ms: u64,
}

impl MetricsReport {
    /// Builds a report whose averaged accuracies are the plain mean of the
    /// per-client values.
    #[allow(clippy::too_many_arguments)]
    pub fn from_clients(
        round: usize,
        strategy: StrategyKind,
        adversary_id: String,
        attack_names: Vec<String>,
        clients: Vec<ClientMetrics>,
        global: EvalFragment,
        mean_local_loss: f64,
        wall_ms: u64,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Data("metrics report needs at least one client".into()));
        }
        let n = clients.len() as f64;
        let clean_acc = clients.iter().map(|c| c.clean_acc).sum::<f64>() / n;
        let robust_acc = (0..attack_names.len())
            .map(|a| clients.iter().map(|c| c.robust_acc[a]).sum::<f64>() / n)
            .collect();
        Ok(Self {
            round,
            strategy,
            adversary_id,
            attack_names,
            clients,
            clean_acc,
            robust_acc,
            global_clean_acc: global.clean_acc,
            global_robust_acc: global.robust_acc,
            mean_local_loss,
            wall_ms,
        })
    }

    pub fn robust(&self, attack: &str) -> Option<f64> {
        self.attack_names
            .iter()
            .position(|n| n == attack)
            .map(|i| self.robust_acc[i])
    }

    pub fn csv_header(attack_names: &[String]) -> String {
        let mut h = String::from("round,strategy,clean_acc");
        for a in attack_names {
            write!(h, ",robust_acc_{a}").unwrap();
        }
        h.push_str(",mean_local_loss,wall_ms");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{:.6}", self.round, self.strategy, self.clean_acc);
        for v in &self.robust_acc {
            write!(r, ",{v:.6}").unwrap();
        }
        write!(r, ",{:.6},{}", self.mean_local_loss, self.wall_ms).unwrap();
        r
    }
}

/// Clean and per-attack robust accuracy of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFragment {
    pub clean_acc: f64,
    pub robust_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryTraining {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Trains the black-box source model with plain mini-batch SGD on mean
/// cross-entropy. Its initialization uses its own seed stream, distinct from
/// the clients'.
pub fn train_adversary(held_out: &Dataset, arch: &AdversaryTraining, seed: u64) -> Result<MlpParams> {
    if held_out.is_empty() {
        return Err(Error::Data("adversary needs training data".into()));
    }
    if arch.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut sizes = vec![held_out.dim()];
    sizes.extend(&arch.hidden);
    sizes.push(held_out.num_classes());
    let mut params = init_params(&sizes, rng::derive_seed(seed, &[domain::ADVERSARY, 0]))?;
    train_plain(&mut params, held_out, arch.epochs, arch.lr, arch.batch_size, rng::derive_seed(seed, &[domain::ADVERSARY, 1]))?;
    Ok(params)
}

/// Shuffled mini-batch SGD on clean data.
pub(crate) fn train_plain(
    params: &mut MlpParams,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng::stream(seed, &[epoch as u64]));
        for chunk in order.chunks(batch_size) {
            let x: Tensor = data.features().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let w = vec![1.0 / chunk.len() as f64; chunk.len()];
            let (_, g) = weighted_loss_and_gradients(params, &x, &y, &w, false)?;
            *params = sgd_step(params, &g, lr)?;
        }
    }
    Ok(())
}

/// Adversarial test sets crafted once on the adversary and reused for every
/// target model.
#[derive(Debug, Clone)]
pub struct TransferSuite {
    test: Dataset,
    attacks: Vec<NamedAttack>,
    adversarial: Vec<Dataset>,
}

impl TransferSuite {
    pub fn build(adversary: &MlpParams, test: &Dataset, attacks: &[NamedAttack], seed: u64) -> Result<Self> {
        let adversarial = attacks
            .iter()
            .enumerate()
            .map(|(i, a)| {
                attack_dataset(
                    adversary,
                    test,
                    &a.config,
                    rng::derive_seed(seed, &[domain::EVAL, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            test: test.clone(),
            attacks: attacks.to_vec(),
            adversarial,
        })
    }

    pub fn attack_names(&self) -> Vec<String> {
        self.attacks.iter().map(|a| a.name.clone()).collect()
    }

    pub fn adversarial_sets(&self) -> &[Dataset] {
        &self.adversarial
    }

    pub fn evaluate(&self, target: &MlpParams) -> Result<EvalFragment> {
        let clean_acc = accuracy(target, self.test.features(), self.test.labels())?;
        let robust_acc = self
            .adversarial
            .iter()
            .map(|adv| accuracy(target, adv.features(), adv.labels()))
            .collect::<Result<_>>()?;
        Ok(EvalFragment {
            clean_acc,
            robust_acc,
        })
    }

    pub fn evaluate_many(&self, targets: &[&MlpParams]) -> Result<Vec<EvalFragment>> {
        targets.par_iter().map(|t| self.evaluate(t)).collect()
    }
}

/// Crafts PGD examples on `adversary` and classifies them with `target`.
pub fn blackbox_eval(
    target: &MlpParams,
    adversary: &MlpParams,
    test: &Dataset,
    attacks: &[NamedAttack],
    seed: u64,
) -> Result<EvalFragment> {
    TransferSuite::build(adversary, test, attacks, seed)?.evaluate(target)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: StrategyKind,
    pub clean: MeanStd,
    pub robust: Vec<MeanStd>,
    /// Final-round `(clean, robust...)` per seed, in seed order.
    pub per_seed: Vec<EvalFragment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub attack_names: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    /// Strategies ordered by mean robust accuracy on the first attack
    /// (best first), ties broken by clean accuracy.
    pub ranking: Vec<StrategyKind>,
}

impl ComparisonTable {
    /// Metric columns per row: clean mean/std and mean/std per attack.
    pub fn metric_columns(&self) -> usize {
        2 * self.attack_names.len() + 2
    }

    pub fn row(&self, strategy: StrategyKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["strategy".to_string(), "clean_mean".into(), "clean_std".into()];
        for a in &self.attack_names {
            h.push(format!("{a}_mean"));
            h.push(format!("{a}_std"));
        }
        h
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut c = vec![
                    r.strategy.to_string(),
                    format!("{:.4}", r.clean.mean),
                    format!("{:.4}", r.clean.std),
                ];
                for m in &r.robust {
                    c.push(format!("{:.4}", m.mean));
                    c.push(format!("{:.4}", m.std));
                }
                c
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = self.header();
        let cells = self.cells();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |row: &[String]| {
            row.iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(&header);
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        let ranking: Vec<&str> = self.ranking.iter().map(|k| k.name()).collect();
        writeln!(out, "\nranking: {}", ranking.join(" > ")).unwrap();
        out
    }
}

/// Runs every `(strategy, seed)` cell and tabulates the final-round
/// per-client averages. Cells run in parallel; aggregation order is fixed.
pub fn compare_strategies(
    base: &ExperimentConfig,
    strategies: &[StrategyKind],
    seeds: &[u64],
) -> Result<ComparisonTable> {
    if strategies.len() < 2 {
        return Err(Error::config("strategies", "compare needs at least two strategies"));
    }
    if seeds.len() < 3 {
        return Err(Error::config("seeds", "compare needs at least three seeds"));
    }
    let cells: Vec<(StrategyKind, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(strategy, seed)| {
            let mut cfg = base.clone();
            cfg.strategy = strategy;
            cfg.seed = seed;
            let run = run_experiment(&cfg)?;
            let last = run.reports.last().expect("at least the initial report");
            Ok((
                last.attack_names.clone(),
                EvalFragment {
                    clean_acc: last.clean_acc,
                    robust_acc: last.robust_acc.clone(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let attack_names = results[0].0.clone();
    let rows: Vec<ComparisonRow> = strategies
        .iter()
        .enumerate()
        .map(|(si, &strategy)| {
            let per_seed: Vec<EvalFragment> = results[si * seeds.len()..(si + 1) * seeds.len()]
                .iter()
                .map(|r| r.1.clone())
                .collect();
            let clean: Vec<f64> = per_seed.iter().map(|f| f.clean_acc).collect();
            let robust = (0..attack_names.len())
                .map(|a| MeanStd::of(&per_seed.iter().map(|f| f.robust_acc[a]).collect::<Vec<_>>()))
                .collect();
            ComparisonRow {
                strategy,
                clean: MeanStd::of(&clean),
                robust,
                per_seed,
            }
        })
        .collect();

    let mut order: Vec<&ComparisonRow> = Vec::new();
    for r in &rows {
        if !order.iter().any(|o| o.strategy == r.strategy) {
            order.push(r);
        }
    }
    let key = |r: &ComparisonRow| r.robust.first().map(|m| m.mean).unwrap_or(r.clean.mean);
    order.sort_by(|a, b| key(b).total_cmp(&key(a)).then(b.clean.mean.total_cmp(&a.clean.mean)));
    let ranking = order.iter().map(|r| r.strategy).collect();

    Ok(ComparisonTable {
        attack_names,
        seeds: seeds.to_vec(),
        rows,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::mlp::{Dense, MlpParams};

    fn arch() -> AdversaryTraining {
        AdversaryTraining {
            hidden: vec![16],
            epochs: 30,
            lr: 0.2,
            batch_size: 16,
        }
    }

    #[test]
    fn adversary_fits_separable_blobs() {
        let ds = make_blobs(5, 8, 40, 0.1, 3).unwrap();
        let adv = train_adversary(&ds, &arch(), 1).unwrap();
        assert!(accuracy(&adv, ds.features(), ds.labels()).unwrap() >= 0.9);
        assert_eq!(adv, train_adversary(&ds, &arch(), 1).unwrap());
    }

    #[test]
    fn adversary_differs_from_client_init() {
        let ds = make_blobs(3, 4, 10, 0.1, 3).unwrap();
        let a = AdversaryTraining { epochs: 0, ..arch() };
        let adv = train_adversary(&ds, &a, 5).unwrap();
        let client = init_params(&adv.layer_sizes(), rng::derive_seed(5, &[domain::INIT])).unwrap();
        assert_ne!(adv, client);
    }

    #[test]
    fn zero_radius_attack_keeps_clean_accuracy() {
        let ds = make_blobs(4, 6, 20, 0.4, 2).unwrap();
        let target = train_adversary(&ds, &arch(), 9).unwrap();
        let adversary = train_adversary(&ds, &arch(), 10).unwrap();
        let zero = NamedAttack {
            name: "pgd10".into(),
            config: AttackConfig::pgd(0.0, 0.01, 10),
        };
        let f = blackbox_eval(&target, &adversary, &ds, &[zero], 0).unwrap();
        assert_eq!(f.robust_acc[0], f.clean_acc);
    }

    #[test]
    fn constant_model_scores_one_over_c() {
        let ds = make_blobs(4, 3, 25, 0.3, 1).unwrap();
        let constant = MlpParams::from_layers(vec![Dense {
            weight: Tensor::zeros(vec![3, 4]),
            bias: Tensor::zeros(vec![4]),
        }])
        .unwrap();
        let f = blackbox_eval(&constant, &constant, &ds, &[], 0).unwrap();
        assert_eq!(f.clean_acc, 0.25);
    }

    #[test]
    fn whitebox_degenerate_hurts() {
        for seed in 0..5 {
            let ds = make_blobs(4, 6, 30, 0.5, seed).unwrap();
            let m = train_adversary(&ds, &arch(), seed).unwrap();
            let a = NamedAttack {
                name: "pgd10".into(),
                config: AttackConfig::pgd(0.1, 0.025, 10),
            };
            let f = blackbox_eval(&m, &m, &ds, &[a], seed).unwrap();
            assert!(f.robust_acc[0] <= f.clean_acc, "seed {seed}: {f:?}");
        }
    }

    #[test]
    fn report_average_identity() {
        let clients = vec![
            ClientMetrics { id: 0, clean_acc: 0.5, robust_acc: vec![0.25, 0.1] },
            ClientMetrics { id: 1, clean_acc: 0.75, robust_acc: vec![0.5, 0.3] },
        ];
        let g = EvalFragment { clean_acc: 0.6, robust_acc: vec![0.4, 0.2] };
        let r = MetricsReport::from_clients(
            3,
            StrategyKind::Efat,
            "adv".into(),
            vec!["pgd10".into(), "pgd20".into()],
            clients,
            g,
            1.5,
            0,
        )
        .unwrap();
        assert_eq!(r.clean_acc, 0.625);
        assert_eq!(r.robust_acc, vec![0.375, 0.2]);
        assert_eq!(
            MetricsReport::csv_header(&r.attack_names),
            "round,strategy,clean_acc,robust_acc_pgd10,robust_acc_pgd20,mean_local_loss,wall_ms"
        );
        assert_eq!(r.csv_row(), "3,efat,0.625000,0.375000,0.200000,1.500000,0");
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
