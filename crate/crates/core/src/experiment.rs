//! End-to-end experiment driver.
//!
//! Data flow: corpus -> test split -> adversary split -> public/private split
//! -> partition of the private pool across clients. The adversary is trained
//! once on its own split and its adversarial test sets are reused for every
//! evaluation.

use std::time::Instant;

use crate::config::{ExperimentConfig, SkewMode};
use crate::data::{
    dirichlet_partition, load_dataset, make_blobs, split_public_private, stratified_split, Dataset,
    PartitionPlan,
};
use crate::error::{Error, Result};
use crate::eval::{train_adversary, train_plain, ClientMetrics, MetricsReport, TransferSuite};
use crate::federation::{run_round, ClientState, FederationConfig, RoundOutcome, ServerState};
use crate::mlp::{init_params, MlpParams};
use crate::rng::{self, domain};
use crate::strategies::local_loss;

/// Every dataset an experiment needs, derived deterministically from the
/// config.
#[derive(Debug, Clone)]
pub struct DataSetup {
    pub test: Dataset,
    pub adversary_data: Dataset,
    pub public: Dataset,
    pub private_pool: Dataset,
    pub plan: PartitionPlan,
    /// Per-client private data (transformed in feature-skew mode).
    pub client_data: Vec<Dataset>,
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.dataset.path {
        Some(p) => load_dataset(p)?,
        None => {
            let d = &cfg.dataset;
            make_blobs(d.classes, d.dim, d.per_class, d.spread, rng::derive_seed(cfg.seed, &[domain::BLOBS]))?
        }
    };
    if !ds.within_range(cfg.attack.clip_min, cfg.attack.clip_max) {
        return Err(Error::Data(format!(
            "dataset features leave the clip range [{}, {}]",
            cfg.attack.clip_min, cfg.attack.clip_max
        )));
    }
    Ok(ds)
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DataSetup> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let s = &cfg.split;
    let (pool, test) = stratified_split(&corpus, s.test_fraction, rng::derive_seed(cfg.seed, &[domain::SPLIT_TEST]))?;
    let (pool, adversary_data) =
        stratified_split(&pool, s.adversary_fraction, rng::derive_seed(cfg.seed, &[domain::SPLIT_ADVERSARY]))?;
    let (private_pool, public) = split_public_private(&pool, s.public_fraction, cfg.seed)?;
    if test.is_empty() || adversary_data.is_empty() {
        return Err(Error::config("split", "test or adversary split is empty"));
    }

    let clients = cfg.federation.clients;
    let part_seed = rng::derive_seed(cfg.seed, &[domain::PARTITION]);
    let (plan, client_data) = match cfg.partition.mode {
        SkewMode::Dirichlet => {
            let plan = dirichlet_partition(&private_pool, clients, cfg.partition.gamma, part_seed)?;
            let data = plan.client_datasets(&private_pool);
            (plan, data)
        }
        SkewMode::FeatureSkew => crate::data::partition::feature_skew_plan(
            &private_pool,
            clients,
            &cfg.partition.transforms(clients),
            part_seed,
        )?,
    };
    if let Some(k) = client_data.iter().position(|d| d.is_empty()) {
        return Err(Error::Partition(format!("client {k} received no private data")));
    }
    Ok(DataSetup {
        test,
        adversary_data,
        public,
        private_pool,
        plan,
        client_data,
    })
}

/// A running experiment that can be stepped one round at a time.
pub struct Experiment {
    cfg: ExperimentConfig,
    fed: FederationConfig,
    data: DataSetup,
    server: ServerState,
    clients: Vec<ClientState>,
    adversary: MlpParams,
    adversary_id: String,
    suite: TransferSuite,
    record_wall_time: bool,
}

impl Experiment {
    /// Builds datasets, the initial model (with optional warmup on the public
    /// set), the clients and the black-box adversary. Configuration errors
    /// surface here, before any training.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let fed = cfg.federation_config();
        fed.validate()?;
        let data = prepare_data(cfg)?;

        let mut sizes = vec![data.test.dim()];
        sizes.extend(&cfg.model.hidden);
        sizes.push(data.test.num_classes());
        let mut global = init_params(&sizes, rng::derive_seed(cfg.seed, &[domain::INIT]))?;
        if cfg.federation.warmup_epochs > 0 {
            train_plain(
                &mut global,
                &data.public,
                cfg.federation.warmup_epochs,
                cfg.federation.lr,
                cfg.federation.batch_size,
                rng::derive_seed(cfg.seed, &[domain::WARMUP]),
            )?;
        }

        let clients = data
            .client_data
            .iter()
            .enumerate()
            .map(|(k, d)| {
                ClientState::new(
                    k,
                    global.clone(),
                    d.clone(),
                    rng::derive_seed(cfg.seed, &[domain::CLIENT, k as u64]),
                )
            })
            .collect();

        let adv_seed = rng::derive_seed(cfg.seed, &[domain::ADVERSARY]);
        let adversary = train_adversary(&data.adversary_data, &cfg.adversary_training(), adv_seed)?;
        let adversary_id = format!(
            "mlp{:?}-{:016x}",
            adversary.layer_sizes(),
            adv_seed
        )
        .replace(' ', "");
        let suite = TransferSuite::build(
            &adversary,
            &data.test,
            &cfg.eval_attacks(),
            rng::derive_seed(cfg.seed, &[domain::EVAL]),
        )?;

        Ok(Self {
            cfg: cfg.clone(),
            fed,
            data,
            server: ServerState::new(global),
            clients,
            adversary,
            adversary_id,
            suite,
            record_wall_time: false,
        })
    }

    /// Fills `wall_ms` with measured round times. Off by default so metrics
    /// files are reproducible byte for byte.
    pub fn record_wall_time(mut self, on: bool) -> Self {
        self.record_wall_time = on;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &DataSetup {
        &self.data
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn adversary(&self) -> &MlpParams {
        &self.adversary
    }

    pub fn suite(&self) -> &TransferSuite {
        &self.suite
    }

    pub fn attack_names(&self) -> Vec<String> {
        self.suite.attack_names()
    }

    pub fn rounds_done(&self) -> usize {
        self.server.round
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.fed.rounds
    }

    fn report(&self, ids: &[usize], mean_local_loss: f64, wall_ms: u64) -> Result<MetricsReport> {
        let targets: Vec<&MlpParams> = ids.iter().map(|&i| &self.clients[i].params).collect();
        let per_client = self.suite.evaluate_many(&targets)?;
        let clients = ids
            .iter()
            .zip(per_client)
            .map(|(&id, f)| ClientMetrics {
                id,
                clean_acc: f.clean_acc,
                robust_acc: f.robust_acc,
            })
            .collect();
        let global = self.suite.evaluate(&self.server.global_params)?;
        MetricsReport::from_clients(
            self.server.round,
            self.cfg.strategy,
            self.adversary_id.clone(),
            self.attack_names(),
            clients,
            global,
            mean_local_loss,
            wall_ms,
        )
    }

    /// Round-0 report: every client holds the initial model; the loss column
    /// is the mean private-data loss of that model.
    pub fn initial_report(&self) -> Result<MetricsReport> {
        let losses = self
            .clients
            .iter()
            .map(|c| local_loss(&self.server.global_params, &[&c.private_data]))
            .collect::<Result<Vec<_>>>()?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let ids: Vec<usize> = (0..self.clients.len()).collect();
        self.report(&ids, mean, 0)
    }

    /// Runs one round. Returns a report when this round is on the evaluation
    /// cadence or is the last one.
    pub fn step(&mut self) -> Result<(RoundOutcome, Option<MetricsReport>)> {
        if self.is_finished() {
            return Err(Error::Protocol("all configured rounds already ran".into()));
        }
        let start = Instant::now();
        let outcome = run_round(
            &mut self.server,
            &mut self.clients,
            &self.fed,
            &self.data.public,
            self.cfg.seed,
        )?;
        let wall_ms = if self.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        let done = self.server.round;
        let report = if done.is_multiple_of(self.cfg.eval.every) || self.is_finished() {
            Some(self.report(&outcome.selected, outcome.mean_local_loss, wall_ms)?)
        } else {
            None
        };
        Ok((outcome, report))
    }

    pub fn into_server(self) -> ServerState {
        self.server
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub reports: Vec<MetricsReport>,
    pub global_params: MlpParams,
    pub adversary: MlpParams,
}

/// Runs all rounds. The first report is the round-0 evaluation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let mut exp = Experiment::new(cfg)?;
    let mut reports = vec![exp.initial_report()?];
    while !exp.is_finished() {
        if let (_, Some(r)) = exp.step()? {
            reports.push(r);
        }
    }
    let adversary = exp.adversary.clone();
    let mut server = exp.into_server();
    server.history = reports.clone();
    Ok(ExperimentRun {
        reports,
        global_params: server.global_params,
        adversary,
    })
}

/// Metrics CSV text: header plus one row per report.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        out.push_str(&MetricsReport::csv_header(&first.attack_names));
        out.push('\n');
    }
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
