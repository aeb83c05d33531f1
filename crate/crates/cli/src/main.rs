//! `efat` command-line driver.
//!
//! Progress goes to stderr; artifacts go under `--out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use efat_core::config::{apply_override, split_assignment, ExperimentConfig, DEFAULT_CONFIG};
use efat_core::data::{load_dataset, save_dataset, Dataset};
use efat_core::eval::{compare_strategies, train_adversary, TransferSuite};
use efat_core::experiment::{prepare_data, Experiment};
use efat_core::gradcheck::{run_suite, DEFAULT_TOLERANCE};
use efat_core::mlp::MlpParams;
use efat_core::rng::{self, domain};
use efat_core::strategies::StrategyKind;
use efat_core::MetricsReport;

#[derive(Parser, Debug)]
#[command(name = "efat", version, about = "Ensemble federated adversarial training simulator")]
struct Cli {
    /// Experiment config file (sectioned key = value). Built-in defaults
    /// when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config's top-level seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, env = "EFAT_WORKERS", default_value_t = 1)]
    workers: usize,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override any config key, e.g. `--set federation.lr=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    /// Dirichlet concentration (partition.gamma).
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Number of clients (federation.clients).
    #[arg(long)]
    clients: Option<usize>,
    /// Number of rounds (federation.rounds).
    #[arg(long)]
    rounds: Option<usize>,
    /// Training strategy: baseline, efnt, efnt_at or efat.
    #[arg(long)]
    strategy: Option<StrategyKind>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the corpus and write per-client dataset files plus a summary.
    Partition {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one experiment and stream per-round metrics to metrics.csv.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Save the global model after every round under checkpoints/.
        #[arg(long)]
        checkpoints: bool,
        /// Put measured round times in the wall_ms column.
        #[arg(long)]
        record_wall_time: bool,
    },
    /// Run a strategy sweep over several seeds and rank the strategies.
    Compare {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_value = "baseline,efnt,efnt_at,efat")]
        strategies: Vec<StrategyKind>,
        /// Number of seeds, counted up from the base seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Attack a saved model with black-box transfer PGD.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Model checkpoint to evaluate, e.g. model.bin from `run`.
        #[arg(long)]
        model: PathBuf,
        /// Pre-trained adversary. Trained from the config when omitted.
        #[arg(long)]
        adversary: Option<PathBuf>,
        /// Test data file. The config's test split when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of analytic gradients on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        networks: usize,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn load_config(cli: &Cli, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => DEFAULT_CONFIG.to_string(),
    };
    let mut table: toml::Table = text.parse().context("parsing config")?;
    let mut set = |key: &str, value: String| apply_override(&mut table, key, &value);
    if let Some(s) = cli.seed {
        set("seed", s.to_string())?;
    }
    if let Some(g) = overrides.gamma {
        set("partition.gamma", format!("{g:?}"))?;
    }
    if let Some(k) = overrides.clients {
        set("federation.clients", k.to_string())?;
    }
    if let Some(t) = overrides.rounds {
        set("federation.rounds", t.to_string())?;
    }
    if let Some(s) = overrides.strategy {
        set("strategy", format!("\"{s}\""))?;
    }
    for a in &cli.sets {
        let (k, v) = split_assignment(a)?;
        set(k, v.to_string())?;
    }
    Ok(ExperimentConfig::from_table(table)?)
}

fn prepare_out(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    if let Some(cfg) = cfg {
        fs::write(cli.out.join("config.toml"), cfg.to_toml_string())?;
    }
    Ok(())
}

fn cmd_partition(cli: &Cli, overrides: &Overrides) -> Result<()> {
    let cfg = load_config(cli, overrides)?;
    prepare_out(cli, Some(&cfg))?;
    let setup = prepare_data(&cfg)?;
    for (k, d) in setup.client_data.iter().enumerate() {
        save_dataset(d, cli.out.join(format!("client_{k}.bin")))?;
    }
    save_dataset(&setup.public, cli.out.join("public.bin"))?;
    save_dataset(&setup.test, cli.out.join("test.bin"))?;
    save_dataset(&setup.adversary_data, cli.out.join("adversary.bin"))?;

    let classes = setup.private_pool.num_classes();
    let mut w = csv::Writer::from_path(cli.out.join("partition_summary.csv"))?;
    let mut header = vec!["client".to_string(), "examples".to_string()];
    header.extend((0..classes).map(|c| format!("class_{c}")));
    w.write_record(&header)?;
    for (k, d) in setup.client_data.iter().enumerate() {
        let mut row = vec![k.to_string(), d.len().to_string()];
        row.extend(d.class_histogram().iter().map(|n| n.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    eprintln!(
        "partitioned {} private rows across {} clients (mean max class share {:.3})",
        setup.private_pool.len(),
        setup.client_data.len(),
        setup.plan.mean_max_class_share(&setup.private_pool)
    );
    Ok(())
}

fn cmd_run(cli: &Cli, overrides: &Overrides, checkpoints: bool, record_wall_time: bool) -> Result<()> {
    let cfg = load_config(cli, overrides)?;
    let mut exp = Experiment::new(&cfg)?.record_wall_time(record_wall_time);
    prepare_out(cli, Some(&cfg))?;
    let ckpt_dir = cli.out.join("checkpoints");
    if checkpoints {
        fs::create_dir_all(&ckpt_dir)?;
    }

    let mut csv = BufWriter::new(File::create(cli.out.join("metrics.csv"))?);
    writeln!(csv, "{}", MetricsReport::csv_header(&exp.attack_names()))?;
    let emit = |r: &MetricsReport, csv: &mut BufWriter<File>| -> Result<()> {
        writeln!(csv, "{}", r.csv_row())?;
        csv.flush()?;
        let robust: Vec<String> = r
            .attack_names
            .iter()
            .zip(&r.robust_acc)
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        eprintln!(
            "round {:>3}  {}  clean={:.4}  {}  loss={:.4}",
            r.round,
            r.strategy,
            r.clean_acc,
            robust.join("  "),
            r.mean_local_loss
        );
        Ok(())
    };

    emit(&exp.initial_report()?, &mut csv)?;
    while !exp.is_finished() {
        let (_, report) = exp.step()?;
        if checkpoints {
            exp.server()
                .global_params
                .save(ckpt_dir.join(format!("round_{:04}.bin", exp.rounds_done())))?;
        }
        if let Some(r) = report {
            emit(&r, &mut csv)?;
        }
    }
    exp.server().global_params.save(cli.out.join("model.bin"))?;
    exp.adversary().save(cli.out.join("adversary_model.bin"))?;
    Ok(())
}

fn cmd_compare(cli: &Cli, overrides: &Overrides, strategies: &[StrategyKind], seeds: u64) -> Result<()> {
    let cfg = load_config(cli, overrides)?;
    prepare_out(cli, Some(&cfg))?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
    eprintln!(
        "comparing {} strategies over seeds {:?}",
        strategies.len(),
        seed_list
    );
    let table = compare_strategies(&cfg, strategies, &seed_list)?;
    fs::write(cli.out.join("compare.csv"), table.to_csv())?;
    let text = table.to_text();
    fs::write(cli.out.join("compare.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    overrides: &Overrides,
    model: &Path,
    adversary: Option<&Path>,
    data: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(cli, overrides)?;
    prepare_out(cli, Some(&cfg))?;
    let target = MlpParams::load(model).with_context(|| format!("loading {}", model.display()))?;
    let needs_setup = adversary.is_none() || data.is_none();
    let setup = if needs_setup { Some(prepare_data(&cfg)?) } else { None };
    let test: Dataset = match data {
        Some(p) => load_dataset(p)?,
        None => setup.as_ref().expect("setup built").test.clone(),
    };
    let adv = match adversary {
        Some(p) => MlpParams::load(p)?,
        None => train_adversary(
            &setup.as_ref().expect("setup built").adversary_data,
            &cfg.adversary_training(),
            rng::derive_seed(cfg.seed, &[domain::ADVERSARY]),
        )?,
    };
    if target.input_dim() != test.dim() || adv.input_dim() != test.dim() {
        bail!(
            "model input {} / adversary input {} do not match data dim {}",
            target.input_dim(),
            adv.input_dim(),
            test.dim()
        );
    }
    let suite = TransferSuite::build(&adv, &test, &cfg.eval_attacks(), rng::derive_seed(cfg.seed, &[domain::EVAL]))?;
    let f = suite.evaluate(&target)?;

    let mut w = csv::Writer::from_path(cli.out.join("eval.csv"))?;
    w.write_record(["attack", "accuracy"])?;
    w.write_record(["clean", &format!("{:.6}", f.clean_acc)])?;
    for (name, acc) in suite.attack_names().iter().zip(&f.robust_acc) {
        w.write_record([name.as_str(), &format!("{acc:.6}")])?;
    }
    w.flush()?;
    eprintln!("clean={:.4}", f.clean_acc);
    for (name, acc) in suite.attack_names().iter().zip(&f.robust_acc) {
        eprintln!("{name}={acc:.4}");
    }
    Ok(())
}

/// Returns whether every network stayed within `tolerance`.
fn cmd_gradcheck(cli: &Cli, networks: usize, tolerance: f64) -> Result<bool> {
    prepare_out(cli, None)?;
    let seed = cli.seed.unwrap_or(0);
    let reports = run_suite(seed, networks, &[8, 16, 16, 4], 16)?;
    let mut w = csv::Writer::from_path(cli.out.join("gradcheck.csv"))?;
    w.write_record(["network", "checked", "max_param_error", "max_input_error", "pass"])?;
    let mut ok = true;
    for (i, r) in reports.iter().enumerate() {
        let pass = r.max_error() < tolerance;
        ok &= pass;
        w.write_record([
            i.to_string(),
            r.checked.to_string(),
            format!("{:.3e}", r.max_param_error),
            format!("{:.3e}", r.max_input_error),
            pass.to_string(),
        ])?;
    }
    w.flush()?;
    let worst = reports.iter().map(|r| r.max_error()).fold(0.0, f64::max);
    eprintln!(
        "gradcheck: {networks} networks, worst relative error {worst:.3e} (tolerance {tolerance:.0e}): {}",
        if ok { "pass" } else { "FAIL" }
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(2);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Partition { overrides } => cmd_partition(&cli, overrides).map(|_| true),
        Command::Run {
            overrides,
            checkpoints,
            record_wall_time,
        } => cmd_run(&cli, overrides, *checkpoints, *record_wall_time).map(|_| true),
        Command::Compare {
            overrides,
            strategies,
            seeds,
        } => cmd_compare(&cli, overrides, strategies, *seeds).map(|_| true),
        Command::Eval {
            overrides,
            model,
            adversary,
            data,
        } => cmd_eval(&cli, overrides, model, adversary.as_deref(), data.as_deref()).map(|_| true),
        Command::Gradcheck { networks, tolerance } => cmd_gradcheck(&cli, *networks, *tolerance),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
