use efat_core::config::{ExperimentConfig, DEFAULT_CONFIG};
use efat_core::eval::{train_adversary, AdversaryTraining, NamedAttack, TransferSuite};
use efat_core::experiment::{prepare_data, run_experiment, Experiment};
use efat_core::attacks::AttackConfig;
use efat_core::strategies::StrategyKind;

fn small(strategy: StrategyKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(DEFAULT_CONFIG).unwrap();
    cfg.strategy = strategy;
    cfg.seed = seed;
    cfg.dataset.classes = 5;
    cfg.dataset.dim = 8;
    cfg.dataset.per_class = 60;
    cfg.federation.clients = 4;
    cfg.federation.rounds = 6;
    cfg.federation.local_epochs = 2;
    cfg.federation.exchange_every = 3;
    cfg.partition.gamma = 0.5;
    cfg.model.hidden = vec![12];
    cfg.eval.adversary_hidden = vec![12];
    cfg.eval.adversary_epochs = 20;
    cfg
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

#[test]
fn worker_count_does_not_change_results() {
    for kind in StrategyKind::ALL {
        let cfg = small(kind, 3);
        let one = pool(1).install(|| run_experiment(&cfg)).unwrap();
        let four = pool(4).install(|| run_experiment(&cfg)).unwrap();
        assert_eq!(one.reports, four.reports, "{kind}");
        let bits = |p: &efat_core::MlpParams| p.values().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&one.global_params), bits(&four.global_params), "{kind}");
    }
}

#[test]
fn zero_radius_efat_reproduces_efnt() {
    // With a zero radius every adversarial shard equals its clean source, so
    // the ensemble strategies collapse onto the clean one.
    let mut efnt = small(StrategyKind::Efnt, 5);
    efnt.attack.eps_train = 0.0;
    let a = run_experiment(&efnt).unwrap();
    for kind in [StrategyKind::EfntAt, StrategyKind::Efat] {
        let mut cfg = efnt.clone();
        cfg.strategy = kind;
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.global_params, b.global_params, "{kind}");
    }
}

#[test]
fn zero_radius_eval_matches_clean_for_every_strategy() {
    for kind in StrategyKind::ALL {
        let mut cfg = small(kind, 1);
        cfg.attack.eps_test = vec![0.0];
        let run = run_experiment(&cfg).unwrap();
        for r in &run.reports {
            assert!(r.robust_acc.iter().all(|&v| v == r.clean_acc), "{kind} round {}", r.round);
            for c in &r.clients {
                assert!(c.robust_acc.iter().all(|&v| v == c.clean_acc));
            }
        }
    }
}

#[test]
fn report_accuracies_are_valid_and_averaged() {
    let run = run_experiment(&small(StrategyKind::Efat, 2)).unwrap();
    for r in &run.reports {
        let n = r.clients.len() as f64;
        let mean = r.clients.iter().map(|c| c.clean_acc).sum::<f64>() / n;
        assert_eq!(mean, r.clean_acc);
        for v in r.robust_acc.iter().chain([&r.clean_acc, &r.global_clean_acc]) {
            assert!((0.0..=1.0).contains(v));
        }
    }
}

#[test]
fn exchanged_sets_hold_other_clients_rows_only() {
    let mut cfg = small(StrategyKind::Efat, 4);
    cfg.federation.exchange_every = 1;
    let mut exp = Experiment::new(&cfg).unwrap();
    let m = efat_core::data::local_public_size(exp.data().public.len(), cfg.federation.alpha);
    for _ in 0..3 {
        exp.step().unwrap();
        for c in exp.clients() {
            assert_eq!(c.ensemble_adv.len(), 3 * m);
            assert!(c.ensemble_adv.origin.iter().all(|&o| o != c.id));
            assert_eq!(c.local_adv.as_ref().unwrap().len(), m);
        }
    }
}

/// Seed-averaged transfer accuracy of models trained normally.
fn trained_suite_accuracy(eps: f64) -> (f64, f64) {
    let mut clean = 0.0;
    let mut robust = 0.0;
    let arch = AdversaryTraining {
        hidden: vec![16],
        epochs: 40,
        lr: 0.1,
        batch_size: 32,
    };
    for seed in 0..5u64 {
        let cfg = small(StrategyKind::Efnt, seed);
        let d = prepare_data(&cfg).unwrap();
        let adversary = train_adversary(&d.adversary_data, &arch, seed).unwrap();
        let target = train_adversary(&d.private_pool, &arch, seed + 100).unwrap();
        let attack = NamedAttack {
            name: "pgd10".into(),
            config: AttackConfig::pgd(eps, if eps > 0.0 { eps / 4.0 } else { 0.01 }, 10),
        };
        let f = TransferSuite::build(&adversary, &d.test, &[attack], seed)
            .unwrap()
            .evaluate(&target)
            .unwrap();
        clean += f.clean_acc / 5.0;
        robust += f.robust_acc[0] / 5.0;
    }
    (clean, robust)
}

#[test]
fn robust_accuracy_is_monotone_in_radius() {
    let radii = [0.0, 0.05, 0.1, 0.2];
    let results: Vec<(f64, f64)> = radii.iter().map(|&e| trained_suite_accuracy(e)).collect();
    for w in results.windows(2) {
        assert!(w[1].1 <= w[0].1 + 0.01, "{results:?}");
    }
    for (&eps, &(clean, robust)) in radii.iter().zip(&results) {
        if eps >= 0.05 {
            assert!(robust <= clean + 0.02, "eps {eps}: {results:?}");
        }
    }
    assert_eq!(results[0].0, results[0].1);
}

#[test]
fn configuration_errors_precede_training() {
    let mut cfg = small(StrategyKind::Efat, 0);
    cfg.federation.alpha = 0.0;
    let err = Experiment::new(&cfg).err().expect("invalid alpha");
    assert!(err.to_string().contains("alpha"));
}
