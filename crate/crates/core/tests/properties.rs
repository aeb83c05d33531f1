use efat_core::attacks::{attack_dataset, fgsm, pgd, AttackConfig};
use efat_core::data::{
    dirichlet_partition, make_blobs, read_dataset, sample_dirichlet, write_dataset, Dataset,
};
use efat_core::federation::{exchange_adversarial, fedavg, ClientState, Weighting};
use efat_core::gradcheck::{check_network, random_case, DEFAULT_STEP, DEFAULT_TOLERANCE};
use efat_core::mlp::{init_params, MlpParams};
use efat_core::strategies::{BatchPlan, Group, Source};
use efat_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_batch(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data = (0..rows * dim)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new(vec![rows, dim], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgd_stays_in_ball_and_range(
        seed in any::<u64>(),
        eps in 0.0f64..0.4,
        frac in 0.05f64..1.0,
        iters in 1usize..8,
        rows in 1usize..6,
        start in any::<bool>(),
    ) {
        let params = init_params(&[4, 6, 3], seed).unwrap();
        let x = unit_batch(rows, 4, seed);
        let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        let step = if eps > 0.0 { eps * frac } else { frac };
        let cfg = AttackConfig { random_start: start, ..AttackConfig::pgd(eps, step, iters) };
        for adv in [pgd(&params, &x, &labels, &cfg, seed).unwrap(), fgsm(&params, &x, &labels, &cfg).unwrap()] {
            for (a, o) in adv.data().iter().zip(x.data()) {
                prop_assert!((a - o).abs() <= eps + 1e-12);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn fedavg_is_convex_and_matches_weighted_mean(
        seed in any::<u64>(),
        sizes in prop::collection::vec(1usize..200, 1..7),
        by_size in any::<bool>(),
    ) {
        let models: Vec<MlpParams> = (0..sizes.len() as u64)
            .map(|k| init_params(&[3, 4, 2], seed ^ k).unwrap())
            .collect();
        let updates: Vec<(&MlpParams, usize)> = models.iter().zip(sizes.iter().copied()).collect();
        let mode = if by_size { Weighting::BySize } else { Weighting::Uniform };
        let out = fedavg(&updates, mode).unwrap();
        let total: usize = sizes.iter().sum();
        let cols: Vec<Vec<f64>> = models.iter().map(|m| m.values().collect()).collect();
        for (j, v) in out.values().enumerate() {
            let column: Vec<f64> = cols.iter().map(|c| c[j]).collect();
            let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo && v <= hi);
            let expected: f64 = if by_size {
                column.iter().zip(&sizes).map(|(c, &n)| c * n as f64).sum::<f64>() / total as f64
            } else {
                column.iter().sum::<f64>() / column.len() as f64
            };
            prop_assert!((v - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn dirichlet_plan_is_complete_partition(
        seed in any::<u64>(),
        clients in 2usize..7,
        log_gamma in -2.0f64..2.0,
    ) {
        let ds = make_blobs(6, 3, 20, 0.2, seed).unwrap();
        let plan = dirichlet_partition(&ds, clients, 10f64.powf(log_gamma), seed).unwrap();
        prop_assert!(plan.is_complete_partition(ds.len()));
        prop_assert!(plan.assignments.iter().all(|a| !a.is_empty()));
        let mut all: Vec<usize> = plan.assignments.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn dirichlet_sample_on_simplex(seed in any::<u64>(), log_c in -3.0f64..3.0, k in 1usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_dirichlet(10f64.powf(log_c), k, &mut r);
        prop_assert_eq!(p.len(), k);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_plan_fills_batch_with_every_group(
        sizes in prop::collection::vec(1usize..80, 1..4),
        extra in 0usize..64,
    ) {
        let groups: Vec<Group> = sizes
            .iter()
            .zip([Source::PrivateClean, Source::LocalPublicAdv, Source::EnsembleAdv])
            .map(|(&n, source)| {
                let ds = make_blobs(2, 2, n.div_ceil(2), 0.1, 0).unwrap();
                let data = ds.subset(&(0..n).collect::<Vec<_>>());
                Group { source, data, origin: vec![0; n] }
            })
            .collect();
        let batch = groups.len() + extra;
        let plan = BatchPlan::proportional(&groups, batch).unwrap();
        let total: usize = sizes.iter().sum();
        prop_assert_eq!(plan.batch_size(), batch.min(total));
        for ((_, c), &n) in plan.entries.iter().zip(&sizes) {
            prop_assert!(*c >= 1 && *c <= n);
        }
    }

    #[test]
    fn exchange_excludes_self_and_counts(clients in 2usize..7, m in 1usize..6) {
        let ds = make_blobs(3, 2, 20, 0.2, 1).unwrap();
        let mut cs: Vec<ClientState> = (0..clients)
            .map(|i| {
                let mut c = ClientState::new(i, init_params(&[2, 3], 0).unwrap(), ds.subset(&[i]), 0);
                c.local_adv = Some(ds.subset(&(0..m).map(|j| (i * m + j) % ds.len()).collect::<Vec<_>>()));
                c
            })
            .collect();
        exchange_adversarial(&mut cs).unwrap();
        for c in &cs {
            prop_assert_eq!(c.ensemble_adv.len(), (clients - 1) * m);
            prop_assert!(c.ensemble_adv.origin.iter().all(|&o| o != c.id));
        }
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>()) {
        let (p, x, y) = random_case(seed, 0, &[6, 10, 4], 8).unwrap();
        let r = check_network(&p, &x, &y, DEFAULT_STEP).unwrap();
        prop_assert!(r.max_error() < DEFAULT_TOLERANCE, "{:?}", r);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..9, 0..3)) {
        let mut sizes = vec![3];
        sizes.extend(hidden);
        sizes.push(2);
        let p = init_params(&sizes, seed).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        prop_assert_eq!(MlpParams::read_from(&buf[..]).unwrap(), p);
    }

    #[test]
    fn dataset_round_trip(seed in any::<u64>(), classes in 1usize..5, dim in 1usize..5) {
        let ds = make_blobs(classes, dim, 3, 0.3, seed).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        prop_assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
    }
}

#[test]
fn attack_dataset_is_row_independent_without_random_start() {
    let ds = make_blobs(3, 4, 10, 0.3, 2).unwrap();
    let params = init_params(&[4, 5, 3], 1).unwrap();
    let cfg = AttackConfig {
        random_start: false,
        ..AttackConfig::pgd(0.1, 0.02, 5)
    };
    let adv = attack_dataset(&params, &ds, &cfg, 7).unwrap();
    let perm: Vec<usize> = (0..ds.len()).rev().collect();
    let adv_perm = attack_dataset(&params, &ds.subset(&perm), &cfg, 7).unwrap();
    assert_eq!(adv_perm, adv.subset(&perm));
}

#[test]
fn skew_is_monotone_in_gamma() {
    let ds = make_blobs(10, 4, 100, 0.2, 0).unwrap();
    let mean_share = |gamma: f64| {
        (0..20u64)
            .map(|s| dirichlet_partition(&ds, 5, gamma, s).unwrap().mean_max_class_share(&ds))
            .sum::<f64>()
            / 20.0
    };
    let shares: Vec<f64> = [0.01, 1.0, 100.0].into_iter().map(mean_share).collect();
    assert!(shares[0] >= shares[1] && shares[1] >= shares[2], "{shares:?}");
}

#[test]
fn constant_dataset_helpers() {
    let ds: Dataset = make_blobs(2, 2, 2, 0.0, 0).unwrap();
    assert_eq!(ds.subset(&[0]).features().row(0), ds.subset(&[1]).features().row(0));
}
