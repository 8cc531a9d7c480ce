use std::collections::BTreeSet;

use bmsfed::balance::{
    aggregate_prototypes, coefficients, global_ratio, local_prototypes, weak_modality, ImbalanceReport,
};
use bmsfed::data::{apply_incongruity, generate, partition_dirichlet, partition_iid, BimodalDataset, DataSpec};
use bmsfed::federation::{FederationConfig, Method, Simulation, SimulationConfig};
use bmsfed::numkit::{Matrix, Purpose, RngStream};
use bmsfed::selection::{greedy, stochastic_greedy, surrogate_value, SimilarityMatrix};
use bmsfed::Modality;
use proptest::prelude::*;

fn rng(seed: u64) -> RngStream {
    RngStream::keyed(seed, Purpose::Test, 0, 0)
}

fn spec(classes: usize, per_class: usize) -> DataSpec {
    DataSpec {
        num_classes: classes,
        per_class,
        dim_a: classes.max(2),
        dim_i: classes.max(2),
        snr_a: 4.0,
        snr_i: 1.0,
        scale: 1.0,
    }
}

fn distances(values: &[f64], n: usize) -> SimilarityMatrix {
    let mut d = Matrix::zeros(n, n);
    let mut it = values.iter().cycle();
    for a in 0..n {
        for b in a + 1..n {
            let v = *it.next().unwrap();
            d.set(a, b, v).unwrap();
            d.set(b, a, v).unwrap();
        }
    }
    SimilarityMatrix::from_distances(d).unwrap()
}

fn sim_config(method: Method, seed: u64, fraction_uni: f64) -> SimulationConfig {
    SimulationConfig {
        data: spec(3, 20),
        test_per_class: 10,
        clients: 6,
        alpha: Some(1.0),
        fraction_uni,
        hidden: vec![6],
        embedding_dim: 3,
        rounds: 3,
        federation: FederationConfig {
            method,
            seed,
            budget: 3,
            s_sample: 4,
            chi: 1.5,
            drop_prob: 0.5,
            lr: 0.2,
            lr_decay_round: 3,
            local_epochs: 1,
            batch_size: 8,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iid_partition_is_a_balanced_cover(n in 1usize..200, k in 1usize..20, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let plan = partition_iid(n, k, &mut rng(seed)).unwrap();
        let mut all: Vec<usize> = plan.assignment.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = plan.assignment.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn dirichlet_partition_covers_every_sample_once(alpha in 0.05f64..20.0, k in 1usize..8, seed in any::<u64>()) {
        let data = generate(&spec(4, 30), &mut rng(seed)).unwrap();
        let plan = partition_dirichlet(&data.labels, k, alpha, &mut rng(seed ^ 1)).unwrap();
        prop_assert_eq!(plan.num_clients(), k);
        prop_assert!(plan.assignment.iter().all(|a| !a.is_empty()));
        let mut all: Vec<usize> = plan.assignment.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
    }

    #[test]
    fn incongruity_strips_exactly_the_requested_share(fraction in 0.0f64..=1.0, k in 1usize..30, seed in any::<u64>()) {
        let plan = partition_iid(100, k, &mut rng(seed)).unwrap();
        let plan = apply_incongruity(plan, fraction, &mut rng(seed ^ 2)).unwrap();
        let incomplete = plan.masks.iter().filter(|m| !m.is_complete()).count();
        prop_assert_eq!(incomplete, (fraction * k as f64).floor() as usize);
        prop_assert!(plan.masks.iter().all(|m| m.a || m.i));
    }

    #[test]
    fn dataset_round_trips_through_bytes(classes in 2usize..5, per_class in 1usize..10, seed in any::<u64>()) {
        let data = generate(&spec(classes, per_class), &mut rng(seed)).unwrap();
        let mut bytes = Vec::new();
        data.write_to(&mut bytes).unwrap();
        prop_assert_eq!(BimodalDataset::read_from(bytes.as_slice()).unwrap(), data);
    }

    #[test]
    fn coefficients_boost_only_the_lagging_side(log_rho in -5.0f64..5.0) {
        let rho = log_rho.exp();
        let (gamma, beta) = coefficients(rho).unwrap();
        prop_assert!((0.0..=1.0).contains(&gamma) && (0.0..=1.0).contains(&beta));
        prop_assert!(gamma == 0.0 || beta == 0.0);
        match weak_modality(rho) {
            Modality::I => prop_assert_eq!(gamma, 0.0),
            Modality::A => prop_assert_eq!(beta, 0.0),
        }
    }

    #[test]
    fn global_ratio_lies_between_the_local_ones(
        reports in prop::collection::vec((0.01f64..50.0, 1usize..1000), 1..12),
    ) {
        let reports: Vec<ImbalanceReport> =
            reports.iter().map(|&(r, n)| ImbalanceReport::new(r, n).unwrap()).collect();
        let g = global_ratio(&reports).unwrap();
        let lo = reports.iter().map(|r| r.local_ratio).fold(f64::INFINITY, f64::min);
        let hi = reports.iter().map(|r| r.local_ratio).fold(0.0, f64::max);
        prop_assert!(g >= lo * (1.0 - 1e-12) && g <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn prototype_aggregation_is_order_free(seed in any::<u64>(), parts in 1usize..6) {
        let mut r = rng(seed);
        let n = 40;
        let z = r.gaussian(n, 3, 0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..n).map(|k| k % 5).collect();
        let sets: Vec<_> = (0..parts)
            .map(|p| {
                let rows: Vec<usize> = (0..n).filter(|k| k % parts == p).collect();
                let y: Vec<usize> = rows.iter().map(|&k| labels[k]).collect();
                local_prototypes(&z.select_rows(&rows), &y, Modality::I).unwrap()
            })
            .collect();
        let forward = aggregate_prototypes(&sets.iter().collect::<Vec<_>>()).unwrap();
        let backward = aggregate_prototypes(&sets.iter().rev().collect::<Vec<_>>()).unwrap();
        for ((_, a), (_, b)) in forward.iter().zip(backward.iter()) {
            prop_assert_eq!(a.count, b.count);
            for (x, y) in a.centroid.iter().zip(&b.centroid) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn greedy_picks_are_distinct_and_monotone(
        values in prop::collection::vec(0.0f64..10.0, 1..60), n in 1usize..10, budget in 1usize..10, seed in any::<u64>(),
    ) {
        prop_assume!(budget <= n);
        let dist = distances(&values, n);
        let picks = greedy(&dist, budget).unwrap();
        prop_assert_eq!(picks.iter().collect::<BTreeSet<_>>().len(), budget);
        let mut prev = 0.0;
        for k in 1..=budget {
            let v = surrogate_value(&dist, &picks[..k].iter().copied().collect()).unwrap();
            prop_assert!(v >= prev - 1e-12);
            prev = v;
        }
        prop_assert_eq!(stochastic_greedy(&dist, budget, n, &mut rng(seed)).unwrap(), picks);
        let sto = stochastic_greedy(&dist, budget, 1, &mut rng(seed)).unwrap();
        prop_assert_eq!(sto.iter().collect::<BTreeSet<_>>().len(), budget);
    }
}

#[test]
fn every_method_runs_deterministically_with_full_rounds() {
    for method in Method::ALL {
        for fraction in [0.0, 0.5] {
            let run = |seed| {
                Simulation::new(sim_config(method, seed, fraction))
                    .unwrap()
                    .run()
                    .unwrap()
            };
            let a = run(8);
            assert_eq!(a, run(8), "{method}");
            assert_eq!(a.len(), 3);
            for (k, m) in a.iter().enumerate() {
                assert_eq!(m.round, k + 1);
                assert_eq!(
                    m.n_multi + m.n_uni,
                    if k == 0 { 6 } else { 3 },
                    "{method} round {}",
                    m.round
                );
                for acc in [m.acc_multi, m.acc_uni_a, m.acc_uni_i] {
                    assert!((0.0..=1.0).contains(&acc));
                }
                assert!(m.global_ratio > 0.0 && m.train_loss.is_finite());
            }
            let plain = matches!(method, Method::FedAvg | Method::PowD | Method::DivFl);
            if plain && fraction == 0.0 {
                assert!(a.iter().all(|m| m.n_uni == 0), "{method}");
            }
        }
    }
}

#[test]
fn seeds_change_the_outcome() {
    let a = Simulation::new(sim_config(Method::BmsFed, 1, 0.0))
        .unwrap()
        .run()
        .unwrap();
    let b = Simulation::new(sim_config(Method::BmsFed, 2, 0.0))
        .unwrap()
        .run()
        .unwrap();
    assert_ne!(a, b);
}

#[test]
fn invalid_budget_is_rejected_up_front() {
    let mut cfg = sim_config(Method::FedAvg, 1, 0.0);
    cfg.federation.budget = 7;
    assert!(Simulation::new(cfg.clone()).is_err());
    cfg.federation.budget = 0;
    assert!(Simulation::new(cfg).is_err());
}
