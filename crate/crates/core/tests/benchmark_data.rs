use fedthe::data::{
    build_benchmark, dirichlet_partition, generate_base, normalize_counts, total_variation,
    BenchConfig, GeneratorSpec, LabeledSet, StreamKind, SyntheticParams,
};
use fedthe::fl::{run_training, ModelConfig, TrainConfig};
use proptest::prelude::*;

fn pooled(params: &SyntheticParams, seed: u64, per_class: usize) -> LabeledSet {
    generate_base(&GeneratorSpec::synthetic(params, seed).unwrap(), per_class).unwrap()
}

/// Mean per-client TV distance from the pooled label histogram, recomputed
/// from the index lists rather than the partition report.
fn mean_tv(alpha: f64, seed: u64) -> f64 {
    let data = pooled(&SyntheticParams::default(), seed, 300);
    let part = dirichlet_partition(&data, 8, alpha, seed).unwrap();
    let global = normalize_counts(&data.class_counts());
    let tvs: Vec<f64> = part
        .client_indices
        .iter()
        .map(|idx| {
            let mut h = vec![0u64; data.num_classes()];
            for &i in idx {
                h[data.label(i)] += 1;
            }
            total_variation(&normalize_counts(&h), &global)
        })
        .collect();
    tvs.iter().sum::<f64>() / tvs.len() as f64
}

#[test]
fn near_uniform_dirichlet_keeps_clients_close_to_global() {
    let avg = (0..10).map(|s| mean_tv(1000.0, s)).sum::<f64>() / 10.0;
    assert!(avg < 0.05, "mean TV {avg}");
}

#[test]
fn small_alpha_makes_clients_heterogeneous() {
    let avg = (0..10).map(|s| mean_tv(0.1, s)).sum::<f64>() / 10.0;
    assert!(avg > 0.3, "mean TV {avg}");
}

#[test]
fn report_tv_agrees_with_index_lists() {
    let data = pooled(&SyntheticParams::default(), 4, 100);
    let part = dirichlet_partition(&data, 5, 0.5, 4).unwrap();
    let direct = {
        let global = normalize_counts(&data.class_counts());
        part.client_indices
            .iter()
            .map(|idx| {
                let mut h = vec![0u64; data.num_classes()];
                idx.iter().for_each(|&i| h[data.label(i)] += 1);
                total_variation(&normalize_counts(&h), &global)
            })
            .sum::<f64>()
            / 5.0
    };
    assert!((part.report.mean_tv_from_global() - direct).abs() < 1e-12);
}

fn label_hist(set: &LabeledSet) -> Vec<f64> {
    normalize_counts(&set.class_counts())
}

#[test]
fn out_of_client_labels_differ_from_id() {
    let mut sum = 0.0;
    let mut n = 0;
    for seed in 0..10 {
        let spec = GeneratorSpec::synthetic(&SyntheticParams::default(), seed).unwrap();
        let bench = build_benchmark(spec, &BenchConfig::default(), seed).unwrap();
        for c in &bench.clients {
            let id = &c.stream(StreamKind::Id).unwrap().samples;
            let ooc = &c.stream(StreamKind::Ooc).unwrap().samples;
            sum += total_variation(&label_hist(id), &label_hist(ooc));
            n += 1;
        }
    }
    let avg = sum / n as f64;
    assert!(avg > 0.3, "mean TV {avg}");
}

#[test]
fn stream_sizes_and_provenance() {
    let spec = GeneratorSpec::synthetic(&SyntheticParams::default(), 2).unwrap();
    let bench = build_benchmark(spec, &BenchConfig::default(), 2).unwrap();
    for c in &bench.clients {
        let len = |k| c.stream(k).unwrap().len();
        assert_eq!(len(StreamKind::Ooc), len(StreamKind::Id));
        assert_eq!(
            len(StreamKind::Mixture),
            len(StreamKind::Id)
                + len(StreamKind::Corrupted)
                + len(StreamKind::Natural)
                + len(StreamKind::Ooc)
        );
        let mix = c.stream(StreamKind::Mixture).unwrap();
        for origin in [
            StreamKind::Id,
            StreamKind::Corrupted,
            StreamKind::Natural,
            StreamKind::Ooc,
        ] {
            let tagged = mix.provenance.iter().filter(|p| p.origin == origin).count();
            assert_eq!(tagged, len(origin));
        }
        let ooc = c.stream(StreamKind::Ooc).unwrap();
        assert!(ooc
            .provenance
            .iter()
            .all(|p| p.source_client != c.client_id));
        let id = c.stream(StreamKind::Id).unwrap();
        assert!(id.provenance.iter().all(|p| p.source_client == c.client_id));
    }
}

#[test]
fn natural_shift_follows_train_histogram() {
    let spec = GeneratorSpec::synthetic(&SyntheticParams::default(), 6).unwrap();
    let bench = build_benchmark(spec, &BenchConfig::default(), 6).unwrap();
    for c in &bench.clients {
        let train = c.train.class_counts();
        let nat = c
            .stream(StreamKind::Natural)
            .unwrap()
            .samples
            .class_counts();
        let total_train: u64 = train.iter().sum();
        let total_nat: u64 = nat.iter().sum();
        for (t, n) in train.iter().zip(&nat) {
            let want = *t as f64 * total_nat as f64 / total_train as f64;
            assert!((*n as f64 - want).abs() <= 1.0, "class share {n} vs {want}");
        }
    }
}

#[test]
fn corrupted_stream_is_no_easier_than_id() {
    let bench_cfg = BenchConfig {
        samples_per_class: 150,
        clients: 4,
        ..BenchConfig::default()
    };
    let cfg = TrainConfig {
        rounds: 10,
        ..TrainConfig::default()
    };
    let (mut id_hits, mut id_n, mut cor_hits, mut cor_n) = (0, 0, 0, 0);
    for seed in 0..3 {
        let spec = GeneratorSpec::synthetic(&SyntheticParams::default(), seed).unwrap();
        let bench = build_benchmark(spec, &bench_cfg, seed).unwrap();
        let trains: Vec<&LabeledSet> = bench.clients.iter().map(|c| &c.train).collect();
        let model = run_training(
            &trains,
            &ModelConfig::default(),
            &TrainConfig {
                seed,
                ..cfg.clone()
            },
        )
        .unwrap()
        .server
        .global_model();
        for c in &bench.clients {
            for (kind, hits, n) in [
                (StreamKind::Id, &mut id_hits, &mut id_n),
                (StreamKind::Corrupted, &mut cor_hits, &mut cor_n),
            ] {
                let s = &c.stream(kind).unwrap().samples;
                *hits += s
                    .iter()
                    .filter(|(x, y)| model.predict(x).unwrap() == *y)
                    .count();
                *n += s.len();
            }
        }
    }
    let id = id_hits as f64 / id_n as f64;
    let cor = cor_hits as f64 / cor_n as f64;
    assert!(cor <= id, "corrupted {cor} > id {id}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_is_complete_and_disjoint(seed in 0u64..10_000, clients in 1usize..9, alpha in 0.05f64..50.0) {
        let params = SyntheticParams { num_classes: 4, input_dim: 3, ..SyntheticParams::default() };
        let data = pooled(&params, seed, 40);
        let part = dirichlet_partition(&data, clients, alpha, seed).unwrap();
        let mut seen = vec![0u8; data.len()];
        for idx in &part.client_indices {
            prop_assert!(idx.len() >= data.num_classes() + 2);
            for &i in idx {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        prop_assert!(part.report.complete);
    }

    #[test]
    fn benchmark_regenerates_bitwise(seed in 0u64..1000) {
        let cfg = BenchConfig { samples_per_class: 30, clients: 3, ..BenchConfig::default() };
        let params = SyntheticParams { num_classes: 4, input_dim: 5, ..SyntheticParams::default() };
        let a = build_benchmark(GeneratorSpec::synthetic(&params, seed).unwrap(), &cfg, seed).unwrap();
        let b = build_benchmark(GeneratorSpec::synthetic(&params, seed).unwrap(), &cfg, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
