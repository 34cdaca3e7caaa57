use fedthe::data::{
    build_benchmark, BenchConfig, Benchmark, GeneratorSpec, LabeledSet, StreamKind, SyntheticParams,
};
use fedthe::fl::{
    client_ft_stream, fedavg_ft, run_training, ModelConfig, TrainConfig, TrainingOutcome,
};
use fedthe::nn::{argmax, Model, TwoHeadModel};
use fedthe::rng::RngStream;
use fedthe::tta::{
    memo_finetune, optimize_e, predict_stream, AdaptConfig, AugmentationSpec, ClientModels,
    LossMode, Method, TheInputs,
};
use proptest::prelude::*;

struct Trained {
    bench: Benchmark,
    outcome: TrainingOutcome,
    two_heads: Vec<TwoHeadModel>,
    fine_tuned: Vec<Model>,
}

fn trained(seed: u64) -> Trained {
    let bench_cfg = BenchConfig {
        samples_per_class: 120,
        clients: 4,
        ..BenchConfig::default()
    };
    let bench = build_benchmark(
        GeneratorSpec::synthetic(&SyntheticParams::default(), seed).unwrap(),
        &bench_cfg,
        seed,
    )
    .unwrap();
    let trains: Vec<&LabeledSet> = bench.clients.iter().map(|c| &c.train).collect();
    let cfg = TrainConfig {
        rounds: 8,
        seed,
        ..TrainConfig::default()
    };
    let outcome = run_training(&trains, &ModelConfig::default(), &cfg).unwrap();
    let two_heads = outcome
        .clients
        .iter()
        .map(|c| c.two_head(&outcome.server))
        .collect();
    let global = outcome.server.global_model();
    let fine_tuned = trains
        .iter()
        .enumerate()
        .map(|(k, t)| fedavg_ft(t, &global, &cfg, &mut client_ft_stream(seed, k)).unwrap())
        .collect();
    Trained {
        bench,
        outcome,
        two_heads,
        fine_tuned,
    }
}

impl Trained {
    fn models(&self, k: usize) -> ClientModels<'_> {
        ClientModels {
            two_head: &self.two_heads[k],
            fine_tuned: Some(&self.fine_tuned[k]),
            global_descriptor: self.outcome.server.global_descriptor.as_deref().unwrap(),
            local_descriptor: self.outcome.clients[k].local_descriptor.as_deref().unwrap(),
        }
    }

    fn stream(&self, k: usize, kind: StreamKind) -> &LabeledSet {
        &self.bench.clients[k].stream(kind).unwrap().samples
    }

    fn run(
        &self,
        method: Method,
        k: usize,
        kind: StreamKind,
        cfg: &AdaptConfig,
    ) -> fedthe::tta::StreamResult {
        predict_stream(
            method,
            &self.models(k),
            self.stream(k, kind),
            cfg,
            &AugmentationSpec::new(1.0),
            &mut RngStream::new(77),
        )
        .unwrap()
    }
}

#[test]
fn pinned_weights_reproduce_single_heads() {
    let t = trained(1);
    for k in 0..t.two_heads.len() {
        let set = t.stream(k, StreamKind::Mixture);
        let global_only = AdaptConfig {
            pinned_e: Some(1.0),
            ..AdaptConfig::default()
        };
        let a = t.run(Method::Fedthe, k, StreamKind::Mixture, &global_only);
        let b = t.run(
            Method::Global,
            k,
            StreamKind::Mixture,
            &AdaptConfig::default(),
        );
        assert_eq!(a.predictions, b.predictions);

        let personal_only = AdaptConfig {
            pinned_e: Some(0.0),
            ..AdaptConfig::default()
        };
        let c = t.run(Method::Fedthe, k, StreamKind::Mixture, &personal_only);
        let personal: Vec<usize> = set
            .iter()
            .map(|(x, _)| argmax(&t.two_heads[k].forward(x).unwrap().personal_logits))
            .collect();
        assert_eq!(c.predictions, personal);
        assert!(c.one_minus_e.iter().all(|v| *v == 1.0));
    }
}

#[test]
fn batch_wise_is_close_to_sample_wise() {
    let t = trained(2);
    let (mut sample, mut batch, mut n) = (0, 0, 0);
    for k in 0..t.two_heads.len() {
        let s = t.run(
            Method::Fedthe,
            k,
            StreamKind::Mixture,
            &AdaptConfig::default(),
        );
        let b = t.run(
            Method::Fedthe,
            k,
            StreamKind::Mixture,
            &AdaptConfig {
                batch_wise: true,
                ..AdaptConfig::default()
            },
        );
        sample += s.num_correct();
        batch += b.num_correct();
        n += s.correct.len();
    }
    let gap = 100.0 * (sample as f64 - batch as f64).abs() / n as f64;
    assert!(gap <= 3.0, "batch-wise differs by {gap} points");
}

#[test]
fn batch_wise_shares_one_weight_per_batch() {
    let t = trained(2);
    let cfg = AdaptConfig {
        batch_wise: true,
        batch_size: 5,
        ..AdaptConfig::default()
    };
    let r = t.run(Method::Fedthe, 0, StreamKind::Id, &cfg);
    for chunk in r.one_minus_e.chunks(5) {
        assert!(chunk.iter().all(|v| *v == chunk[0]));
    }
}

#[test]
fn test_time_tuning_is_episodic() {
    let t = trained(3);
    let base = t.two_heads[0].clone();
    let x = t.stream(0, StreamKind::Id).input(0).to_vec();
    let cfg = AdaptConfig::default();
    let aug = AugmentationSpec::new(1.0);
    let first = memo_finetune(&base, &x, 0.4, &cfg, &aug, &mut RngStream::new(5)).unwrap();
    let again = memo_finetune(&base, &x, 0.4, &cfg, &aug, &mut RngStream::new(5)).unwrap();
    assert_eq!(first, again);
    assert_eq!(base, t.two_heads[0]);
    assert_ne!(first, base);

    let frozen = AdaptConfig {
        ft_lr: 0.0,
        ..AdaptConfig::default()
    };
    let plus = t.run(Method::FedthePlus, 0, StreamKind::Mixture, &frozen);
    let plain = t.run(Method::Fedthe, 0, StreamKind::Mixture, &frozen);
    assert_eq!(plus, plain);
}

#[test]
fn every_method_is_deterministic() {
    let t = trained(4);
    for method in Method::ALL {
        let a = t.run(method, 1, StreamKind::Corrupted, &AdaptConfig::default());
        let b = t.run(method, 1, StreamKind::Corrupted, &AdaptConfig::default());
        assert_eq!(a, b, "{method}");
        assert_eq!(a.correct.len(), t.stream(1, StreamKind::Corrupted).len());
        assert_eq!(
            a.one_minus_e.is_empty(),
            !matches!(method, Method::Fedthe | Method::FedthePlus)
        );
    }
}

/// Scalar Adam on `(a_g, a_l)` for the loss `(1 - e) * d`, written out by hand.
fn fa_descent_oracle(distance_to_local: f64, steps: usize, lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut a = [0.0f64; 2];
    let mut m = [0.0f64; 2];
    let mut v = [0.0f64; 2];
    for t in 1..=steps {
        let e = 1.0 / (1.0 + (a[1] - a[0]).exp());
        let de = -distance_to_local;
        let g = [de * e * (1.0 - e), -de * e * (1.0 - e)];
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            a[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    1.0 / (1.0 + (a[1] - a[0]).exp())
}

#[test]
fn feature_alignment_steers_toward_the_matching_head() {
    let logits = [0.3, -0.2, 0.5];
    let hg = [10.0, 0.0, 0.0];
    let hl = [0.0, 0.0, 0.0];
    let cfg = AdaptConfig {
        loss_mode: LossMode::FaOnly,
        ..AdaptConfig::default()
    };
    let toward_global = TheInputs {
        global_logits: &logits,
        personal_logits: &logits,
        smoothed_feature: &hg,
        global_descriptor: &hg,
        local_descriptor: &hl,
    };
    let e = optimize_e(&[toward_global], &cfg).unwrap();
    let oracle = fa_descent_oracle(10.0, cfg.e_steps, cfg.e_lr);
    assert!((e - oracle).abs() < 1e-9, "{e} vs oracle {oracle}");
    assert!(e > 0.9);

    let toward_local = TheInputs {
        smoothed_feature: &hl,
        ..toward_global
    };
    assert!(optimize_e(&[toward_local], &cfg).unwrap() < 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimized_weight_stays_in_unit_interval(
        yg in prop::collection::vec(-6.0f64..6.0, 3),
        yl in prop::collection::vec(-6.0f64..6.0, 3),
        h in prop::collection::vec(-3.0f64..3.0, 2),
        hg in prop::collection::vec(-3.0f64..3.0, 2),
        hl in prop::collection::vec(-3.0f64..3.0, 2),
        mode in 0usize..4,
    ) {
        let loss_mode = [LossMode::Slw, LossMode::EmOnly, LossMode::FaOnly, LossMode::FixedHalf][mode];
        let cfg = AdaptConfig { loss_mode, ..AdaptConfig::default() };
        let inputs = TheInputs {
            global_logits: &yg,
            personal_logits: &yl,
            smoothed_feature: &h,
            global_descriptor: &hg,
            local_descriptor: &hl,
        };
        let e = optimize_e(&[inputs], &cfg).unwrap();
        prop_assert!(e > 0.0 && e < 1.0);
    }

    #[test]
    fn swapping_heads_and_descriptors_mirrors_the_weight(
        yg in prop::collection::vec(-6.0f64..6.0, 4),
        yl in prop::collection::vec(-6.0f64..6.0, 4),
        h in prop::collection::vec(-3.0f64..3.0, 3),
        hg in prop::collection::vec(-3.0f64..3.0, 3),
        hl in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let cfg = AdaptConfig::default();
        let a = TheInputs { global_logits: &yg, personal_logits: &yl, smoothed_feature: &h, global_descriptor: &hg, local_descriptor: &hl };
        let b = TheInputs { global_logits: &yl, personal_logits: &yg, smoothed_feature: &h, global_descriptor: &hl, local_descriptor: &hg };
        let ea = optimize_e(&[a], &cfg).unwrap();
        let eb = optimize_e(&[b], &cfg).unwrap();
        prop_assert!((ea + eb - 1.0).abs() < 1e-9, "{} + {}", ea, eb);
    }
}
