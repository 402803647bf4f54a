use smallify_core::{fuse_network, ArchSpec, Dataset64, PenaltyConfig, SeededRng, Splits, SyntheticSpec, Tensor64};
use smallify_trainer::{accuracy, train, TrainConfig, Trainer};

fn synthetic(seed: u64, n: usize, d: usize, k: usize, classes: usize) -> Dataset64 {
    SyntheticSpec {
        samples: n,
        features: d,
        informative: k,
        classes,
        label_noise: 0.0,
        seed,
    }
    .generate()
    .unwrap()
}

#[test]
fn disabled_pruning_matches_fused_switch_free_trajectory() {
    let arch = ArchSpec::mlp(6, &[9, 7], 3, true);
    let mut cfg = TrainConfig::new(arch);
    cfg.screener.threshold = f64::INFINITY;
    cfg.penalty = PenaltyConfig::new(0.0, 1e-3, 2.0).unwrap();
    cfg.lr = 5e-3;
    let mut switched = Trainer::new(cfg.clone()).unwrap();
    let plain_net = fuse_network(&switched.net).unwrap().into_network();
    let mut plain = Trainer::with_network(cfg, plain_net).unwrap();

    let mut rng = SeededRng::new(5);
    for step in 0..10 {
        let x: Tensor64 = rng.normal_tensor(&[16, 6]);
        let y: Vec<usize> = (0..16).map(|_| rng.below(3)).collect();
        let a = switched.step(&x, &y).unwrap();
        let b = plain.step(&x, &y).unwrap();
        assert!((a.total - b.total).abs() <= 1e-9, "step {step}");
        let fused = fuse_network(&switched.net).unwrap();
        for ((ia, pa), (ib, pb)) in fused.network().params().into_iter().zip(plain.net.params()) {
            assert_eq!(ia, ib);
            assert!(pa.max_abs_diff(pb).unwrap() <= 1e-9, "step {step} {ia}");
        }
    }
}

#[test]
fn realizable_linear_problem_is_fit_exactly() {
    let data = synthetic(1, 400, 3, 3, 3);
    let splits: Splits<f64> = data.split_standardize([1.0, 0.0, 0.0], 1).unwrap();
    let mut cfg = TrainConfig::new(ArchSpec::mlp(3, &[], 3, false));
    cfg.lr = 5e-2;
    let mut trainer = Trainer::new(cfg).unwrap();
    let x = &splits.train.features;
    let y = &splits.train.labels;
    for _ in 0..20000 {
        trainer.step(x, y).unwrap();
    }
    let acc = accuracy(&trainer.net, &splits.train).unwrap();
    assert_eq!(acc, 1.0);
}

/// Multinomial logistic regression (a switch-free linear network) as the oracle.
fn logistic_accuracy(data: &Dataset64, cols: usize, seed: u64) -> f64 {
    let rows: Vec<usize> = (0..data.len()).collect();
    let narrowed = Dataset64::new(
        Tensor64::new(
            vec![data.len(), cols],
            rows.iter()
                .flat_map(|&i| data.features.data()[i * data.num_features()..][..cols].to_vec())
                .collect(),
        )
        .unwrap(),
        data.labels.clone(),
        data.num_classes(),
    )
    .unwrap();
    let splits = narrowed.split_standardize([0.7, 0.15, 0.15], seed).unwrap();
    let mut cfg = TrainConfig::new(ArchSpec::mlp(cols, &[], data.num_classes(), false));
    cfg.lr = 1e-2;
    cfg.max_epochs = 60;
    train(&cfg, &splits).unwrap().test_accuracy.unwrap()
}

#[test]
fn informative_columns_carry_the_signal() {
    let data = SyntheticSpec {
        samples: 4000,
        features: 12,
        informative: 3,
        classes: 3,
        label_noise: 0.05,
        seed: 8,
    }
    .generate::<f64>()
    .unwrap();
    let informative = logistic_accuracy(&data, 3, 8);
    let all = logistic_accuracy(&data, 12, 8);
    assert!(informative >= all - 0.01, "informative {informative} vs all {all}");
}

#[test]
fn pruning_shrinks_and_history_never_grows() {
    let data = synthetic(2, 3000, 16, 3, 3);
    let splits = data.split_standardize([0.7, 0.15, 0.15], 2).unwrap();
    let mut cfg = TrainConfig::new(ArchSpec::mlp(16, &[32], 3, true));
    cfg.penalty = PenaltyConfig::new(1e-2, 1e-4, 2.0).unwrap();
    cfg.lr = 1e-2;
    cfg.max_epochs = 25;
    let out = train(&cfg, &splits).unwrap();
    assert!(out.history.is_non_increasing());
    assert!(out.checkpoint.switch_widths()[0] < 32);
    let sel = &out.epochs[out.selected_epoch];
    assert_eq!(out.checkpoint.param_count(false), sel.params);
    assert!(out.test_accuracy.unwrap() > 0.9);
}
