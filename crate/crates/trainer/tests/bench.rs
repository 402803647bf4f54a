use std::sync::Mutex;

use smallify_core::{fuse_network, ArchSpec, FusedModel64, Network64, SeededRng, SwitchInit};
use smallify_trainer::{bench_inference, BenchConfig};

/// Timing tests share the machine; run them one at a time.
static TIMING: Mutex<()> = Mutex::new(());

fn model(width: usize, seed: u64) -> FusedModel64 {
    let arch = ArchSpec::mlp(64, &[width, width], 10, false);
    let net: Network64 = arch.build(&mut SeededRng::new(seed), SwitchInit::Ones).unwrap();
    fuse_network(&net).unwrap()
}

#[test]
fn self_comparison_is_even() {
    let _guard = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let m = model(64, 0);
    let cfg = BenchConfig {
        batch_sizes: vec![32],
        ..BenchConfig::default()
    };
    let report = bench_inference(&m, &m.clone(), &cfg).unwrap();
    assert_eq!(report.size_ratio, 1.0);
    let s = report.points[0].speedup;
    assert!((0.8..=1.25).contains(&s), "speedup {s}");
}

#[test]
fn narrow_model_is_faster() {
    let _guard = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let small = model(8, 1);
    let big = model(64, 1);
    let cfg = BenchConfig {
        batch_sizes: vec![256],
        ..BenchConfig::default()
    };
    let report = bench_inference(&small, &big, &cfg).unwrap();
    assert_eq!(report.model_params, small.param_count());
    assert_eq!(report.baseline_params, big.param_count());
    assert!(report.points[0].speedup > 2.0, "speedup {}", report.points[0].speedup);
}

#[test]
fn too_few_repetitions_are_rejected() {
    let m = model(8, 2);
    let cfg = BenchConfig {
        reps: 10,
        ..BenchConfig::default()
    };
    assert!(bench_inference(&m, &m.clone(), &cfg).is_err());
}
