//! Acceptance criteria, run in order on one thread. Prints one line per
//! criterion and exits nonzero when any criterion fails.
//!
//! Set `SMALLIFY_COVERTYPE` to a CSV (54 features, label last) to run the
//! optional real-data search; otherwise that criterion is skipped.

use std::process::{Command, ExitCode};
use std::time::Instant;

use smallify_core::objective::add_penalty_gradients;
use smallify_core::{
    apply_removal, cross_entropy, fuse_network, plan_removal, smallify_loss, AdamState, ArchSpec, CsvOptions,
    Dataset64, LayerSpec, Mode, Network64, ParamKind, PenaltyConfig, PlateauSchedule, ScheduleConfig, SeededRng,
    SwitchInit, SyntheticSpec, Tensor64,
};
use smallify_trainer::{
    accuracy, bench_inference, pareto_frontier, pareto_indices, random_search, train, BenchConfig, SearchOptions,
    SearchSpace, TrainConfig, Trainer,
};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn random_mlp(rng: &mut SeededRng) -> ArchSpec {
    let inputs = 3 + rng.below(6);
    let mut layers = Vec::new();
    for _ in 0..1 + rng.below(3) {
        layers.push(LayerSpec::Linear { out: 2 + rng.below(7) });
        if rng.below(3) == 0 {
            layers.push(LayerSpec::BatchNorm {
                eps: 1e-5,
                momentum: 0.1,
            });
        }
        layers.extend([LayerSpec::Switch, LayerSpec::Relu]);
    }
    layers.push(LayerSpec::Linear { out: 2 + rng.below(3) });
    ArchSpec {
        input: vec![inputs],
        layers,
    }
}

/// Conv/bn stacks ending in flatten → linear, so the last conv switch is removed across the flatten.
fn random_conv(rng: &mut SeededRng) -> ArchSpec {
    let side = 5 + rng.below(4);
    let mut h = side;
    let mut layers = Vec::new();
    for block in 0..1 + rng.below(2) {
        let kernel = [1, 3][rng.below(2)];
        let padding = if kernel == 3 { 1 } else { 0 };
        layers.push(LayerSpec::Conv2d {
            out: 2 + rng.below(4),
            kernel,
            stride: 1,
            padding,
        });
        if rng.below(2) == 0 {
            layers.push(LayerSpec::BatchNorm {
                eps: 1e-5,
                momentum: 0.1,
            });
        }
        if rng.below(4) == 0 && block > 0 {
            layers.extend([LayerSpec::Relu, LayerSpec::Switch]);
        } else {
            layers.extend([LayerSpec::Switch, LayerSpec::Relu]);
        }
        if block == 0 && h >= 4 && rng.below(2) == 0 {
            layers.push(LayerSpec::MaxPool2d {
                window: 2,
                stride: None,
            });
            h /= 2;
        }
    }
    layers.push(LayerSpec::Flatten);
    if rng.below(2) == 0 {
        layers.extend([
            LayerSpec::Linear { out: 3 + rng.below(4) },
            LayerSpec::Switch,
            LayerSpec::Relu,
        ]);
    }
    layers.push(LayerSpec::Linear { out: 2 + rng.below(3) });
    ArchSpec {
        input: vec![1 + rng.below(3), side, side],
        layers,
    }
}

fn random_network(seed: u64, conv: bool) -> Network64 {
    let mut rng = SeededRng::new(seed);
    let arch = if conv {
        random_conv(&mut rng)
    } else {
        random_mlp(&mut rng)
    };
    let mut net: Network64 = arch.build(&mut rng, SwitchInit::Normal).expect("valid architecture");
    for (id, p) in net.params_mut() {
        if id.kind == ParamKind::Bias || id.kind == ParamKind::Shift {
            *p = rng.normal_tensor(p.shape()).scale(0.5);
        }
    }
    // Non-trivial running statistics.
    for _ in 0..3 {
        let x = rng.normal_tensor(&batch_shape(&net, 16));
        net.forward(&x.scale(1.5), Mode::Train).expect("forward");
    }
    net
}

fn batch_shape(net: &Network64, n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(net.input_shape());
    s
}

fn fusion_exactness() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let net = random_network(1000 + seed, seed % 2 == 1);
        let fused = fuse_network(&net).expect("fusable");
        let x = SeededRng::new(seed).split(7).normal_tensor(&batch_shape(&net, 100));
        let d = fused
            .predict(&x)
            .unwrap()
            .max_abs_diff(&net.predict(&x).unwrap())
            .unwrap();
        worst = worst.max(d);
    }
    verdict(
        worst < 1e-6,
        format!("100 networks x 100 inputs, max deviation {worst:.2e}"),
    )
}

fn removal_exactness() -> Verdict {
    let mut worst = 0.0f64;
    let mut count_errors = 0;
    let mut crossing = 0;
    let mut removed_total = 0;
    for seed in 0..50u64 {
        let mut net = random_network(2000 + seed, seed % 2 == 1);
        let mut rng = SeededRng::new(seed).split(3);
        let sites: Vec<usize> = net.switch_indices();
        let site = sites[rng.below(sites.len())];
        let width = net.switch(site).unwrap().channels();
        let mut channels: Vec<usize> = (0..width).filter(|_| rng.below(2) == 0).collect();
        if channels.is_empty() {
            channels.push(rng.below(width));
        }
        if channels.len() == width {
            channels.pop();
        }
        if channels.is_empty() {
            continue;
        }
        net.switch_mut(site).unwrap().deactivate(&channels).unwrap();
        if net.switch_site(site).unwrap().block > 1 {
            crossing += 1;
        }
        let mut adam = AdamState::new(1e-3);
        let x = SeededRng::new(seed).split(4).normal_tensor(&batch_shape(&net, 20));
        let before = net.predict(&x).unwrap();
        let count_before = net.param_count(true);
        let plan = plan_removal(&net, site, &channels).expect("removable");
        apply_removal(&mut net, &plan, Some(&mut adam)).expect("applies");
        let after = net.predict(&x).unwrap();
        worst = worst.max(after.max_abs_diff(&before).unwrap());
        let removed = count_before - net.param_count(true);
        removed_total += removed;
        if removed != plan.removed_params(true) {
            count_errors += 1;
        }
    }
    verdict(
        worst <= 1e-12 && count_errors == 0 && crossing > 0,
        format!(
            "50 architectures ({crossing} across flatten), max deviation {worst:.2e}, {removed_total} params removed, {count_errors} count mismatches"
        ),
    )
}

fn objective(net: &mut Network64, x: &Tensor64, y: &[usize], cfg: &PenaltyConfig) -> f64 {
    let (logits, _) = net.forward(x, Mode::Train).unwrap();
    let (ce, _) = cross_entropy(&logits, y).unwrap();
    smallify_loss(ce, net, cfg).unwrap().total
}

fn gradient_fidelity() -> Verdict {
    const H: f64 = 1e-6;
    let cfg = PenaltyConfig::new(0.05, 1e-3, 2.0).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut kinds = std::collections::BTreeSet::new();
    for seed in 0..20u64 {
        let mut net = random_network(3000 + seed, seed % 2 == 0);
        let mut rng = SeededRng::new(seed).split(5);
        let x = rng.normal_tensor(&batch_shape(&net, 6));
        let classes = net.output_shape()[0];
        let y: Vec<usize> = (0..6).map(|_| rng.below(classes)).collect();
        let (logits, tape) = net.forward(&x, Mode::Train).unwrap();
        let (_, g) = cross_entropy(&logits, &y).unwrap();
        let (_, mut grads) = net.backward(&tape, &g).unwrap();
        add_penalty_gradients(&net, &cfg, &mut grads);
        for l in net.layers() {
            kinds.insert(l.name().to_string());
        }
        let ids: Vec<_> = net.params().into_iter().map(|(id, t)| (id, t.len())).collect();
        for (id, len) in ids {
            let analytic = grads.get(&id).expect("gradient for every parameter").clone();
            for _ in 0..len.min(6) {
                let k = rng.below(len);
                let orig = net.param(id).unwrap().data()[k];
                if id.kind == ParamKind::Beta && orig.abs() < 10.0 * H {
                    continue;
                }
                net.param_mut(id).unwrap().data_mut()[k] = orig + H;
                let up = objective(&mut net, &x, &y, &cfg);
                net.param_mut(id).unwrap().data_mut()[k] = orig - H;
                let down = objective(&mut net, &x, &y, &cfg);
                net.param_mut(id).unwrap().data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * H);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let kinds: Vec<String> = kinds.into_iter().collect();
    verdict(
        worst < 1e-4,
        format!(
            "20 seeds, {checked} coordinates over [{}], max relative error {worst:.2e}",
            kinds.join(", ")
        ),
    )
}

fn proposition_suite() -> Verdict {
    let out = Command::new(env!("CARGO_BIN_EXE_smallify"))
        .args(["verify-props", "--prop", "all", "--seed", "0", "--trials", "10"])
        .output()
        .expect("runs the binary");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let passes = stdout.lines().filter(|l| l.starts_with("PASS")).count();
    verdict(
        out.status.success() && passes == 4,
        format!("verify-props all: {passes}/4 PASS, exit {:?}", out.status.code()),
    )
}

fn shrinkage_with_accuracy() -> Verdict {
    let mut good = 0;
    let mut lines = Vec::new();
    let start = Instant::now();
    for seed in 0..5u64 {
        let data = SyntheticSpec {
            samples: 20_000,
            features: 32,
            informative: 4,
            classes: 4,
            label_noise: 0.0,
            seed,
        }
        .generate::<f64>()
        .unwrap();
        let splits = data.split_standardize([0.7, 0.15, 0.15], seed).unwrap();
        let mut cfg = TrainConfig::new(ArchSpec::mlp(32, &[64, 64], 4, true));
        cfg.lr = 1e-2;
        cfg.max_epochs = 40;
        cfg.seed = seed;
        cfg.penalty = PenaltyConfig::new(3e-3, 1e-4, 2.0).unwrap();
        let pruned = train(&cfg, &splits).unwrap();
        let mut base_cfg = cfg.clone();
        base_cfg.penalty.lambda = 0.0;
        base_cfg.screener.threshold = f64::INFINITY;
        let base = train(&base_cfg, &splits).unwrap();
        let width = pruned.checkpoint.switch_widths()[0];
        let (acc, base_acc) = (pruned.test_accuracy.unwrap(), base.test_accuracy.unwrap());
        let ok = width < 16 && acc >= base_acc - 0.01;
        good += usize::from(ok);
        lines.push(format!("seed {seed}: width {width}, acc {acc:.4} vs {base_acc:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        good >= 3 && secs < 600.0,
        format!("{good}/5 seeds ok in {secs:.0}s ({})", lines.join("; ")),
    )
}

fn covertype_smoke() -> Verdict {
    let Ok(path) = std::env::var("SMALLIFY_COVERTYPE") else {
        return Verdict::Skip("set SMALLIFY_COVERTYPE to a covertype CSV to run".into());
    };
    let run = || -> smallify_core::Result<Verdict> {
        let data = Dataset64::load_csv(std::path::Path::new(&path), &CsvOptions::default())?;
        let splits = data.split_standardize([0.7, 0.15, 0.15], 0)?;
        let d = data.num_features();
        let classes = data.num_classes();
        let mut base = TrainConfig::new(ArchSpec::mlp(d, &[100, 100, 100], classes, true));
        base.max_epochs = 30;
        let space = SearchSpace {
            trials: 20,
            ..SearchSpace::default()
        };
        let out = random_search(&space, &base, &splits, &SearchOptions::default())?;
        let frontier = pareto_frontier(&out.records);
        // Unpruned reference: the first five sampled configurations with pruning disabled.
        let mut best_static: Option<(usize, f64)> = None;
        for i in 0..5 {
            let tc = space.sample(i);
            let mut cfg = base.clone();
            cfg.arch = base.arch.scaled(space.width_factor);
            cfg.lr = tc.lr;
            cfg.batch = tc.batch;
            cfg.seed = tc.seed;
            cfg.penalty = PenaltyConfig::new(0.0, tc.lambda2, 2.0)?;
            cfg.screener.threshold = f64::INFINITY;
            let r = train(&cfg, &splits)?;
            let acc = r.test_accuracy.unwrap_or(r.val_accuracy);
            if best_static.is_none_or(|(_, a)| acc > a) {
                best_static = Some((r.checkpoint.param_count(false), acc));
            }
        }
        let (size, acc) = best_static.expect("five runs");
        let hit = frontier
            .iter()
            .find(|r| r.param_count * 2 <= size && r.accuracy().unwrap_or(0.0) >= acc - 0.01);
        Ok(verdict(
            hit.is_some(),
            format!(
                "static best {size} params at {acc:.4}; smallest qualifying frontier model {:?}",
                hit.map(|r| (r.param_count, r.accuracy()))
            ),
        ))
    };
    run().unwrap_or_else(|e| Verdict::Fail(format!("error: {e}")))
}

fn inference_speedup() -> Verdict {
    let build = |w: usize| {
        let net: Network64 = ArchSpec::mlp(64, &[w, w], 10, false)
            .build(&mut SeededRng::new(9), SwitchInit::Ones)
            .unwrap();
        fuse_network(&net).unwrap()
    };
    let (small, big) = (build(8), build(64));
    let cfg = BenchConfig {
        batch_sizes: vec![256],
        warmup: 5,
        reps: 50,
        seed: 0,
    };
    let r = bench_inference(&small, &big, &cfg).unwrap();
    let ratio_exact = r.size_ratio == big.param_count() as f64 / small.param_count() as f64
        || r.size_ratio == small.param_count() as f64 / big.param_count() as f64;
    let s = r.points[0].speedup;
    verdict(
        s > 2.0 && ratio_exact,
        format!(
            "batch 256: speedup {s:.2}x, size ratio {:.4} ({} vs {} params)",
            r.size_ratio, r.model_params, r.baseline_params
        ),
    )
}

fn schedule_conformance() -> Verdict {
    let mut sched = PlateauSchedule::new(ScheduleConfig::default());
    let mut lr = 1e-3;
    let mut reductions = Vec::new();
    let mut stop_at = None;
    sched.update(0.5, lr);
    for stagnant in 1..=40 {
        let (next, stop) = sched.update(0.5, lr);
        if next < lr {
            reductions.push(stagnant);
        }
        lr = next;
        if stop {
            stop_at = Some((stagnant, lr));
            break;
        }
    }
    let ok = reductions.starts_with(&[5, 10, 15, 20]) && stop_at.is_some_and(|(_, lr)| lr < 1e-7);
    verdict(ok, format!("reductions at {reductions:?}, stop at {stop_at:?}"))
}

fn pareto_correctness() -> Verdict {
    let mut rng = SeededRng::new(42);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(60);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| ((1 + rng.below(30)) as f64 * 100.0, rng.below(20) as f64 / 20.0))
            .collect();
        let mut oracle: Vec<usize> = (0..n)
            .filter(|&i| {
                !pts.iter()
                    .any(|&(s, a)| s <= pts[i].0 && a >= pts[i].1 && (s < pts[i].0 || a > pts[i].1))
            })
            .collect();
        oracle.sort_by(|&a, &b| pts[a].0.total_cmp(&pts[b].0).then(a.cmp(&b)));
        if pareto_indices(&pts) != oracle {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("1000 random sets, {mismatches} mismatches"))
}

fn disabled_pruning_equivalence() -> Verdict {
    let mut cfg = TrainConfig::new(ArchSpec::mlp(8, &[12, 10], 3, true));
    cfg.penalty = PenaltyConfig::new(0.0, 1e-3, 2.0).unwrap();
    cfg.screener.threshold = f64::INFINITY;
    cfg.lr = 1e-2;
    let mut switched = Trainer::new(cfg.clone()).unwrap();
    let plain_net = fuse_network(&switched.net).unwrap().into_network();
    let mut plain = Trainer::with_network(cfg, plain_net).unwrap();
    let mut rng = SeededRng::new(77);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = rng.normal_tensor(&[32, 8]);
        let y: Vec<usize> = (0..32).map(|_| rng.below(3)).collect();
        let a = switched.step(&x, &y).unwrap();
        let b = plain.step(&x, &y).unwrap();
        worst = worst.max((a.total - b.total).abs());
        let fused = fuse_network(&switched.net).unwrap();
        for ((_, p), (_, q)) in fused.network().params().into_iter().zip(plain.net.params()) {
            worst = worst.max(p.max_abs_diff(q).unwrap());
        }
    }
    let switches_intact = switched.net.param_count(true) == switched.net.param_count(false) + 22;
    let acc_same = {
        let x = rng.normal_tensor(&[50, 8]);
        let ds = Dataset64::new(x, (0..50).map(|i| i % 3).collect(), 3).unwrap();
        accuracy(&switched.net, &ds).unwrap() == accuracy(&plain.net, &ds).unwrap()
    };
    verdict(
        worst <= 1e-9 && switches_intact && acc_same,
        format!("10 steps, max parameter/loss deviation {worst:.2e}"),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("fusion exactness", fusion_exactness),
        ("removal exactness", removal_exactness),
        ("gradient fidelity", gradient_fidelity),
        ("proposition suite", proposition_suite),
        ("shrinkage with accuracy", shrinkage_with_accuracy),
        ("covertype smoke", covertype_smoke),
        ("inference speedup", inference_speedup),
        ("schedule conformance", schedule_conformance),
        ("pareto correctness", pareto_correctness),
        ("disabled-pruning equivalence", disabled_pruning_equivalence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {} ({name}): {detail} [{secs:.1}s]", i + 1);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
