use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use smallify_core::{
    fuse_network, ArchSpec, CsvOptions, Dataset64, Error as CoreError, FusedModel64, LabelColumn, Network64, Splits,
    Standardizer, SyntheticSpec,
};
use smallify_proplab::Proposition;
use smallify_trainer::{
    bench_inference, pareto_frontier, random_search, train_with, write_records_csv, BenchConfig, EpochLog,
    SearchOptions, SearchSpace, TrainConfig,
};

use crate::exit::VerificationFailed;
use crate::{BenchArgs, DataArgs, FuseArgs, GenDataArgs, ModelArgs, SearchArgs, TrainArgs, VerifyArgs};

/// Everything needed to resume inspection of a trained network.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub network: Network64,
    /// Features must be standardized with this before prediction.
    pub standardizer: Standardizer,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub selected_epoch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TrainRecord<'a> {
    config: &'a TrainConfig,
    selected_epoch: usize,
    val_accuracy: f64,
    test_accuracy: Option<f64>,
    param_count: usize,
    layer_sizes: Vec<usize>,
    size_converged: bool,
    warning: Option<&'a str>,
    wall_clock_s: f64,
    epochs: &'a [EpochLog],
}

fn label_column(s: &str) -> LabelColumn {
    match s {
        "last" => LabelColumn::Last,
        _ => match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        },
    }
}

fn load_splits(args: &DataArgs, seed: u64) -> Result<Splits<f64>> {
    if !args.delimiter.is_ascii() {
        return Err(CoreError::Argument(format!("delimiter {:?} is not ASCII", args.delimiter)).into());
    }
    let opts = CsvOptions {
        has_header: !args.no_header,
        label: label_column(&args.label),
        delimiter: args.delimiter as u8,
    };
    let ds = Dataset64::load_csv(&args.data, &opts).with_context(|| format!("reading {}", args.data.display()))?;
    let fractions = [args.split[0], args.split[1], args.split[2]];
    Ok(ds.split_standardize(fractions, seed)?)
}

fn build_config(m: &ModelArgs) -> Result<TrainConfig> {
    let mut cfg = match (&m.config, &m.arch) {
        (Some(path), arch) => {
            let mut cfg = TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(a) = arch {
                cfg.arch = ArchSpec::load(a).with_context(|| format!("reading {}", a.display()))?;
            }
            cfg
        }
        (None, Some(a)) => TrainConfig::new(ArchSpec::load(a).with_context(|| format!("reading {}", a.display()))?),
        (None, None) => return Err(CoreError::Config("either --arch or --config is required".into()).into()),
    };
    if let Some(v) = m.lambda {
        cfg.penalty.lambda = v;
    }
    if let Some(v) = m.lambda2 {
        cfg.penalty.lambda2 = v;
    }
    if let Some(v) = m.p {
        cfg.penalty.p = v;
    }
    if let Some(v) = m.lr {
        cfg.lr = v;
    }
    if let Some(v) = m.batch {
        cfg.batch = v;
    }
    if let Some(v) = m.switch_momentum {
        cfg.screener.momentum = v;
    }
    if let Some(v) = m.switch_threshold {
        cfg.screener.threshold = v;
    }
    if let Some(v) = m.seed {
        cfg.seed = v;
    }
    if let Some(v) = m.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = m.window {
        cfg.window = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = build_config(&a.model)?;
    let splits = load_splits(&a.data, cfg.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let quiet = a.quiet;
    let out = train_with(&cfg, &splits, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.5}  val {:.4}  lr {:.1e}  sizes {:?}  params {}",
                e.epoch, e.train_loss, e.val_accuracy, e.lr, e.sizes, e.params
            );
        }
    })?;

    let checkpoint = Checkpoint {
        config: cfg.clone(),
        network: out.checkpoint.clone(),
        standardizer: splits.standardizer.clone(),
        class_names: splits.train.class_names.clone(),
        feature_names: splits.train.feature_names.clone(),
        selected_epoch: out.selected_epoch,
        val_accuracy: out.val_accuracy,
        test_accuracy: out.test_accuracy,
    };
    write_json(&a.out.join("checkpoint.json"), &checkpoint)?;
    let record = TrainRecord {
        config: &cfg,
        selected_epoch: out.selected_epoch,
        val_accuracy: out.val_accuracy,
        test_accuracy: out.test_accuracy,
        param_count: out.checkpoint.param_count(false),
        layer_sizes: out.checkpoint.switch_widths(),
        size_converged: out.size_converged,
        warning: out.warning.as_deref(),
        wall_clock_s: out.wall_clock_s,
        epochs: &out.epochs,
    };
    write_json(&a.out.join("record.json"), &record)?;
    let sizes = a.out.join("sizes.csv");
    out.history.write_csv(BufWriter::new(
        fs::File::create(&sizes).with_context(|| format!("creating {}", sizes.display()))?,
    ))?;

    if let Some(w) = &out.warning {
        eprintln!("warning: {w}");
    }
    println!(
        "selected epoch {}  val {:.4}  test {}  params {}  sizes {:?}",
        out.selected_epoch,
        out.val_accuracy,
        out.test_accuracy.map_or("-".into(), |t| format!("{t:.4}")),
        record.param_count,
        record.layer_sizes
    );
    Ok(())
}

pub fn search(a: &SearchArgs) -> Result<()> {
    let base = build_config(&a.model)?;
    let mut space = match &a.space {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SearchSpace>(&text).map_err(|e| CoreError::Config(format!("search space: {e}")))?
        }
        None => SearchSpace::default(),
    };
    if let Some(t) = a.trials {
        space.trials = t;
    }
    if let Some(s) = a.model.seed {
        space.seed = s;
    }
    if let Some(w) = a.width_factor {
        space.width_factor = w;
    }
    let splits = load_splits(&a.data, space.seed)?;
    fs::create_dir_all(a.out.join("models")).with_context(|| format!("creating {}", a.out.display()))?;
    let jsonl = a.out.join("trials.jsonl");
    if jsonl.exists() {
        fs::remove_file(&jsonl)?;
    }
    let opts = SearchOptions {
        threads: a.threads,
        jsonl: Some(jsonl),
        latency_batch: (a.latency_batch > 0).then_some(a.latency_batch),
        ..SearchOptions::default()
    };
    let out = random_search(&space, &base, &splits, &opts)?;
    write_json(&a.out.join("records.json"), &out.records)?;
    write_records_csv(
        &out.records,
        BufWriter::new(fs::File::create(a.out.join("records.csv"))?),
    )?;
    let frontier = pareto_frontier(&out.records);
    write_records_csv(&frontier, BufWriter::new(fs::File::create(a.out.join("pareto.csv"))?))?;
    for rec in &frontier {
        if let Some(model) = &out.models[rec.config.trial] {
            model.save(
                &a.out.join("models").join(format!("trial-{:03}.smlf", rec.config.trial)),
                8,
            )?;
        }
    }

    let failed = out.records.iter().filter(|r| r.error.is_some()).count();
    println!("{} trials, {failed} failed; Pareto frontier:", out.records.len());
    for r in &frontier {
        println!(
            "  trial {:>3}  params {:>8}  accuracy {:.4}  sizes {:?}",
            r.config.trial,
            r.param_count,
            r.accuracy().unwrap_or(f64::NAN),
            r.layer_sizes
        );
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CoreError::Format(format!("{} is not a checkpoint: {e}", path.display())))?;
    ck.network.validate()?;
    Ok(ck)
}

pub fn fuse(a: &FuseArgs) -> Result<()> {
    let ck = load_checkpoint(&a.input)?;
    let fused = fuse_network(&ck.network)?;
    let width = if a.f32 { 4 } else { 8 };
    fused
        .save(&a.out, width)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "params {} -> {} (switches removed), written {}",
        ck.network.param_count(true),
        fused.param_count(),
        a.out.display()
    );
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let model = FusedModel64::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let baseline = FusedModel64::load(&a.baseline).with_context(|| format!("reading {}", a.baseline.display()))?;
    let cfg = BenchConfig {
        batch_sizes: a.batch_sizes.clone(),
        warmup: a.warmup,
        reps: a.reps,
        seed: a.seed,
    };
    let report = bench_inference(&model, &baseline, &cfg)?;
    println!(
        "params {} vs {} (size ratio {:.3})",
        report.model_params, report.baseline_params, report.size_ratio
    );
    for p in &report.points {
        println!(
            "  batch {:>5}  model {:.3e}s  baseline {:.3e}s  speedup {:.2}x",
            p.batch, p.model_s, p.baseline_s, p.speedup
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn verify_props(a: &VerifyArgs) -> Result<()> {
    let which = match a.prop.as_str() {
        "all" => None,
        s => Some(s.parse::<Proposition>()?),
    };
    let outcomes = smallify_proplab::run(which, a.seed, a.trials)?;
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{} prop {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.proposition,
            o.summary
        );
        if let Some(d) = &o.dump {
            println!("{d}");
        }
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        bail!(VerificationFailed(failed));
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let mut spec: SyntheticSpec = toml::from_str(&text).map_err(|e| CoreError::Config(format!("dataset spec: {e}")))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = spec.generate::<f64>()?;
    ds.save_csv(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} rows, {} features, {} classes -> {}",
        ds.len(),
        ds.num_features(),
        ds.num_classes(),
        a.out.display()
    );
    Ok(())
}
