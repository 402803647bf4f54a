//! Random hyperparameter search over independent, parallel trials.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use smallify_core::{fuse_network, Error, FusedModel64, Result, SeededRng, Splits};

use crate::bench::measure_latency;
use crate::config::TrainConfig;
use crate::pareto::pareto_indices;
use crate::train::train;

/// Ranges sampled per trial. `lr`, `lambda` and `lambda2` are log-uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub lr: (f64, f64),
    pub lambda: (f64, f64),
    pub lambda2: (f64, f64),
    pub batch: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Hidden widths of the base architecture are multiplied by this.
    pub width_factor: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: (1e-4, 1e-2),
            lambda: (1e-6, 1e-2),
            lambda2: (1e-6, 1e-3),
            batch: vec![32, 64, 128, 256],
            trials: 20,
            seed: 0,
            width_factor: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trial: usize,
    pub lr: f64,
    pub lambda: f64,
    pub lambda2: f64,
    pub batch: usize,
    pub seed: u64,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("lr", self.lr), ("lambda", self.lambda), ("lambda2", self.lambda2)] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} range ({lo}, {hi}) must be positive and ordered"
                )));
            }
        }
        if self.batch.is_empty() || self.batch.contains(&0) {
            return Err(Error::Config("batch choices must be non-empty and positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("need at least one trial".into()));
        }
        if !(self.width_factor > 0.0) {
            return Err(Error::Config(format!(
                "width factor {} must be positive",
                self.width_factor
            )));
        }
        Ok(())
    }

    /// Configuration of trial `index`; depends only on the base seed and the index.
    pub fn sample(&self, index: usize) -> TrialConfig {
        let mut rng = SeededRng::new(self.seed).split(index as u64);
        TrialConfig {
            trial: index,
            lr: rng.log_uniform(self.lr.0, self.lr.1),
            lambda: rng.log_uniform(self.lambda.0, self.lambda.1),
            lambda2: rng.log_uniform(self.lambda2.0, self.lambda2.1),
            batch: self.batch[rng.below(self.batch.len())],
            seed: self.seed.wrapping_add(index as u64),
        }
    }
}

/// Outcome of one trial. Failed trials carry `error` and no accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: TrialConfig,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Parameters at the selected epoch, switches excluded.
    pub param_count: usize,
    pub layer_sizes: Vec<usize>,
    pub selected_epoch: Option<usize>,
    pub epochs_run: usize,
    pub size_converged: bool,
    pub warning: Option<String>,
    pub wall_clock_s: f64,
    /// Median single-threaded latency of the fused model, seconds.
    pub latency_s: Option<f64>,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Test accuracy, or validation accuracy when there is no test split.
    pub fn accuracy(&self) -> Option<f64> {
        self.test_accuracy.or(self.val_accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Worker threads; 0 means one per available core.
    pub threads: usize,
    /// Append one JSON line per finished trial.
    pub jsonl: Option<PathBuf>,
    /// Batch size for the per-trial latency measurement; `None` skips it.
    pub latency_batch: Option<usize>,
    pub latency_warmup: usize,
    pub latency_reps: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            threads: 0,
            jsonl: None,
            latency_batch: None,
            latency_warmup: 5,
            latency_reps: 50,
        }
    }
}

pub struct SearchOutcome {
    /// In trial order.
    pub records: Vec<TrialRecord>,
    /// Fused selected checkpoint of each successful trial.
    pub models: Vec<Option<FusedModel64>>,
}

fn run_trial(
    tc: TrialConfig,
    base: &TrainConfig,
    space: &SearchSpace,
    splits: &Splits<f64>,
) -> (TrialRecord, Option<FusedModel64>) {
    let mut cfg = base.clone();
    cfg.arch = base.arch.scaled(space.width_factor);
    cfg.lr = tc.lr;
    cfg.penalty.lambda = tc.lambda;
    cfg.penalty.lambda2 = tc.lambda2;
    cfg.batch = tc.batch;
    cfg.seed = tc.seed;
    let failed = |msg: String| TrialRecord {
        config: tc,
        val_accuracy: None,
        test_accuracy: None,
        param_count: 0,
        layer_sizes: vec![],
        selected_epoch: None,
        epochs_run: 0,
        size_converged: false,
        warning: None,
        wall_clock_s: 0.0,
        latency_s: None,
        error: Some(msg),
    };
    let result = catch_unwind(AssertUnwindSafe(|| {
        let out = train(&cfg, splits)?;
        let fused = fuse_network(&out.checkpoint)?;
        Ok::<_, Error>((out, fused))
    }));
    match result {
        Ok(Ok((out, fused))) => (
            TrialRecord {
                config: tc,
                val_accuracy: Some(out.val_accuracy),
                test_accuracy: out.test_accuracy,
                param_count: out.checkpoint.param_count(false),
                layer_sizes: out.checkpoint.switch_widths(),
                selected_epoch: Some(out.selected_epoch),
                epochs_run: out.epochs.len(),
                size_converged: out.size_converged,
                warning: out.warning,
                wall_clock_s: out.wall_clock_s,
                latency_s: None,
                error: None,
            },
            Some(fused),
        ),
        Ok(Err(e)) => (failed(e.to_string()), None),
        Err(_) => (failed("trial panicked".into()), None),
    }
}

type TrialSlot = (TrialRecord, Option<FusedModel64>);

/// Trains `space.trials` configurations in parallel, then measures latencies
/// one model at a time.
pub fn random_search(
    space: &SearchSpace,
    base: &TrainConfig,
    splits: &Splits<f64>,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    space.validate()?;
    base.validate()?;
    let threads = match opts.threads {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
    .min(space.trials);
    let mut sink = match &opts.jsonl {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<TrialSlot>>> = Mutex::new(vec![None; space.trials]);
    let write_err: Mutex<Option<std::io::Error>> = Mutex::new(None);
    let sink_lock = Mutex::new(&mut sink);

    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= space.trials {
                    break;
                }
                let (rec, model) = run_trial(space.sample(i), base, space, splits);
                if let Some(f) = sink_lock.lock().expect("sink").as_mut() {
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                        write_err.lock().expect("err").get_or_insert(e);
                    }
                }
                slots.lock().expect("slots")[i] = Some((rec, model));
            });
        }
    });
    if let Some(e) = write_err.into_inner().expect("err") {
        return Err(e.into());
    }

    let (mut records, models): (Vec<_>, Vec<_>) = slots
        .into_inner()
        .expect("slots")
        .into_iter()
        .map(|s| s.expect("every trial ran"))
        .unzip();
    if let Some(batch) = opts.latency_batch {
        for (rec, model) in records.iter_mut().zip(&models) {
            if let Some(m) = model {
                rec.latency_s = Some(measure_latency(m, batch, opts.latency_warmup, opts.latency_reps, 0)?);
            }
        }
    }
    Ok(SearchOutcome { records, models })
}

/// Successful records on the size/accuracy frontier, smallest first.
pub fn pareto_frontier(records: &[TrialRecord]) -> Vec<TrialRecord> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .map(|r| match (r.error.as_ref(), r.accuracy()) {
            (None, Some(a)) => (r.param_count as f64, a),
            _ => (f64::NAN, f64::NAN),
        })
        .collect();
    pareto_indices(&points)
        .into_iter()
        .map(|i| records[i].clone())
        .collect()
}

/// CSV with one row per record: configuration, size and accuracies.
pub fn write_records_csv<W: Write>(records: &[TrialRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    wr.write_record([
        "trial",
        "param_count",
        "test_accuracy",
        "val_accuracy",
        "layer_sizes",
        "lr",
        "lambda",
        "lambda2",
        "batch",
        "seed",
        "latency_s",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let c = &r.config;
        wr.write_record([
            c.trial.to_string(),
            r.param_count.to_string(),
            opt(r.test_accuracy),
            opt(r.val_accuracy),
            r.layer_sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            c.lr.to_string(),
            c.lambda.to_string(),
            c.lambda2.to_string(),
            c.batch.to_string(),
            c.seed.to_string(),
            opt(r.latency_s),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}
