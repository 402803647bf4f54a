//! Single-threaded inference latency.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use smallify_core::{Error, FusedModel, Result, Scalar, SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    /// Untimed calls before measuring, at least 5.
    pub warmup: usize,
    /// Timed calls per batch size, at least 50; the median is reported.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_sizes: vec![1, 32, 256],
            warmup: 5,
            reps: 50,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 5 || self.reps < 50 {
            return Err(Error::Config(format!(
                "need at least 5 warmup and 50 timed repetitions, got {} and {}",
                self.warmup, self.reps
            )));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub batch: usize,
    /// Median seconds per call.
    pub model_s: f64,
    pub baseline_s: f64,
    /// `baseline_s / model_s`
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_params: usize,
    pub baseline_params: usize,
    /// `baseline_params / model_params`
    pub size_ratio: f64,
    pub points: Vec<LatencyPoint>,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn input<S: Scalar>(model: &FusedModel<S>, batch: usize, seed: u64) -> Tensor<S> {
    let mut shape = vec![batch];
    shape.extend_from_slice(model.input_shape());
    SeededRng::new(seed).normal_tensor(&shape)
}

fn time_call<S: Scalar>(model: &FusedModel<S>, x: &Tensor<S>) -> Result<f64> {
    let t = Instant::now();
    let y = model.predict(x)?;
    let dt = t.elapsed().as_secs_f64();
    std::hint::black_box(y);
    Ok(dt)
}

/// Median latency of `model` on a random batch.
pub fn measure_latency<S: Scalar>(
    model: &FusedModel<S>,
    batch: usize,
    warmup: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let x = input(model, batch, seed);
    for _ in 0..warmup {
        time_call(model, &x)?;
    }
    let mut times = (0..reps.max(1))
        .map(|_| time_call(model, &x))
        .collect::<Result<Vec<_>>>()?;
    Ok(median(&mut times))
}

/// Times both models on identical inputs, alternating calls so drift hits both equally.
pub fn bench_inference<S: Scalar>(
    model: &FusedModel<S>,
    baseline: &FusedModel<S>,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    cfg.validate()?;
    if model.input_shape() != baseline.input_shape() {
        return Err(Error::Argument(format!(
            "input shapes differ: {:?} vs {:?}",
            model.input_shape(),
            baseline.input_shape()
        )));
    }
    let mut points = Vec::new();
    for &batch in &cfg.batch_sizes {
        let x = input(model, batch, cfg.seed);
        for _ in 0..cfg.warmup {
            time_call(model, &x)?;
            time_call(baseline, &x)?;
        }
        let mut a = Vec::with_capacity(cfg.reps);
        let mut b = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            a.push(time_call(model, &x)?);
            b.push(time_call(baseline, &x)?);
        }
        let (model_s, baseline_s) = (median(&mut a), median(&mut b));
        points.push(LatencyPoint {
            batch,
            model_s,
            baseline_s,
            speedup: baseline_s / model_s,
        });
    }
    let (mp, bp) = (model.param_count(), baseline.param_count());
    Ok(BenchReport {
        model_params: mp,
        baseline_params: bp,
        size_ratio: bp as f64 / mp as f64,
        points,
    })
}
