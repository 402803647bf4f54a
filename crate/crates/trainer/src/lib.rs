//! Training with in-flight channel removal, random search, Pareto selection
//! and inference benchmarking.

pub mod bench;
pub mod config;
pub mod pareto;
pub mod search;
pub mod train;

pub use bench::{bench_inference, measure_latency, BenchConfig, BenchReport, LatencyPoint};
pub use config::TrainConfig;
pub use pareto::pareto_indices;
pub use search::{
    pareto_frontier, random_search, write_records_csv, SearchOptions, SearchOutcome, SearchSpace, TrialConfig,
    TrialRecord,
};
pub use train::{accuracy, train, train_with, EpochLog, TrainOutcome, Trainer};
