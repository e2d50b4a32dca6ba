//! Experiment orchestration: client sampling, the round loop, evaluation,
//! metrics artifacts and the convergence-bound calculator.

pub mod bound;
pub mod config;
pub mod engine;
pub mod evaluate;
pub mod metrics;
pub mod sampling;

pub use bound::{theorem_bound, BoundParams, BoundReport};
pub use config::{DataConfig, DataSource, EvalConfig, PartitionSpec, SimConfig, WeightScheme};
pub use engine::{
    partition_report, prepare, run_federation, run_simulation, settings_for, simulate_to_dir, Federation, Prepared,
    RunOutcome, RunSettings,
};
pub use evaluate::{evaluate, Evaluation, Evaluator, PoolEvaluator};
pub use metrics::{emit_metrics, read_metrics_csv, read_summary, tail_average, write_csv, MetricsFormat, RoundMetrics, RunSummary};
pub use sampling::sample_clients;
