//! Experimental apparatus: scenario configs, Monte-Carlo orchestration,
//! metrics aggregation, timing benchmarks and report rendering.

pub mod bench;
pub mod config;
pub mod experiment;
pub mod report;

pub use bench::{bench_cpu, timing_csv, TimingRow};
pub use config::{bundled_scenario, load_scenario, parse_scenario, ScenarioConfig, BUNDLED};
pub use experiment::{
    checkpoints, csv_header, metrics_csv, reference_kernel, run_experiment, run_seed,
    run_single, solver_seed, trace_csv, MetricsRow, RunTrace, Scheme, SlotSample,
    CSV_SCHEMA_VERSION, DIVERGENCE_NORM,
};
pub use report::{load_thresholds, parse_metrics_csv, report, summarize, Thresholds};
