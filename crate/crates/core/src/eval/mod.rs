//! Metrics, seasonal baselines, the ablation harness and report tables.

mod ablation;
pub mod baselines;
mod metrics;
mod report;

pub use ablation::{relative_change, run_ablation, AblationRow, AblationTable, MetricSummary};
pub use baselines::{
    baseline_forecasts, historical_average, naive_seasonal, Baseline, BaselineForecasts,
};
pub use metrics::{metrics, HorizonMetrics, MetricsReport};
pub use report::{ComparisonReport, MethodRow};
