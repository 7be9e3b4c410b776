pub mod agent;
pub mod analytics;
pub mod artifact;
pub mod clock;
pub mod container;
pub mod deploy;
pub mod loadgen;
pub mod metric;
pub mod mocksut;
pub mod numeric;
pub mod orchestrator;
pub mod plan;
pub mod power;
pub mod sim;
pub mod stats;
pub mod store;
pub mod synth;

pub use analytics::{compare, ComparePolicy, ComparisonReport, RunSummary, Verdict};
pub use orchestrator::Orchestrator;
pub use plan::TestPlan;
pub use store::RunStore;

pub type FiveNumberSummary = stats::FiveNumber<f64>;
pub type RankSumResult = stats::RankSum<f64>;
pub type ShareSnapshot = container::CpuShareSnapshot<f64>;
pub type PowerAttribution = container::Attribution<f64>;
