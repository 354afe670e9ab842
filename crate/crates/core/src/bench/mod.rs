//! Sort benchmark workloads and the scaling harness.

pub mod data;
pub mod harness;
pub mod record;

pub use data::{sample_split_points, sort_records, teragen, teravalidate, SplitPoints, ValidationReport};
pub use harness::{scaling_run, BenchOptions, BenchPhase, BenchReport, LocalBackend, PlanEntry, TimingRow, Workload};
pub use record::{record_for, Record, KEY_LEN, RECORD_LEN};
