//! Command-line harness around the fluid model and its two-device runtime:
//! scripted fault injection, windowed throughput and accuracy, the
//! policy/availability benchmark and report files.

pub mod analytic;
pub mod bench;
pub mod error;
pub mod metrics;
pub mod report;
pub mod run;
pub mod scenario;
pub mod settings;

pub use analytic::analytic_throughput;
pub use bench::{bench, format_table, Availability, BenchRow};
pub use error::{HarnessError, Result};
pub use metrics::{compute_metrics, MetricsReport, Trace, Window, WINDOW_MS};
pub use report::{emit_report, from_json_lines, to_csv, to_json_lines, Format};
pub use run::{run_scenario, Harness, ScenarioRun, SocketSettings, Transport};
pub use scenario::{parse_scenario, ScenarioEvent, ScenarioScript, Source};
pub use settings::Settings;
