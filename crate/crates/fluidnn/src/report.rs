//! CSV and JSON-lines report files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::metrics::{Counts, MetricsReport, StateAggregate, Window};

pub const CSV_HEADER: &str = "window_start_ms,throughput_ips,accuracy,state,specs";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    JsonLines,
}

impl FromStr for Format {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json-lines" | "jsonl" => Ok(Format::JsonLines),
            _ => Err(HarnessError::Usage(format!("unknown report format {s:?}; use csv or json-lines"))),
        }
    }
}

/// Windows only; aggregates and the event log live in the JSON-lines form.
pub fn to_csv(report: &MetricsReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for w in &report.windows {
        let acc = w.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            w.window_start_ms,
            w.throughput_ips,
            acc,
            w.state,
            w.specs.join("+")
        );
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Meta { window_ms: u64 },
    Window(Window),
    State(StateAggregate),
    Event { line: String },
    Counts(Counts),
}

pub fn to_json_lines(report: &MetricsReport) -> String {
    let mut lines = vec![Line::Meta {
        window_ms: report.window_ms,
    }];
    lines.extend(report.windows.iter().cloned().map(Line::Window));
    lines.extend(report.states.iter().cloned().map(Line::State));
    lines.extend(report.events.iter().map(|l| Line::Event { line: l.clone() }));
    lines.push(Line::Counts(report.counts));
    let mut out = String::new();
    for l in &lines {
        out.push_str(&serde_json::to_string(l).expect("report lines serialize"));
        out.push('\n');
    }
    out
}

pub fn from_json_lines(text: &str) -> Result<MetricsReport> {
    let mut r = MetricsReport::default();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| HarnessError::Report {
            line: i + 1,
            message: e.to_string(),
        })?;
        match line {
            Line::Meta { window_ms } => r.window_ms = window_ms,
            Line::Window(w) => r.windows.push(w),
            Line::State(s) => r.states.push(s),
            Line::Event { line } => r.events.push(line),
            Line::Counts(c) => r.counts = c,
        }
    }
    Ok(r)
}

pub fn render(report: &MetricsReport, format: Format) -> String {
    match format {
        Format::Csv => to_csv(report),
        Format::JsonLines => to_json_lines(report),
    }
}

pub fn emit_report(report: &MetricsReport, path: &Path, format: Format) -> Result<()> {
    std::fs::write(path, render(report, format))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(to_csv(&MetricsReport::default()), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_rows() {
        let r = MetricsReport {
            window_ms: 500,
            windows: vec![
                Window {
                    window_start_ms: 0,
                    throughput_ips: 256.0,
                    accuracy: Some(0.984375),
                    state: "HT_BOTH".into(),
                    specs: vec!["W50".into(), "U50".into()],
                },
                Window {
                    window_start_ms: 500,
                    throughput_ips: 0.0,
                    accuracy: None,
                    state: "HALTED".into(),
                    specs: vec![],
                },
            ],
            ..MetricsReport::default()
        };
        assert_eq!(
            to_csv(&r),
            format!("{CSV_HEADER}\n0,256,0.984375,HT_BOTH,W50+U50\n500,0,,HALTED,\n")
        );
    }

    #[test]
    fn bad_json_line_is_located() {
        match from_json_lines("{\"kind\":\"meta\",\"window_ms\":500}\n{oops}\n") {
            Err(HarnessError::Report { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
