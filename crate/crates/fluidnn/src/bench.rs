//! Policy × availability matrix over the emulated cluster.

use std::fmt;
use std::fmt::Write as _;

use fluidnn_runtime::emulated::{Action, Device, EmuConfig};
use fluidnn_runtime::failover::{Phase, Policy};
use fluidnn_runtime::Mode;

use crate::error::Result;
use crate::run::{Harness, ScenarioRun, Transport};
use crate::scenario::{ScenarioEvent, ScenarioScript};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Availability {
    Both,
    /// The worker is killed as soon as the cluster forms.
    MasterOnly,
    /// The master is killed as soon as the cluster forms.
    WorkerOnly,
}

impl Availability {
    pub const ALL: [Availability; 3] = [Availability::Both, Availability::MasterOnly, Availability::WorkerOnly];

    pub fn name(self) -> &'static str {
        match self {
            Availability::Both => "both",
            Availability::MasterOnly => "master-only",
            Availability::WorkerOnly => "worker-only",
        }
    }

    /// State whose answers the row reports.
    pub fn phase(self, mode: Mode) -> Phase {
        match (self, mode) {
            (Availability::Both, Mode::Ha) => Phase::HaBoth,
            (Availability::Both, Mode::Ht) => Phase::HtBoth,
            (Availability::MasterOnly, _) => Phase::MasterOnly,
            (Availability::WorkerOnly, _) => Phase::WorkerOnly,
        }
    }
}

impl fmt::Display for Availability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub policy: Policy,
    pub availability: Availability,
    pub mode: Mode,
    /// Steady-state images/s in the reported state; 0 if it was never reached.
    pub throughput_ips: f64,
    pub accuracy: Option<f64>,
    pub specs: Vec<String>,
    pub final_state: Phase,
    /// Images answered after the system left its initial both-online state.
    pub served_after_failure: usize,
    pub completed: usize,
    pub failed: usize,
}

/// Mode used with both devices online: fluid runs independently (HT), the
/// others split each batch (HA).
pub fn bench_mode(policy: Policy) -> Mode {
    if policy.allows(Mode::Ht) {
        Mode::Ht
    } else {
        Mode::Ha
    }
}

pub fn bench_script(availability: Availability, images: Option<usize>) -> ScenarioScript {
    let kill = |d| {
        vec![ScenarioEvent {
            t_ms: 0,
            action: Action::Kill(d),
        }]
    };
    ScenarioScript {
        events: match availability {
            Availability::Both => Vec::new(),
            Availability::MasterOnly => kill(Device::Worker),
            Availability::WorkerOnly => kill(Device::Master),
        },
        images,
        ..ScenarioScript::default()
    }
}

pub fn bench_row(policy: Policy, availability: Availability, mode: Mode, run: &ScenarioRun) -> BenchRow {
    let r = &run.report;
    let agg = r.state(availability.phase(mode));
    let left_both = run
        .trace
        .timeline
        .iter()
        .find(|(_, s)| !s.phase.is_both())
        .map(|(t, _)| *t);
    let served_after_failure = left_both.map_or(0, |t0| {
        run.trace.answers.iter().filter(|a| a.at_ms >= t0).map(|a| a.count).sum()
    });
    BenchRow {
        policy,
        availability,
        mode,
        throughput_ips: agg.and_then(|a| a.steady_ips).unwrap_or(0.0),
        accuracy: agg.and_then(|a| a.accuracy),
        specs: agg.map(|a| a.specs.clone()).unwrap_or_default(),
        final_state: run.trace.timeline.last().map_or(Phase::Init, |(_, s)| s.phase),
        served_after_failure,
        completed: r.counts.completed,
        failed: r.counts.failed,
    }
}

/// Runs the nine scenarios in policy-major order.
pub fn bench(h: &mut Harness, base: &EmuConfig, images: Option<usize>) -> Result<Vec<BenchRow>> {
    let transport = Transport::Emulated(base.clone());
    let mut rows = Vec::new();
    for policy in Policy::ALL {
        for availability in Availability::ALL {
            let mode = bench_mode(policy);
            let run = h.run_scenario(&bench_script(availability, images), policy, mode, &transport)?;
            rows.push(bench_row(policy, availability, mode, &run));
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<8} {:<12} {:<4} {:>12} {:>9} {:<8} {:<12} {:>9} {:>7}\n",
        "policy", "online", "mode", "images/s", "accuracy", "specs", "final", "completed", "failed"
    );
    for r in rows {
        let acc = r.accuracy.map_or_else(|| "-".to_owned(), |a| format!("{a:.4}"));
        let specs = if r.specs.is_empty() { "-".to_owned() } else { r.specs.join("+") };
        let _ = writeln!(
            out,
            "{:<8} {:<12} {:<4} {:>12.1} {:>9} {:<8} {:<12} {:>9} {:>7}",
            r.policy.name(),
            r.availability.name(),
            r.mode,
            r.throughput_ips,
            acc,
            specs,
            r.final_state.name(),
            r.completed,
            r.failed
        );
    }
    out
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("policy,online,mode,throughput_ips,accuracy,specs,final_state,completed,failed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.policy.name(),
            r.availability.name(),
            r.mode,
            r.throughput_ips,
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.specs.join("+"),
            r.final_state.name(),
            r.completed,
            r.failed
        );
    }
    out
}
