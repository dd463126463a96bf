//! Windowed throughput and accuracy over a scenario trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use fluidnn_core::model::SubnetId;
use fluidnn_runtime::emulated::{Device, EmuRun};
use fluidnn_runtime::failover::{Phase, RuntimeState};
use fluidnn_runtime::{ErrorCode, LogRecord};

pub const WINDOW_MS: u64 = 500;

/// One answered batch. Times are milliseconds since the cluster formed.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub at_ms: f64,
    pub first: usize,
    pub count: usize,
    pub labels: Vec<u8>,
    pub spec: SubnetId,
    pub device: Device,
}

/// One batch that was given up on.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub at_ms: f64,
    pub first: usize,
    pub count: usize,
    pub code: ErrorCode,
}

/// What a scenario run observed, independent of the transport.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub answers: Vec<Answer>,
    pub rejections: Vec<Rejection>,
    /// System state changes, starting at time 0.
    pub timeline: Vec<(f64, RuntimeState)>,
    pub log: Vec<LogRecord>,
    pub submitted: usize,
    pub in_flight: usize,
    pub end_ms: f64,
}

impl From<&EmuRun> for Trace {
    fn from(r: &EmuRun) -> Self {
        let ms = |us: u64| us as f64 / 1000.0;
        Self {
            answers: r
                .completions
                .iter()
                .map(|c| Answer {
                    at_ms: ms(c.at_us),
                    first: c.first,
                    count: c.count,
                    labels: c.labels.clone(),
                    spec: c.route.spec(),
                    device: c.device,
                })
                .collect(),
            rejections: r
                .failures
                .iter()
                .map(|f| Rejection {
                    at_ms: ms(f.at_us),
                    first: f.first,
                    count: f.count,
                    code: f.code,
                })
                .collect(),
            timeline: r.timeline.iter().map(|&(t, s)| (ms(t), s)).collect(),
            log: r.log.clone(),
            submitted: r.submitted_images,
            in_flight: r.in_flight_images,
            end_ms: ms(r.end_us),
        }
    }
}

impl Trace {
    /// System state in effect at `t_ms`.
    pub fn state_at(&self, t_ms: f64) -> Option<RuntimeState> {
        self.timeline.iter().take_while(|(t, _)| *t <= t_ms).last().map(|(_, s)| *s)
    }

    fn correct(answer: &Answer, truth: &[u8]) -> usize {
        answer
            .labels
            .iter()
            .zip(&truth[answer.first..answer.first + answer.count])
            .filter(|(a, b)| a == b)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub window_start_ms: u64,
    pub throughput_ips: f64,
    /// `None` when nothing completed in the window.
    pub accuracy: Option<f64>,
    pub state: String,
    pub specs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAggregate {
    pub state: String,
    pub duration_ms: f64,
    pub images: usize,
    pub correct: usize,
    /// Images answered while in the state over the time spent in it.
    pub throughput_ips: f64,
    /// Images after the first answer over the span between the first and
    /// last answers; excludes start-up and redirect gaps.
    pub steady_ips: Option<f64>,
    pub accuracy: Option<f64>,
    pub specs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Counts {
    pub submitted: usize,
    pub completed: usize,
    pub failed: usize,
    pub in_flight: usize,
}

impl Counts {
    pub fn conserved(&self) -> bool {
        self.submitted == self.completed + self.failed + self.in_flight
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub window_ms: u64,
    pub windows: Vec<Window>,
    pub states: Vec<StateAggregate>,
    pub events: Vec<String>,
    pub counts: Counts,
}

impl MetricsReport {
    pub fn state(&self, phase: Phase) -> Option<&StateAggregate> {
        self.states.iter().find(|s| s.state == phase.name())
    }
}

fn spec_names(specs: impl IntoIterator<Item = SubnetId>) -> Vec<String> {
    let mut v: Vec<SubnetId> = specs.into_iter().collect();
    v.sort_by_key(|s| s.index());
    v.dedup();
    v.into_iter().map(|s| s.name().to_owned()).collect()
}

/// Builds the report; `truth[i]` is the label of input `i`.
pub fn compute_metrics(trace: &Trace, truth: &[u8], window_ms: u64) -> MetricsReport {
    let window_ms = window_ms.max(1);
    let end = trace.end_ms.max(0.0);
    // State intervals clipped to [0, end].
    let mut spans: Vec<(f64, f64, RuntimeState)> = Vec::new();
    for (i, &(t, s)) in trace.timeline.iter().enumerate() {
        let next = trace.timeline.get(i + 1).map_or(end, |(n, _)| *n);
        let (a, b) = (t.clamp(0.0, end), next.clamp(0.0, end));
        if b > a || (spans.is_empty() && i + 1 == trace.timeline.len()) {
            spans.push((a, b, s));
        }
    }

    let n_windows = (end / window_ms as f64).ceil() as u64;
    let mut windows = Vec::with_capacity(n_windows as usize);
    for w in 0..n_windows {
        let (lo, hi) = ((w * window_ms) as f64, ((w + 1) * window_ms) as f64);
        let in_window: Vec<&Answer> =
            trace.answers.iter().filter(|a| a.at_ms >= lo && a.at_ms < hi).collect();
        let images: usize = in_window.iter().map(|a| a.count).sum();
        let correct: usize = in_window.iter().map(|a| Trace::correct(a, truth)).sum();
        let mut dwell: BTreeMap<Phase, (f64, RuntimeState)> = BTreeMap::new();
        for &(a, b, s) in &spans {
            let overlap = b.min(hi) - a.max(lo);
            if overlap > 0.0 || (a >= lo && a < hi) {
                let e = dwell.entry(s.phase).or_insert((0.0, s));
                e.0 += overlap.max(0.0);
            }
        }
        let dominant = dwell
            .values()
            .max_by(|x, y| x.0.total_cmp(&y.0))
            .map(|&(_, s)| s)
            .or_else(|| trace.state_at(lo));
        let specs = if in_window.is_empty() {
            dominant.map(|s| spec_names(s.spec_names())).unwrap_or_default()
        } else {
            spec_names(in_window.iter().map(|a| a.spec))
        };
        windows.push(Window {
            window_start_ms: w * window_ms,
            throughput_ips: images as f64 * 1000.0 / window_ms as f64,
            accuracy: (images > 0).then(|| correct as f64 / images as f64),
            state: dominant.map_or_else(|| Phase::Init.name().to_owned(), |s| s.phase.name().to_owned()),
            specs,
        });
    }

    let mut states = Vec::new();
    for phase in Phase::ALL {
        let mine: Vec<&(f64, f64, RuntimeState)> = spans.iter().filter(|s| s.2.phase == phase).collect();
        if mine.is_empty() {
            continue;
        }
        let duration_ms: f64 = mine.iter().map(|(a, b, _)| b - a).sum();
        let answers: Vec<&Answer> = trace
            .answers
            .iter()
            .filter(|a| trace.state_at(a.at_ms).is_some_and(|s| s.phase == phase))
            .collect();
        let images: usize = answers.iter().map(|a| a.count).sum();
        let correct: usize = answers.iter().map(|a| Trace::correct(a, truth)).sum();
        let steady_ips = match (answers.first(), answers.last()) {
            (Some(f), Some(l)) if l.at_ms > f.at_ms => Some((images - f.count) as f64 * 1000.0 / (l.at_ms - f.at_ms)),
            _ => None,
        };
        let specs = if answers.is_empty() {
            spec_names(mine.iter().flat_map(|s| s.2.spec_names()))
        } else {
            spec_names(answers.iter().map(|a| a.spec))
        };
        states.push(StateAggregate {
            state: phase.name().to_owned(),
            duration_ms,
            images,
            correct,
            throughput_ips: if duration_ms > 0.0 { images as f64 * 1000.0 / duration_ms } else { 0.0 },
            steady_ips,
            accuracy: (images > 0).then(|| correct as f64 / images as f64),
            specs,
        });
    }

    MetricsReport {
        window_ms,
        windows,
        states,
        events: trace.log.iter().map(|r| r.to_string()).collect(),
        counts: Counts {
            submitted: trace.submitted,
            completed: trace.answers.iter().map(|a| a.count).sum(),
            failed: trace.rejections.iter().map(|r| r.count).sum(),
            in_flight: trace.in_flight,
        },
    }
}

/// Spec the system state says produced an answer from `device` at `t_ms`.
pub fn claimed_spec(trace: &Trace, t_ms: f64, device: Device) -> Option<SubnetId> {
    let (m, w) = trace.state_at(t_ms)?.active_specs();
    match device {
        Device::Master => m.or(w),
        Device::Worker => w.or(m),
    }
}

/// Accuracy each window should show if every answer came from the spec the
/// state timeline names, evaluated offline on the same images.
/// `offline(spec, first, count)` returns that spec's predicted labels.
pub fn expected_window_accuracy(
    trace: &Trace,
    truth: &[u8],
    window_ms: u64,
    mut offline: impl FnMut(SubnetId, usize, usize) -> Vec<u8>,
) -> Vec<Option<f64>> {
    let window_ms = window_ms.max(1);
    let n = (trace.end_ms.max(0.0) / window_ms as f64).ceil() as u64;
    (0..n)
        .map(|w| {
            let (lo, hi) = ((w * window_ms) as f64, ((w + 1) * window_ms) as f64);
            let (mut images, mut correct) = (0usize, 0usize);
            for a in trace.answers.iter().filter(|a| a.at_ms >= lo && a.at_ms < hi) {
                images += a.count;
                if let Some(spec) = claimed_spec(trace, a.at_ms, a.device) {
                    let labels = offline(spec, a.first, a.count);
                    correct += labels.iter().zip(&truth[a.first..a.first + a.count]).filter(|(p, t)| p == t).count();
                }
            }
            (images > 0).then(|| correct as f64 / images as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use fluidnn_runtime::failover::Policy;

    fn st(phase: Phase) -> RuntimeState {
        RuntimeState {
            policy: Policy::Fluid,
            phase,
            mode: fluidnn_runtime::Mode::Ha,
        }
    }

    fn answer(at_ms: f64, first: usize, labels: Vec<u8>, spec: SubnetId) -> Answer {
        Answer {
            at_ms,
            first,
            count: labels.len(),
            labels,
            spec,
            device: Device::Master,
        }
    }

    #[test]
    fn windows_states_and_counts() {
        let truth = vec![1u8, 2, 3, 4, 5, 6];
        let trace = Trace {
            answers: vec![
                answer(100.0, 0, vec![1, 2], SubnetId::W100),
                answer(400.0, 2, vec![3, 0], SubnetId::W100),
                answer(1200.0, 4, vec![5, 6], SubnetId::W50),
            ],
            rejections: vec![],
            timeline: vec![(0.0, st(Phase::HaBoth)), (700.0, st(Phase::MasterOnly))],
            log: vec![],
            submitted: 7,
            in_flight: 1,
            end_ms: 1300.0,
        };
        let r = compute_metrics(&trace, &truth, WINDOW_MS);
        assert_eq!(r.windows.len(), 3);
        assert_eq!(r.windows[0].throughput_ips, 8.0);
        assert_eq!(r.windows[0].accuracy, Some(0.75));
        assert_eq!(r.windows[0].specs, vec!["W100"]);
        assert_eq!(r.windows[1].accuracy, None);
        assert_eq!(r.windows[1].throughput_ips, 0.0);
        assert_eq!(r.windows[1].state, "MASTER_ONLY");
        assert_eq!(r.windows[1].specs, vec!["W50"]);
        assert_eq!(r.windows[2].accuracy, Some(1.0));

        let ha = r.state(Phase::HaBoth).unwrap();
        assert_eq!((ha.images, ha.correct, ha.duration_ms), (4, 3, 700.0));
        assert_eq!(ha.steady_ips, Some(2.0 * 1000.0 / 300.0));
        let mo = r.state(Phase::MasterOnly).unwrap();
        assert_eq!((mo.images, mo.steady_ips), (2, None));
        assert_eq!(r.counts, Counts { submitted: 7, completed: 6, failed: 0, in_flight: 1 });
        assert!(r.counts.conserved());

        // Offline W100 gets the second answer right, W50 gets the third wrong.
        let offline = |spec: SubnetId, first: usize, count: usize| -> Vec<u8> {
            match spec {
                SubnetId::W100 => truth[first..first + count].to_vec(),
                _ => vec![0; count],
            }
        };
        assert_eq!(expected_window_accuracy(&trace, &truth, WINDOW_MS, offline), vec![Some(1.0), None, Some(0.0)]);
        assert_eq!(claimed_spec(&trace, 800.0, Device::Worker), Some(SubnetId::W50));
    }

    #[test]
    fn empty_trace_gives_empty_report() {
        let trace = Trace {
            answers: vec![],
            rejections: vec![],
            timeline: vec![(0.0, st(Phase::HaBoth))],
            log: vec![],
            submitted: 0,
            in_flight: 0,
            end_ms: 0.0,
        };
        let r = compute_metrics(&trace, &[], WINDOW_MS);
        assert!(r.windows.is_empty());
        assert_eq!(r.states.len(), 1);
        assert_eq!(r.states[0].throughput_ips, 0.0);
    }
}
