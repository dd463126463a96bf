//! Pure failover transitions.
//!
//! Every device runs the same table. The master only ever observes worker
//! events and the worker only master events, so both converge on the same
//! phase after a single failure.

use std::fmt;
use std::str::FromStr;

use fluidnn_core::model::SubnetId;

use crate::error::{Result, RuntimeError};
use crate::wire::Mode;

/// How the deployed model reacts to losing a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// One monolithic network split across both devices.
    Static,
    /// Nested widths; only the master's lower half can run alone.
    Dynamic,
    /// Nested widths plus independent upper models on the worker.
    Fluid,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Static, Policy::Dynamic, Policy::Fluid];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Static => "static",
            Policy::Dynamic => "dynamic",
            Policy::Fluid => "fluid",
        }
    }

    pub fn allows(self, mode: Mode) -> bool {
        mode == Mode::Ha || self == Policy::Fluid
    }
}

impl FromStr for Policy {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(Policy::Static),
            "dynamic" => Ok(Policy::Dynamic),
            "fluid" => Ok(Policy::Fluid),
            _ => Err(RuntimeError::Invalid(format!(
                "unknown policy {s:?} (static, dynamic or fluid)"
            ))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Init,
    HaBoth,
    HtBoth,
    MasterOnly,
    WorkerOnly,
    Halted,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::Init,
        Phase::HaBoth,
        Phase::HtBoth,
        Phase::MasterOnly,
        Phase::WorkerOnly,
        Phase::Halted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "INIT",
            Phase::HaBoth => "HA_BOTH",
            Phase::HtBoth => "HT_BOTH",
            Phase::MasterOnly => "MASTER_ONLY",
            Phase::WorkerOnly => "WORKER_ONLY",
            Phase::Halted => "HALTED",
        }
    }

    fn both(mode: Mode) -> Self {
        match mode {
            Mode::Ha => Phase::HaBoth,
            Mode::Ht => Phase::HtBoth,
        }
    }

    pub fn is_both(self) -> bool {
        matches!(self, Phase::HaBoth | Phase::HtBoth)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| RuntimeError::Invalid(format!("unknown state {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    WorkerTimeout,
    MasterTimeout,
    WorkerRejoin,
    MasterRejoin,
    SetMode(Mode),
    /// Operator reset back to INIT.
    Restart,
}

impl Event {
    pub const ALL: [Event; 7] = [
        Event::WorkerTimeout,
        Event::MasterTimeout,
        Event::WorkerRejoin,
        Event::MasterRejoin,
        Event::SetMode(Mode::Ha),
        Event::SetMode(Mode::Ht),
        Event::Restart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Event::WorkerTimeout => "worker_timeout",
            Event::MasterTimeout => "master_timeout",
            Event::WorkerRejoin => "worker_rejoin",
            Event::MasterRejoin => "master_rejoin",
            Event::SetMode(Mode::Ha) => "set_mode_HA",
            Event::SetMode(Mode::Ht) => "set_mode_HT",
            Event::Restart => "restart",
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Phase plus the both-devices mode to return to after a rejoin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RuntimeState {
    pub policy: Policy,
    pub phase: Phase,
    pub mode: Mode,
}

impl RuntimeState {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            phase: Phase::Init,
            mode: Mode::Ha,
        }
    }

    /// Sub-network served by each device, `(master, worker)`. In HA both
    /// devices share W100.
    pub fn active_specs(&self) -> (Option<SubnetId>, Option<SubnetId>) {
        match self.phase {
            Phase::HaBoth => (Some(SubnetId::W100), Some(SubnetId::W100)),
            Phase::HtBoth => (Some(SubnetId::W50), Some(SubnetId::U50)),
            Phase::MasterOnly => (Some(SubnetId::W50), None),
            Phase::WorkerOnly => (None, Some(SubnetId::U50)),
            Phase::Init | Phase::Halted => (None, None),
        }
    }

    /// Distinct specs producing answers, in display order.
    pub fn spec_names(&self) -> Vec<SubnetId> {
        let (m, w) = self.active_specs();
        let mut v: Vec<SubnetId> = m.into_iter().chain(w).collect();
        v.dedup();
        v
    }

    pub fn is_serving(&self) -> bool {
        !matches!(self.phase, Phase::Init | Phase::Halted)
    }
}

impl fmt::Display for RuntimeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phase.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Changed,
    /// A defined transition that leaves the state as is.
    Unchanged,
    /// The pair has no meaning for this policy; state unchanged.
    Undefined,
    /// The request violates the policy; the caller answers with an ERROR frame.
    Rejected(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub state: RuntimeState,
    pub outcome: Outcome,
}

pub fn failover_step(state: RuntimeState, event: Event) -> Transition {
    use Phase::*;
    let RuntimeState { policy, phase, mode } = state;
    let to = |phase: Phase, mode: Mode| {
        let next = RuntimeState { policy, phase, mode };
        Transition {
            state: next,
            outcome: if next == state { Outcome::Unchanged } else { Outcome::Changed },
        }
    };
    let keep = |outcome| Transition { state, outcome };

    if event == Event::Restart {
        return to(Init, Mode::Ha);
    }
    if phase == Halted {
        return keep(Outcome::Undefined);
    }
    if let Event::SetMode(m) = event {
        if !policy.allows(m) {
            return keep(Outcome::Rejected(match policy {
                Policy::Static => "static policy supports HA only",
                _ => "dynamic policy has no independent worker model",
            }));
        }
        return match phase {
            Init | HaBoth | HtBoth => to(Phase::both(m), m),
            // Remembered for when the peer rejoins.
            _ => to(phase, m),
        };
    }

    match policy {
        Policy::Static => match event {
            Event::WorkerTimeout | Event::MasterTimeout => to(Halted, mode),
            _ => keep(Outcome::Undefined),
        },
        Policy::Dynamic => match (phase, event) {
            (_, Event::MasterTimeout) => to(Halted, mode),
            (Init | HaBoth | HtBoth, Event::WorkerTimeout) => to(MasterOnly, mode),
            (MasterOnly, Event::WorkerRejoin) => to(Phase::both(mode), mode),
            _ => keep(Outcome::Undefined),
        },
        Policy::Fluid => match (phase, event) {
            (Init | HaBoth | HtBoth, Event::WorkerTimeout) => to(MasterOnly, mode),
            (Init | HaBoth | HtBoth, Event::MasterTimeout) => to(WorkerOnly, mode),
            (MasterOnly, Event::WorkerRejoin) | (WorkerOnly, Event::MasterRejoin) => {
                to(Phase::both(mode), mode)
            }
            // The only device left has failed.
            (MasterOnly, Event::MasterTimeout) | (WorkerOnly, Event::WorkerTimeout) => to(Halted, mode),
            _ => keep(Outcome::Undefined),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(policy: Policy, phase: Phase) -> RuntimeState {
        RuntimeState { policy, phase, mode: Mode::Ha }
    }

    #[test]
    fn fluid_master_loss_keeps_worker_serving() {
        let t = failover_step(st(Policy::Fluid, Phase::HaBoth), Event::MasterTimeout);
        assert_eq!(t.state.phase, Phase::WorkerOnly);
        assert_eq!(t.state.active_specs(), (None, Some(SubnetId::U50)));
    }

    #[test]
    fn dynamic_master_loss_halts() {
        let t = failover_step(st(Policy::Dynamic, Phase::HaBoth), Event::MasterTimeout);
        assert_eq!(t.state.phase, Phase::Halted);
    }

    #[test]
    fn static_rejects_ht() {
        let t = failover_step(st(Policy::Static, Phase::HaBoth), Event::SetMode(Mode::Ht));
        assert!(matches!(t.outcome, Outcome::Rejected(_)));
        assert_eq!(t.state.phase, Phase::HaBoth);
    }

    #[test]
    fn rejoin_restores_previous_mode() {
        let s = RuntimeState { policy: Policy::Fluid, phase: Phase::HtBoth, mode: Mode::Ht };
        let down = failover_step(s, Event::WorkerTimeout).state;
        assert_eq!(down.phase, Phase::MasterOnly);
        assert_eq!(failover_step(down, Event::WorkerRejoin).state.phase, Phase::HtBoth);
    }
}
