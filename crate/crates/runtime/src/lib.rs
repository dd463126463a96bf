//! Two-device inference runtime: master/worker services over TCP, the wire
//! protocol, heartbeat failure detection with policy-dependent failover, and
//! a deterministic single-process emulation of the same protocol.

pub mod client;
pub mod config;
pub mod emulated;
pub mod error;
pub mod failover;
pub mod ha;
pub mod latency;
pub mod link;
pub mod log;
pub mod master;
pub mod wire;
pub mod worker;

pub use config::RuntimeConfig;
pub use emulated::{run_emulated, Action, Device, EmuConfig, EmuRun, Injection, PredictionCache, Route};
pub use error::{Result, RuntimeError};
pub use failover::{failover_step, Event, Outcome, Phase, Policy, RuntimeState, Transition};
pub use latency::LatencyModel;
pub use log::{EventLog, LogRecord};
pub use master::{start_master, MasterHandle};
pub use wire::{decode_frame, encode_frame, ErrorCode, FrameError, Message, Mode, Role};
pub use worker::{start_worker, WorkerHandle};
