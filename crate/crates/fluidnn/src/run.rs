//! Scenario execution over the emulated cluster or real loopback sockets.

use std::collections::BTreeMap;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use fluidnn_core::data::{load_checkpoint, load_mnist, Dataset, Split};
use fluidnn_core::model::{FluidParams, SubnetId};
use fluidnn_core::Tensor;
use fluidnn_runtime::emulated::{system_state, Action, Device, EmuConfig, PredictionCache};
use fluidnn_runtime::failover::{Policy, RuntimeState};
use fluidnn_runtime::ha::{predict, IMAGE_FLOATS};
use fluidnn_runtime::log::now_epoch_ms;
use fluidnn_runtime::{
    client::Client, run_emulated, start_master, start_worker, ErrorCode, EventLog, LatencyModel, LogRecord,
    MasterHandle, Message, Mode, RuntimeConfig, RuntimeError, WorkerHandle,
};

use crate::error::{HarnessError, Result};
use crate::metrics::{compute_metrics, Answer, MetricsReport, Rejection, Trace, WINDOW_MS};
use crate::scenario::{action_words, ScenarioScript, Source};

/// Settings of the real-socket transport.
#[derive(Debug, Clone)]
pub struct SocketSettings {
    pub heartbeat: Duration,
    pub timeout: Option<Duration>,
    pub latency: LatencyModel,
    /// Batches the client keeps outstanding.
    pub window: usize,
    pub client_timeout: Duration,
    pub backoff: Duration,
}

impl Default for SocketSettings {
    fn default() -> Self {
        Self {
            heartbeat: Duration::from_millis(100),
            timeout: None,
            latency: LatencyModel::zero(),
            window: 4,
            client_timeout: Duration::from_secs(2),
            backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Transport {
    /// Policy, mode, batch, rate and duration come from the scenario.
    Emulated(EmuConfig),
    Socket(SocketSettings),
}

impl Default for Transport {
    fn default() -> Self {
        Transport::Emulated(EmuConfig::default())
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: MetricsReport,
    pub trace: Trace,
}

/// Holds a model and a labeled stream; repeated runs share prediction work.
pub struct Harness {
    pub params: FluidParams,
    pub data: Dataset,
    cache: PredictionCache,
}

impl Harness {
    pub fn new(params: FluidParams, data: Dataset) -> Self {
        Self {
            params,
            data,
            cache: PredictionCache::new(),
        }
    }

    pub fn run_scenario(
        &mut self,
        script: &ScenarioScript,
        policy: Policy,
        mode: Mode,
        transport: &Transport,
    ) -> Result<ScenarioRun> {
        let n = script.images.unwrap_or(self.data.len()).min(self.data.len());
        let images = &self.data.images.data()[..n * IMAGE_FLOATS];
        let truth = &self.data.labels[..n];
        let trace = match transport {
            Transport::Emulated(base) => {
                let cfg = EmuConfig {
                    policy,
                    mode,
                    batch: script.batch,
                    rate: script.rate,
                    duration: script.duration(),
                    ..base.clone()
                };
                let run = run_emulated(&self.params, images, &cfg, &script.injections(), &mut self.cache)?;
                Trace::from(&run)
            }
            Transport::Socket(s) => SocketRun::execute(&self.params, images, script, policy, mode, s)?,
        };
        Ok(ScenarioRun {
            report: compute_metrics(&trace, truth, WINDOW_MS),
            trace,
        })
    }
}

/// Loads the labeled stream named by the script.
pub fn load_source(script: &ScenarioScript, mnist_dir: &Path) -> Result<Dataset> {
    let dir = match &script.source {
        Source::Mnist => mnist_dir,
        Source::Dir(d) => d.as_path(),
    };
    let data = load_mnist(dir, Split::Test)?;
    match script.images {
        Some(n) if n < data.len() => Ok(data.take(n)?),
        _ => Ok(data),
    }
}

/// Loads the checkpoint and input stream, then runs the script once.
pub fn run_scenario(
    script: &ScenarioScript,
    policy: Policy,
    mode: Mode,
    checkpoint: &Path,
    mnist_dir: &Path,
    transport: &Transport,
) -> Result<ScenarioRun> {
    let params = load_checkpoint(checkpoint)?;
    let data = load_source(script, mnist_dir)?;
    Harness::new(params, data).run_scenario(script, policy, mode, transport)
}

struct Pending {
    first: usize,
    count: usize,
    sent: Instant,
    device: Device,
}

/// One in-process master and worker on loopback, driven by a single client loop
/// so injections are atomic with respect to batch admission.
struct SocketRun<'a> {
    params: &'a FluidParams,
    images: &'a [f32],
    n: usize,
    policy: Policy,
    settings: &'a SocketSettings,
    master_cfg: RuntimeConfig,
    worker_cfg: RuntimeConfig,
    log: EventLog,
    master: Option<MasterHandle>,
    worker: Option<WorkerHandle>,
    dead: Vec<Box<dyn FnOnce()>>,
    client: Option<(Device, Client)>,
    target: Device,
    outstanding: BTreeMap<u32, Pending>,
    next_req: u32,
    next_image: usize,
    hold_until: Instant,
    origin: Instant,
    answers: Vec<Answer>,
    rejections: Vec<Rejection>,
    timeline: Vec<(f64, RuntimeState)>,
    serving: Vec<SubnetId>,
}

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const FORM_TIMEOUT: Duration = Duration::from_secs(15);

impl<'a> SocketRun<'a> {
    fn execute(
        params: &'a FluidParams,
        images: &'a [f32],
        script: &ScenarioScript,
        policy: Policy,
        mode: Mode,
        settings: &'a SocketSettings,
    ) -> Result<Trace> {
        let base = RuntimeConfig {
            policy,
            mode,
            heartbeat: settings.heartbeat,
            timeout: settings.timeout,
            latency: settings.latency,
            listen: "127.0.0.1:0".into(),
            client_listen: "127.0.0.1:0".into(),
            log: String::new(),
            ..RuntimeConfig::default()
        };
        base.validate()?;
        let log = EventLog::new();
        let master = start_master(base.clone(), params.clone(), log.clone())?;
        let mut worker_cfg = base.clone();
        worker_cfg.connect = master.addr.to_string();
        let worker = start_worker(worker_cfg.clone(), params.clone(), log.clone())?;
        // Restarts reuse the same ports so clients and the worker find them.
        let mut master_cfg = base;
        master_cfg.listen = master.addr.to_string();
        worker_cfg.client_listen = worker.client_addr.to_string();

        let mut run = SocketRun {
            params,
            images,
            n: images.len() / IMAGE_FLOATS,
            policy,
            settings,
            master_cfg,
            worker_cfg,
            log,
            master: Some(master),
            worker: Some(worker),
            dead: Vec::new(),
            client: None,
            target: Device::Master,
            outstanding: BTreeMap::new(),
            next_req: 1,
            next_image: 0,
            hold_until: Instant::now(),
            origin: Instant::now(),
            answers: Vec::new(),
            rejections: Vec::new(),
            timeline: Vec::new(),
            serving: vec![SubnetId::W100, SubnetId::W50, SubnetId::U50],
        };
        let result = run.drive(script);
        run.stop();
        result
    }

    fn state(&self) -> RuntimeState {
        system_state(
            self.policy,
            self.master.as_ref().map(|m| m.state()),
            self.worker.as_ref().map(|w| w.state()),
        )
    }

    fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1000.0
    }

    fn note_state(&mut self) {
        let s = self.state();
        if self.timeline.last().map(|(_, x)| *x) != Some(s) {
            let t = self.now_ms();
            self.timeline.push((t, s));
        }
    }

    fn drive(&mut self, script: &ScenarioScript) -> Result<Trace> {
        let started = Instant::now();
        loop {
            let m = self.master.as_ref().map(|m| m.state().phase);
            let w = self.worker.as_ref().map(|w| w.state().phase);
            if m.is_some_and(|p| p.is_both()) && w.is_some_and(|p| p.is_both()) {
                break;
            }
            if started.elapsed() > FORM_TIMEOUT {
                return Err(RuntimeError::Timeout(format!("cluster did not form: master {m:?}, worker {w:?}")).into());
            }
            thread::sleep(Duration::from_millis(2));
        }
        self.origin = Instant::now();
        let origin_epoch = now_epoch_ms();
        let log_start = self.log.len();
        self.note_state();

        let mut events = script.events.iter().peekable();
        let deadline = script.duration();
        let tick = (self.settings.heartbeat / 4).clamp(Duration::from_millis(1), Duration::from_millis(10));
        let mut batches = 0usize;
        loop {
            while let Some(e) = events.peek() {
                if self.origin.elapsed() < Duration::from_millis(e.t_ms) {
                    break;
                }
                self.inject(e.action)?;
                events.next();
            }
            self.note_state();
            if self.next_image >= self.n && self.outstanding.is_empty() {
                break;
            }
            if self.origin.elapsed() >= deadline {
                break;
            }
            let now = Instant::now();
            while self.outstanding.len() < self.settings.window
                && self.next_image < self.n
                && now >= self.hold_until
                && script.rate.is_none_or(|r| {
                    self.origin.elapsed().as_secs_f64() >= (batches * script.batch) as f64 / r
                })
            {
                let count = script.batch.min(self.n - self.next_image);
                let req = self.next_req;
                self.next_req += 1;
                self.outstanding.insert(
                    req,
                    Pending {
                        first: self.next_image,
                        count,
                        sent: now,
                        device: self.target,
                    },
                );
                self.next_image += count;
                batches += 1;
                if !self.send(req) {
                    break;
                }
            }
            self.pump(tick);
            self.check_timeouts();
        }
        let end_ms = self.now_ms();
        let log: Vec<LogRecord> = self.log.snapshot()[log_start..]
            .iter()
            .map(|r| LogRecord {
                epoch_ms: r.epoch_ms.saturating_sub(origin_epoch),
                ..r.clone()
            })
            .collect();
        Ok(Trace {
            answers: std::mem::take(&mut self.answers),
            rejections: std::mem::take(&mut self.rejections),
            timeline: std::mem::take(&mut self.timeline),
            log,
            submitted: self.next_image,
            in_flight: self.outstanding.values().map(|p| p.count).sum(),
            end_ms,
        })
    }

    fn inject(&mut self, action: Action) -> Result<()> {
        let (verb, target) = action_words(action);
        self.log.record(self.state(), "inject", format!("{verb} {target}"));
        match action {
            Action::Kill(Device::Master) => {
                if let Some(m) = self.master.take() {
                    m.kill();
                    self.dead.push(Box::new(move || drop(m.join())));
                }
            }
            Action::Kill(Device::Worker) => {
                if let Some(w) = self.worker.take() {
                    w.kill();
                    self.dead.push(Box::new(move || drop(w.join())));
                }
            }
            Action::Restore(Device::Master) => {
                if self.master.is_none() {
                    self.master = Some(retry_bind(|| {
                        start_master(self.master_cfg.clone(), self.params.clone(), self.log.clone())
                    })?);
                }
            }
            Action::Restore(Device::Worker) => {
                if self.worker.is_none() {
                    self.worker = Some(retry_bind(|| {
                        start_worker(self.worker_cfg.clone(), self.params.clone(), self.log.clone())
                    })?);
                }
            }
            Action::SetMode(mode) => {
                if self.master.is_some() {
                    if let Ok(c) = Client::connect(&self.master_cfg.listen, CONNECT_TIMEOUT) {
                        let _ = c.set_mode(mode);
                        let _ = c.recv(Duration::from_millis(50));
                    }
                }
            }
        }
        Ok(())
    }

    fn addr(&self, d: Device) -> &str {
        match d {
            Device::Master => &self.master_cfg.listen,
            Device::Worker => &self.worker_cfg.client_listen,
        }
    }

    /// Sends one pending request to the current target; `false` when the target is unreachable.
    fn send(&mut self, req: u32) -> bool {
        if self.client.as_ref().map(|(d, _)| *d) != Some(self.target) {
            self.client = match Client::connect(self.addr(self.target), CONNECT_TIMEOUT) {
                Ok(c) => Some((self.target, c)),
                Err(_) => {
                    self.redirect("connect_failed");
                    return false;
                }
            };
        }
        let Some(p) = self.outstanding.get_mut(&req) else { return true };
        p.sent = Instant::now();
        p.device = self.target;
        let (first, count) = (p.first, p.count);
        let (_, c) = self.client.as_ref().expect("connected");
        let batch = &self.images[first * IMAGE_FLOATS..(first + count) * IMAGE_FLOATS];
        if c.submit(req, count as u16, batch).is_err() {
            self.redirect("send_failed");
            return false;
        }
        true
    }

    /// Switches to the other device and backs off; outstanding requests are resent later.
    fn redirect(&mut self, why: &str) {
        let to = self.target.other();
        self.log.record(self.state(), "client_redirect", format!("to={to} cause={why}"));
        self.target = to;
        self.client = None;
        self.hold_until = Instant::now() + self.settings.backoff;
        for p in self.outstanding.values_mut() {
            // Force a resend on the next timeout check.
            p.device = to.other();
        }
    }

    fn resend_stale(&mut self) {
        let stale: Vec<u32> = self
            .outstanding
            .iter()
            .filter(|(_, p)| p.device != self.target)
            .map(|(&r, _)| r)
            .collect();
        for r in stale {
            if !self.send(r) {
                return;
            }
        }
    }

    fn pump(&mut self, tick: Duration) {
        if Instant::now() >= self.hold_until {
            self.resend_stale();
        }
        let Some((_, c)) = &self.client else {
            thread::sleep(tick);
            return;
        };
        let msg = match c.recv(tick) {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(_) => {
                self.redirect("closed");
                return;
            }
        };
        match msg {
            Message::Result { req_id, labels, .. } => {
                let Some(p) = self.outstanding.remove(&req_id) else { return };
                let at_ms = self.now_ms();
                let (spec, device) = self.attribute(p.first, p.count, &labels, p.device);
                self.answers.push(Answer {
                    at_ms,
                    first: p.first,
                    count: p.count,
                    labels,
                    spec,
                    device,
                });
            }
            ref e @ Message::Error { code, ref message } => {
                let Some(req) = e.error_req_id().filter(|r| self.outstanding.contains_key(r)) else {
                    self.log.record(self.state(), "client_error", format!("code={code:?} {message}"));
                    return;
                };
                if code == ErrorCode::Retry {
                    // This device is not serving clients yet; try the other one.
                    self.redirect("retry");
                    return;
                }
                let p = self.outstanding.remove(&req).expect("checked");
                self.log.record(self.state(), "client_error", format!("req={req} code={code:?}"));
                self.rejections.push(Rejection {
                    at_ms: self.now_ms(),
                    first: p.first,
                    count: p.count,
                    code,
                });
                self.hold_until = Instant::now() + self.settings.backoff;
            }
            _ => {}
        }
    }

    fn check_timeouts(&mut self) {
        let limit = self.settings.client_timeout;
        let target = self.target;
        if self
            .outstanding
            .values()
            .any(|p| p.device == target && p.sent.elapsed() > limit)
        {
            self.redirect("timeout");
        }
    }

    /// RESULT frames do not name the model that produced them: pick the
    /// serving spec whose offline predictions agree best, preferring the
    /// specs the system state says are active.
    fn attribute(&self, first: usize, count: usize, labels: &[u8], via: Device) -> (SubnetId, Device) {
        let state = self.state();
        let (m, w) = state.active_specs();
        let mut candidates: Vec<SubnetId> = match via {
            Device::Master => m.into_iter().chain(w).collect(),
            Device::Worker => w.into_iter().collect(),
        };
        for s in &self.serving {
            if !candidates.contains(s) {
                candidates.push(*s);
            }
        }
        let x = Tensor::new(
            vec![count, 1, 28, 28],
            self.images[first * IMAGE_FLOATS..(first + count) * IMAGE_FLOATS].to_vec(),
        )
        .expect("batch shape");
        let mut best = (candidates[0], 0usize);
        for s in candidates {
            let agree = predict(self.params, s, &x)
                .map(|p| p.iter().zip(labels).filter(|(a, b)| a == b).count())
                .unwrap_or(0);
            if agree > best.1 {
                best = (s, agree);
            }
            if agree == count {
                break;
            }
        }
        let device = match best.0 {
            SubnetId::W100 | SubnetId::W50 if via == Device::Master => Device::Master,
            _ => Device::Worker,
        };
        (best.0, device)
    }

    fn stop(&mut self) {
        self.client = None;
        if let Some(m) = self.master.take() {
            m.kill();
            let _ = m.join();
        }
        if let Some(w) = self.worker.take() {
            w.kill();
            let _ = w.join();
        }
        for f in self.dead.drain(..) {
            f();
        }
    }
}

fn retry_bind<T>(mut start: impl FnMut() -> fluidnn_runtime::Result<T>) -> Result<T> {
    let mut last = None;
    for _ in 0..50 {
        match start() {
            Ok(h) => return Ok(h),
            Err(e @ RuntimeError::Bind { .. }) => {
                last = Some(e);
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(HarnessError::from(last.expect("at least one attempt")))
}
