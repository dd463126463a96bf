//! Master service: owns the client-facing port, the worker link and the
//! failover state. All state changes happen on one control thread.

use std::collections::{HashMap, HashSet, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use fluidnn_core::data::model_hash;
use fluidnn_core::model::{FluidParams, SubnetId};

use crate::config::RuntimeConfig;
use crate::error::{Result, RuntimeError};
use crate::failover::{failover_step, Event, Outcome, Phase, RuntimeState};
use crate::ha::{ha_master_batch, images_tensor, labels_of, predict};
use crate::link::{self, hex, Conn, ConnId, Inbound};
use crate::log::EventLog;
use crate::wire::{ErrorCode, Message, Role, PROTOCOL_VERSION};

struct Job {
    client: ConnId,
    req_id: u32,
    count: u16,
    images: Vec<f32>,
    received: Instant,
}

struct Master {
    cfg: RuntimeConfig,
    params: Arc<FluidParams>,
    digest: [u8; 8],
    state: RuntimeState,
    shared_state: Arc<Mutex<RuntimeState>>,
    log: EventLog,
    inbox: Receiver<Inbound>,
    deferred: VecDeque<Inbound>,
    worker: Option<Conn>,
    /// Last time the worker was known alive (or startup).
    worker_seen: Instant,
    clients: HashMap<ConnId, Conn>,
    queue: VecDeque<Job>,
    forwarded: HashMap<u32, Job>,
    known: HashSet<(ConnId, u32)>,
    next_internal: u32,
    batches_dispatched: u64,
    draining: bool,
    stop: Arc<AtomicBool>,
}

/// Handle on a running master.
pub struct MasterHandle {
    pub addr: SocketAddr,
    pub log: EventLog,
    state: Arc<Mutex<RuntimeState>>,
    inbox: Sender<Inbound>,
    join: JoinHandle<Result<()>>,
}

impl MasterHandle {
    pub fn state(&self) -> RuntimeState {
        *self.state.lock().expect("state poisoned")
    }

    /// Finish queued work, tell the worker to stop, then exit.
    pub fn shutdown(&self) {
        let _ = self.inbox.send(Inbound::Shutdown);
    }

    /// Stop immediately without notifying anyone.
    pub fn kill(&self) {
        let _ = self.inbox.send(Inbound::Kill);
    }

    pub fn join(self) -> Result<()> {
        self.join.join().unwrap_or_else(|_| Err(RuntimeError::Invalid("master thread panicked".into())))
    }

    pub fn is_finished(&self) -> bool {
        self.join.is_finished()
    }
}

pub fn start_master(cfg: RuntimeConfig, params: FluidParams, log: EventLog) -> Result<MasterHandle> {
    cfg.validate()?;
    let listener = link::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    link::spawn_acceptor(listener, tx.clone(), stop.clone(), cfg.timeout());
    let state = RuntimeState::new(cfg.policy);
    let shared_state = Arc::new(Mutex::new(state));
    let digest = model_hash(&params);
    let mut m = Master {
        cfg,
        params: Arc::new(params),
        digest,
        state,
        shared_state: shared_state.clone(),
        log: log.clone(),
        inbox: rx,
        deferred: VecDeque::new(),
        worker: None,
        worker_seen: Instant::now(),
        clients: HashMap::new(),
        queue: VecDeque::new(),
        forwarded: HashMap::new(),
        known: HashSet::new(),
        next_internal: 1,
        batches_dispatched: 0,
        draining: false,
        stop,
    };
    log.record(state, "start", format!("role=master addr={addr} policy={} digest={}", m.cfg.policy, hex(&digest)));
    let join = thread::spawn(move || {
        let r = m.run();
        m.stop.store(true, Ordering::SeqCst);
        for c in m.clients.values().chain(m.worker.iter()) {
            c.close();
        }
        if let Err(e) = &r {
            m.log.record(m.state, "exit", format!("error={e}"));
        }
        r
    });
    Ok(MasterHandle {
        addr,
        log,
        state: shared_state,
        inbox: tx,
        join,
    })
}

enum Flow {
    Continue,
    Exit(Result<()>),
}

impl Master {
    fn tick(&self) -> Duration {
        (self.cfg.heartbeat / 4).max(Duration::from_millis(1))
    }

    fn run(&mut self) -> Result<()> {
        loop {
            let next = match self.deferred.pop_front() {
                Some(ev) => Some(ev),
                None if self.queue.is_empty() || !self.can_dispatch() => {
                    match self.inbox.recv_timeout(self.tick()) {
                        Ok(ev) => Some(ev),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => return Ok(()),
                    }
                }
                None => self.inbox.try_recv().ok(),
            };
            if let Some(ev) = next {
                if let Flow::Exit(r) = self.handle(ev) {
                    return r;
                }
            }
            self.check_worker();
            self.dispatch_one();
            if self.draining && self.queue.is_empty() && self.forwarded.is_empty() {
                if let Some(w) = &self.worker {
                    let _ = w.send(&Message::Shutdown);
                }
                self.log.record(self.state, "shutdown", "drained");
                return Ok(());
            }
        }
    }

    fn apply(&mut self, event: Event, cause: &str) -> Outcome {
        let before = self.state;
        let t = failover_step(before, event);
        self.state = t.state;
        *self.shared_state.lock().expect("state poisoned") = t.state;
        match &t.outcome {
            Outcome::Changed if before.phase != t.state.phase => {
                let specs: Vec<&str> = t.state.spec_names().iter().map(|s| s.name()).collect();
                self.log.record(
                    t.state,
                    "transition",
                    format!("from={} cause={cause} specs={}", before.phase, specs.join("+")),
                );
            }
            Outcome::Changed | Outcome::Unchanged => {}
            Outcome::Undefined => {
                self.log.record(t.state, "ignored", format!("event={event} cause={cause}"));
            }
            Outcome::Rejected(why) => {
                self.log.record(t.state, "rejected", format!("event={event} reason={why:?}"));
            }
        }
        if t.state.phase == Phase::Halted && before.phase != Phase::Halted {
            self.fail_all(ErrorCode::Halted, "system halted");
        }
        t.outcome
    }

    fn handle(&mut self, ev: Inbound) -> Flow {
        match ev {
            Inbound::Kill => {
                self.log.record(self.state, "killed", "");
                return Flow::Exit(Ok(()));
            }
            Inbound::Shutdown => self.begin_drain("requested"),
            Inbound::Joined { role, digest, conn } => return self.joined(role, digest, conn),
            Inbound::Frame(id, msg) => {
                if self.worker.as_ref().is_some_and(|w| w.id == id) {
                    self.worker_frame(msg);
                } else if self.clients.contains_key(&id) {
                    self.client_frame(id, msg);
                }
            }
            Inbound::Closed(id, reason) => {
                if self.worker.as_ref().is_some_and(|w| w.id == id) {
                    // Failover waits for the heartbeat timeout.
                    self.log.record(self.state, "worker_link_closed", reason);
                } else if self.clients.remove(&id).is_some() {
                    self.queue.retain(|j| j.client != id);
                }
            }
        }
        Flow::Continue
    }

    fn joined(&mut self, role: Role, digest: [u8; 8], conn: Conn) -> Flow {
        let hello = Message::Hello {
            role: Role::Master,
            version: PROTOCOL_VERSION,
            digest: self.digest,
        };
        match role {
            Role::Client => {
                let _ = conn.send(&hello);
                self.clients.insert(conn.id, conn);
            }
            Role::Worker if digest != self.digest => {
                let _ = conn.send(&Message::error(
                    ErrorCode::ModelMismatch,
                    format!("master model {} != worker model {}", hex(&self.digest), hex(&digest)),
                ));
                conn.close();
                self.log.record(self.state, "model_mismatch", format!("peer={}", hex(&digest)));
                return Flow::Exit(Err(RuntimeError::ModelMismatch {
                    local: hex(&self.digest),
                    peer: hex(&digest),
                }));
            }
            Role::Worker if self.worker.as_ref().is_some_and(|w| w.is_open()) || self.state.phase == Phase::Halted => {
                let _ = conn.send(&Message::error(ErrorCode::BadRequest, "worker slot unavailable"));
                conn.close();
            }
            Role::Worker => {
                if conn.send(&hello).is_err() {
                    return Flow::Continue;
                }
                link::spawn_heartbeats(&conn, self.cfg.heartbeat, self.stop.clone());
                self.log.record(self.state, "worker_joined", format!("peer={}", conn.peer));
                self.worker = Some(conn);
                self.worker_seen = Instant::now();
                match self.state.phase {
                    Phase::Init => {
                        self.apply(Event::SetMode(self.cfg.mode), "worker_joined");
                    }
                    Phase::MasterOnly => {
                        self.apply(Event::WorkerRejoin, "worker_joined");
                    }
                    _ => {}
                }
                self.send_mode();
            }
            Role::Master => {
                let _ = conn.send(&Message::error(ErrorCode::BadRequest, "already a master here"));
                conn.close();
            }
        }
        Flow::Continue
    }

    fn send_mode(&self) {
        if let Some(w) = &self.worker {
            let _ = w.send(&Message::SetMode(self.state.mode));
        }
    }

    fn client_frame(&mut self, id: ConnId, msg: Message) {
        let Some(conn) = self.clients.get(&id).cloned() else { return };
        match msg {
            Message::InferReq { req_id, count, images } => {
                if let Err(e) = images_tensor(count, &images) {
                    let _ = conn.send(&Message::request_error(ErrorCode::BadRequest, req_id, e));
                    return;
                }
                if self.draining {
                    let _ = conn.send(&Message::request_error(ErrorCode::ShuttingDown, req_id, "master is draining"));
                    return;
                }
                if self.state.phase == Phase::Halted {
                    let _ = conn.send(&Message::request_error(ErrorCode::Halted, req_id, "system halted"));
                    return;
                }
                if self.state.phase == Phase::Init {
                    let _ = conn.send(&Message::request_error(ErrorCode::Retry, req_id, "waiting for worker"));
                    return;
                }
                if !self.known.insert((id, req_id)) {
                    return;
                }
                self.queue.push_back(Job {
                    client: id,
                    req_id,
                    count,
                    images,
                    received: Instant::now(),
                });
            }
            Message::SetMode(mode) => {
                if let Outcome::Rejected(why) = self.apply(Event::SetMode(mode), "client") {
                    let _ = conn.send(&Message::error(ErrorCode::ModeRejected, why));
                } else {
                    self.send_mode();
                }
            }
            Message::Shutdown => self.begin_drain("client"),
            other => {
                let _ = conn.send(&Message::error(
                    ErrorCode::Protocol,
                    format!("unexpected {} from client", other.name()),
                ));
            }
        }
    }

    fn worker_frame(&mut self, msg: Message) {
        match msg {
            Message::Result {
                req_id,
                count,
                labels,
                ..
            } => {
                if let Some(job) = self.forwarded.remove(&req_id) {
                    self.reply(&job, labels, count);
                }
            }
            Message::Error { code, message } => {
                self.log.record(self.state, "worker_error", format!("code={code:?} {message}"));
            }
            // Stale HA traffic from an abandoned batch.
            _ => {}
        }
    }

    fn reply(&mut self, job: &Job, labels: Vec<u8>, count: u16) {
        self.known.remove(&(job.client, job.req_id));
        if let Some(c) = self.clients.get(&job.client) {
            let _ = c.send(&Message::Result {
                req_id: job.req_id,
                count,
                labels,
                latency_us: job.received.elapsed().as_micros() as u64,
            });
        }
    }

    fn fail_job(&mut self, job: &Job, code: ErrorCode, why: &str) {
        self.known.remove(&(job.client, job.req_id));
        if let Some(c) = self.clients.get(&job.client) {
            let _ = c.send(&Message::request_error(code, job.req_id, why));
        }
    }

    fn fail_all(&mut self, code: ErrorCode, why: &str) {
        let jobs: Vec<Job> = self.queue.drain(..).chain(self.forwarded.drain().map(|(_, j)| j)).collect();
        for j in &jobs {
            self.fail_job(j, code, why);
        }
    }

    fn begin_drain(&mut self, cause: &str) {
        if !self.draining {
            self.draining = true;
            self.log.record(self.state, "draining", format!("cause={cause}"));
        }
    }

    fn worker_silence(&self) -> Duration {
        match &self.worker {
            Some(w) => w.silence(),
            None => self.worker_seen.elapsed(),
        }
    }

    /// INIT waits for the first worker indefinitely; clients are told to retry.
    fn expects_worker(&self) -> bool {
        self.state.phase.is_both()
    }

    fn check_worker(&mut self) {
        if self.expects_worker() && self.worker_silence() > self.cfg.timeout() {
            self.worker_lost();
        }
    }

    fn worker_lost(&mut self) {
        let silence = self.worker_silence();
        if let Some(w) = self.worker.take() {
            w.close();
        }
        self.worker_seen = Instant::now();
        self.apply(Event::WorkerTimeout, &format!("silence_ms={}", silence.as_millis()));
        // Retry forwarded batches under the new state.
        let mut retry: Vec<(u32, Job)> = self.forwarded.drain().collect();
        retry.sort_by_key(|(id, _)| *id);
        for (_, job) in retry.into_iter().rev() {
            if self.state.phase == Phase::Halted {
                self.fail_job(&job, ErrorCode::Halted, "system halted");
            } else {
                self.queue.push_front(job);
            }
        }
    }

    fn can_dispatch(&self) -> bool {
        matches!(self.state.phase, Phase::HaBoth | Phase::HtBoth | Phase::MasterOnly)
    }

    fn dispatch_one(&mut self) {
        if !self.can_dispatch() {
            return;
        }
        let Some(job) = self.queue.pop_front() else { return };
        let batch = match images_tensor(job.count, &job.images) {
            Ok(b) => b,
            Err(e) => return self.fail_job(&job, ErrorCode::BadRequest, &e.to_string()),
        };
        match self.state.phase {
            Phase::HaBoth => self.run_ha(job, &batch),
            Phase::HtBoth if self.batches_dispatched % 2 == 1 => {
                self.batches_dispatched += 1;
                let id = self.next_internal;
                self.next_internal = self.next_internal.wrapping_add(1).max(1);
                let msg = Message::InferReq {
                    req_id: id,
                    count: job.count,
                    images: job.images.clone(),
                };
                let sent = self.worker.as_ref().map(|w| w.send(&msg));
                self.forwarded.insert(id, job);
                if !matches!(sent, Some(Ok(()))) {
                    self.log.record(self.state, "forward_failed", format!("req={id}"));
                }
            }
            _ => {
                self.batches_dispatched += 1;
                self.run_local(job, SubnetId::W50, &batch);
            }
        }
    }

    fn run_local(&mut self, job: Job, spec: SubnetId, batch: &fluidnn_core::Tensor) {
        match predict(&self.params, spec, batch) {
            Ok(labels) => self.reply(&job, labels, job.count),
            Err(e) => self.fail_job(&job, ErrorCode::Internal, &e.to_string()),
        }
    }

    fn run_ha(&mut self, job: Job, batch: &fluidnn_core::Tensor) {
        let Some(worker) = self.worker.clone() else {
            self.queue.push_front(job);
            return;
        };
        let id = self.next_internal;
        self.next_internal = self.next_internal.wrapping_add(1).max(1);
        let timeout = self.cfg.timeout();
        let tick = self.tick();
        let params = self.params.clone();
        let inbox = &self.inbox;
        let deferred = &mut self.deferred;
        let recv_worker = || -> Result<Message> {
            loop {
                if worker.silence() > timeout {
                    return Err(RuntimeError::Timeout("worker silent during HA batch".into()));
                }
                match inbox.recv_timeout(tick) {
                    Ok(Inbound::Frame(cid, msg)) if cid == worker.id => return Ok(msg),
                    Ok(other) => deferred.push_back(other),
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(RuntimeError::Closed("inbox closed".into()))
                    }
                }
            }
        };
        let send_worker = |m: &Message| worker.send(m);
        match ha_master_batch(&params, id, batch, send_worker, recv_worker) {
            Ok(logits) => {
                self.batches_dispatched += 1;
                self.reply(&job, labels_of(&logits), job.count);
            }
            Err(e @ (RuntimeError::Timeout(_) | RuntimeError::Closed(_) | RuntimeError::Io(_))) => {
                self.log.record(self.state, "ha_batch_interrupted", format!("req={} {e}", job.req_id));
                self.queue.push_front(job);
                // Wait for the heartbeat timeout to decide.
                while self.worker.as_ref().is_some_and(|w| w.silence() <= timeout) {
                    thread::sleep(tick);
                }
                self.check_worker();
            }
            Err(e) => {
                self.log.record(self.state, "ha_batch_failed", format!("req={} {e}", job.req_id));
                self.fail_job(&job, ErrorCode::Internal, &e.to_string());
            }
        }
    }
}
