//! Worker service: connects to the master, computes its half of HA batches
//! and whole U50 batches in HT, and serves clients directly once the master
//! is lost (fluid policy).

use std::collections::{HashMap, VecDeque};
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
use crate::ha::{ha_worker_batch, images_tensor, predict};
use crate::link::{self, hex, Conn, ConnId, Inbound};
use crate::log::EventLog;
use crate::wire::{ErrorCode, Message, Mode, Role, PROTOCOL_VERSION};

struct Worker {
    cfg: RuntimeConfig,
    params: Arc<FluidParams>,
    digest: [u8; 8],
    state: RuntimeState,
    shared_state: Arc<Mutex<RuntimeState>>,
    log: EventLog,
    inbox: Receiver<Inbound>,
    inbox_tx: Sender<Inbound>,
    deferred: VecDeque<Inbound>,
    master: Option<Conn>,
    clients: HashMap<ConnId, Conn>,
    next_dial: Instant,
    stop: Arc<AtomicBool>,
}

pub struct WorkerHandle {
    /// Where clients connect after the master is lost.
    pub client_addr: SocketAddr,
    pub log: EventLog,
    state: Arc<Mutex<RuntimeState>>,
    inbox: Sender<Inbound>,
    join: JoinHandle<Result<()>>,
}

impl WorkerHandle {
    pub fn state(&self) -> RuntimeState {
        *self.state.lock().expect("state poisoned")
    }

    /// Stop immediately: sockets close and heartbeats cease.
    pub fn kill(&self) {
        let _ = self.inbox.send(Inbound::Kill);
    }

    pub fn join(self) -> Result<()> {
        self.join.join().unwrap_or_else(|_| Err(RuntimeError::Invalid("worker thread panicked".into())))
    }

    pub fn is_finished(&self) -> bool {
        self.join.is_finished()
    }
}

pub fn start_worker(cfg: RuntimeConfig, params: FluidParams, log: EventLog) -> Result<WorkerHandle> {
    cfg.validate()?;
    let listener = link::bind(&cfg.client_listen)?;
    let client_addr = listener.local_addr()?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    link::spawn_acceptor(listener, tx.clone(), stop.clone(), cfg.timeout());
    let state = RuntimeState::new(cfg.policy);
    let shared_state = Arc::new(Mutex::new(state));
    let digest = model_hash(&params);
    log.record(
        state,
        "start",
        format!("role=worker master={} clients={client_addr} digest={}", cfg.connect, hex(&digest)),
    );
    let mut w = Worker {
        cfg,
        params: Arc::new(params),
        digest,
        state,
        shared_state: shared_state.clone(),
        log: log.clone(),
        inbox: rx,
        inbox_tx: tx.clone(),
        deferred: VecDeque::new(),
        master: None,
        clients: HashMap::new(),
        next_dial: Instant::now(),
        stop,
    };
    let join = thread::spawn(move || {
        let r = w.run();
        w.stop.store(true, Ordering::SeqCst);
        for c in w.clients.values().chain(w.master.iter()) {
            c.close();
        }
        if let Err(e) = &r {
            w.log.record(w.state, "exit", format!("error={e}"));
        }
        r
    });
    Ok(WorkerHandle {
        client_addr,
        log,
        state: shared_state,
        inbox: tx,
        join,
    })
}

impl Worker {
    fn tick(&self) -> Duration {
        (self.cfg.heartbeat / 4).max(Duration::from_millis(1))
    }

    fn run(&mut self) -> Result<()> {
        loop {
            if self.master.is_none() && self.state.phase != Phase::Halted && Instant::now() >= self.next_dial {
                self.dial()?;
            }
            let next = match self.deferred.pop_front() {
                Some(ev) => Some(ev),
                None => match self.inbox.recv_timeout(self.tick()) {
                    Ok(ev) => Some(ev),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => return Ok(()),
                },
            };
            if let Some(ev) = next {
                match ev {
                    Inbound::Kill => {
                        self.log.record(self.state, "killed", "");
                        return Ok(());
                    }
                    Inbound::Shutdown => {
                        self.log.record(self.state, "shutdown", "requested");
                        return Ok(());
                    }
                    Inbound::Joined { role, conn, .. } => self.client_joined(role, conn),
                    Inbound::Frame(id, msg) => {
                        if self.master.as_ref().is_some_and(|m| m.id == id) {
                            if self.master_frame(msg)? {
                                return Ok(());
                            }
                        } else if self.clients.contains_key(&id) {
                            self.client_frame(id, msg);
                        }
                    }
                    Inbound::Closed(id, reason) => {
                        if self.master.as_ref().is_some_and(|m| m.id == id) {
                            self.log.record(self.state, "master_link_closed", reason);
                        } else {
                            self.clients.remove(&id);
                        }
                    }
                }
            }
            self.check_master();
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
            Outcome::Undefined => self.log.record(t.state, "ignored", format!("event={event} cause={cause}")),
            Outcome::Rejected(why) => self.log.record(t.state, "rejected", format!("event={event} reason={why:?}")),
            _ => {}
        }
        t.outcome
    }

    /// One connection attempt. Only a model mismatch is fatal.
    fn dial(&mut self) -> Result<()> {
        self.next_dial = Instant::now() + self.cfg.heartbeat;
        match link::dial(
            &self.cfg.connect,
            Role::Worker,
            self.digest,
            self.cfg.timeout(),
            self.inbox_tx.clone(),
        ) {
            Ok((conn, peer)) if peer != self.digest => {
                conn.close();
                self.log.record(self.state, "model_mismatch", format!("peer={}", hex(&peer)));
                Err(RuntimeError::ModelMismatch {
                    local: hex(&self.digest),
                    peer: hex(&peer),
                })
            }
            Ok((conn, _)) => {
                link::spawn_heartbeats(&conn, self.cfg.heartbeat, self.stop.clone());
                self.log.record(self.state, "master_joined", format!("peer={}", conn.peer));
                self.master = Some(conn);
                if self.state.phase == Phase::WorkerOnly {
                    self.apply(Event::MasterRejoin, "reconnected");
                }
                Ok(())
            }
            Err(RuntimeError::Remote {
                code: ErrorCode::ModelMismatch,
                message,
            }) => {
                self.log.record(self.state, "model_mismatch", message.clone());
                Err(RuntimeError::ModelMismatch {
                    local: hex(&self.digest),
                    peer: message,
                })
            }
            Err(_) => Ok(()),
        }
    }

    fn check_master(&mut self) {
        let Some(m) = &self.master else { return };
        let silence = m.silence();
        if silence <= self.cfg.timeout() {
            return;
        }
        m.close();
        self.master = None;
        self.next_dial = Instant::now() + self.cfg.heartbeat;
        if self.state.phase == Phase::Init {
            return;
        }
        self.apply(Event::MasterTimeout, &format!("silence_ms={}", silence.as_millis()));
    }

    /// Returns `true` when the master asked us to stop.
    fn master_frame(&mut self, msg: Message) -> Result<bool> {
        match msg {
            Message::SetMode(mode) => {
                self.apply(Event::SetMode(mode), "master");
            }
            Message::InferReq { req_id, count, images } => self.master_request(req_id, count, images),
            Message::Shutdown => {
                self.log.record(self.state, "shutdown", "by master");
                return Ok(true);
            }
            Message::Error { code, message } => {
                self.log.record(self.state, "master_error", format!("code={code:?} {message}"));
            }
            _ => {}
        }
        Ok(false)
    }

    fn master_request(&mut self, req_id: u32, count: u16, images: Vec<f32>) {
        let Some(master) = self.master.clone() else { return };
        let started = Instant::now();
        let batch = match images_tensor(count, &images) {
            Ok(b) => b,
            Err(e) => {
                let _ = master.send(&Message::error(ErrorCode::BadRequest, e.to_string()));
                return;
            }
        };
        match self.state.mode {
            Mode::Ha => {
                let timeout = self.cfg.timeout();
                let tick = self.tick();
                let params = self.params.clone();
                let inbox = &self.inbox;
                let deferred = &mut self.deferred;
                let recv = || -> Result<Message> {
                    loop {
                        if master.silence() > timeout {
                            return Err(RuntimeError::Timeout("master silent during HA batch".into()));
                        }
                        match inbox.recv_timeout(tick) {
                            Ok(Inbound::Frame(cid, msg)) if cid == master.id => return Ok(msg),
                            Ok(other) => deferred.push_back(other),
                            Err(RecvTimeoutError::Timeout) => {}
                            Err(RecvTimeoutError::Disconnected) => {
                                return Err(RuntimeError::Closed("inbox closed".into()))
                            }
                        }
                    }
                };
                if let Err(e) = ha_worker_batch(&params, req_id, &batch, |m| master.send(m), recv) {
                    self.log.record(self.state, "ha_batch_interrupted", format!("req={req_id} {e}"));
                }
            }
            Mode::Ht => {
                let reply = match predict(&self.params, SubnetId::U50, &batch) {
                    Ok(labels) => Message::Result {
                        req_id,
                        count,
                        labels,
                        latency_us: started.elapsed().as_micros() as u64,
                    },
                    Err(e) => Message::error(ErrorCode::Internal, e.to_string()),
                };
                let _ = master.send(&reply);
            }
        }
    }

    fn client_joined(&mut self, role: Role, conn: Conn) {
        if role != Role::Client {
            let _ = conn.send(&Message::error(ErrorCode::BadRequest, "worker client port takes clients only"));
            conn.close();
            return;
        }
        let _ = conn.send(&Message::Hello {
            role: Role::Worker,
            version: PROTOCOL_VERSION,
            digest: self.digest,
        });
        self.clients.insert(conn.id, conn);
    }

    fn client_frame(&mut self, id: ConnId, msg: Message) {
        let Some(conn) = self.clients.get(&id).cloned() else { return };
        let Message::InferReq { req_id, count, images } = msg else {
            let _ = conn.send(&Message::error(ErrorCode::Protocol, format!("unexpected {}", msg.name())));
            return;
        };
        let started = Instant::now();
        let reply = match self.state.phase {
            Phase::WorkerOnly => match images_tensor(count, &images).and_then(|b| predict(&self.params, SubnetId::U50, &b)) {
                Ok(labels) => Message::Result {
                    req_id,
                    count,
                    labels,
                    latency_us: started.elapsed().as_micros() as u64,
                },
                Err(e) => Message::request_error(ErrorCode::BadRequest, req_id, e),
            },
            Phase::Halted => Message::request_error(ErrorCode::Halted, req_id, "system halted"),
            _ => Message::request_error(ErrorCode::Retry, req_id, "worker serves clients only without a master"),
        };
        let _ = conn.send(&reply);
    }
}
