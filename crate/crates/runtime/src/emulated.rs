//! Deterministic single-process emulation of a master, a worker and one
//! closed-loop client. Time is virtual: links cost `LatencyModel` delays,
//! compute costs a fixed time per multiply-accumulate, and predictions are
//! computed for real. The protocol logic follows the socket services: same
//! failover table, HA/HT dispatch, heartbeat timeouts and client retries.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use fluidnn_core::data::model_hash;
use fluidnn_core::model::arch::{conv_macs, fc_macs};
use fluidnn_core::model::partition::split_forward;
use fluidnn_core::model::{FluidParams, SubnetId, ARCH};

use crate::error::{Result, RuntimeError};
use crate::failover::{failover_step, Event, Outcome, Phase, Policy, RuntimeState};
use crate::ha::{images_tensor, labels_of, predict, IMAGE_FLOATS};
use crate::latency::LatencyModel;
use crate::log::LogRecord;
use crate::wire::{ErrorCode, Mode};

type Ns = u64;

const FRAME_HEADER: usize = 5;
const HELLO_BYTES: usize = FRAME_HEADER + 11;
const HEARTBEAT_BYTES: usize = FRAME_HEADER + 12;
const SET_MODE_BYTES: usize = FRAME_HEADER + 1;
const ERROR_BYTES: usize = FRAME_HEADER + 2 + 24;

fn infer_req_bytes(count: usize) -> usize {
    FRAME_HEADER + 6 + 4 * IMAGE_FLOATS * count
}

fn act_chunk_bytes(floats: usize) -> usize {
    FRAME_HEADER + 11 + 4 * floats
}

fn partial_logits_bytes(count: usize) -> usize {
    FRAME_HEADER + 6 + 4 * ARCH.classes * count
}

fn result_bytes(count: usize) -> usize {
    FRAME_HEADER + 14 + count
}

/// Multiply-accumulates per image when one device runs `spec` alone.
pub fn spec_macs(spec: SubnetId) -> u64 {
    let c = spec.spec().channels().len();
    let mut cin = ARCH.input_channels;
    let mut total = 0;
    for layer in 0..ARCH.conv_layers {
        total += conv_macs(layer, c, cin);
        cin = c;
    }
    total + fc_macs(spec.spec().features().len())
}

/// Per-image multiply-accumulates of one device's share of a joint batch:
/// each conv layer, then the classifier.
pub fn joint_stage_macs() -> (Vec<u64>, u64) {
    let half = ARCH.conv_channels_full / 2;
    let mut cin = ARCH.input_channels;
    let mut stages = Vec::with_capacity(ARCH.conv_layers);
    for layer in 0..ARCH.conv_layers {
        stages.push(conv_macs(layer, half, cin));
        cin = ARCH.conv_channels_full;
    }
    (stages, fc_macs(ARCH.fc_in_features / 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Device {
    Master,
    Worker,
}

impl Device {
    pub fn name(self) -> &'static str {
        match self {
            Device::Master => "master",
            Device::Worker => "worker",
        }
    }

    pub fn other(self) -> Device {
        match self {
            Device::Master => Device::Worker,
            Device::Worker => Device::Master,
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Device {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "master" => Ok(Device::Master),
            "worker" => Ok(Device::Worker),
            _ => Err(RuntimeError::Invalid(format!("unknown device {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Kill(Device),
    Restore(Device),
    SetMode(Mode),
}

/// An action at `at` after the cluster has formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub at: Duration,
    pub action: Action,
}

/// How a batch was answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Route {
    /// W100 split across both devices.
    Joint,
    Single(SubnetId),
}

impl Route {
    pub fn spec(self) -> SubnetId {
        match self {
            Route::Joint => SubnetId::W100,
            Route::Single(s) => s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmuConfig {
    pub policy: Policy,
    pub mode: Mode,
    pub latency: LatencyModel,
    pub heartbeat: Duration,
    pub timeout: Duration,
    /// Compute time per multiply-accumulate, same on both devices.
    pub ns_per_mac: f64,
    pub batch: usize,
    /// Batches the client keeps outstanding.
    pub window: usize,
    /// Offered load in images/s; `None` is closed loop.
    pub rate: Option<f64>,
    /// Silence after which the client resubmits to the other device.
    pub client_timeout: Duration,
    pub backoff: Duration,
    pub duration: Duration,
}

impl Default for EmuConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Fluid,
            mode: Mode::Ha,
            latency: LatencyModel::default(),
            heartbeat: Duration::from_millis(100),
            timeout: Duration::from_millis(300),
            ns_per_mac: 5.0,
            batch: 64,
            window: 4,
            rate: None,
            client_timeout: Duration::from_secs(2),
            backoff: Duration::from_millis(100),
            duration: Duration::from_secs(120),
        }
    }
}

impl EmuConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RuntimeError::Invalid(m));
        self.latency.validate()?;
        if self.batch == 0 || self.batch > usize::from(u16::MAX) {
            return bad(format!("batch {} outside 1..=65535", self.batch));
        }
        if self.window == 0 {
            return bad("client window must be at least 1".into());
        }
        if self.heartbeat.is_zero() || self.timeout <= self.heartbeat {
            return bad("timeout must exceed a non-zero heartbeat interval".into());
        }
        if !self.ns_per_mac.is_finite() || self.ns_per_mac < 0.0 {
            return bad(format!("compute cost {} ns/MAC", self.ns_per_mac));
        }
        if self.rate.is_some_and(|r| !r.is_finite() || r <= 0.0) {
            return bad("rate must be positive".into());
        }
        if !self.policy.allows(self.mode) {
            return bad(format!("{} policy does not support {} mode", self.policy, self.mode));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub at_us: u64,
    pub req_id: u32,
    pub first: usize,
    pub count: usize,
    pub labels: Vec<u8>,
    pub route: Route,
    pub device: Device,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub at_us: u64,
    pub req_id: u32,
    pub first: usize,
    pub count: usize,
    pub code: ErrorCode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmuRun {
    pub completions: Vec<Completion>,
    pub failures: Vec<Failure>,
    /// System state changes; the first entry is the state at time zero.
    pub timeline: Vec<(u64, RuntimeState)>,
    pub log: Vec<LogRecord>,
    pub submitted_images: usize,
    pub in_flight_images: usize,
    pub end_us: u64,
    pub messages: u64,
}

/// The state an observer sees: the master's while it is serving, otherwise
/// the worker's if it serves alone.
pub fn system_state(policy: Policy, master: Option<RuntimeState>, worker: Option<RuntimeState>) -> RuntimeState {
    match (master, worker) {
        (Some(m), Some(w)) if !m.is_serving() && w.phase == Phase::WorkerOnly => w,
        (Some(m), _) => m,
        (None, Some(w)) => w,
        (None, None) => RuntimeState {
            phase: Phase::Halted,
            ..RuntimeState::new(policy)
        },
    }
}

/// Predictions memoised per (route, first image, count). Valid for one
/// parameter set and one image stream.
#[derive(Default)]
pub struct PredictionCache {
    digest: Option<[u8; 8]>,
    labels: HashMap<(Route, usize, usize), Vec<u8>>,
}

impl PredictionCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn bind(&mut self, params: &FluidParams) -> Result<()> {
        let d = model_hash(params);
        match self.digest {
            Some(old) if old != d => Err(RuntimeError::Invalid("prediction cache used with other parameters".into())),
            _ => {
                self.digest = Some(d);
                Ok(())
            }
        }
    }

    fn get(&mut self, params: &FluidParams, images: &[f32], route: Route, first: usize, count: usize) -> Result<Vec<u8>> {
        if let Some(v) = self.labels.get(&(route, first, count)) {
            return Ok(v.clone());
        }
        let x = images_tensor(count as u16, &images[first * IMAGE_FLOATS..(first + count) * IMAGE_FLOATS])?;
        let labels = match route {
            Route::Joint => labels_of(&split_forward(params, &x)?),
            Route::Single(spec) => predict(params, spec, &x)?,
        };
        self.labels.insert((route, first, count), labels.clone());
        Ok(labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Endpoint {
    Client,
    Dev(Device),
}

#[derive(Debug, Clone)]
enum Msg {
    Infer { req: u32, first: usize, count: usize },
    SetMode(Mode),
    Result { req: u32, labels: Vec<u8>, route: Route, device: Device },
    Error { req: Option<u32>, code: ErrorCode },
    Join { worker_life: u32 },
    Welcome { link: u64 },
    Refused,
}

#[derive(Debug, Clone)]
struct WJob {
    req: u32,
    first: usize,
    count: usize,
    reply: Endpoint,
    link: Option<u64>,
}

#[derive(Debug)]
enum Ev {
    Inject(Action),
    Deliver {
        from: Endpoint,
        to: Endpoint,
        life: u32,
        link: Option<u64>,
        msg: Msg,
    },
    LocalDone { life: u32 },
    JointDone { life: u32, link: u64, worker_send: Ns },
    WorkerDone { life: u32, job: WJob },
    Tick { dev: Device, life: u32 },
    Dial { life: u32 },
    ClientWake,
}

struct Queued {
    at: Ns,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    // Min-heap on (time, insertion order).
    fn cmp(&self, o: &Self) -> CmpOrdering {
        (o.at, o.seq).cmp(&(self.at, self.seq))
    }
}

struct Link {
    start: Ns,
    master_life: u32,
    worker_life: u32,
    /// When either end died.
    ended: Option<Ns>,
}

struct Core {
    alive: bool,
    life: u32,
    state: RuntimeState,
    link: Option<u64>,
    last_rx: Ns,
}

impl Core {
    fn new(policy: Policy) -> Self {
        Self {
            alive: true,
            life: 0,
            state: RuntimeState::new(policy),
            link: None,
            last_rx: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Job {
    req: u32,
    first: usize,
    count: usize,
}

enum Busy {
    Local(Job, SubnetId),
    Joint(Job),
}

struct Pending {
    first: usize,
    count: usize,
    sent_at: Ns,
    retry_at: Option<Ns>,
}

struct Sim<'a> {
    cfg: &'a EmuConfig,
    params: &'a FluidParams,
    images: &'a [f32],
    n_images: usize,
    cache: &'a mut PredictionCache,
    now: Ns,
    origin: Option<Ns>,
    seq: u64,
    heap: BinaryHeap<Queued>,
    links: BTreeMap<u64, Link>,
    next_link: u64,
    /// Latest arrival per directed channel; frames never overtake.
    channels: HashMap<(Endpoint, Endpoint), Ns>,
    messages: u64,

    master: Core,
    queue: VecDeque<Job>,
    forwarded: BTreeMap<u32, Job>,
    known: BTreeSet<u32>,
    next_internal: u32,
    dispatched: u64,
    busy: Option<Busy>,

    worker: Core,
    worker_free: Ns,
    dialing: Option<Ns>,

    target: Device,
    next_image: usize,
    next_req: u32,
    batches_submitted: usize,
    outstanding: BTreeMap<u32, Pending>,
    hold_until: Ns,
    wakes: BTreeSet<Ns>,

    completions: Vec<Completion>,
    failures: Vec<Failure>,
    timeline: Vec<(Ns, RuntimeState)>,
    log: Vec<(Ns, RuntimeState, &'static str, String)>,
}

fn ns(d: Duration) -> Ns {
    d.as_nanos() as Ns
}

/// Runs the client over `images` (28×28 floats each) against an emulated
/// master and worker holding `params`. Injection times count from the
/// moment both devices have joined.
pub fn run_emulated(
    params: &FluidParams,
    images: &[f32],
    cfg: &EmuConfig,
    injections: &[Injection],
    cache: &mut PredictionCache,
) -> Result<EmuRun> {
    cfg.validate()?;
    if !images.len().is_multiple_of(IMAGE_FLOATS) {
        return Err(RuntimeError::Invalid(format!(
            "{} floats is not a whole number of images",
            images.len()
        )));
    }
    if injections.windows(2).any(|w| w[1].at < w[0].at) {
        return Err(RuntimeError::Invalid("injections must be in time order".into()));
    }
    cache.bind(params)?;
    let sim = Sim {
        cfg,
        params,
        images,
        n_images: images.len() / IMAGE_FLOATS,
        cache,
        now: 0,
        origin: None,
        seq: 0,
        heap: BinaryHeap::new(),
        links: BTreeMap::new(),
        next_link: 1,
        channels: HashMap::new(),
        messages: 0,
        master: Core::new(cfg.policy),
        queue: VecDeque::new(),
        forwarded: BTreeMap::new(),
        known: BTreeSet::new(),
        next_internal: 1,
        dispatched: 0,
        busy: None,
        worker: Core::new(cfg.policy),
        worker_free: 0,
        dialing: None,
        target: Device::Master,
        next_image: 0,
        next_req: 1,
        batches_submitted: 0,
        outstanding: BTreeMap::new(),
        hold_until: 0,
        wakes: BTreeSet::new(),
        completions: Vec::new(),
        failures: Vec::new(),
        timeline: Vec::new(),
        log: Vec::new(),
    };
    sim.run(injections)
}

impl<'a> Sim<'a> {
    fn push(&mut self, at: Ns, ev: Ev) {
        self.seq += 1;
        self.heap.push(Queued { at, seq: self.seq, ev });
    }

    fn lat(&self, bytes: usize) -> Ns {
        (self.cfg.latency.transfer_us(bytes) * 1000.0).round() as Ns
    }

    fn cost(&self, macs: u64) -> Ns {
        (macs as f64 * self.cfg.ns_per_mac).round() as Ns
    }

    fn tick(&self) -> Ns {
        (ns(self.cfg.heartbeat) / 4).max(1_000_000)
    }

    fn rel_us(&self, t: Ns) -> u64 {
        t.saturating_sub(self.origin.unwrap_or(0)) / 1000
    }

    fn core(&mut self, d: Device) -> &mut Core {
        match d {
            Device::Master => &mut self.master,
            Device::Worker => &mut self.worker,
        }
    }

    fn record(&mut self, state: RuntimeState, event: &'static str, detail: String) {
        self.log.push((self.now, state, event, detail));
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, bytes: usize, msg: Msg) {
        let (life, link) = match (from, to) {
            (_, Endpoint::Client) => (0, None),
            (Endpoint::Client, Endpoint::Dev(d)) => (self.core(d).life, None),
            (Endpoint::Dev(s), Endpoint::Dev(d)) => {
                let link = match msg {
                    Msg::Join { .. } | Msg::Welcome { .. } | Msg::Refused => None,
                    _ => self.core(s).link,
                };
                (self.core(d).life, link)
            }
        };
        self.messages += 1;
        let arrive = self.now + self.lat(bytes);
        let last = self.channels.entry((from, to)).or_insert(0);
        let at = arrive.max(*last);
        *last = at;
        self.push(at, Ev::Deliver { from, to, life, link, msg });
    }

    fn send_client(&mut self, from: Device, bytes: usize, msg: Msg) {
        self.send(Endpoint::Dev(from), Endpoint::Client, bytes, msg);
    }

    fn apply(&mut self, dev: Device, event: Event, cause: &str) -> Outcome {
        let before = self.core(dev).state;
        let t = failover_step(before, event);
        self.core(dev).state = t.state;
        match &t.outcome {
            Outcome::Changed if before.phase != t.state.phase => {
                let specs: Vec<&str> = t.state.spec_names().iter().map(|s| s.name()).collect();
                self.record(
                    t.state,
                    "transition",
                    format!("dev={dev} from={} cause={cause} specs={}", before.phase, specs.join("+")),
                );
            }
            Outcome::Undefined => self.record(t.state, "ignored", format!("dev={dev} event={event} cause={cause}")),
            Outcome::Rejected(why) => {
                self.record(t.state, "rejected", format!("dev={dev} event={event} reason={why:?}"))
            }
            _ => {}
        }
        if dev == Device::Master && t.state.phase == Phase::Halted && before.phase != Phase::Halted {
            self.fail_all();
        }
        t.outcome
    }

    fn system(&self) -> RuntimeState {
        system_state(
            self.cfg.policy,
            self.master.alive.then_some(self.master.state),
            self.worker.alive.then_some(self.worker.state),
        )
    }

    fn formed(&self) -> bool {
        self.master.state.phase.is_both() && self.worker.link.is_some() && self.worker.state.phase.is_both()
    }

    fn run(mut self, injections: &[Injection]) -> Result<EmuRun> {
        self.push(0, Ev::Dial { life: 0 });
        let tick = self.tick();
        self.push(tick, Ev::Tick { dev: Device::Master, life: 0 });
        self.push(tick, Ev::Tick { dev: Device::Worker, life: 0 });

        let startup_limit = 10 * ns(self.cfg.timeout).max(1_000_000_000);
        while !self.formed() {
            let Some(q) = self.heap.pop() else { break };
            if q.at > startup_limit {
                return Err(RuntimeError::Timeout(format!(
                    "emulated cluster did not form: master {}, worker {}",
                    self.master.state, self.worker.state
                )));
            }
            self.now = q.at;
            self.handle(q.ev)?;
        }
        let origin = self.now;
        self.origin = Some(origin);
        self.timeline.push((origin, self.system()));
        for inj in injections {
            self.push(origin + ns(inj.at), Ev::Inject(inj.action));
        }
        self.wake(origin);
        let deadline = origin + ns(self.cfg.duration);
        let mut end = deadline;
        while let Some(q) = self.heap.pop() {
            if q.at > deadline {
                break;
            }
            self.now = q.at;
            self.handle(q.ev)?;
            let s = self.system();
            if self.timeline.last().map(|(_, x)| *x) != Some(s) {
                self.timeline.push((self.now, s));
            }
            if self.next_image >= self.n_images && self.outstanding.is_empty() {
                end = self.now;
                break;
            }
        }
        Ok(self.finish(end))
    }

    fn finish(self, end: Ns) -> EmuRun {
        let origin = self.origin.unwrap_or(0);
        let rel = |t: Ns| t.saturating_sub(origin) / 1000;
        EmuRun {
            submitted_images: self.next_image,
            in_flight_images: self.outstanding.values().map(|p| p.count).sum(),
            end_us: rel(end),
            messages: self.messages,
            timeline: self.timeline.iter().map(|&(t, s)| (rel(t), s)).collect(),
            log: self
                .log
                .iter()
                .map(|(t, s, e, d)| LogRecord {
                    epoch_ms: rel(*t) / 1000,
                    state: s.to_string(),
                    event: (*e).to_owned(),
                    detail: d.clone(),
                })
                .collect(),
            completions: self.completions,
            failures: self.failures,
        }
    }

    fn handle(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::Inject(a) => self.inject(a),
            Ev::Deliver { from, to, life, link, msg } => match to {
                Endpoint::Client => self.client_msg(from, msg),
                Endpoint::Dev(d) => {
                    let now = self.now;
                    let c = self.core(d);
                    if !c.alive || c.life != life {
                        return Ok(());
                    }
                    if let Some(l) = link {
                        if c.link != Some(l) {
                            return Ok(());
                        }
                    }
                    if matches!(from, Endpoint::Dev(_)) && link.is_some() {
                        c.last_rx = now;
                    }
                    match d {
                        Device::Master => self.master_msg(from, msg),
                        Device::Worker => self.worker_msg(from, msg),
                    }
                }
            },
            Ev::LocalDone { life } => self.local_done(life),
            Ev::JointDone { life, link, worker_send } => self.joint_done(life, link, worker_send),
            Ev::WorkerDone { life, job } => self.worker_done(life, job),
            Ev::Tick { dev, life } => {
                if self.core(dev).alive && self.core(dev).life == life {
                    self.check_peer(dev);
                    let at = self.now + self.tick();
                    self.push(at, Ev::Tick { dev, life });
                }
                Ok(())
            }
            Ev::Dial { life } => {
                self.dial(life);
                Ok(())
            }
            Ev::ClientWake => {
                self.wakes.remove(&self.now);
                self.client_pump();
                Ok(())
            }
        }
    }

    fn inject(&mut self, action: Action) -> Result<()> {
        let state = self.system();
        match action {
            Action::Kill(d) => {
                if !self.core(d).alive {
                    self.record(state, "ignored", format!("inject=kill dev={d} already down"));
                    return Ok(());
                }
                let now = self.now;
                let life = self.core(d).life;
                for l in self.links.values_mut() {
                    let mine = match d {
                        Device::Master => l.master_life == life,
                        Device::Worker => l.worker_life == life,
                    };
                    if mine && l.ended.is_none() {
                        l.ended = Some(now);
                    }
                }
                let c = self.core(d);
                c.alive = false;
                c.link = None;
                if d == Device::Master {
                    self.queue.clear();
                    self.forwarded.clear();
                    self.known.clear();
                    self.busy = None;
                } else {
                    self.dialing = None;
                }
                self.record(state, "killed", format!("dev={d}"));
            }
            Action::Restore(d) => {
                if self.core(d).alive {
                    self.record(state, "ignored", format!("inject=restore dev={d} already up"));
                    return Ok(());
                }
                let policy = self.cfg.policy;
                let now = self.now;
                let c = self.core(d);
                c.alive = true;
                c.life += 1;
                c.state = RuntimeState::new(policy);
                c.link = None;
                c.last_rx = now;
                let life = c.life;
                if d == Device::Master {
                    self.dispatched = 0;
                } else {
                    self.worker_free = now;
                    self.push(now, Ev::Dial { life });
                }
                let at = now + self.tick();
                self.push(at, Ev::Tick { dev: d, life });
                self.record(state, "restored", format!("dev={d}"));
            }
            Action::SetMode(m) => {
                self.record(state, "set_mode", format!("mode={m}"));
                self.send(Endpoint::Client, Endpoint::Dev(Device::Master), SET_MODE_BYTES, Msg::SetMode(m));
            }
        }
        Ok(())
    }

    /// When `dev` last heard from its peer on its current link.
    fn last_heard(&self, dev: Device) -> Option<Ns> {
        let core = match dev {
            Device::Master => &self.master,
            Device::Worker => &self.worker,
        };
        let link = self.links.get(&core.link?)?;
        let h = ns(self.cfg.heartbeat);
        let hb = self.lat(HEARTBEAT_BYTES);
        let until = link.ended.unwrap_or(self.now).min(self.now);
        let mut heard = link.start;
        if until >= link.start {
            let k = (until - link.start) / h;
            let mut arrive = link.start + k * h + hb;
            if arrive > self.now && k > 0 {
                arrive -= h;
            }
            if arrive <= self.now {
                heard = heard.max(arrive);
            }
        }
        Some(heard.max(core.last_rx))
    }

    fn check_peer(&mut self, dev: Device) {
        let Some(heard) = self.last_heard(dev) else { return };
        let silence = self.now - heard;
        if silence <= ns(self.cfg.timeout) {
            return;
        }
        let cause = format!("silence_ms={}", silence / 1_000_000);
        match dev {
            Device::Master if self.master.state.phase.is_both() => self.worker_lost(&cause),
            Device::Master => {}
            Device::Worker => {
                self.worker.link = None;
                self.record(self.worker.state, "master_lost", cause.clone());
                if self.worker.state.phase != Phase::Init {
                    self.apply(Device::Worker, Event::MasterTimeout, &cause);
                }
            }
        }
    }

    fn worker_lost(&mut self, cause: &str) {
        self.master.link = None;
        self.requeue_in_flight();
        self.apply(Device::Master, Event::WorkerTimeout, cause);
        self.dispatch();
    }

    /// Puts batches that depended on the worker back at the head of the queue.
    fn requeue_in_flight(&mut self) {
        let forwarded = std::mem::take(&mut self.forwarded);
        for (_, job) in forwarded.into_iter().rev() {
            self.queue.push_front(job);
        }
        if let Some(Busy::Joint(_)) = &self.busy {
            if let Some(Busy::Joint(job)) = self.busy.take() {
                self.record(self.master.state, "ha_batch_interrupted", format!("req={}", job.req));
                self.queue.push_front(job);
            }
        }
    }

    fn fail_all(&mut self) {
        let mut jobs: Vec<Job> = self.queue.drain(..).collect();
        jobs.extend(std::mem::take(&mut self.forwarded).into_values());
        if let Some(Busy::Joint(_)) = &self.busy {
            if let Some(Busy::Joint(job)) = self.busy.take() {
                jobs.push(job);
            }
        }
        for job in jobs {
            self.known.remove(&job.req);
            self.send_client(
                Device::Master,
                ERROR_BYTES,
                Msg::Error {
                    req: Some(job.req),
                    code: ErrorCode::Halted,
                },
            );
        }
    }

    fn dial(&mut self, life: u32) {
        if !self.worker.alive || self.worker.life != life {
            return;
        }
        let at = self.now + ns(self.cfg.heartbeat);
        self.push(at, Ev::Dial { life });
        if self.worker.link.is_some() || self.worker.state.phase == Phase::Halted {
            return;
        }
        if let Some(started) = self.dialing {
            if self.now - started <= ns(self.cfg.timeout) {
                return;
            }
        }
        if self.master.alive {
            self.dialing = Some(self.now);
            self.send(
                Endpoint::Dev(Device::Worker),
                Endpoint::Dev(Device::Master),
                HELLO_BYTES,
                Msg::Join { worker_life: life },
            );
        }
    }

    fn master_msg(&mut self, from: Endpoint, msg: Msg) -> Result<()> {
        match (from, msg) {
            (Endpoint::Client, Msg::Infer { req, first, count }) => {
                let phase = self.master.state.phase;
                if phase == Phase::Halted || phase == Phase::Init {
                    let code = if phase == Phase::Halted { ErrorCode::Halted } else { ErrorCode::Retry };
                    self.send_client(Device::Master, ERROR_BYTES, Msg::Error { req: Some(req), code });
                    return Ok(());
                }
                if self.known.insert(req) {
                    self.queue.push_back(Job { req, first, count });
                    self.dispatch();
                }
            }
            (Endpoint::Client, Msg::SetMode(m)) => {
                if let Outcome::Rejected(_) = self.apply(Device::Master, Event::SetMode(m), "client") {
                    self.send_client(
                        Device::Master,
                        ERROR_BYTES,
                        Msg::Error {
                            req: None,
                            code: ErrorCode::ModeRejected,
                        },
                    );
                } else if self.master.link.is_some() {
                    let mode = self.master.state.mode;
                    self.send(
                        Endpoint::Dev(Device::Master),
                        Endpoint::Dev(Device::Worker),
                        SET_MODE_BYTES,
                        Msg::SetMode(mode),
                    );
                    self.dispatch();
                }
            }
            (Endpoint::Dev(_), Msg::Join { worker_life }) => self.worker_joined(worker_life),
            (Endpoint::Dev(_), Msg::Result { req, labels, route, device }) => {
                if let Some(job) = self.forwarded.remove(&req) {
                    self.known.remove(&job.req);
                    self.send_client(
                        Device::Master,
                        result_bytes(job.count),
                        Msg::Result {
                            req: job.req,
                            labels,
                            route,
                            device,
                        },
                    );
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn worker_joined(&mut self, worker_life: u32) {
        let current = self.master.link.and_then(|l| self.links.get(&l));
        let duplicate = current.is_some_and(|l| l.worker_life == worker_life && l.ended.is_none());
        if self.master.state.phase == Phase::Halted || duplicate {
            self.send(Endpoint::Dev(Device::Master), Endpoint::Dev(Device::Worker), ERROR_BYTES, Msg::Refused);
            return;
        }
        if self.master.link.is_some() {
            self.requeue_in_flight();
        }
        let id = self.next_link;
        self.next_link += 1;
        self.links.insert(
            id,
            Link {
                start: self.now,
                master_life: self.master.life,
                worker_life,
                ended: None,
            },
        );
        self.master.link = Some(id);
        self.master.last_rx = self.now;
        self.record(self.master.state, "worker_joined", format!("link={id}"));
        match self.master.state.phase {
            Phase::Init => {
                self.apply(Device::Master, Event::SetMode(self.cfg.mode), "worker_joined");
            }
            Phase::MasterOnly => {
                self.apply(Device::Master, Event::WorkerRejoin, "worker_joined");
            }
            _ => {}
        }
        let mode = self.master.state.mode;
        self.send(Endpoint::Dev(Device::Master), Endpoint::Dev(Device::Worker), HELLO_BYTES, Msg::Welcome { link: id });
        self.send(Endpoint::Dev(Device::Master), Endpoint::Dev(Device::Worker), SET_MODE_BYTES, Msg::SetMode(mode));
        self.dispatch();
    }

    fn can_dispatch(&self) -> bool {
        matches!(self.master.state.phase, Phase::HaBoth | Phase::HtBoth | Phase::MasterOnly)
    }

    fn dispatch(&mut self) {
        while self.busy.is_none() && self.master.alive && self.can_dispatch() {
            let Some(job) = self.queue.pop_front() else { return };
            match self.master.state.phase {
                Phase::HaBoth => {
                    let Some(link) = self.master.link else {
                        self.queue.push_front(job);
                        return;
                    };
                    self.start_joint(job, link);
                }
                Phase::HtBoth if self.dispatched % 2 == 1 => {
                    self.dispatched += 1;
                    let id = self.next_internal;
                    self.next_internal = self.next_internal.wrapping_add(1).max(1);
                    let msg = Msg::Infer {
                        req: id,
                        first: job.first,
                        count: job.count,
                    };
                    let bytes = infer_req_bytes(job.count);
                    self.forwarded.insert(id, job);
                    self.send(Endpoint::Dev(Device::Master), Endpoint::Dev(Device::Worker), bytes, msg);
                }
                _ => {
                    self.dispatched += 1;
                    let spec = SubnetId::W50;
                    let done = self.now + self.cost(spec_macs(spec) * job.count as u64);
                    self.busy = Some(Busy::Local(job, spec));
                    let life = self.master.life;
                    self.push(done, Ev::LocalDone { life });
                }
            }
        }
    }

    /// Lays out one joint batch on both devices and schedules its end.
    fn start_joint(&mut self, job: Job, link: u64) {
        let n = job.count as u64;
        let (stages, fc) = joint_stage_macs();
        let half = ARCH.conv_channels_full / 2;
        let t0 = self.now;
        let mut m = t0;
        let mut w = (t0 + self.lat(infer_req_bytes(job.count))).max(self.worker_free);
        for (layer, macs) in stages.iter().enumerate() {
            let c = self.cost(macs * n);
            m += c;
            w += c;
            if layer + 1 < stages.len() {
                let (h, wd) = ARCH.conv_input_hw(layer + 1);
                let b = self.lat(act_chunk_bytes(job.count * half * h * wd));
                (m, w) = (m.max(w + b), w.max(m + b));
            }
        }
        let c = self.cost(fc * n);
        m += c;
        w += c;
        let done = m.max(w + self.lat(partial_logits_bytes(job.count)));
        self.worker_free = w;
        // INFER_REQ, two ACT_CHUNKs each way, PARTIAL_LOGITS.
        self.messages += 6;
        self.busy = Some(Busy::Joint(job));
        let life = self.master.life;
        self.push(done, Ev::JointDone { life, link, worker_send: w });
    }

    fn joint_done(&mut self, life: u32, link: u64, worker_send: Ns) -> Result<()> {
        if !self.master.alive || self.master.life != life || self.master.link != Some(link) {
            return Ok(());
        }
        if !matches!(self.busy, Some(Busy::Joint(_))) {
            return Ok(());
        }
        if self.links[&link].ended.is_some_and(|t| t < worker_send) {
            // The worker died mid-batch; the heartbeat timeout will requeue it.
            return Ok(());
        }
        let Some(Busy::Joint(job)) = self.busy.take() else { unreachable!() };
        self.dispatched += 1;
        let labels = self.cache.get(self.params, self.images, Route::Joint, job.first, job.count)?;
        self.known.remove(&job.req);
        self.send_client(
            Device::Master,
            result_bytes(job.count),
            Msg::Result {
                req: job.req,
                labels,
                route: Route::Joint,
                device: Device::Master,
            },
        );
        self.dispatch();
        Ok(())
    }

    fn local_done(&mut self, life: u32) -> Result<()> {
        if !self.master.alive || self.master.life != life {
            return Ok(());
        }
        let Some(Busy::Local(job, spec)) = self.busy.take() else {
            return Ok(());
        };
        let labels = self.cache.get(self.params, self.images, Route::Single(spec), job.first, job.count)?;
        self.known.remove(&job.req);
        self.send_client(
            Device::Master,
            result_bytes(job.count),
            Msg::Result {
                req: job.req,
                labels,
                route: Route::Single(spec),
                device: Device::Master,
            },
        );
        self.dispatch();
        Ok(())
    }

    fn worker_msg(&mut self, from: Endpoint, msg: Msg) -> Result<()> {
        match (from, msg) {
            (Endpoint::Dev(_), Msg::Welcome { link }) => {
                self.dialing = None;
                if self.worker.link.is_none() {
                    self.worker.link = Some(link);
                    self.worker.last_rx = self.now;
                    self.record(self.worker.state, "master_joined", format!("link={link}"));
                    if self.worker.state.phase == Phase::WorkerOnly {
                        self.apply(Device::Worker, Event::MasterRejoin, "reconnected");
                    }
                }
            }
            (Endpoint::Dev(_), Msg::Refused) => self.dialing = None,
            (Endpoint::Dev(_), Msg::SetMode(m)) => {
                self.apply(Device::Worker, Event::SetMode(m), "master");
            }
            (Endpoint::Dev(_), Msg::Infer { req, first, count }) => {
                let link = self.worker.link;
                self.worker_enqueue(WJob {
                    req,
                    first,
                    count,
                    reply: Endpoint::Dev(Device::Master),
                    link,
                });
            }
            (Endpoint::Client, Msg::Infer { req, first, count }) => match self.worker.state.phase {
                Phase::WorkerOnly => self.worker_enqueue(WJob {
                    req,
                    first,
                    count,
                    reply: Endpoint::Client,
                    link: None,
                }),
                phase => {
                    let code = if phase == Phase::Halted { ErrorCode::Halted } else { ErrorCode::Retry };
                    self.send_client(Device::Worker, ERROR_BYTES, Msg::Error { req: Some(req), code });
                }
            },
            _ => {}
        }
        Ok(())
    }

    fn worker_enqueue(&mut self, job: WJob) {
        let start = self.now.max(self.worker_free);
        let done = start + self.cost(spec_macs(SubnetId::U50) * job.count as u64);
        self.worker_free = done;
        let life = self.worker.life;
        self.push(done, Ev::WorkerDone { life, job });
    }

    fn worker_done(&mut self, life: u32, job: WJob) -> Result<()> {
        if !self.worker.alive || self.worker.life != life {
            return Ok(());
        }
        if job.reply != Endpoint::Client && self.worker.link != job.link {
            return Ok(());
        }
        let route = Route::Single(SubnetId::U50);
        let labels = self.cache.get(self.params, self.images, route, job.first, job.count)?;
        let msg = Msg::Result {
            req: job.req,
            labels,
            route,
            device: Device::Worker,
        };
        self.send(Endpoint::Dev(Device::Worker), job.reply, result_bytes(job.count), msg);
        Ok(())
    }

    fn wake(&mut self, at: Ns) {
        if self.wakes.insert(at) {
            self.push(at, Ev::ClientWake);
        }
    }

    fn submit(&mut self, req: u32) {
        let target = self.target;
        let Some(p) = self.outstanding.get_mut(&req) else { return };
        p.sent_at = self.now;
        p.retry_at = None;
        let (first, count) = (p.first, p.count);
        self.send(
            Endpoint::Client,
            Endpoint::Dev(target),
            infer_req_bytes(count),
            Msg::Infer { req, first, count },
        );
    }

    /// Earliest time the next new batch may be offered under `rate`.
    fn pace(&self) -> Ns {
        match self.cfg.rate {
            Some(r) => {
                let origin = self.origin.unwrap_or(0);
                origin + ((self.batches_submitted * self.cfg.batch) as f64 / r * 1e9) as Ns
            }
            None => 0,
        }
    }

    fn client_pump(&mut self) {
        let ct = ns(self.cfg.client_timeout);
        let now = self.now;
        let expired = self.outstanding.values().any(|p| p.retry_at.is_none() && now >= p.sent_at + ct);
        if expired {
            let from = self.target;
            self.target = from.other();
            let state = self.system();
            self.record(state, "client_redirect", format!("from={from} to={}", self.target));
            let live: Vec<u32> = self
                .outstanding
                .iter()
                .filter(|(_, p)| p.retry_at.is_none())
                .map(|(&r, _)| r)
                .collect();
            for r in live {
                self.submit(r);
            }
        }
        let due: Vec<u32> = self
            .outstanding
            .iter()
            .filter(|(_, p)| p.retry_at.is_some_and(|t| t <= now))
            .map(|(&r, _)| r)
            .collect();
        for r in due {
            self.submit(r);
        }
        while self.outstanding.len() < self.cfg.window
            && self.next_image < self.n_images
            && now >= self.hold_until
            && now >= self.pace()
        {
            let req = self.next_req;
            self.next_req = self.next_req.wrapping_add(1).max(1);
            let count = self.cfg.batch.min(self.n_images - self.next_image);
            self.outstanding.insert(
                req,
                Pending {
                    first: self.next_image,
                    count,
                    sent_at: now,
                    retry_at: None,
                },
            );
            self.next_image += count;
            self.batches_submitted += 1;
            self.submit(req);
        }
        let mut next: Option<Ns> = self
            .outstanding
            .values()
            .map(|p| p.retry_at.unwrap_or(p.sent_at + ct))
            .min();
        if self.outstanding.len() < self.cfg.window && self.next_image < self.n_images {
            let t = self.hold_until.max(self.pace());
            if t > now {
                next = Some(next.map_or(t, |n| n.min(t)));
            }
        }
        if let Some(t) = next {
            self.wake(t.max(now + 1));
        }
    }

    fn client_msg(&mut self, from: Endpoint, msg: Msg) -> Result<()> {
        let Endpoint::Dev(dev) = from else { return Ok(()) };
        match msg {
            Msg::Result { req, labels, route, device } => {
                if let Some(p) = self.outstanding.remove(&req) {
                    self.completions.push(Completion {
                        at_us: self.rel_us(self.now),
                        req_id: req,
                        first: p.first,
                        count: p.count,
                        labels,
                        route,
                        device,
                    });
                }
            }
            Msg::Error { req: Some(req), code } => {
                if code.is_retriable() {
                    if dev == Device::Worker && self.target == Device::Worker {
                        self.target = Device::Master;
                    }
                    if let Some(p) = self.outstanding.get_mut(&req) {
                        p.retry_at = Some(self.now + ns(self.cfg.backoff));
                    }
                } else if let Some(p) = self.outstanding.remove(&req) {
                    self.failures.push(Failure {
                        at_us: self.rel_us(self.now),
                        req_id: req,
                        first: p.first,
                        count: p.count,
                        code,
                    });
                    self.hold_until = self.now + ns(self.cfg.backoff);
                }
            }
            Msg::Error { req: None, code } => {
                let state = self.system();
                self.record(state, "client_error", format!("from={dev} code={code:?}"));
            }
            _ => {}
        }
        self.client_pump();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{encoded_len, Message};

    #[test]
    fn frame_sizes_match_codec() {
        let n = 3;
        let cases = [
            (
                infer_req_bytes(n),
                Message::InferReq {
                    req_id: 1,
                    count: n as u16,
                    images: vec![0.0; n * IMAGE_FLOATS],
                },
            ),
            (
                act_chunk_bytes(40),
                Message::ActChunk {
                    req_id: 1,
                    layer: 0,
                    groups: (0, 2),
                    height: 2,
                    width: 2,
                    data: vec![0.0; 40],
                },
            ),
            (
                partial_logits_bytes(n),
                Message::PartialLogits {
                    req_id: 1,
                    count: n as u16,
                    logits: vec![0.0; n * 10],
                },
            ),
            (
                result_bytes(n),
                Message::Result {
                    req_id: 1,
                    count: n as u16,
                    labels: vec![0; n],
                    latency_us: 0,
                },
            ),
            (HEARTBEAT_BYTES, Message::Heartbeat { seq: 0, sent_us: 0 }),
            (SET_MODE_BYTES, Message::SetMode(Mode::Ht)),
            (
                HELLO_BYTES,
                Message::Hello {
                    role: crate::wire::Role::Worker,
                    version: 1,
                    digest: [0; 8],
                },
            ),
        ];
        for (ours, msg) in cases {
            assert_eq!(ours, encoded_len(&msg), "{}", msg.name());
        }
    }

    #[test]
    fn compute_model_counts() {
        assert_eq!(spec_macs(SubnetId::W50), spec_macs(SubnetId::U50));
        assert_eq!(spec_macs(SubnetId::W100), 112_896 + 451_584 + 112_896 + 1_440);
        let (stages, fc) = joint_stage_macs();
        let per_device: u64 = stages.iter().sum::<u64>() + fc;
        assert_eq!(2 * (per_device - stages[0] - fc) + 2 * stages[0] + 2 * fc, spec_macs(SubnetId::W100));
    }

    #[test]
    fn observer_state() {
        let p = Policy::Fluid;
        let mut m = RuntimeState::new(p);
        m.phase = Phase::HaBoth;
        let mut w = m;
        w.phase = Phase::WorkerOnly;
        assert_eq!(system_state(p, Some(m), Some(m)), m);
        assert_eq!(system_state(p, None, Some(w)), w);
        assert_eq!(system_state(p, None, None).phase, Phase::Halted);
        let booting = RuntimeState::new(p);
        assert_eq!(system_state(p, Some(booting), Some(w)), w);
        assert_eq!(system_state(p, Some(booting), Some(m)), booting);
    }
}
