//! Deterministic event-driven simulator.
//!
//! Virtual time is in integer milliseconds. Events are processed in
//! (time, insertion sequence) order, all maps are ordered and every server
//! owns a seeded RNG stream, so a run is a pure function of
//! (scenario, strategy, seed).

pub mod events;
pub mod latency;
pub mod output;
pub mod workload;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::allocator::{categorize, plan_for};
use crate::handler::{handle, record_hop, HandlerPolicy, HandlerState, HandlingDecision, LocalOptions, OffloadPolicy, idle_goodput};
use crate::model::{
    satisfied_count, Achieved, AllocationPlan, ClusterView, DeviceId, DevicePolicy, FaultKind, GpuRef, Metrics,
    Millis, Outcome, Placement, PlacementList, Request, RequestRecord, Scenario, ScenarioError, SecondBucket,
    Sensitivity, ServerId, ServiceId, ServiceStatus, ViewEntry, GpuUsage,
};
use crate::placement::{self, PlacementContext};
use crate::sync::{bypass_faulty, exchange_round, partition_groups, register_device, sync_payload_bytes, RingTopology};

pub use events::{Event, EventKind, EventQueue};
pub use latency::{transmit_latency, LatencyTable};
pub use output::{emit_metrics, write_compare_table};
pub use workload::{arrival_times, generate_workload, ArrivalPattern};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("link bandwidth must be > 0")]
    ZeroBandwidth,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Request-handling strategy. All strategies share the same placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    /// Full decision ladder with idle-goodput-weighted offloading.
    Full,
    /// Offloads to hosting servers in turn, without load information.
    RoundRobin,
    /// Refuses anything that cannot be served on the receiving server.
    NoOffload,
    /// Fresh global information, but every decision passes through one
    /// serialized scheduler per group of servers.
    CentralizedGroup,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Full,
        Strategy::RoundRobin,
        Strategy::NoOffload,
        Strategy::CentralizedGroup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::RoundRobin => "round_robin",
            Strategy::NoOffload => "no_offload",
            Strategy::CentralizedGroup => "centralized",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|x| x.as_str() == s.replace('-', "_"))
    }
}

/// Placements computed per epoch; placement does not depend on the handling
/// strategy or the run seed, so paired runs can share it.
#[derive(Debug, Clone, Default)]
pub struct PlacementCache {
    epochs: BTreeMap<u64, Vec<PlacementList>>,
}

impl PlacementCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn epoch(&self, k: u64) -> Option<&[PlacementList]> {
        self.epochs.get(&k).map(|v| v.as_slice())
    }
}

/// Runs the full strategy.
pub fn run(scenario: &Scenario, seed: u64) -> Result<Metrics, EngineError> {
    run_strategy(scenario, Strategy::Full, seed, None)
}

pub fn run_baseline(scenario: &Scenario, baseline: Strategy, seed: u64) -> Result<Metrics, EngineError> {
    run_strategy(scenario, baseline, seed, None)
}

pub fn run_strategy(
    scenario: &Scenario,
    strategy: Strategy,
    seed: u64,
    cache: Option<&mut PlacementCache>,
) -> Result<Metrics, EngineError> {
    check_bandwidth(scenario)?;
    let mut local = PlacementCache::new();
    let cache = cache.unwrap_or(&mut local);
    let mut sim = Sim::new(scenario, &scenario.trace, strategy, seed, false);
    sim.cache = Some(cache);
    Ok(sim.run(None))
}

/// Replays `trace` under a fixed placement that is ready at time 0.
/// Servers outside `servers` are treated as absent. Used to score placements.
pub fn simulate_fixed(
    scenario: &Scenario,
    trace: &[Request],
    servers: &[ServerId],
    theta: &PlacementList,
    strategy: Strategy,
    seed: u64,
    expected: bool,
) -> Metrics {
    let sim = Sim::new(scenario, trace, strategy, seed, expected);
    sim.run(Some((servers, theta)))
}

fn check_bandwidth(scenario: &Scenario) -> Result<(), EngineError> {
    let ok = scenario.default_bandwidth_mbps > 0.0
        && scenario
            .servers
            .iter()
            .all(|s| s.bandwidth_to.values().all(|b| *b > 0.0));
    if ok {
        Ok(())
    } else {
        Err(EngineError::ZeroBandwidth)
    }
}

const CHECKPOINTS_KEPT: usize = 64;

#[derive(Debug, Clone, Copy)]
struct Item {
    req: usize,
    frame: Option<u32>,
    enq_ms: Millis,
    deadline: Millis,
}

#[derive(Debug, Clone)]
struct Worker {
    service: ServiceId,
    anchor: ServerId,
    gpus: Vec<GpuRef>,
    device: Option<DeviceId>,
    plan: AllocationPlan,
    slice: u32,
    cross_server: bool,
    /// Batch latency indexed by log2 of the (power-of-two) batch size.
    batch_ms: Vec<f64>,
    /// Pipeline-boundary transfer time added to every batch.
    overhead_ms: Millis,
    timeout_ms: Millis,
    compute_share: f64,
    ready_ms: Millis,
    retired: bool,
    dead: bool,
    busy: bool,
    busy_until: Millis,
    timer_at: Option<Millis>,
    queue: VecDeque<Item>,
    in_flight: Vec<Item>,
    committed_fps: f64,
}

impl Worker {
    fn accepting(&self, now: Millis) -> bool {
        !self.retired && !self.dead && self.ready_ms <= now
    }

    fn batch_latency(&self, n: usize) -> Millis {
        let n = n.clamp(1, self.plan.bs as usize);
        let idx = n.next_power_of_two().trailing_zeros() as usize;
        let ms = self.batch_ms[idx.min(self.batch_ms.len() - 1)];
        (ms.ceil() as Millis).max(1) + self.overhead_ms
    }

    fn full_latency(&self) -> Millis {
        self.batch_latency(self.plan.bs as usize)
    }

    /// Units per second at full batches.
    fn capacity(&self) -> f64 {
        self.plan.bs as f64 * 1000.0 / self.full_latency() as f64
    }

    fn spare_fps(&self) -> f64 {
        self.capacity() - self.committed_fps
    }

    /// Latest time a partial batch may wait before its tightest deadline
    /// would be missed at full-batch latency.
    fn dispatch_due(&self, extra_deadline: Millis) -> Millis {
        let bs = self.plan.bs as usize;
        let oldest = self.queue.front().map(|i| i.enq_ms);
        let earliest = self.queue.iter().take(bs).map(|i| i.deadline).min().unwrap_or(Millis::MAX).min(extra_deadline);
        let guard = earliest.saturating_sub(self.full_latency());
        match oldest {
            Some(t) => (t + self.timeout_ms).min(guard),
            None => guard,
        }
    }

    /// Upper estimate of when a newly queued item with `deadline` would
    /// complete.
    fn est_completion(&self, now: Millis, deadline: Millis) -> Millis {
        let bs = self.plan.bs as usize;
        let lat = self.full_latency();
        let q = self.queue.len();
        let mut start = now.max(self.ready_ms);
        if self.busy {
            start = start.max(self.busy_until);
        }
        start += (q / bs) as Millis * lat;
        let fills = (q % bs) + 1 == bs;
        let dispatch = if fills || self.busy || q >= bs {
            start
        } else {
            let due = if q == 0 { now + self.timeout_ms } else { self.dispatch_due(Millis::MAX) };
            start.max(due.min(deadline.saturating_sub(lat)))
        };
        dispatch + lat
    }

    fn est_wait(&self, now: Millis) -> Millis {
        self.est_completion(now, Millis::MAX).saturating_sub(now + self.full_latency())
    }

    fn touches(&self, s: ServerId) -> bool {
        self.anchor == s || self.gpus.iter().any(|g| g.server == s)
    }
}

#[derive(Debug, Clone)]
struct StreamState {
    workers: Vec<usize>,
    share: f64,
    start_ms: Millis,
    server: ServerId,
}

#[derive(Debug, Clone)]
struct ReqState {
    req: Request,
    outcome: Option<Outcome>,
    completion_ms: Option<Millis>,
    frames_done: u32,
    frames_resolved: u32,
    stream: Option<StreamState>,
    central_done: bool,
}

/// Which workers back each option offered to the handler.
#[derive(Debug, Default)]
struct Choice {
    local: Vec<usize>,
    cross: Vec<usize>,
    device: Option<usize>,
    partial: Vec<usize>,
}

struct Sim<'a, 'c> {
    sc: &'a Scenario,
    lat: LatencyTable<'a>,
    strategy: Strategy,
    policy: HandlerPolicy,
    seed: u64,
    fixed: bool,
    cache: Option<&'c mut PlacementCache>,
    queue: EventQueue,
    reqs: Vec<ReqState>,
    workers: Vec<Worker>,
    by_anchor: BTreeMap<(ServerId, ServiceId), Vec<usize>>,
    cross_workers: BTreeMap<ServiceId, Vec<usize>>,
    live: Vec<bool>,
    dead: Vec<bool>,
    rings: Vec<RingTopology>,
    flagged: BTreeSet<ServerId>,
    pending_bypass: Vec<ServerId>,
    views: BTreeMap<ServerId, ClusterView>,
    handler_state: Vec<HandlerState>,
    rngs: Vec<ChaCha8Rng>,
    admitted: BTreeMap<(ServerId, ServiceId), u64>,
    checkpoints: BTreeMap<(ServerId, ServiceId), VecDeque<(Millis, u64)>>,
    local_arrivals: Vec<BTreeMap<ServiceId, u64>>,
    loader_free: Vec<Millis>,
    central_free_us: BTreeMap<u32, u64>,
    round: u64,
    epoch: u64,
    unfinished: usize,
    gpu_busy: BTreeMap<GpuRef, f64>,
    metrics: Metrics,
}

impl<'a, 'c> Sim<'a, 'c> {
    fn new(sc: &'a Scenario, trace: &[Request], strategy: Strategy, seed: u64, expected: bool) -> Self {
        let n = sc.servers.len();
        let device = sc.control.device_policy == DevicePolicy::Enabled;
        let policy = HandlerPolicy {
            max_offload: sc.control.max_offload,
            offload: match strategy {
                Strategy::Full | Strategy::CentralizedGroup if expected => OffloadPolicy::Expected,
                Strategy::Full | Strategy::CentralizedGroup => OffloadPolicy::Proportional,
                Strategy::RoundRobin => OffloadPolicy::RoundRobin,
                Strategy::NoOffload => OffloadPolicy::Disabled,
            },
            allow_cross_server: strategy != Strategy::NoOffload,
            allow_device: device,
            sync_interval_ms: sc.control.sync_interval_ms,
        };
        let reqs = trace
            .iter()
            .map(|r| ReqState {
                req: r.clone(),
                outcome: None,
                completion_ms: None,
                frames_done: 0,
                frames_resolved: 0,
                stream: None,
                central_done: false,
            })
            .collect::<Vec<_>>();
        let rngs = (0..n)
            .map(|i| ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407)))
            .collect();
        Self {
            sc,
            lat: LatencyTable::new(&sc.profiles),
            strategy,
            policy,
            seed,
            fixed: false,
            cache: None,
            queue: EventQueue::new(),
            unfinished: reqs.len(),
            reqs,
            workers: Vec::new(),
            by_anchor: BTreeMap::new(),
            cross_workers: BTreeMap::new(),
            live: vec![false; n],
            dead: vec![false; n],
            rings: Vec::new(),
            flagged: BTreeSet::new(),
            pending_bypass: Vec::new(),
            views: BTreeMap::new(),
            handler_state: vec![HandlerState::default(); n],
            rngs,
            admitted: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            local_arrivals: vec![BTreeMap::new(); n],
            loader_free: vec![0; n],
            central_free_us: BTreeMap::new(),
            round: 0,
            epoch: 0,
            gpu_busy: BTreeMap::new(),
            metrics: Metrics::new(strategy.as_str(), seed),
        }
    }

    fn run(mut self, fixed: Option<(&[ServerId], &PlacementList)>) -> Metrics {
        if let Some((servers, theta)) = fixed {
            self.fixed = true;
            for s in servers {
                self.live[s.index()] = true;
            }
            self.rebuild_rings();
            self.install(std::slice::from_ref(theta), 0, true);
            self.broadcast(0);
        } else {
            self.queue.push(0, EventKind::PlacementEpoch { epoch: 0 });
            if self.sc.control.device_policy == DevicePolicy::Enabled {
                for (i, d) in self.sc.devices.iter().enumerate() {
                    self.queue.push(d.register_ms, EventKind::DeviceRegister { device: i });
                }
            }
            for (i, f) in self.sc.control.faults.iter().enumerate() {
                self.queue.push(f.at_ms, EventKind::Fault { index: i });
            }
        }
        for i in 0..self.reqs.len() {
            let t = self.reqs[i].req.arrival_ms;
            self.queue.push(t, EventKind::RequestArrival { req: i });
        }
        if !self.reqs.is_empty() {
            self.queue.push(self.sc.control.sync_interval_ms, EventKind::SyncRound);
        }
        while let Some(ev) = self.queue.pop() {
            self.metrics.events += 1;
            self.dispatch(ev);
        }
        for i in 0..self.reqs.len() {
            if self.reqs[i].outcome.is_none() {
                let t = self.queue.now();
                self.finalize(i, Outcome::Lost, t);
            }
        }
        self.build_metrics()
    }

    fn dispatch(&mut self, ev: Event) {
        let now = ev.time;
        match ev.kind {
            EventKind::RequestArrival { req } => self.on_arrival(req, now),
            EventKind::FrameRelease { req, frame } => self.on_frame_release(req, frame, now),
            EventKind::Enqueue { worker, req, frame, deadline } => {
                self.enqueue(worker, Item { req, frame, enq_ms: now, deadline }, now)
            }
            EventKind::BatchTimeout { worker } => {
                if self.workers[worker].timer_at == Some(now) {
                    self.workers[worker].timer_at = None;
                    self.try_dispatch(worker, now, true);
                }
            }
            EventKind::BatchComplete { worker } => self.on_batch_complete(worker, now),
            EventKind::SyncRound => self.on_sync(now),
            EventKind::PlacementEpoch { epoch } => self.on_epoch(epoch, now),
            EventKind::DeviceRegister { device } => self.on_device(device, now),
            EventKind::Fault { index } => self.on_fault(index, now),
        }
    }

    // -- membership and placement ------------------------------------------

    fn is_up(&self, s: ServerId) -> bool {
        self.live[s.index()] && !self.dead[s.index()]
    }

    /// Next server that is up, in id order with wrap-around.
    fn successor(&self, s: ServerId) -> Option<ServerId> {
        let up: Vec<ServerId> = self.sc.servers.iter().map(|x| x.id).filter(|x| self.is_up(*x)).collect();
        up.iter().copied().find(|x| *x > s).or_else(|| up.first().copied())
    }

    fn rebuild_rings(&mut self) {
        let order: Vec<ServerId> = self.sc.servers.iter().map(|s| s.id).filter(|s| self.is_up(*s)).collect();
        self.rings = partition_groups(&order, self.sc.control.group_size)
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(|g| {
                let mut r = RingTopology::new(g, self.sc.control.sync_interval_ms);
                r.flagged = self.flagged.clone();
                r
            })
            .collect();
    }

    fn on_epoch(&mut self, k: u64, now: Millis) {
        if k > 0 && self.unfinished == 0 {
            return;
        }
        self.epoch = k;
        for s in &self.sc.servers {
            let joined = s.join_ms <= now;
            let exited = s.exit_ms.is_some_and(|e| e <= now);
            self.live[s.id.index()] = joined && !exited;
        }
        self.rebuild_rings();
        let cached = self
            .cache
            .as_ref()
            .and_then(|c| c.epoch(k).map(|v| v.to_vec()));
        let thetas = match cached {
            Some(t) => t,
            None => {
                let t = self.compute_placements(k, now);
                if let Some(c) = self.cache.as_mut() {
                    c.epochs.insert(k, t.clone());
                }
                t
            }
        };
        self.install(&thetas, now, k == 0);
        self.broadcast(now);
        self.metrics.placement_epochs += 1;
        if self.unfinished > 0 {
            self.queue.push(now + self.sc.control.placement_interval_ms, EventKind::PlacementEpoch { epoch: k + 1 });
        }
    }

    /// SSSP per sync group over the arrivals of the previous period (the
    /// first epoch looks at the first period).
    fn compute_placements(&self, k: u64, now: Millis) -> Vec<PlacementList> {
        let interval = self.sc.control.placement_interval_ms;
        let start = if k == 0 { now } else { now.saturating_sub(interval) };
        let end = start + interval;
        let mut window: Vec<Request> = Vec::new();
        for r in &self.sc.trace {
            if r.arrival_ms < start || r.arrival_ms >= end {
                continue;
            }
            let origin = if self.is_up(r.origin) {
                Some(r.origin)
            } else {
                self.successor(r.origin)
            };
            let Some(origin) = origin else { continue };
            let mut q = r.clone();
            q.origin = origin;
            q.hop_path = vec![origin];
            q.offload_count = 0;
            q.arrival_ms -= start;
            q.deadline_ms -= start;
            window.push(q);
        }
        self.rings
            .iter()
            .map(|ring| {
                let trace: Vec<Request> = window.iter().filter(|r| ring.contains(r.origin)).cloned().collect();
                let ctx = PlacementContext::new(self.sc, trace, ring.order.clone());
                let mut theta = placement::place(&ctx);
                theta.epoch = k;
                theta
            })
            .collect()
    }

    /// Creates workers for the given placements; unchanged groups keep
    /// running, others are retired and drain their queues.
    fn install(&mut self, thetas: &[PlacementList], now: Millis, preloaded: bool) {
        let mut keep: BTreeSet<usize> = BTreeSet::new();
        let mut fresh: Vec<(Placement, u32)> = Vec::new();
        for theta in thetas {
            for p in &theta.entries {
                for slice in 0..p.plan.mt {
                    let found = (0..self.workers.len()).find(|i| {
                        let w = &self.workers[*i];
                        !keep.contains(i)
                            && !w.retired
                            && !w.dead
                            && w.device.is_none()
                            && w.service == p.service
                            && w.gpus == p.gpus
                            && w.plan == p.plan
                            && w.slice == slice
                    });
                    match found {
                        Some(i) => {
                            keep.insert(i);
                        }
                        None => fresh.push((p.clone(), slice)),
                    }
                }
            }
        }
        for (i, w) in self.workers.iter_mut().enumerate() {
            if w.device.is_none() && !keep.contains(&i) {
                w.retired = true;
            }
        }
        for (p, slice) in fresh {
            let svc = self.sc.service(p.service);
            let ready = if preloaded { now } else { now + self.lat.load_ms(svc) };
            self.add_worker(&p, slice, None, ready);
        }
    }

    fn add_worker(&mut self, p: &Placement, slice: u32, device: Option<(DeviceId, crate::model::GpuModelId)>, ready_ms: Millis) {
        let svc = self.sc.service(p.service);
        let model = match device {
            Some((_, m)) => m,
            None => self.sc.server(p.gpus[0].server).gpus[p.gpus[0].gpu as usize].model,
        };
        let mut batch_ms = Vec::new();
        let mut b = 1;
        while b <= p.plan.bs {
            batch_ms.push(self.lat.compute_ms(svc, model, b, p.plan.mt));
            b *= 2;
        }
        let mut overhead_ms = 0;
        for pair in p.gpus.windows(2) {
            if pair[0].server != pair[1].server {
                let bw = self.sc.bandwidth_mbps(pair[0].server, pair[1].server);
                let bytes = svc.input_bytes() * p.plan.bs as u64;
                overhead_ms += transmit_latency(bytes, bw, self.sc.control.hop_overhead_ms).unwrap_or(0);
            }
        }
        let mut w = Worker {
            service: p.service,
            anchor: p.server,
            gpus: p.gpus.clone(),
            device: device.map(|d| d.0),
            plan: p.plan,
            slice,
            cross_server: p.cross_server,
            batch_ms,
            overhead_ms,
            timeout_ms: 0,
            compute_share: svc.compute_demand,
            ready_ms,
            retired: false,
            dead: false,
            busy: false,
            busy_until: 0,
            timer_at: None,
            queue: VecDeque::new(),
            in_flight: Vec::new(),
            committed_fps: 0.0,
        };
        let slo = svc.latency_slo_ms;
        w.timeout_ms = match svc.frequency_slo_fps {
            Some(fps) => {
                let gather = ((p.plan.mf.saturating_sub(1)) as f64 * 1000.0 / fps).ceil() as Millis;
                gather.min(slo / 4)
            }
            None => slo / 4,
        };
        let idx = self.workers.len();
        if w.cross_server {
            self.cross_workers.entry(w.service).or_default().push(idx);
        } else {
            self.by_anchor.entry((w.anchor, w.service)).or_default().push(idx);
        }
        self.workers.push(w);
    }

    // -- synchronization ---------------------------------------------------

    fn record_checkpoints(&mut self, now: Millis) {
        let mut keys: BTreeSet<(ServerId, ServiceId)> = self.admitted.keys().copied().collect();
        keys.extend(self.by_anchor.keys().copied());
        for w in &self.workers {
            keys.insert((w.anchor, w.service));
        }
        for key in keys {
            let c = self.admitted.get(&key).copied().unwrap_or(0);
            let cp = self.checkpoints.entry(key).or_default();
            if cp.back().is_some_and(|(t, _)| *t == now) {
                cp.pop_back();
            }
            cp.push_back((now, c));
            while cp.len() > CHECKPOINTS_KEPT {
                cp.pop_front();
            }
        }
    }

    fn fresh_entry(&self, s: ServerId, now: Millis) -> ViewEntry {
        let mut e = ViewEntry::fresh(s, self.round, now);
        e.placement_epoch = self.epoch;
        e.available = !self.dead[s.index()];
        for w in &self.workers {
            if w.anchor != s || !w.accepting(now) {
                continue;
            }
            let st = e.services.entry(w.service).or_insert_with(|| ServiceStatus {
                theoretical_rate: 0.0,
                backlog_ms: Millis::MAX,
                checkpoints: self
                    .checkpoints
                    .get(&(s, w.service))
                    .map(|c| c.iter().copied().collect())
                    .unwrap_or_default(),
            });
            st.theoretical_rate += w.capacity();
            st.backlog_ms = st.backlog_ms.min(w.est_wait(now));
        }
        e
    }

    /// Placement results reach every server through the registry at epoch
    /// boundaries, so views restart from a consistent snapshot.
    fn broadcast(&mut self, now: Millis) {
        self.record_checkpoints(now);
        let rings = self.rings.clone();
        for ring in &rings {
            let entries: Vec<ViewEntry> = ring.order.iter().map(|s| self.fresh_entry(*s, now)).collect();
            for &s in &ring.order {
                let mut v = ClusterView::new(s);
                for e in &entries {
                    v.per_server.insert(e.source, e.clone());
                }
                for f in &self.flagged {
                    if let Some(e) = v.per_server.get_mut(f) {
                        e.available = false;
                    }
                }
                self.views.insert(s, v);
            }
        }
    }

    fn on_sync(&mut self, now: Millis) {
        self.round += 1;
        for s in std::mem::take(&mut self.pending_bypass) {
            self.flagged.insert(s);
            for ring in self.rings.iter_mut() {
                if let Ok(next) = bypass_faulty(ring, s) {
                    *ring = next;
                }
            }
        }
        for ring in self.rings.iter_mut() {
            ring.flagged = self.flagged.clone();
        }
        self.record_checkpoints(now);
        let rings = self.rings.clone();
        for ring in &rings {
            let fresh: BTreeMap<ServerId, ViewEntry> =
                ring.order.iter().map(|s| (*s, self.fresh_entry(*s, now))).collect();
            self.views = exchange_round(&self.views, ring, &fresh, now);
            let n = ring.len();
            self.metrics.sync_bytes += sync_payload_bytes(self.sc.control.bytes_per_server, n) * n as u64;
        }
        self.metrics.sync_rounds += 1;
        if self.unfinished > 0 {
            self.queue.push(now + self.sc.control.sync_interval_ms, EventKind::SyncRound);
        }
    }

    fn global_view(&self, s: ServerId, now: Millis) -> ClusterView {
        let mut v = ClusterView::new(s);
        let group = self.rings.iter().find(|r| r.contains(s));
        if let Some(ring) = group {
            for &m in &ring.order {
                v.per_server.insert(m, self.fresh_entry(m, now));
            }
        }
        v
    }

    // -- devices and faults ------------------------------------------------

    fn on_device(&mut self, i: usize, now: Millis) {
        let d = &self.sc.devices[i];
        if !self.is_up(d.server) {
            return;
        }
        let mut free = self.loader_free[d.server.index()].max(now);
        match register_device(self.sc, d, &self.local_arrivals[d.server.index()], &mut free) {
            Ok(a) => {
                self.loader_free[d.server.index()] = free;
                let svc = self.sc.service(a.service);
                let Ok(mut plan) = plan_for(svc, d.gpu_model, &self.sc.profiles) else {
                    log::warn!("device {} cannot run {}", d.id.0, svc.name);
                    return;
                };
                plan.mt = 1;
                let p = Placement {
                    service: a.service,
                    server: d.server,
                    gpus: Vec::new(),
                    plan,
                    cross_server: false,
                };
                let model = d.gpu_model;
                let id = d.id;
                self.add_worker(&p, 0, Some((id, model)), a.ready_ms);
            }
            Err(e) => log::info!("device {} not used: {e}", d.id.0),
        }
    }

    fn on_fault(&mut self, index: usize, now: Millis) {
        let f = self.sc.control.faults[index];
        let s = f.server;
        match f.kind {
            FaultKind::Fail => {
                if self.dead[s.index()] {
                    return;
                }
                self.dead[s.index()] = true;
                let victims: Vec<usize> = (0..self.workers.len())
                    .filter(|&w| self.workers[w].touches(s) && !self.workers[w].dead)
                    .collect();
                for w in victims {
                    self.kill_worker(w, now);
                }
                self.pending_bypass.push(s);
            }
            FaultKind::Corrupt => {
                let Some(view) = self.views.get_mut(&s) else { return };
                let others: Vec<ServerId> = view.per_server.keys().copied().filter(|m| *m != s).collect();
                if others.is_empty() {
                    return;
                }
                let victim = others[self.rngs[s.index()].random_range(0..others.len())];
                if let Some(e) = view.per_server.get_mut(&victim) {
                    // Garbage that looks attractive; the oldest snapshot time
                    // guarantees that any neighbour copy replaces it.
                    for st in e.services.values_mut() {
                        st.theoretical_rate *= 10.0;
                        st.backlog_ms = 0;
                        st.checkpoints.clear();
                    }
                    e.snapshot_ms = 0;
                    e.seq = 0;
                }
            }
        }
    }

    fn kill_worker(&mut self, w: usize, now: Millis) {
        let wk = &mut self.workers[w];
        wk.dead = true;
        wk.busy = false;
        wk.timer_at = None;
        let mut items: Vec<Item> = wk.queue.drain(..).collect();
        items.extend(wk.in_flight.drain(..));
        for it in items {
            self.resolve_lost(it, now);
        }
    }

    // -- request handling --------------------------------------------------

    fn on_arrival(&mut self, i: usize, now: Millis) {
        if self.reqs[i].outcome.is_some() {
            return;
        }
        let mut s = self.reqs[i].req.current_server();
        if !self.is_up(s) {
            if self.reqs[i].req.offload_count > 0 {
                self.finalize(i, Outcome::Lost, now);
                return;
            }
            match self.successor(s) {
                Some(t) => {
                    self.reqs[i].req.hop_path = vec![t];
                    s = t;
                }
                None => {
                    self.finalize(i, Outcome::Lost, now);
                    return;
                }
            }
        }
        if self.reqs[i].req.offload_count == 0 && !self.reqs[i].central_done {
            *self.local_arrivals[s.index()].entry(self.reqs[i].req.service).or_insert(0) += 1;
        }
        if self.strategy == Strategy::CentralizedGroup && !self.reqs[i].central_done && self.reqs[i].req.offload_count == 0 {
            self.reqs[i].central_done = true;
            let g = self.sc.control.central_group_size.max(1);
            let size = (g as usize).min(self.sc.servers.len()) as u64;
            let cost_us = self.sc.control.central_cost_us * size;
            let free = self.central_free_us.entry(s.0 / g).or_insert(0);
            let start = (*free).max(now * 1000);
            *free = start + cost_us;
            let ready = (*free).div_ceil(1000);
            if ready > now {
                self.queue.push(ready, EventKind::RequestArrival { req: i });
                return;
            }
        }
        self.reqs[i].central_done = false;
        self.decide(i, s, now);
    }

    fn decide(&mut self, i: usize, s: ServerId, now: Millis) {
        let svc = self.sc.service(self.reqs[i].req.service);
        let (opts, choice) = self.local_options(i, s, now);
        let decision = {
            let global;
            let view = if self.strategy == Strategy::CentralizedGroup {
                global = self.global_view(s, now);
                &global
            } else {
                match self.views.get(&s) {
                    Some(v) => v,
                    None => {
                        global = ClusterView::new(s);
                        &global
                    }
                }
            };
            handle(
                &self.reqs[i].req,
                svc.latency_slo_ms,
                &opts,
                view,
                now,
                &self.policy,
                &mut self.handler_state[s.index()],
                &mut self.rngs[s.index()],
            )
        };
        match decision {
            HandlingDecision::Timeout => self.finalize(i, Outcome::Timeout, now),
            HandlingDecision::OffloadExceeded => self.finalize(i, Outcome::OffloadExceeded, now),
            HandlingDecision::ResourceInsufficient => self.finalize(i, Outcome::ResourceInsufficient, now),
            HandlingDecision::SolveLocal(_) => {
                let ws = if choice.local.is_empty() { choice.partial } else { choice.local };
                self.start(i, s, ws, now);
            }
            HandlingDecision::SolveCrossServerParallel(_) => self.start(i, s, choice.cross, now),
            HandlingDecision::SolveOnDevice(_) => {
                let w = choice.device.expect("device option backs the decision");
                self.start(i, s, vec![w], now);
            }
            HandlingDecision::Offload(m) => {
                let Ok(next) = record_hop(&self.reqs[i].req, m) else {
                    self.finalize(i, Outcome::ResourceInsufficient, now);
                    return;
                };
                if self.flagged.contains(&m) {
                    self.metrics.bypass_violations += 1;
                }
                self.reqs[i].req = next;
                let bw = self.sc.bandwidth_mbps(s, m);
                let tx = transmit_latency(svc.input_bytes(), bw, self.sc.control.hop_overhead_ms).unwrap_or(0);
                let cost = self.sc.control.decision_cost_us.div_ceil(1000);
                self.queue.push(now + tx + cost, EventKind::RequestArrival { req: i });
            }
        }
    }

    fn local_options(&self, i: usize, s: ServerId, now: Millis) -> (LocalOptions, Choice) {
        let r = &self.reqs[i].req;
        let svc = self.sc.service(r.service);
        let mut opts = LocalOptions::default();
        let mut ch = Choice::default();
        let local: Vec<usize> = self
            .by_anchor
            .get(&(s, r.service))
            .map(|v| v.iter().copied().filter(|&w| self.workers[w].accepting(now)).collect())
            .unwrap_or_default();
        let (regular, devices): (Vec<usize>, Vec<usize>) =
            local.into_iter().partition(|&w| self.workers[w].device.is_none());
        let cross: Vec<usize> = self
            .cross_workers
            .get(&r.service)
            .map(|v| {
                v.iter()
                    .copied()
                    .filter(|&w| self.workers[w].accepting(now) && self.workers[w].touches(s))
                    .collect()
            })
            .unwrap_or_default();

        match svc.sensitivity() {
            Sensitivity::Latency => {
                let best = |ws: &[usize], extra: &dyn Fn(usize) -> Millis| {
                    ws.iter()
                        .map(|&w| (self.workers[w].est_completion(now, r.deadline_ms.saturating_sub(extra(w))) + extra(w), w))
                        .min()
                        .filter(|(t, _)| *t <= r.deadline_ms)
                        .map(|(_, w)| w)
                };
                if let Some(w) = best(&regular, &|_| 0) {
                    opts.local = Some(self.workers[w].gpus.clone());
                    ch.local = vec![w];
                }
                if let Some(w) = best(&cross, &|w| self.hop_ms(s, self.workers[w].anchor, svc.input_bytes())) {
                    opts.cross_server = Some(servers_of(&self.workers[w]));
                    ch.cross = vec![w];
                }
                if let Some(w) = best(&devices, &|_| self.sc.control.hop_overhead_ms) {
                    opts.device = self.workers[w].device;
                    ch.device = Some(w);
                }
            }
            Sensitivity::Frequency => {
                let fps = svc.frequency_slo_fps.unwrap_or(1.0);
                let mut with_spare: Vec<usize> =
                    regular.iter().copied().filter(|&w| self.workers[w].spare_fps() > 1e-9).collect();
                with_spare.sort_by(|a, b| {
                    self.workers[*b]
                        .spare_fps()
                        .total_cmp(&self.workers[*a].spare_fps())
                        .then(a.cmp(b))
                });
                let total: f64 = with_spare.iter().map(|&w| self.workers[w].spare_fps()).sum();
                if total + 1e-9 >= fps {
                    let mut acc = 0.0;
                    for &w in &with_spare {
                        ch.local.push(w);
                        acc += self.workers[w].spare_fps();
                        if acc + 1e-9 >= fps {
                            break;
                        }
                    }
                    opts.local = Some(gpus_of(&self.workers, &ch.local));
                } else if !with_spare.is_empty() {
                    ch.partial = with_spare.clone();
                    opts.partial_local = Some(gpus_of(&self.workers, &ch.partial));
                    let group_cap = self
                        .workers[with_spare[0]]
                        .plan
                        .dp_groups
                        .max(with_spare.len() as u32 + 1) as usize;
                    let mut groups = with_spare.clone();
                    let mut acc = total;
                    let mut remote = self.remote_groups(i, s, &cross, now);
                    remote.retain(|w| !groups.contains(w));
                    for w in remote {
                        if groups.len() >= group_cap || acc + 1e-9 >= fps {
                            break;
                        }
                        acc += self.workers[w].spare_fps();
                        groups.push(w);
                    }
                    if groups.len() > with_spare.len() {
                        let mut servers: Vec<ServerId> =
                            groups.iter().flat_map(|&w| servers_of(&self.workers[w])).collect();
                        servers.sort();
                        servers.dedup();
                        opts.cross_server = Some(servers);
                        ch.cross = groups;
                    }
                }
                if let Some(&w) = devices.iter().find(|&&w| self.workers[w].spare_fps() + 1e-9 >= fps) {
                    opts.device = self.workers[w].device;
                    ch.device = Some(w);
                }
            }
        }
        (opts, ch)
    }

    /// Groups outside this server that could join a stream: cross-server
    /// groups touching it, then one group per remote host the view knows
    /// about, by decreasing idle goodput.
    fn remote_groups(&self, i: usize, s: ServerId, cross: &[usize], now: Millis) -> Vec<usize> {
        let r = &self.reqs[i].req;
        let mut out: Vec<usize> = cross
            .iter()
            .copied()
            .filter(|&w| self.workers[w].spare_fps() > 1e-9)
            .collect();
        let Some(view) = self.views.get(&s) else { return out };
        let mut hosts: Vec<(f64, ServerId)> = view
            .per_server
            .iter()
            .filter(|(m, e)| **m != s && e.available && !r.has_visited(**m) && e.services.contains_key(&r.service))
            .map(|(m, _)| (idle_goodput(view, *m, r.service, now, self.sc.control.sync_interval_ms), *m))
            .filter(|(p, _)| *p > 0.0)
            .collect();
        hosts.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, m) in hosts {
            let best = self
                .by_anchor
                .get(&(m, r.service))
                .into_iter()
                .flatten()
                .copied()
                .filter(|&w| self.workers[w].accepting(now) && self.workers[w].device.is_none())
                .filter(|&w| self.workers[w].spare_fps() > 1e-9)
                .max_by(|a, b| {
                    self.workers[*a]
                        .spare_fps()
                        .total_cmp(&self.workers[*b].spare_fps())
                        .then(b.cmp(a))
                });
            if let Some(w) = best {
                out.push(w);
            }
        }
        out
    }

    fn hop_ms(&self, from: ServerId, to: ServerId, bytes: u64) -> Millis {
        if from == to {
            return 0;
        }
        let bw = self.sc.bandwidth_mbps(from, to);
        transmit_latency(bytes, bw, self.sc.control.hop_overhead_ms).unwrap_or(0)
    }

    /// Starts serving request `i` received at `s` on `ws`.
    fn start(&mut self, i: usize, s: ServerId, ws: Vec<usize>, now: Millis) {
        let svc = self.sc.service(self.reqs[i].req.service);
        if ws.is_empty() {
            self.finalize(i, Outcome::ResourceInsufficient, now);
            return;
        }
        match svc.frequency_slo_fps {
            None => {
                let w = ws[0];
                let wk = &self.workers[w];
                let delay = match wk.device {
                    Some(_) => self.sc.control.hop_overhead_ms,
                    None => self.hop_ms(s, wk.anchor, svc.input_bytes()),
                };
                let deadline = self.reqs[i].req.deadline_ms;
                if delay == 0 {
                    self.enqueue(w, Item { req: i, frame: None, enq_ms: now, deadline }, now);
                } else {
                    self.queue.push(now + delay, EventKind::Enqueue { worker: w, req: i, frame: None, deadline });
                }
            }
            Some(fps) => {
                let share = fps / ws.len() as f64;
                for &w in &ws {
                    self.workers[w].committed_fps += share;
                }
                self.reqs[i].stream = Some(StreamState { workers: ws, share, start_ms: now, server: s });
                self.on_frame_release(i, 0, now);
            }
        }
    }

    fn on_frame_release(&mut self, i: usize, frame: u32, now: Millis) {
        let svc = self.sc.service(self.reqs[i].req.service);
        let fps = svc.frequency_slo_fps.unwrap_or(1.0);
        let st = self.reqs[i].stream.as_ref().expect("frames belong to a started stream");
        // Consecutive MF frames go to the same group so batches can fill.
        let mf = self.workers[st.workers[0]].plan.mf.max(1);
        let w = st.workers[(frame / mf) as usize % st.workers.len()];
        let (start_ms, s) = (st.start_ms, st.server);
        let deadline = now + svc.latency_slo_ms;
        let delay = match self.workers[w].device {
            Some(_) => self.sc.control.hop_overhead_ms,
            None => self.hop_ms(s, self.workers[w].anchor, svc.input_bytes()),
        };
        if delay == 0 {
            self.enqueue(w, Item { req: i, frame: Some(frame), enq_ms: now, deadline }, now);
        } else {
            self.queue.push(now + delay, EventKind::Enqueue { worker: w, req: i, frame: Some(frame), deadline });
        }
        let next = frame + 1;
        if next < self.reqs[i].req.frame_count {
            let t = start_ms + (next as f64 * 1000.0 / fps).floor() as Millis;
            self.queue.push(t, EventKind::FrameRelease { req: i, frame: next });
        }
    }

    // -- workers -------------------------------------------------------------

    fn enqueue(&mut self, w: usize, item: Item, now: Millis) {
        if self.workers[w].dead {
            self.resolve_lost(item, now);
            return;
        }
        let key = (self.workers[w].anchor, self.workers[w].service);
        *self.admitted.entry(key).or_insert(0) += 1;
        self.workers[w].queue.push_back(item);
        self.try_dispatch(w, now, false);
    }

    fn try_dispatch(&mut self, w: usize, now: Millis, force: bool) {
        if self.workers[w].dead || self.workers[w].busy {
            return;
        }
        // Drop work that can no longer finish in time.
        loop {
            let wk = &self.workers[w];
            let n = wk.queue.len().min(wk.plan.bs as usize);
            if n == 0 {
                return;
            }
            let lat = wk.batch_latency(n);
            let front = *wk.queue.front().expect("n > 0");
            if front.deadline >= now + lat {
                break;
            }
            self.workers[w].queue.pop_front();
            self.resolve_expired(front, now);
        }
        let wk = &mut self.workers[w];
        let bs = wk.plan.bs as usize;
        let due = wk.dispatch_due(Millis::MAX);
        if wk.queue.len() >= bs || force || now >= due {
            let n = wk.queue.len().min(bs);
            let items: Vec<Item> = wk.queue.drain(..n).collect();
            let lat = wk.batch_latency(n);
            wk.busy = true;
            wk.busy_until = now + lat;
            wk.in_flight = items;
            wk.timer_at = None;
            let share = wk.compute_share;
            for g in wk.gpus.clone() {
                *self.gpu_busy.entry(g).or_insert(0.0) += lat as f64 * share;
            }
            self.queue.push(now + lat, EventKind::BatchComplete { worker: w });
        } else if wk.timer_at.is_none_or(|t| t > due) {
            wk.timer_at = Some(due);
            self.queue.push(due, EventKind::BatchTimeout { worker: w });
        }
    }

    fn on_batch_complete(&mut self, w: usize, now: Millis) {
        if self.workers[w].dead || !self.workers[w].busy {
            return;
        }
        self.workers[w].busy = false;
        let items = std::mem::take(&mut self.workers[w].in_flight);
        for it in items {
            match it.frame {
                None => {
                    let outcome = if now <= it.deadline { Outcome::Completed } else { Outcome::Timeout };
                    self.finalize(it.req, outcome, now);
                }
                Some(_) => {
                    let on_time = now <= it.deadline;
                    self.resolve_frame(it.req, on_time, now);
                }
            }
        }
        self.try_dispatch(w, now, true);
    }

    fn resolve_expired(&mut self, it: Item, now: Millis) {
        match it.frame {
            None => self.finalize(it.req, Outcome::Timeout, now),
            Some(_) => self.resolve_frame(it.req, false, now),
        }
    }

    fn resolve_lost(&mut self, it: Item, now: Millis) {
        match it.frame {
            None => self.finalize(it.req, Outcome::Lost, now),
            Some(_) => self.resolve_frame(it.req, false, now),
        }
    }

    fn resolve_frame(&mut self, i: usize, done: bool, now: Millis) {
        let rs = &mut self.reqs[i];
        if rs.outcome.is_some() {
            return;
        }
        rs.frames_resolved += 1;
        if done {
            rs.frames_done += 1;
            rs.completion_ms = Some(now);
        }
        if rs.frames_resolved >= rs.req.frame_count {
            let outcome = if rs.frames_done > 0 { Outcome::Completed } else { Outcome::Timeout };
            self.finalize(i, outcome, now);
        }
    }

    fn finalize(&mut self, i: usize, outcome: Outcome, now: Millis) {
        if self.reqs[i].outcome.is_some() {
            return;
        }
        let rs = &mut self.reqs[i];
        rs.outcome = Some(outcome);
        if rs.stream.is_none() && outcome == Outcome::Completed {
            rs.completion_ms = Some(now);
        }
        if let Some(st) = rs.stream.take() {
            for &w in &st.workers {
                self.workers[w].committed_fps -= st.share;
            }
            self.reqs[i].stream = Some(StreamState { workers: Vec::new(), ..st });
        }
        self.unfinished -= 1;
    }

    // -- metrics -----------------------------------------------------------

    fn build_metrics(mut self) -> Metrics {
        let mut m = std::mem::replace(&mut self.metrics, Metrics::new(self.strategy.as_str(), self.seed));
        // Streams keep submitting until their last frame is released.
        let last_release = self
            .reqs
            .iter()
            .map(|r| {
                let fps = self.sc.service(r.req.service).frequency_slo_fps;
                let span = fps.map_or(0, |f| ((r.req.frame_count.saturating_sub(1)) as f64 * 1000.0 / f).floor() as Millis);
                r.req.arrival_ms + span
            })
            .max();
        m.horizon_ms = last_release.map_or(0, |t| t + 1);
        for rs in &self.reqs {
            let svc = self.sc.service(rs.req.service);
            let category = categorize(svc);
            let outcome = rs.outcome.unwrap_or(Outcome::Lost);
            let (achieved, achieved_fps) = match svc.frequency_slo_fps {
                Some(fps) => {
                    let a = fps * rs.frames_done as f64 / rs.req.frame_count.max(1) as f64;
                    (Achieved::Rate { fps: a }, Some(a))
                }
                None => (Achieved::Deadline { met: outcome == Outcome::Completed }, None),
            };
            let satisfied = satisfied_count(&rs.req, svc.frequency_slo_fps, achieved);
            let units = match svc.frequency_slo_fps {
                Some(_) => rs.req.frame_count as u64,
                None => 1,
            };
            m.satisfied += satisfied;
            m.submitted += units;
            let c = m.per_category.entry(category).or_insert((0, 0));
            c.0 += satisfied;
            c.1 += units;
            *m.outcomes.entry(outcome).or_insert(0) += 1;
            if achieved_fps.is_none() {
                if let Some(t) = rs.completion_ms {
                    m.latency_histogram.record(t - rs.req.arrival_ms);
                }
            }
            let k = rs.req.offload_count as usize;
            if m.offload_histogram.len() <= k {
                m.offload_histogram.resize(k + 1, 0);
            }
            m.offload_histogram[k] += 1;
            let sec = (rs.req.arrival_ms / 1000) as usize;
            if m.timeseries.len() <= sec {
                m.timeseries.resize(sec + 1, SecondBucket::default());
            }
            let b = &mut m.timeseries[sec];
            b.submitted += units;
            b.satisfied += satisfied;
            b.offloads += rs.req.offload_count as u64;
            b.requests += 1;
            m.records.push(RequestRecord {
                id: rs.req.id,
                service: rs.req.service,
                category,
                origin: rs.req.origin,
                arrival_ms: rs.req.arrival_ms,
                frame_count: rs.req.frame_count,
                hop_path: rs.req.hop_path.clone(),
                offload_count: rs.req.offload_count,
                outcome,
                completion_ms: rs.completion_ms,
                frames_done: rs.frames_done,
                achieved_fps,
                satisfied,
            });
        }
        for s in &self.sc.servers {
            for (g, gpu) in s.gpus.iter().enumerate() {
                let r = GpuRef { server: s.id, gpu: g as u32 };
                m.gpu_usage.push(GpuUsage {
                    gpu: r,
                    model: self.sc.gpu_model_name(gpu.model).to_string(),
                    weighted_busy_ms: self.gpu_busy.get(&r).copied().unwrap_or(0.0),
                });
            }
        }
        m
    }
}

fn servers_of(w: &Worker) -> Vec<ServerId> {
    let mut s: Vec<ServerId> = w.gpus.iter().map(|g| g.server).collect();
    s.push(w.anchor);
    s.sort();
    s.dedup();
    s
}

fn gpus_of(workers: &[Worker], ws: &[usize]) -> Vec<GpuRef> {
    let mut g: Vec<GpuRef> = ws.iter().flat_map(|&w| workers[w].gpus.iter().copied()).collect();
    g.sort();
    g.dedup();
    g
}
