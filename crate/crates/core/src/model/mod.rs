//! Domain types shared by the allocator, handler, placement solver and engine.
//!
//! Everything here is immutable once a [`Scenario`] has been validated; the
//! engine owns all mutable simulation state.

mod metrics;
mod scenario;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use metrics::{GpuUsage, Histogram, Metrics, Outcome, RequestRecord, SecondBucket};
pub use scenario::{
    apply_override, finalize_trace, load_scenario, load_scenario_with_overrides, parse_trace_csv,
    trace_to_csv, Control, DevicePolicy, FaultKind, FaultSpec, PlacementMode, PriorityEntry,
    Scenario, ScenarioError, TraceGenSpec, TraceRow,
};

/// Milliseconds on the virtual clock.
pub type Millis = u64;

/// Dense index of a service inside a [`Scenario`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceId(pub u32);

/// Dense index of an edge server inside a [`Scenario`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServerId(pub u32);

/// Dense index of a GPU model declared in the `[gpus]` section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GpuModelId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl ServerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ServiceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Binding constraint of a request class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sensitivity {
    Latency,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GpuClass {
    SingleGpu,
    MultiGpu,
}

/// One of the four task quadrants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskCategory {
    pub sensitivity: Sensitivity,
    pub gpu_class: GpuClass,
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.sensitivity {
            Sensitivity::Latency => "latency",
            Sensitivity::Frequency => "frequency",
        };
        let g = match self.gpu_class {
            GpuClass::SingleGpu => "single",
            GpuClass::MultiGpu => "multi",
        };
        write!(f, "{s}/{g}")
    }
}

/// An AI inference service with per-slice resource demands.
///
/// `compute_demand` and `vram_demand` are fractions of one GPU consumed by a
/// single replica slice (after model-parallel slicing for multi-GPU services).
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSpec {
    pub id: ServiceId,
    pub name: String,
    pub compute_demand: f64,
    pub vram_demand: f64,
    /// Milliseconds per batch of one at MT 1, indexed by [`GpuModelId`].
    pub compute_time_ms: Vec<f64>,
    pub latency_slo_ms: Millis,
    pub frequency_slo_fps: Option<f64>,
    pub needs_multi_gpu: bool,
    pub model_load_ms: Millis,
    pub model_mb: f64,
    /// Payload forwarded per request (or per frame) on an offload hop.
    pub input_kb: f64,
    pub tp_degree: u32,
    pub pp_degree: u32,
    pub batch_size: Option<u32>,
    pub multitask: Option<u32>,
    /// Tolerable inter-frame latency used to size multi-frame batches.
    pub mf_budget_ms: Option<Millis>,
    pub synth_peak_bs: Option<u32>,
    pub synth_slope: Option<f64>,
}

impl ServiceSpec {
    pub fn sensitivity(&self) -> Sensitivity {
        if self.frequency_slo_fps.is_some() {
            Sensitivity::Frequency
        } else {
            Sensitivity::Latency
        }
    }

    /// GPUs occupied by one model-parallel group.
    pub fn group_width(&self) -> u32 {
        self.tp_degree.max(1) * self.pp_degree.max(1)
    }

    pub fn input_bytes(&self) -> u64 {
        (self.input_kb * 1000.0).round() as u64
    }

    pub fn compute_time(&self, model: GpuModelId) -> f64 {
        self.compute_time_ms[model.0 as usize]
    }
}

/// A user task: one latency-sensitive request or one frequency-sensitive
/// stream of `frame_count` frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    pub service: ServiceId,
    pub origin: ServerId,
    pub arrival_ms: Millis,
    pub deadline_ms: Millis,
    pub frame_count: u32,
    pub hop_path: Vec<ServerId>,
    pub offload_count: u32,
}

impl Request {
    pub fn new(
        id: RequestId,
        service: &ServiceSpec,
        origin: ServerId,
        arrival_ms: Millis,
        frame_count: u32,
    ) -> Self {
        Self {
            id,
            service: service.id,
            origin,
            arrival_ms,
            deadline_ms: arrival_ms + service.latency_slo_ms,
            frame_count: frame_count.max(1),
            hop_path: vec![origin],
            offload_count: 0,
        }
    }

    /// The server currently holding the request.
    pub fn current_server(&self) -> ServerId {
        *self.hop_path.last().expect("hop path always holds the origin")
    }

    pub fn has_visited(&self, server: ServerId) -> bool {
        self.hop_path.contains(&server)
    }
}

/// A single GPU with MPS-slice accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Gpu {
    pub model: GpuModelId,
    pub vram_free: f64,
    pub compute_free: f64,
    pub resident_slices: Vec<(ServiceId, u32)>,
}

/// Tolerance for accumulated floating-point error in slice accounting.
pub const RESOURCE_EPS: f64 = 1e-9;

impl Gpu {
    pub fn new(model: GpuModelId) -> Self {
        Self {
            model,
            vram_free: 1.0,
            compute_free: 1.0,
            resident_slices: Vec::new(),
        }
    }

    pub fn fits(&self, compute: f64, vram: f64) -> bool {
        compute <= self.compute_free + RESOURCE_EPS && vram <= self.vram_free + RESOURCE_EPS
    }

    /// Reserves `mt` slices of `service`. Caller checks [`Gpu::fits`] first.
    pub fn reserve(&mut self, service: &ServiceSpec, mt: u32) {
        self.compute_free -= service.compute_demand * mt as f64;
        self.vram_free -= service.vram_demand * mt as f64;
        self.compute_free = self.compute_free.max(0.0);
        self.vram_free = self.vram_free.max(0.0);
        self.resident_slices.push((service.id, mt));
    }

    pub fn is_empty(&self) -> bool {
        self.resident_slices.is_empty()
    }
}

/// A computing-capable edge device that may register with a server.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub id: DeviceId,
    pub server: ServerId,
    pub gpu_model: GpuModelId,
    pub register_ms: Millis,
    pub load_bandwidth_mbps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Server {
    pub id: ServerId,
    pub name: String,
    pub gpus: Vec<Gpu>,
    pub ring_index: u32,
    pub registered_devices: Vec<DeviceSpec>,
    pub bandwidth_to: BTreeMap<ServerId, f64>,
    /// Server becomes live at the first placement epoch at or after this time.
    pub join_ms: Millis,
    pub exit_ms: Option<Millis>,
}

impl Server {
    pub fn bandwidth_mbps(&self, to: ServerId) -> f64 {
        self.bandwidth_to.get(&to).copied().unwrap_or(f64::INFINITY)
    }
}

/// Operator settings chosen for one service on one GPU model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub bs: u32,
    pub mt: u32,
    pub tp_degree: u32,
    pub pp_degree: u32,
    pub mf: u32,
    pub dp_groups: u32,
    pub inter_request_count: u32,
}

impl AllocationPlan {
    pub fn group_width(&self) -> u32 {
        self.tp_degree * self.pp_degree
    }
}

/// Location of one GPU in the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GpuRef {
    pub server: ServerId,
    pub gpu: u32,
}

/// A placed service replica group `x_ln`.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub service: ServiceId,
    /// Anchor server; for a cross-server group this is the server of its
    /// first GPU.
    pub server: ServerId,
    /// One GPU per model-parallel slice.
    pub gpus: Vec<GpuRef>,
    pub plan: AllocationPlan,
    /// True for groups placed on the aggregated hypothetical server that
    /// ended up spanning more than one physical server.
    pub cross_server: bool,
}

impl Placement {
    pub fn servers(&self) -> Vec<ServerId> {
        let mut s: Vec<ServerId> = self.gpus.iter().map(|g| g.server).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn touches(&self, server: ServerId) -> bool {
        self.gpus.iter().any(|g| g.server == server)
    }
}

/// Ordered placement list Θ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlacementList {
    pub entries: Vec<Placement>,
    pub epoch: u64,
}

impl PlacementList {
    pub fn new(epoch: u64) -> Self {
        Self {
            entries: Vec::new(),
            epoch,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hosts(&self, service: ServiceId, server: ServerId) -> bool {
        self.entries
            .iter()
            .any(|p| p.service == service && p.touches(server))
    }
}

/// How a latency or frequency request was (partially) met.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Achieved {
    Deadline { met: bool },
    Rate { fps: f64 },
}

/// Satisfied units credited for one request.
///
/// Frequency-sensitive streams earn proportional credit
/// `F * min(1, achieved / slo)` rounded down; latency-sensitive requests earn
/// one unit when the deadline is met.
pub fn satisfied_count(request: &Request, frequency_slo_fps: Option<f64>, achieved: Achieved) -> u64 {
    match (achieved, frequency_slo_fps) {
        (Achieved::Deadline { met }, _) => u64::from(met),
        (Achieved::Rate { fps }, Some(slo)) if slo > 0.0 => {
            let ratio = (fps.max(0.0) / slo).min(1.0);
            // 1e-9 absorbs representation error in exact ratios such as 30/60.
            ((request.frame_count as f64) * ratio + 1e-9).floor() as u64
        }
        (Achieved::Rate { fps }, _) => {
            if fps > 0.0 {
                request.frame_count as u64
            } else {
                0
            }
        }
    }
}

/// Per-source entry of a server's cached cluster state.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub source: ServerId,
    /// Sync round in which the source produced this snapshot.
    pub seq: u64,
    pub placement_epoch: u64,
    pub snapshot_ms: Millis,
    pub staleness_ms: Millis,
    pub available: bool,
    pub services: BTreeMap<ServiceId, ServiceStatus>,
}

impl ViewEntry {
    pub fn fresh(source: ServerId, seq: u64, now: Millis) -> Self {
        Self {
            source,
            seq,
            placement_epoch: 0,
            snapshot_ms: now,
            staleness_ms: 0,
            available: true,
            services: BTreeMap::new(),
        }
    }
}

/// Status of one hosted service as published by its server.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceStatus {
    /// Theoretical goodput p̂ in work units per second.
    pub theoretical_rate: f64,
    /// Projected wait before newly admitted work could start.
    pub backlog_ms: Millis,
    /// Cumulative admitted work at past instants, oldest first.
    pub checkpoints: Vec<(Millis, u64)>,
}

impl ServiceStatus {
    /// Cumulative admitted work at `t` (latest checkpoint not after `t`).
    pub fn cumulative_at(&self, t: Millis) -> u64 {
        self.checkpoints
            .iter()
            .rev()
            .find(|(ts, _)| *ts <= t)
            .map(|(_, c)| *c)
            .or_else(|| self.checkpoints.first().map(|(_, c)| *c))
            .unwrap_or(0)
    }

    /// Actual rate over the window `[end - len, end]`, per second.
    pub fn actual_rate(&self, end: Millis, len: Millis) -> f64 {
        let len = len.max(1);
        let hi = self.cumulative_at(end);
        let lo = self.cumulative_at(end.saturating_sub(len));
        hi.saturating_sub(lo) as f64 * 1000.0 / len as f64
    }
}

/// A server's possibly stale snapshot of all servers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterView {
    pub owner: ServerId,
    pub per_server: BTreeMap<ServerId, ViewEntry>,
}

impl ClusterView {
    pub fn new(owner: ServerId) -> Self {
        Self {
            owner,
            per_server: BTreeMap::new(),
        }
    }

    pub fn staleness(&self, server: ServerId) -> Option<Millis> {
        self.per_server.get(&server).map(|e| e.staleness_ms)
    }

    pub fn is_available(&self, server: ServerId) -> bool {
        self.per_server.get(&server).map_or(true, |e| e.available)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video_service() -> ServiceSpec {
        ServiceSpec {
            id: ServiceId(0),
            name: "video".into(),
            compute_demand: 0.5,
            vram_demand: 0.5,
            compute_time_ms: vec![10.0],
            latency_slo_ms: 200,
            frequency_slo_fps: Some(60.0),
            needs_multi_gpu: false,
            model_load_ms: 550,
            model_mb: 100.0,
            input_kb: 50.0,
            tp_degree: 1,
            pp_degree: 1,
            batch_size: None,
            multitask: None,
            mf_budget_ms: None,
            synth_peak_bs: None,
            synth_slope: None,
        }
    }

    fn stream(frames: u32) -> Request {
        Request::new(RequestId(0), &video_service(), ServerId(0), 0, frames)
    }

    #[test]
    fn frequency_credit_matches_worked_example() {
        let r = stream(120);
        assert_eq!(satisfied_count(&r, Some(60.0), Achieved::Rate { fps: 30.0 }), 60);
    }

    #[test]
    fn frequency_credit_caps_at_frame_count() {
        let r = stream(120);
        assert_eq!(satisfied_count(&r, Some(60.0), Achieved::Rate { fps: 60.0 }), 120);
        let r = stream(90);
        assert_eq!(satisfied_count(&r, Some(60.0), Achieved::Rate { fps: 90.0 }), 90);
    }

    #[test]
    fn latency_credit_is_binary() {
        let r = stream(1);
        assert_eq!(satisfied_count(&r, None, Achieved::Deadline { met: true }), 1);
        assert_eq!(satisfied_count(&r, None, Achieved::Deadline { met: false }), 0);
    }

    #[test]
    fn gpu_reserve_tracks_free_fractions() {
        let svc = video_service();
        let mut gpu = Gpu::new(GpuModelId(0));
        assert!(gpu.fits(0.5, 0.5));
        gpu.reserve(&svc, 1);
        assert!((gpu.vram_free - 0.5).abs() < 1e-12);
        assert!(gpu.fits(0.5, 0.5));
        assert!(!gpu.fits(0.6, 0.1));
    }

    #[test]
    fn actual_rate_uses_checkpoint_window() {
        let status = ServiceStatus {
            theoretical_rate: 10.0,
            backlog_ms: 0,
            checkpoints: vec![(0, 0), (100, 2), (200, 6)],
        };
        // window [100, 200]: 4 units over 100 ms
        assert!((status.actual_rate(200, 100) - 40.0).abs() < 1e-9);
        assert_eq!(status.cumulative_at(150), 2);
    }
}
