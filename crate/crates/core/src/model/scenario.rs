//! Scenario files: TOML with `[control]`, `[[gpus]]`, `[[servers]]`,
//! `[[services]]`, `[bandwidth]`, `[trace]`, `[[devices]]`, `[[profiles]]`
//! and `[profile_synth]` sections. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    DeviceId, DeviceSpec, Gpu, GpuModelId, Millis, Request, RequestId, Server, ServerId,
    ServiceId, ServiceSpec,
};
use crate::allocator::{ProfileRow, ProfileSynth, ProfileTable, BATCH_SIZES, MT_DEGREES};
use crate::engine::workload::{generate_workload, ArrivalPattern};

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Name of the offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ScenarioError::Validation { field, .. } => Some(field),
            ScenarioError::Parse(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevicePolicy {
    Enabled,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementMode {
    Offline,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// Server stops; neighbours bypass it at the next sync round.
    Fail,
    /// One cached view entry is scrambled; heals on the next round.
    Corrupt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub server: ServerId,
    pub at_ms: Millis,
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            FaultKind::Fail => "fail",
            FaultKind::Corrupt => "corrupt",
        };
        write!(f, "{k}({}, {})", self.server.0, self.at_ms)
    }
}

/// Entry of the stage-one priority list; `server == None` targets the
/// aggregated hypothetical server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorityEntry {
    pub service: ServiceId,
    pub server: Option<ServerId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub seed: u64,
    pub max_offload: u32,
    pub sync_interval_ms: Millis,
    pub placement_interval_ms: Millis,
    pub bytes_per_server: u64,
    /// Servers per independent sync ring and placement group; 0 = one group.
    pub group_size: u32,
    pub hop_overhead_ms: Millis,
    pub decision_cost_us: u64,
    pub device_policy: DevicePolicy,
    pub placement_mode: PlacementMode,
    pub eval_expected: bool,
    pub eval_seed: u64,
    pub device_bandwidth_cap_mbps: f64,
    /// Serialized per-decision cost of the centralized baseline per server
    /// in its group.
    pub central_cost_us: u64,
    pub central_group_size: u32,
    pub faults: Vec<FaultSpec>,
    pub priority: Vec<PriorityEntry>,
}

impl Default for Control {
    fn default() -> Self {
        Self {
            seed: 0,
            max_offload: 5,
            sync_interval_ms: 50,
            placement_interval_ms: 600_000,
            bytes_per_server: 512,
            group_size: 0,
            hop_overhead_ms: 1,
            decision_cost_us: 100,
            device_policy: DevicePolicy::Enabled,
            placement_mode: PlacementMode::Offline,
            eval_expected: false,
            eval_seed: 0x5eed,
            device_bandwidth_cap_mbps: 1000.0,
            central_cost_us: 50,
            central_group_size: 10,
            faults: Vec::new(),
            priority: Vec::new(),
        }
    }
}

/// Workload generator entry from `[[trace.generate]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGenSpec {
    pub service: ServiceId,
    pub rate_per_s: f64,
    pub pattern: ArrivalPattern,
    pub start_ms: Millis,
    pub duration_ms: Millis,
    pub origins: Vec<ServerId>,
    pub frame_count: u32,
}

/// A validated, immutable scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub gpu_models: Vec<String>,
    pub servers: Vec<Server>,
    pub services: Vec<ServiceSpec>,
    pub devices: Vec<DeviceSpec>,
    pub default_bandwidth_mbps: f64,
    pub trace: Vec<Request>,
    pub control: Control,
    pub profiles: ProfileTable,
}

impl Scenario {
    pub fn service(&self, id: ServiceId) -> &ServiceSpec {
        &self.services[id.index()]
    }

    pub fn server(&self, id: ServerId) -> &Server {
        &self.servers[id.index()]
    }

    pub fn service_by_name(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn gpu_model_name(&self, id: GpuModelId) -> &str {
        &self.gpu_models[id.0 as usize]
    }

    pub fn bandwidth_mbps(&self, from: ServerId, to: ServerId) -> f64 {
        if from == to {
            return f64::INFINITY;
        }
        self.server(from).bandwidth_mbps(to)
    }

    /// GPU models that occur on a server or a device.
    pub fn models_in_use(&self) -> Vec<GpuModelId> {
        let mut used: Vec<GpuModelId> = self
            .servers
            .iter()
            .flat_map(|s| s.gpus.iter().map(|g| g.model))
            .chain(self.devices.iter().map(|d| d.gpu_model))
            .collect();
        used.sort();
        used.dedup();
        used
    }

    /// Copy of this scenario with the trace replaced.
    pub fn with_trace(&self, trace: Vec<Request>) -> Scenario {
        Scenario {
            trace,
            ..self.clone()
        }
    }

    /// Serializes back into scenario text; generated traces are written out
    /// as explicit rows.
    pub fn to_toml(&self) -> String {
        let raw = RawScenario::from_scenario(self);
        toml::to_string(&raw).expect("scenario is always representable as TOML")
    }

    pub fn trace_csv(&self) -> String {
        trace_to_csv(self, &self.trace)
    }
}

pub fn trace_to_csv(scenario: &Scenario, trace: &[Request]) -> String {
    let mut out = String::from("arrival_ms,service_id,origin_server,frame_count\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.arrival_ms,
            scenario.service(r.service).name,
            r.origin.0,
            r.frame_count
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Raw file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    control: RawControl,
    gpus: Vec<RawGpuModel>,
    servers: Vec<RawServer>,
    services: Vec<RawService>,
    #[serde(default)]
    bandwidth: RawBandwidth,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    devices: Vec<RawDevice>,
    #[serde(default)]
    trace: RawTrace,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    profiles: Vec<RawProfileRow>,
    #[serde(default)]
    profile_synth: RawSynth,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct RawControl {
    seed: u64,
    max_offload: u32,
    sync_interval_ms: u64,
    placement_interval_ms: u64,
    bytes_per_server: u64,
    group_size: u32,
    hop_overhead_ms: u64,
    decision_cost_us: u64,
    device_policy: String,
    placement_mode: String,
    eval_expected: bool,
    eval_seed: u64,
    device_bandwidth_cap_mbps: f64,
    central_cost_us: u64,
    central_group_size: u32,
    faults: Vec<String>,
    priority: Vec<String>,
}

impl Default for RawControl {
    fn default() -> Self {
        let c = Control::default();
        Self {
            seed: c.seed,
            max_offload: c.max_offload,
            sync_interval_ms: c.sync_interval_ms,
            placement_interval_ms: c.placement_interval_ms,
            bytes_per_server: c.bytes_per_server,
            group_size: c.group_size,
            hop_overhead_ms: c.hop_overhead_ms,
            decision_cost_us: c.decision_cost_us,
            device_policy: "enabled".into(),
            placement_mode: "offline".into(),
            eval_expected: c.eval_expected,
            eval_seed: c.eval_seed,
            device_bandwidth_cap_mbps: c.device_bandwidth_cap_mbps,
            central_cost_us: c.central_cost_us,
            central_group_size: c.central_group_size,
            faults: Vec::new(),
            priority: Vec::new(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawGpuModel {
    name: String,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawServer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    gpus: Vec<String>,
    #[serde(default)]
    join_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exit_ms: Option<u64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawService {
    name: String,
    compute_demand: f64,
    vram_demand: f64,
    latency_slo_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frequency_slo_fps: Option<f64>,
    #[serde(default)]
    needs_multi_gpu: bool,
    #[serde(default)]
    model_load_ms: u64,
    #[serde(default = "default_model_mb")]
    model_mb: f64,
    #[serde(default = "default_input_kb")]
    input_kb: f64,
    compute_time_ms: BTreeMap<String, f64>,
    #[serde(default = "one")]
    tp: u32,
    #[serde(default = "one")]
    pp: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mf_budget_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth_peak_bs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth_slope: Option<f64>,
}

fn one() -> u32 {
    1
}

fn default_model_mb() -> f64 {
    100.0
}

fn default_input_kb() -> f64 {
    50.0
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct RawBandwidth {
    default_mbps: f64,
    /// `[from, to, mbps]`, applied in both directions.
    links: Vec<(u32, u32, f64)>,
}

impl Default for RawBandwidth {
    fn default() -> Self {
        Self {
            default_mbps: 1000.0,
            links: Vec::new(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    server: u32,
    gpu: String,
    register_ms: u64,
    load_bandwidth_mbps: f64,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct RawTrace {
    #[serde(skip_serializing_if = "String::is_empty")]
    rows: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    generate: Vec<RawGenerate>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawGenerate {
    service: String,
    rate_per_s: f64,
    #[serde(default = "poisson")]
    pattern: String,
    #[serde(default)]
    on_ms: u64,
    #[serde(default)]
    off_ms: u64,
    #[serde(default)]
    start_ms: u64,
    duration_ms: u64,
    #[serde(default)]
    origins: Vec<u32>,
    #[serde(default = "one")]
    frame_count: u32,
}

fn poisson() -> String {
    "poisson".into()
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawProfileRow {
    service: String,
    gpu: String,
    bs: u32,
    mt: u32,
    goodput: f64,
    latency_ms: f64,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct RawSynth {
    slope: f64,
    peak_bs: u32,
    mt_contention: f64,
}

impl Default for RawSynth {
    fn default() -> Self {
        let s = ProfileSynth::default();
        Self {
            slope: s.slope,
            peak_bs: s.peak_bs,
            mt_contention: s.mt_contention,
        }
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Parses and validates scenario text.
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    load_scenario_with_overrides(text, &[])
}

/// Parses scenario text, applies `[control]` overrides, then validates.
pub fn load_scenario_with_overrides(
    text: &str,
    overrides: &[(String, String)],
) -> Result<Scenario, ScenarioError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let raw: RawScenario = table
        .try_into()
        .map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
    build(raw)
}

/// Sets `control.<key>` in a parsed scenario table. The value is interpreted
/// as TOML (integer, float, bool, array) and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ScenarioError> {
    let key = key.trim().replace('-', "_");
    if !RawControl::KEYS.contains(&key.as_str()) {
        return Err(ScenarioError::invalid(
            format!("control.{key}"),
            "unknown control key",
        ));
    }
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let control = table
        .entry("control")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match control {
        toml::Value::Table(t) => {
            t.insert(key, parsed);
            Ok(())
        }
        _ => Err(ScenarioError::Parse("`control` must be a table".into())),
    }
}

impl RawControl {
    const KEYS: &'static [&'static str] = &[
        "seed",
        "max_offload",
        "sync_interval_ms",
        "placement_interval_ms",
        "bytes_per_server",
        "group_size",
        "hop_overhead_ms",
        "decision_cost_us",
        "device_policy",
        "placement_mode",
        "eval_expected",
        "eval_seed",
        "device_bandwidth_cap_mbps",
        "central_cost_us",
        "central_group_size",
        "faults",
        "priority",
    ];
}

fn build(raw: RawScenario) -> Result<Scenario, ScenarioError> {
    if raw.gpus.is_empty() {
        return Err(ScenarioError::invalid("gpus", "at least one GPU model required"));
    }
    if raw.servers.is_empty() {
        return Err(ScenarioError::invalid("servers", "at least one server required"));
    }
    if raw.services.is_empty() {
        return Err(ScenarioError::invalid("services", "at least one service required"));
    }

    let gpu_models: Vec<String> = raw.gpus.iter().map(|g| g.name.clone()).collect();
    for (i, name) in gpu_models.iter().enumerate() {
        if gpu_models[..i].contains(name) {
            return Err(ScenarioError::invalid(format!("gpus[{i}].name"), "duplicate GPU model"));
        }
    }
    let model_id = |name: &str, field: String| -> Result<GpuModelId, ScenarioError> {
        gpu_models
            .iter()
            .position(|m| m == name)
            .map(|i| GpuModelId(i as u16))
            .ok_or_else(|| ScenarioError::invalid(field, format!("unknown GPU model `{name}`")))
    };

    let n = raw.servers.len();
    let bw = &raw.bandwidth;
    if !(bw.default_mbps > 0.0) {
        return Err(ScenarioError::invalid("bandwidth.default_mbps", "must be > 0"));
    }
    let mut matrix = vec![vec![bw.default_mbps; n]; n];
    for (i, &(a, b, mbps)) in bw.links.iter().enumerate() {
        if a as usize >= n || b as usize >= n {
            return Err(ScenarioError::invalid(
                format!("bandwidth.links[{i}]"),
                "unknown server id",
            ));
        }
        if !(mbps > 0.0) {
            return Err(ScenarioError::invalid(format!("bandwidth.links[{i}]"), "must be > 0"));
        }
        matrix[a as usize][b as usize] = mbps;
        matrix[b as usize][a as usize] = mbps;
    }

    let mut servers = Vec::with_capacity(n);
    for (i, rs) in raw.servers.iter().enumerate() {
        let mut gpus = Vec::new();
        for (g, name) in rs.gpus.iter().enumerate() {
            gpus.push(Gpu::new(model_id(name, format!("servers[{i}].gpus[{g}]"))?));
        }
        if let Some(exit) = rs.exit_ms {
            if exit < rs.join_ms {
                return Err(ScenarioError::invalid(
                    format!("servers[{i}].exit_ms"),
                    "exit before join",
                ));
            }
        }
        let bandwidth_to = (0..n)
            .filter(|&j| j != i)
            .map(|j| (ServerId(j as u32), matrix[i][j]))
            .collect();
        servers.push(Server {
            id: ServerId(i as u32),
            name: rs.name.clone().unwrap_or_else(|| format!("server-{i}")),
            gpus,
            ring_index: i as u32,
            registered_devices: Vec::new(),
            bandwidth_to,
            join_ms: rs.join_ms,
            exit_ms: rs.exit_ms,
        });
    }

    let mut devices = Vec::new();
    for (i, rd) in raw.devices.iter().enumerate() {
        if rd.server as usize >= n {
            return Err(ScenarioError::invalid(format!("devices[{i}].server"), "unknown server id"));
        }
        if !(rd.load_bandwidth_mbps > 0.0) {
            return Err(ScenarioError::invalid(
                format!("devices[{i}].load_bandwidth_mbps"),
                "must be > 0",
            ));
        }
        let d = DeviceSpec {
            id: DeviceId(i as u32),
            server: ServerId(rd.server),
            gpu_model: model_id(&rd.gpu, format!("devices[{i}].gpu"))?,
            register_ms: rd.register_ms,
            load_bandwidth_mbps: rd.load_bandwidth_mbps,
        };
        servers[rd.server as usize].registered_devices.push(d.clone());
        devices.push(d);
    }

    let mut used_models: Vec<GpuModelId> = servers
        .iter()
        .flat_map(|s| s.gpus.iter().map(|g| g.model))
        .chain(devices.iter().map(|d| d.gpu_model))
        .collect();
    used_models.sort();
    used_models.dedup();

    let mut services = Vec::with_capacity(raw.services.len());
    for (i, rs) in raw.services.iter().enumerate() {
        let f = |name: &str| format!("services[{i}].{name}");
        if raw.services[..i].iter().any(|o| o.name == rs.name) {
            return Err(ScenarioError::invalid(f("name"), "duplicate service name"));
        }
        if !(rs.compute_demand > 0.0 && rs.compute_demand <= 1.0) {
            return Err(ScenarioError::invalid(f("compute_demand"), "must be in (0, 1]"));
        }
        if !(rs.vram_demand > 0.0 && rs.vram_demand <= 1.0) {
            return Err(ScenarioError::invalid(f("vram_demand"), "must be in (0, 1]"));
        }
        if rs.latency_slo_ms == 0 {
            return Err(ScenarioError::invalid(f("latency_slo_ms"), "must be > 0"));
        }
        if let Some(fps) = rs.frequency_slo_fps {
            if !(fps > 0.0) {
                return Err(ScenarioError::invalid(f("frequency_slo_fps"), "must be > 0"));
            }
        }
        if rs.tp == 0 || rs.pp == 0 {
            return Err(ScenarioError::invalid(f("tp"), "parallel degrees must be >= 1"));
        }
        if !rs.needs_multi_gpu && rs.tp * rs.pp > 1 {
            return Err(ScenarioError::invalid(
                f("needs_multi_gpu"),
                "model-parallel degrees > 1 require needs_multi_gpu = true",
            ));
        }
        if let Some(bs) = rs.bs {
            if !BATCH_SIZES.contains(&bs) {
                return Err(ScenarioError::invalid(f("bs"), "must be a power of two in 1..=512"));
            }
        }
        if let Some(mt) = rs.mt {
            if !MT_DEGREES.contains(&mt) {
                return Err(ScenarioError::invalid(f("mt"), "must be a power of two in 1..=16"));
            }
        }
        if !(rs.input_kb >= 0.0) || !(rs.model_mb >= 0.0) {
            return Err(ScenarioError::invalid(f("input_kb"), "sizes must be >= 0"));
        }
        let mut compute = vec![f64::NAN; gpu_models.len()];
        for (model, ms) in &rs.compute_time_ms {
            let id = model_id(model, f(&format!("compute_time_ms.{model}")))?;
            if !(*ms > 0.0) {
                return Err(ScenarioError::invalid(
                    f(&format!("compute_time_ms.{model}")),
                    "must be > 0",
                ));
            }
            compute[id.0 as usize] = *ms;
        }
        for m in &used_models {
            if compute[m.0 as usize].is_nan() {
                return Err(ScenarioError::invalid(
                    f("compute_time_ms"),
                    format!("missing entry for GPU model `{}`", gpu_models[m.0 as usize]),
                ));
            }
        }
        services.push(ServiceSpec {
            id: ServiceId(i as u32),
            name: rs.name.clone(),
            compute_demand: rs.compute_demand,
            vram_demand: rs.vram_demand,
            compute_time_ms: compute,
            latency_slo_ms: rs.latency_slo_ms,
            frequency_slo_fps: rs.frequency_slo_fps,
            needs_multi_gpu: rs.needs_multi_gpu,
            model_load_ms: rs.model_load_ms,
            model_mb: rs.model_mb,
            input_kb: rs.input_kb,
            tp_degree: rs.tp,
            pp_degree: rs.pp,
            batch_size: rs.bs,
            multitask: rs.mt,
            mf_budget_ms: rs.mf_budget_ms,
            synth_peak_bs: rs.synth_peak_bs,
            synth_slope: rs.synth_slope,
        });
    }
    let names: Vec<(String, ServiceId)> = services.iter().map(|s| (s.name.clone(), s.id)).collect();
    let service_id = |name: &str, field: String| -> Result<ServiceId, ScenarioError> {
        names
            .iter()
            .find(|s| s.0 == name)
            .map(|s| s.1)
            .ok_or_else(|| ScenarioError::invalid(field, format!("unknown service `{name}`")))
    };

    let control = build_control(&raw.control, n, &service_id)?;

    let synth = ProfileSynth {
        slope: raw.profile_synth.slope,
        peak_bs: raw.profile_synth.peak_bs,
        mt_contention: raw.profile_synth.mt_contention,
    };
    if !(synth.slope >= 0.0) || synth.peak_bs == 0 || !(synth.mt_contention >= 0.0) {
        return Err(ScenarioError::invalid("profile_synth", "parameters must be non-negative"));
    }
    let mut profiles = ProfileTable::new(synth);
    for (i, row) in raw.profiles.iter().enumerate() {
        let field = format!("profiles[{i}]");
        let svc = service_id(&row.service, format!("{field}.service"))?;
        let gpu = model_id(&row.gpu, format!("{field}.gpu"))?;
        if !BATCH_SIZES.contains(&row.bs) || !MT_DEGREES.contains(&row.mt) {
            return Err(ScenarioError::invalid(field, "bs/mt outside the profiled ranges"));
        }
        if !(row.goodput >= 0.0) || !(row.latency_ms > 0.0) {
            return Err(ScenarioError::invalid(field, "goodput >= 0 and latency > 0 required"));
        }
        profiles.insert(
            svc,
            gpu,
            row.bs,
            row.mt,
            ProfileRow {
                goodput: row.goodput,
                latency_ms: row.latency_ms,
            },
        );
    }

    let mut scenario = Scenario {
        gpu_models,
        servers,
        services,
        devices,
        default_bandwidth_mbps: bw.default_mbps,
        trace: Vec::new(),
        control,
        profiles,
    };

    let mut rows = parse_trace_csv(&scenario, &raw.trace.rows)?;
    let mut gens = Vec::new();
    for (i, g) in raw.trace.generate.iter().enumerate() {
        let field = format!("trace.generate[{i}]");
        let service = service_id(&g.service, format!("{field}.service"))?;
        let pattern = match g.pattern.as_str() {
            "poisson" => ArrivalPattern::Poisson,
            "bursty" => {
                if g.on_ms == 0 {
                    return Err(ScenarioError::invalid(format!("{field}.on_ms"), "must be > 0"));
                }
                ArrivalPattern::Bursty {
                    on_ms: g.on_ms,
                    off_ms: g.off_ms,
                }
            }
            other => {
                return Err(ScenarioError::invalid(
                    format!("{field}.pattern"),
                    format!("unknown pattern `{other}`"),
                ))
            }
        };
        if !(g.rate_per_s >= 0.0) {
            return Err(ScenarioError::invalid(format!("{field}.rate_per_s"), "must be >= 0"));
        }
        let origins: Vec<ServerId> = if g.origins.is_empty() {
            (0..n as u32).map(ServerId).collect()
        } else {
            g.origins.iter().map(|&o| ServerId(o)).collect()
        };
        if origins.iter().any(|o| o.index() >= n) {
            return Err(ScenarioError::invalid(format!("{field}.origins"), "unknown server id"));
        }
        check_frames(&scenario.services[service.index()], g.frame_count, &field)?;
        gens.push(TraceGenSpec {
            service,
            rate_per_s: g.rate_per_s,
            pattern,
            start_ms: g.start_ms,
            duration_ms: g.duration_ms,
            origins,
            frame_count: g.frame_count,
        });
    }
    for (i, spec) in gens.iter().enumerate() {
        let seed = scenario.control.seed ^ ((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rows.extend(generate_workload(&scenario, spec, seed));
    }
    scenario.trace = finalize_trace(&scenario, rows);
    Ok(scenario)
}

fn build_control(
    raw: &RawControl,
    n: usize,
    service_id: &dyn Fn(&str, String) -> Result<ServiceId, ScenarioError>,
) -> Result<Control, ScenarioError> {
    if raw.sync_interval_ms == 0 {
        return Err(ScenarioError::invalid("control.sync_interval_ms", "must be >= 1"));
    }
    if raw.placement_interval_ms < raw.sync_interval_ms {
        return Err(ScenarioError::invalid(
            "control.placement_interval_ms",
            "must be >= sync_interval_ms",
        ));
    }
    let device_policy = match raw.device_policy.as_str() {
        "enabled" => DevicePolicy::Enabled,
        "disabled" => DevicePolicy::Disabled,
        _ => {
            return Err(ScenarioError::invalid(
                "control.device_policy",
                "expected `enabled` or `disabled`",
            ))
        }
    };
    let placement_mode = match raw.placement_mode.as_str() {
        "offline" => PlacementMode::Offline,
        "online" => PlacementMode::Online,
        _ => {
            return Err(ScenarioError::invalid(
                "control.placement_mode",
                "expected `offline` or `online`",
            ))
        }
    };
    if !(raw.device_bandwidth_cap_mbps > 0.0) {
        return Err(ScenarioError::invalid("control.device_bandwidth_cap_mbps", "must be > 0"));
    }
    if raw.central_group_size == 0 {
        return Err(ScenarioError::invalid("control.central_group_size", "must be >= 1"));
    }
    let mut faults = Vec::new();
    for (i, f) in raw.faults.iter().enumerate() {
        let field = format!("control.faults[{i}]");
        let fault = parse_fault(f).ok_or_else(|| {
            ScenarioError::invalid(field.clone(), "expected `fail(server, t_ms)` or `corrupt(server, t_ms)`")
        })?;
        if fault.server.index() >= n {
            return Err(ScenarioError::invalid(field, "unknown server id"));
        }
        faults.push(fault);
    }
    let mut priority = Vec::new();
    for (i, p) in raw.priority.iter().enumerate() {
        let field = format!("control.priority[{i}]");
        let (svc, target) = p
            .split_once('@')
            .ok_or_else(|| ScenarioError::invalid(field.clone(), "expected `service@server`"))?;
        let service = service_id(svc.trim(), field.clone())?;
        let target = target.trim();
        let server = if target == "eps" {
            None
        } else {
            let id: u32 = target
                .parse()
                .map_err(|_| ScenarioError::invalid(field.clone(), "server must be an index or `eps`"))?;
            if id as usize >= n {
                return Err(ScenarioError::invalid(field, "unknown server id"));
            }
            Some(ServerId(id))
        };
        priority.push(PriorityEntry { service, server });
    }
    Ok(Control {
        seed: raw.seed,
        max_offload: raw.max_offload,
        sync_interval_ms: raw.sync_interval_ms,
        placement_interval_ms: raw.placement_interval_ms,
        bytes_per_server: raw.bytes_per_server,
        group_size: raw.group_size,
        hop_overhead_ms: raw.hop_overhead_ms,
        decision_cost_us: raw.decision_cost_us,
        device_policy,
        placement_mode,
        eval_expected: raw.eval_expected,
        eval_seed: raw.eval_seed,
        device_bandwidth_cap_mbps: raw.device_bandwidth_cap_mbps,
        central_cost_us: raw.central_cost_us,
        central_group_size: raw.central_group_size,
        faults,
        priority,
    })
}

fn parse_fault(text: &str) -> Option<FaultSpec> {
    let text = text.trim();
    let (kind, rest) = if let Some(r) = text.strip_prefix("fail(") {
        (FaultKind::Fail, r)
    } else if let Some(r) = text.strip_prefix("corrupt(") {
        (FaultKind::Corrupt, r)
    } else {
        return None;
    };
    let inner = rest.strip_suffix(')')?;
    let (s, t) = inner.split_once(',')?;
    Some(FaultSpec {
        kind,
        server: ServerId(s.trim().parse().ok()?),
        at_ms: t.trim().parse().ok()?,
    })
}

fn check_frames(service: &ServiceSpec, frames: u32, field: &str) -> Result<(), ScenarioError> {
    if frames == 0 {
        return Err(ScenarioError::invalid(format!("{field}.frame_count"), "must be >= 1"));
    }
    if service.frequency_slo_fps.is_none() && frames != 1 {
        return Err(ScenarioError::invalid(
            format!("{field}.frame_count"),
            "latency-sensitive requests carry exactly one frame",
        ));
    }
    Ok(())
}

/// Unnumbered trace row; ids are assigned after sorting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRow {
    pub arrival_ms: Millis,
    pub service: ServiceId,
    pub origin: ServerId,
    pub frame_count: u32,
}

/// Parses `arrival_ms, service_id, origin_server, frame_count` rows. The
/// service column accepts a service name or its numeric index. Blank lines,
/// `#` comments and a header line are skipped.
pub fn parse_trace_csv(scenario: &Scenario, text: &str) -> Result<Vec<TraceRow>, ScenarioError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("arrival") {
            continue;
        }
        let field = format!("trace.rows[line {}]", lineno + 1);
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(ScenarioError::invalid(field, "expected 4 columns"));
        }
        let arrival_ms: u64 = cols[0]
            .parse()
            .map_err(|_| ScenarioError::invalid(field.clone(), "bad arrival_ms"))?;
        let service = scenario
            .services
            .iter()
            .find(|s| s.name == cols[1])
            .map(|s| s.id)
            .or_else(|| {
                cols[1]
                    .parse::<u32>()
                    .ok()
                    .filter(|&i| (i as usize) < scenario.services.len())
                    .map(ServiceId)
            })
            .ok_or_else(|| ScenarioError::invalid(field.clone(), format!("unknown service `{}`", cols[1])))?;
        let origin: u32 = cols[2]
            .parse()
            .map_err(|_| ScenarioError::invalid(field.clone(), "bad origin_server"))?;
        if origin as usize >= scenario.servers.len() {
            return Err(ScenarioError::invalid(field, "unknown origin server"));
        }
        let frame_count: u32 = cols[3]
            .parse()
            .map_err(|_| ScenarioError::invalid(field.clone(), "bad frame_count"))?;
        check_frames(scenario.service(service), frame_count, &field)?;
        out.push(TraceRow {
            arrival_ms,
            service,
            origin: ServerId(origin),
            frame_count,
        });
    }
    Ok(out)
}

/// Sorts rows by arrival (stable) and numbers them.
pub fn finalize_trace(scenario: &Scenario, mut rows: Vec<TraceRow>) -> Vec<Request> {
    rows.sort_by_key(|r| r.arrival_ms);
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            Request::new(
                RequestId(i as u64),
                scenario.service(r.service),
                r.origin,
                r.arrival_ms,
                r.frame_count,
            )
        })
        .collect()
}

impl Scenario {
    /// Replaces the trace with rows parsed from CSV text.
    pub fn import_trace_csv(&self, text: &str) -> Result<Scenario, ScenarioError> {
        let rows = parse_trace_csv(self, text)?;
        Ok(self.with_trace(finalize_trace(self, rows)))
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

impl RawScenario {
    fn from_scenario(s: &Scenario) -> Self {
        let c = &s.control;
        let control = RawControl {
            seed: c.seed,
            max_offload: c.max_offload,
            sync_interval_ms: c.sync_interval_ms,
            placement_interval_ms: c.placement_interval_ms,
            bytes_per_server: c.bytes_per_server,
            group_size: c.group_size,
            hop_overhead_ms: c.hop_overhead_ms,
            decision_cost_us: c.decision_cost_us,
            device_policy: match c.device_policy {
                DevicePolicy::Enabled => "enabled",
                DevicePolicy::Disabled => "disabled",
            }
            .into(),
            placement_mode: match c.placement_mode {
                PlacementMode::Offline => "offline",
                PlacementMode::Online => "online",
            }
            .into(),
            eval_expected: c.eval_expected,
            eval_seed: c.eval_seed,
            device_bandwidth_cap_mbps: c.device_bandwidth_cap_mbps,
            central_cost_us: c.central_cost_us,
            central_group_size: c.central_group_size,
            faults: c.faults.iter().map(|f| f.to_string()).collect(),
            priority: c
                .priority
                .iter()
                .map(|p| {
                    let target = p.server.map_or("eps".to_string(), |s| s.0.to_string());
                    format!("{}@{}", s.service(p.service).name, target)
                })
                .collect(),
        };
        let gpus = s
            .gpu_models
            .iter()
            .map(|name| RawGpuModel { name: name.clone() })
            .collect();
        let servers = s
            .servers
            .iter()
            .map(|srv| RawServer {
                name: Some(srv.name.clone()),
                gpus: srv
                    .gpus
                    .iter()
                    .map(|g| s.gpu_model_name(g.model).to_string())
                    .collect(),
                join_ms: srv.join_ms,
                exit_ms: srv.exit_ms,
            })
            .collect();
        let services = s
            .services
            .iter()
            .map(|svc| RawService {
                name: svc.name.clone(),
                compute_demand: svc.compute_demand,
                vram_demand: svc.vram_demand,
                latency_slo_ms: svc.latency_slo_ms,
                frequency_slo_fps: svc.frequency_slo_fps,
                needs_multi_gpu: svc.needs_multi_gpu,
                model_load_ms: svc.model_load_ms,
                model_mb: svc.model_mb,
                input_kb: svc.input_kb,
                compute_time_ms: svc
                    .compute_time_ms
                    .iter()
                    .enumerate()
                    .filter(|(_, ms)| !ms.is_nan())
                    .map(|(i, ms)| (s.gpu_models[i].clone(), *ms))
                    .collect(),
                tp: svc.tp_degree,
                pp: svc.pp_degree,
                bs: svc.batch_size,
                mt: svc.multitask,
                mf_budget_ms: svc.mf_budget_ms,
                synth_peak_bs: svc.synth_peak_bs,
                synth_slope: svc.synth_slope,
            })
            .collect();
        let mut links = Vec::new();
        for a in &s.servers {
            for (b, mbps) in &a.bandwidth_to {
                if a.id < *b && *mbps != s.default_bandwidth_mbps {
                    links.push((a.id.0, b.0, *mbps));
                }
            }
        }
        let devices = s
            .devices
            .iter()
            .map(|d| RawDevice {
                server: d.server.0,
                gpu: s.gpu_model_name(d.gpu_model).to_string(),
                register_ms: d.register_ms,
                load_bandwidth_mbps: d.load_bandwidth_mbps,
            })
            .collect();
        let profiles = s
            .profiles
            .explicit_rows()
            .map(|((svc, gpu, bs, mt), row)| RawProfileRow {
                service: s.service(svc).name.clone(),
                gpu: s.gpu_model_name(gpu).to_string(),
                bs,
                mt,
                goodput: row.goodput,
                latency_ms: row.latency_ms,
            })
            .collect();
        let synth = s.profiles.synth();
        RawScenario {
            control,
            gpus,
            servers,
            services,
            bandwidth: RawBandwidth {
                default_mbps: s.default_bandwidth_mbps,
                links,
            },
            devices,
            trace: RawTrace {
                rows: trace_to_csv(s, &s.trace),
                generate: Vec::new(),
            },
            profiles,
            profile_synth: RawSynth {
                slope: synth.slope,
                peak_bs: synth.peak_bs,
                mt_contention: synth.mt_contention,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[gpus]]
name = "P100"

[[servers]]
gpus = ["P100"]

[[services]]
name = "resnet"
compute_demand = 0.3
vram_demand = 0.4
latency_slo_ms = 200
compute_time_ms = { P100 = 10.0 }
"#;

    #[test]
    fn minimal_scenario_is_valid() {
        let s = load_scenario(MINIMAL).unwrap();
        assert_eq!(s.servers.len(), 1);
        assert_eq!(s.services.len(), 1);
        assert!(s.trace.is_empty());
        assert_eq!(s.control.max_offload, 5);
    }

    #[test]
    fn oversized_vram_demand_names_field() {
        let text = MINIMAL.replace("vram_demand = 0.4", "vram_demand = 1.2");
        let err = load_scenario(&text).unwrap_err();
        assert!(err.field().unwrap().ends_with("vram_demand"), "{err}");
    }

    #[test]
    fn missing_compute_time_entry_is_rejected() {
        let text = MINIMAL.replace("gpus = [\"P100\"]", "gpus = [\"P100\", \"V100\"]")
            + "\n[[gpus]]\nname = \"V100\"\n";
        let err = load_scenario(&text).unwrap_err();
        assert!(err.field().unwrap().ends_with("compute_time_ms"), "{err}");
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{MINIMAL}\n[control]\nbogus = 1\n");
        assert!(matches!(load_scenario(&text), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn malformed_text_is_parse_error() {
        assert!(matches!(load_scenario("[[gpus"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn dangling_trace_service_is_rejected() {
        let text = format!("{MINIMAL}\n[trace]\nrows = \"0, nope, 0, 1\"\n");
        let err = load_scenario(&text).unwrap_err();
        assert!(err.field().unwrap().starts_with("trace.rows"));
    }

    #[test]
    fn overrides_apply_before_validation() {
        let ok = load_scenario_with_overrides(MINIMAL, &[("max_offload".into(), "0".into())]).unwrap();
        assert_eq!(ok.control.max_offload, 0);
        let bad = load_scenario_with_overrides(MINIMAL, &[("sync_interval_ms".into(), "0".into())]);
        assert_eq!(bad.unwrap_err().field(), Some("control.sync_interval_ms"));
        let unknown = load_scenario_with_overrides(MINIMAL, &[("nope".into(), "1".into())]);
        assert!(unknown.is_err());
    }

    #[test]
    fn faults_and_priority_parse() {
        let text = format!(
            "{MINIMAL}\n[control]\nfaults = [\"fail(0, 500)\", \"corrupt(0, 10)\"]\npriority = [\"resnet@0\", \"resnet@eps\"]\n"
        );
        let s = load_scenario(&text).unwrap();
        assert_eq!(s.control.faults[0].kind, FaultKind::Fail);
        assert_eq!(s.control.faults[0].at_ms, 500);
        assert_eq!(s.control.priority[1].server, None);
    }

    #[test]
    fn trace_rows_are_sorted_and_numbered() {
        let text = format!("{MINIMAL}\n[trace]\nrows = \"\"\"\n20, resnet, 0, 1\n5, resnet, 0, 1\n\"\"\"\n");
        let s = load_scenario(&text).unwrap();
        assert_eq!(s.trace[0].arrival_ms, 5);
        assert_eq!(s.trace[0].id, RequestId(0));
        assert_eq!(s.trace[1].deadline_ms, 220);
    }

    #[test]
    fn round_trip_preserves_scenario() {
        let text = format!(
            "{MINIMAL}\n[control]\nfaults = [\"fail(0, 500)\"]\n[trace]\nrows = \"3, resnet, 0, 1\"\n"
        );
        let s = load_scenario(&text).unwrap();
        let again = load_scenario(&s.to_toml()).unwrap();
        assert_eq!(s, again);
    }
}
