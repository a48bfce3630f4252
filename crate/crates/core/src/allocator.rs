//! Task-categorized parallelism allocator.
//!
//! Maps each service onto one of four quadrants (latency/frequency ×
//! single/multi GPU) and derives its operator settings: batch size (BS),
//! multitask replication (MT), model-parallel degrees (MP), multi-frame count
//! (MF) and data-parallel group count (DP).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{
    AllocationPlan, GpuClass, GpuModelId, Sensitivity, ServiceId, ServiceSpec, TaskCategory,
};

/// Profiled batch sizes, 2^0 ..= 2^9.
pub const BATCH_SIZES: [u32; 10] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512];
/// Profiled multitask replication degrees, 2^0 ..= 2^4.
pub const MT_DEGREES: [u32; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("service `{service}`: no batch size meets the {slo_ms} ms latency SLO")]
    NoFeasibleBs { service: String, slo_ms: u64 },
    #[error("frame rate of one DP group must be > 0")]
    ZeroGroupRate,
}

/// One profiled operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    /// Aggregate goodput of all `mt` slices on one GPU, items per second.
    pub goodput: f64,
    /// Latency of one batch on one slice, milliseconds.
    pub latency_ms: f64,
}

/// Parameters of the analytic fallback profile.
///
/// Batch latency is affine in BS up to `peak_bs` and grows quadratically past
/// it, so goodput is concave in BS and peaks at `peak_bs`. Co-resident
/// slices slow each other by `mt_contention` per extra slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSynth {
    pub slope: f64,
    pub peak_bs: u32,
    pub mt_contention: f64,
}

impl Default for ProfileSynth {
    fn default() -> Self {
        Self {
            slope: 0.15,
            peak_bs: 512,
            mt_contention: 0.1,
        }
    }
}

/// Offline profile of (service, GPU model, BS, MT) operating points.
/// Explicit rows win; missing points are synthesized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileTable {
    rows: BTreeMap<(ServiceId, GpuModelId, u32, u32), ProfileRow>,
    synth: ProfileSynth,
}

impl ProfileTable {
    pub fn new(synth: ProfileSynth) -> Self {
        Self {
            rows: BTreeMap::new(),
            synth,
        }
    }

    pub fn synth(&self) -> ProfileSynth {
        self.synth
    }

    pub fn insert(&mut self, service: ServiceId, gpu: GpuModelId, bs: u32, mt: u32, row: ProfileRow) {
        self.rows.insert((service, gpu, bs, mt), row);
    }

    pub fn explicit_rows(&self) -> impl Iterator<Item = ((ServiceId, GpuModelId, u32, u32), ProfileRow)> + '_ {
        self.rows.iter().map(|(k, v)| (*k, *v))
    }

    pub fn lookup(&self, service: &ServiceSpec, gpu: GpuModelId, bs: u32, mt: u32) -> ProfileRow {
        if let Some(row) = self.rows.get(&(service.id, gpu, bs, mt)) {
            return *row;
        }
        self.synthesize(service, gpu, bs, mt)
    }

    fn synthesize(&self, service: &ServiceSpec, gpu: GpuModelId, bs: u32, mt: u32) -> ProfileRow {
        let base = service.compute_time(gpu);
        let slope = service.synth_slope.unwrap_or(self.synth.slope);
        let peak = service.synth_peak_bs.unwrap_or(self.synth.peak_bs).max(1) as f64;
        let b = bs as f64;
        let over = (b / peak).max(1.0);
        let latency_ms = base
            * (1.0 + slope * (b - 1.0))
            * (1.0 + self.synth.mt_contention * (mt as f64 - 1.0))
            * over
            * over;
        ProfileRow {
            goodput: mt as f64 * b * 1000.0 / latency_ms,
            latency_ms,
        }
    }
}

pub fn categorize(service: &ServiceSpec) -> TaskCategory {
    TaskCategory {
        sensitivity: service.sensitivity(),
        gpu_class: if service.needs_multi_gpu {
            GpuClass::MultiGpu
        } else {
            GpuClass::SingleGpu
        },
    }
}

/// Goodput-maximizing batch size whose batch latency fits the latency SLO.
/// Ties go to the smaller batch.
pub fn select_batch_size(
    service: &ServiceSpec,
    gpu: GpuModelId,
    profiles: &ProfileTable,
) -> Result<u32, AllocError> {
    let slo = service.latency_slo_ms as f64;
    let mut best: Option<(u32, f64)> = None;
    for bs in BATCH_SIZES {
        let row = profiles.lookup(service, gpu, bs, 1);
        if row.latency_ms > slo {
            continue;
        }
        if best.map_or(true, |(_, g)| row.goodput > g) {
            best = Some((bs, row.goodput));
        }
    }
    best.map(|(bs, _)| bs).ok_or_else(|| AllocError::NoFeasibleBs {
        service: service.name.clone(),
        slo_ms: service.latency_slo_ms,
    })
}

/// Replication degree maximizing per-GPU goodput at a fixed batch size,
/// subject to `a*mt <= 1`, `b*mt <= 1` and the latency SLO. Ties go to the
/// smaller degree.
pub fn select_multitask_degree(
    service: &ServiceSpec,
    gpu: GpuModelId,
    profiles: &ProfileTable,
    bs: u32,
) -> u32 {
    let slo = service.latency_slo_ms as f64;
    let mut best = (1, profiles.lookup(service, gpu, bs, 1).goodput);
    for mt in MT_DEGREES.into_iter().skip(1) {
        let m = mt as f64;
        if service.compute_demand * m > 1.0 + 1e-12 || service.vram_demand * m > 1.0 + 1e-12 {
            break;
        }
        let row = profiles.lookup(service, gpu, bs, mt);
        if row.latency_ms > slo {
            continue;
        }
        if row.goodput > best.1 {
            best = (mt, row.goodput);
        }
    }
    best.0
}

/// Number of DP groups needed to reach a frame-rate requirement.
pub fn dp_group_count(frame_rate_requirement: f64, rate_of_one_group: f64) -> Result<u32, AllocError> {
    if !(rate_of_one_group > 0.0) {
        return Err(AllocError::ZeroGroupRate);
    }
    let groups = (frame_rate_requirement.max(0.0) / rate_of_one_group).ceil();
    Ok((groups as u32).max(1))
}

/// Largest frame count that fits the tolerable inter-frame latency; at least 1.
pub fn max_inter_frame_count(budget_ms: u64, fps: f64) -> u32 {
    let mf = (budget_ms as f64 * fps / 1000.0 + 1e-9).floor();
    if mf.is_finite() && mf >= 1.0 {
        mf as u32
    } else {
        1
    }
}

/// Tasks sharing one batch when each contributes `mf_max` frames.
pub fn inter_request_count(bs: u32, mf_max: u32) -> u32 {
    if mf_max == 0 {
        return bs;
    }
    bs / mf_max
}

/// Full operator plan for a service on one GPU model.
///
/// Order: MP (declared) and BS, then MT, then MF and DP.
pub fn build_allocation_plan(
    service: &ServiceSpec,
    category: TaskCategory,
    gpu: GpuModelId,
    profiles: &ProfileTable,
) -> Result<AllocationPlan, AllocError> {
    let (tp, pp) = match category.gpu_class {
        GpuClass::SingleGpu => (1, 1),
        GpuClass::MultiGpu => (service.tp_degree.max(1), service.pp_degree.max(1)),
    };
    let bs = match service.batch_size {
        Some(bs) => bs,
        None => select_batch_size(service, gpu, profiles)?,
    };
    let mt = service
        .multitask
        .unwrap_or_else(|| select_multitask_degree(service, gpu, profiles, bs));

    let (mf, dp_groups) = match category.sensitivity {
        Sensitivity::Latency => (1, 1),
        Sensitivity::Frequency => {
            let fps = service.frequency_slo_fps.unwrap_or(1.0);
            let budget = service.mf_budget_ms.unwrap_or(service.latency_slo_ms);
            let mut mf = max_inter_frame_count(budget, fps);
            while mf > 1 && inter_request_count(bs, mf) < 1 {
                mf -= 1;
            }
            let dp = match category.gpu_class {
                GpuClass::SingleGpu => 1,
                GpuClass::MultiGpu => {
                    let row = profiles.lookup(service, gpu, bs, mt);
                    let group_rate = bs as f64 * 1000.0 / row.latency_ms;
                    dp_group_count(fps, group_rate)?
                }
            };
            (mf, dp)
        }
    };
    Ok(AllocationPlan {
        bs,
        mt,
        tp_degree: tp,
        pp_degree: pp,
        mf,
        dp_groups,
        inter_request_count: inter_request_count(bs, mf),
    })
}

/// Plan for `service` on `gpu`, categorizing first.
pub fn plan_for(
    service: &ServiceSpec,
    gpu: GpuModelId,
    profiles: &ProfileTable,
) -> Result<AllocationPlan, AllocError> {
    build_allocation_plan(service, categorize(service), gpu, profiles)
}
