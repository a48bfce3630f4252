//! GPU slice accounting and greedy GPU assignment.

use std::collections::BTreeMap;

use crate::model::{AllocationPlan, Gpu, GpuRef, Placement, Scenario, ServerId, ServiceSpec};

use super::PlacementError;

/// Where a candidate placement goes: one server, or the aggregate of all
/// GPUs in the group (which may span servers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Server(ServerId),
    Epsilon,
}

/// Free capacity of every GPU in a placement group.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResources {
    pub servers: BTreeMap<ServerId, Vec<Gpu>>,
}

impl ClusterResources {
    pub fn new(scenario: &Scenario, servers: &[ServerId]) -> Self {
        let servers = servers
            .iter()
            .map(|s| {
                let gpus = scenario.server(*s).gpus.iter().map(|g| Gpu::new(g.model)).collect();
                (*s, gpus)
            })
            .collect();
        Self { servers }
    }

    /// Resources left after replaying `entries`.
    pub fn after(scenario: &Scenario, servers: &[ServerId], entries: &[Placement]) -> Result<Self, PlacementError> {
        let mut r = Self::new(scenario, servers);
        for p in entries {
            let svc = scenario.service(p.service);
            for g in &p.gpus {
                let gpu = r.gpu(*g).ok_or(PlacementError::InfeasiblePlacement)?;
                if !gpu.fits(svc.compute_demand * p.plan.mt as f64, svc.vram_demand * p.plan.mt as f64) {
                    return Err(PlacementError::InfeasiblePlacement);
                }
            }
            r.reserve(svc, &p.plan, &p.gpus);
        }
        Ok(r)
    }

    pub fn gpu(&self, g: GpuRef) -> Option<&Gpu> {
        self.servers.get(&g.server)?.get(g.gpu as usize)
    }

    pub fn reserve(&mut self, service: &ServiceSpec, plan: &AllocationPlan, gpus: &[GpuRef]) {
        for g in gpus {
            if let Some(gpu) = self.servers.get_mut(&g.server).and_then(|v| v.get_mut(g.gpu as usize)) {
                gpu.reserve(service, plan.mt);
            }
        }
    }

    pub fn total_gpus(&self) -> usize {
        self.servers.values().map(|v| v.len()).sum()
    }
}

fn pick_on_server(res: &ClusterResources, server: ServerId, a: f64, b: f64, width: usize) -> Option<Vec<GpuRef>> {
    let gpus = res.servers.get(&server)?;
    let mut fit: Vec<(usize, &Gpu)> = gpus.iter().enumerate().filter(|(_, g)| g.fits(a, b)).collect();
    if fit.len() < width {
        return None;
    }
    fit.sort_by(|x, y| {
        y.1.vram_free
            .total_cmp(&x.1.vram_free)
            .then(y.1.compute_free.total_cmp(&x.1.compute_free))
            .then(x.0.cmp(&y.0))
    });
    let mut out: Vec<GpuRef> = fit[..width]
        .iter()
        .map(|(i, _)| GpuRef { server, gpu: *i as u32 })
        .collect();
    out.sort();
    Some(out)
}

/// Greedy GPU choice for one model-parallel group of `service`.
///
/// Each GPU of the group must hold `mt` slices. GPUs are taken by most free
/// VRAM, then most free compute, then lowest index, and are always distinct.
/// On the aggregate target a single server is preferred (most free VRAM
/// first); otherwise the group is spread over servers.
pub fn online_assign_gpus(
    res: &ClusterResources,
    service: &ServiceSpec,
    plan: &AllocationPlan,
    target: Target,
) -> Result<Vec<GpuRef>, PlacementError> {
    let a = service.compute_demand * plan.mt as f64;
    let b = service.vram_demand * plan.mt as f64;
    let width = plan.group_width().max(1) as usize;
    match target {
        Target::Server(s) => pick_on_server(res, s, a, b, width).ok_or(PlacementError::InfeasiblePlacement),
        Target::Epsilon => {
            let mut servers: Vec<(f64, ServerId)> = res
                .servers
                .iter()
                .map(|(s, g)| (g.iter().map(|x| x.vram_free).sum::<f64>(), *s))
                .collect();
            servers.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            for (_, s) in &servers {
                if let Some(g) = pick_on_server(res, *s, a, b, width) {
                    return Ok(g);
                }
            }
            let mut all: Vec<(GpuRef, &Gpu)> = res
                .servers
                .iter()
                .flat_map(|(s, gs)| {
                    gs.iter()
                        .enumerate()
                        .map(move |(i, g)| (GpuRef { server: *s, gpu: i as u32 }, g))
                })
                .filter(|(_, g)| g.fits(a, b))
                .collect();
            if all.len() < width {
                return Err(PlacementError::InfeasiblePlacement);
            }
            all.sort_by(|x, y| {
                y.1.vram_free
                    .total_cmp(&x.1.vram_free)
                    .then(y.1.compute_free.total_cmp(&x.1.compute_free))
                    .then(x.0.cmp(&y.0))
            });
            let mut out: Vec<GpuRef> = all[..width].iter().map(|(r, _)| *r).collect();
            out.sort();
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GpuModelId, ServiceId};

    fn svc(a: f64, b: f64) -> ServiceSpec {
        ServiceSpec {
            id: ServiceId(0),
            name: "s".into(),
            compute_demand: a,
            vram_demand: b,
            compute_time_ms: vec![10.0],
            latency_slo_ms: 100,
            frequency_slo_fps: None,
            needs_multi_gpu: false,
            model_load_ms: 0,
            model_mb: 0.0,
            input_kb: 0.0,
            tp_degree: 1,
            pp_degree: 1,
            batch_size: None,
            multitask: None,
            mf_budget_ms: None,
            synth_peak_bs: None,
            synth_slope: None,
        }
    }

    fn plan(tp: u32) -> AllocationPlan {
        AllocationPlan { bs: 1, mt: 1, tp_degree: tp, pp_degree: 1, mf: 1, dp_groups: 1, inter_request_count: 1 }
    }

    fn cluster(gpus_per_server: &[usize]) -> ClusterResources {
        ClusterResources {
            servers: gpus_per_server
                .iter()
                .enumerate()
                .map(|(i, n)| (ServerId(i as u32), vec![Gpu::new(GpuModelId(0)); *n]))
                .collect(),
        }
    }

    #[test]
    fn single_empty_gpu() {
        let mut r = cluster(&[1]);
        let s = svc(0.3, 0.4);
        let g = online_assign_gpus(&r, &s, &plan(1), Target::Server(ServerId(0))).unwrap();
        assert_eq!(g, vec![GpuRef { server: ServerId(0), gpu: 0 }]);
        r.reserve(&s, &plan(1), &g);
        let gpu = r.gpu(g[0]).unwrap();
        assert!((gpu.compute_free - 0.7).abs() < 1e-12 && (gpu.vram_free - 0.6).abs() < 1e-12);
    }

    #[test]
    fn prefers_most_free_vram() {
        let mut r = cluster(&[2]);
        r.servers.get_mut(&ServerId(0)).unwrap()[0].vram_free = 0.5;
        r.servers.get_mut(&ServerId(0)).unwrap()[1].vram_free = 0.9;
        let g = online_assign_gpus(&r, &svc(0.1, 0.6), &plan(1), Target::Server(ServerId(0))).unwrap();
        assert_eq!(g[0].gpu, 1);
    }

    #[test]
    fn tp2_on_one_gpu_server_is_infeasible() {
        let r = cluster(&[1]);
        assert_eq!(
            online_assign_gpus(&r, &svc(0.5, 0.5), &plan(2), Target::Server(ServerId(0))),
            Err(PlacementError::InfeasiblePlacement)
        );
    }

    #[test]
    fn aggregate_target_spans_servers_when_needed() {
        let r = cluster(&[1, 1]);
        let g = online_assign_gpus(&r, &svc(0.5, 0.5), &plan(2), Target::Epsilon).unwrap();
        assert_eq!(g.len(), 2);
        assert_ne!(g[0].server, g[1].server);
        let r = cluster(&[1, 2]);
        let g = online_assign_gpus(&r, &svc(0.5, 0.5), &plan(2), Target::Epsilon).unwrap();
        assert!(g.iter().all(|x| x.server == ServerId(1)));
    }
}
