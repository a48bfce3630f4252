//! Submodular service placement.
//!
//! φ(Θ) is the satisfied-unit count of a deterministic replay of the recent
//! trace under placement Θ with the full handler. SPF greedily appends the
//! placement with the largest φ; SSSP chains three SPF stages: the priority
//! list, all single-server candidates, then groups on the aggregate of all
//! GPUs (which may span servers).

pub mod bound;
pub mod oracle;
pub mod resources;

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::allocator::plan_for;
use crate::engine::{simulate_fixed, Strategy};
use crate::model::{
    AllocationPlan, Placement, PlacementList, PlacementMode, Request, Scenario, ServerId, ServiceId, ServiceSpec,
};

pub use oracle::{brute_force_optimal, Limits};
pub use resources::{online_assign_gpus, ClusterResources, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("placement does not fit the remaining GPU resources")]
    InfeasiblePlacement,
    #[error("no service with positive demands")]
    EmptyServices,
    #[error("instance needs more than {limit} configurations")]
    TooLarge { limit: u64 },
}

/// Everything needed to score placements for one placement group.
#[derive(Debug, Clone)]
pub struct PlacementContext<'a> {
    pub scenario: &'a Scenario,
    /// Requests replayed by φ, with times relative to the window start.
    pub trace: Vec<Request>,
    pub servers: Vec<ServerId>,
    pub strategy: Strategy,
    pub eval_seed: u64,
    pub eval_expected: bool,
}

impl<'a> PlacementContext<'a> {
    pub fn new(scenario: &'a Scenario, trace: Vec<Request>, servers: Vec<ServerId>) -> Self {
        Self {
            scenario,
            trace,
            servers,
            strategy: Strategy::Full,
            eval_seed: scenario.control.eval_seed,
            eval_expected: scenario.control.eval_expected,
        }
    }

    /// Context over the scenario's whole trace and all servers.
    pub fn whole(scenario: &'a Scenario) -> Self {
        let servers = scenario.servers.iter().map(|s| s.id).collect();
        Self::new(scenario, scenario.trace.clone(), servers)
    }
}

/// A (service, target) pair with its operator plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub service: ServiceId,
    pub target: Target,
    pub plan: AllocationPlan,
}

impl Candidate {
    /// Tie-break key: lowest (service, server); the aggregate target sorts last.
    pub fn key(&self) -> (u32, u32) {
        let s = match self.target {
            Target::Server(n) => n.0,
            Target::Epsilon => u32::MAX,
        };
        (self.service.0, s)
    }
}

/// X, the priority list and the aggregate-target candidates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub all: Vec<Candidate>,
    pub priority: Vec<Candidate>,
    pub hypothetical: Vec<Candidate>,
}

/// Greedy stage: S1 accepts non-decreasing φ, S2/S3 need a strict increase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    S1,
    S2S3,
}

/// Set pools allow repeated picks; list pools drop a candidate once placed.
#[derive(Debug, Clone, PartialEq)]
pub enum Pool {
    Set(Vec<Candidate>),
    List(Vec<Candidate>),
}

fn plan_on(scenario: &Scenario, svc: &ServiceSpec, server: ServerId) -> Option<AllocationPlan> {
    let model = scenario.server(server).gpus.first()?.model;
    match plan_for(svc, model, &scenario.profiles) {
        Ok(p) => Some(p),
        Err(e) => {
            log::warn!("{e}; service skipped on {server}");
            None
        }
    }
}

pub fn build_candidates(ctx: &PlacementContext) -> CandidateSet {
    let sc = ctx.scenario;
    let mut set = CandidateSet::default();
    let total_gpus: usize = ctx.servers.iter().map(|s| sc.server(*s).gpus.len()).sum();
    for svc in &sc.services {
        let width = svc.group_width() as usize;
        for &n in &ctx.servers {
            if sc.server(n).gpus.len() < width {
                continue;
            }
            if let Some(plan) = plan_on(sc, svc, n) {
                set.all.push(Candidate { service: svc.id, target: Target::Server(n), plan });
            }
        }
        if width > 1 && total_gpus >= width {
            if let Some(plan) = ctx.servers.first().and_then(|n| plan_on(sc, svc, *n)) {
                set.hypothetical.push(Candidate { service: svc.id, target: Target::Epsilon, plan });
            }
        }
    }
    for entry in &sc.control.priority {
        let svc = sc.service(entry.service);
        let c = match entry.server {
            Some(n) if ctx.servers.contains(&n) => {
                plan_on(sc, svc, n).map(|plan| Candidate { service: svc.id, target: Target::Server(n), plan })
            }
            Some(_) => None,
            None => ctx
                .servers
                .first()
                .and_then(|n| plan_on(sc, svc, *n))
                .map(|plan| Candidate { service: svc.id, target: Target::Epsilon, plan }),
        };
        if let Some(c) = c {
            set.priority.push(c);
        }
    }
    set
}

/// Places `c` on top of `theta` if resources allow.
pub fn try_place(ctx: &PlacementContext, res: &ClusterResources, c: &Candidate) -> Result<Placement, PlacementError> {
    let svc = ctx.scenario.service(c.service);
    let gpus = online_assign_gpus(res, svc, &c.plan, c.target)?;
    let mut servers: Vec<ServerId> = gpus.iter().map(|g| g.server).collect();
    servers.dedup();
    Ok(Placement {
        service: c.service,
        server: gpus[0].server,
        gpus,
        plan: c.plan,
        cross_server: servers.len() > 1,
    })
}

/// φ(Θ): satisfied units of the context trace replayed under `theta`.
pub fn evaluate_goodput(ctx: &PlacementContext, theta: &PlacementList) -> u64 {
    if ctx.trace.is_empty() || theta.is_empty() {
        return 0;
    }
    simulate_fixed(
        ctx.scenario,
        &ctx.trace,
        &ctx.servers,
        theta,
        ctx.strategy,
        ctx.eval_seed,
        ctx.eval_expected,
    )
    .satisfied
}

/// Per-iteration record of the greedy, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SpfStep {
    pub chosen: (u32, u32),
    pub phi: u64,
    pub tie_set: usize,
}

/// Submodular placement for full models (one greedy stage).
pub fn spf(ctx: &PlacementContext, pool: Pool, theta0: PlacementList, mode: StageMode) -> PlacementList {
    spf_traced(ctx, pool, theta0, mode).0
}

pub fn spf_traced(
    ctx: &PlacementContext,
    pool: Pool,
    theta0: PlacementList,
    mode: StageMode,
) -> (PlacementList, Vec<SpfStep>) {
    let (mut cands, is_list) = match pool {
        Pool::Set(c) => (c, false),
        Pool::List(c) => (c, true),
    };
    let mut theta = theta0;
    let mut phi = evaluate_goodput(ctx, &theta);
    let mut steps = Vec::new();
    // Non-strict acceptance can plateau; one pick per priority entry at most.
    let cap = match mode {
        StageMode::S1 => cands.len(),
        StageMode::S2S3 => usize::MAX,
    };
    let mut last_gain: BTreeMap<(u32, u32), i64> = BTreeMap::new();
    while steps.len() < cap && !cands.is_empty() {
        let Ok(res) = ClusterResources::after(ctx.scenario, &ctx.servers, &theta.entries) else {
            break;
        };
        let trials: Vec<(usize, Placement)> = cands
            .iter()
            .enumerate()
            .filter_map(|(j, c)| try_place(ctx, &res, c).ok().map(|p| (j, p)))
            .collect();
        if trials.is_empty() {
            break;
        }
        let scores: Vec<u64> = trials
            .par_iter()
            .map(|(_, p)| {
                let mut t = theta.clone();
                t.entries.push(p.clone());
                evaluate_goodput(ctx, &t)
            })
            .collect();
        for ((j, _), s) in trials.iter().zip(&scores) {
            let key = cands[*j].key();
            let gain = *s as i64 - phi as i64;
            if let Some(prev) = last_gain.insert(key, gain) {
                if gain > prev {
                    log::debug!("marginal gain of {key:?} grew from {prev} to {gain}");
                }
            }
        }
        let best = *scores.iter().max().expect("trials non-empty");
        let ties: Vec<usize> = (0..trials.len()).filter(|&k| scores[k] == best).collect();
        let pick = *ties
            .iter()
            .min_by_key(|&&k| cands[trials[k].0].key())
            .expect("tie set non-empty");
        let accept = match mode {
            StageMode::S1 => best >= phi,
            StageMode::S2S3 => best > phi,
        };
        if !accept {
            break;
        }
        let (j, p) = trials[pick].clone();
        steps.push(SpfStep { chosen: cands[j].key(), phi: best, tie_set: ties.len() });
        theta.entries.push(p);
        phi = best;
        if is_list {
            cands.remove(j);
        }
    }
    (theta, steps)
}

/// State-aware service placement: SPF over the priority list, then over X,
/// then over the aggregate-target candidates.
pub fn sssp(ctx: &PlacementContext, cands: &CandidateSet) -> PlacementList {
    let t1 = spf(ctx, Pool::List(cands.priority.clone()), PlacementList::new(0), StageMode::S1);
    let t2 = spf(ctx, Pool::Set(cands.all.clone()), t1, StageMode::S2S3);
    spf(ctx, Pool::Set(cands.hypothetical.clone()), t2, StageMode::S2S3)
}

/// Builds candidates, runs SSSP and finalizes GPU assignment per the
/// scenario's placement mode.
pub fn place(ctx: &PlacementContext) -> PlacementList {
    let cands = build_candidates(ctx);
    let theta = sssp(ctx, &cands);
    match ctx.scenario.control.placement_mode {
        PlacementMode::Online => theta,
        PlacementMode::Offline => repack(ctx, &theta).unwrap_or(theta),
    }
}

/// Reassigns GPUs for a decided Θ, largest groups first. Returns `None` when
/// the repacked order does not fit, in which case the incremental assignment
/// stands.
pub fn repack(ctx: &PlacementContext, theta: &PlacementList) -> Option<PlacementList> {
    let sc = ctx.scenario;
    let mut order: Vec<usize> = (0..theta.len()).collect();
    let size = |p: &Placement| {
        let s = sc.service(p.service);
        (s.compute_demand + s.vram_demand) * p.plan.mt as f64
    };
    order.sort_by(|&x, &y| {
        let (px, py) = (&theta.entries[x], &theta.entries[y]);
        py.plan
            .group_width()
            .cmp(&px.plan.group_width())
            .then(size(py).total_cmp(&size(px)))
            .then(x.cmp(&y))
    });
    let mut res = ClusterResources::new(sc, &ctx.servers);
    let mut out = theta.clone();
    for i in order {
        let p = &theta.entries[i];
        let svc = sc.service(p.service);
        let target = if p.cross_server { Target::Epsilon } else { Target::Server(p.server) };
        let gpus = online_assign_gpus(&res, svc, &p.plan, target).ok()?;
        res.reserve(svc, &p.plan, &gpus);
        let mut servers: Vec<ServerId> = gpus.iter().map(|g| g.server).collect();
        servers.dedup();
        out.entries[i].server = gpus[0].server;
        out.entries[i].cross_server = servers.len() > 1;
        out.entries[i].gpus = gpus;
    }
    Some(out)
}

/// Approximation parameter P and the guaranteed fraction 1/(1+P).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproximationParam {
    pub p: u32,
}

impl ApproximationParam {
    pub fn bound(&self) -> f64 {
        1.0 / (1.0 + self.p as f64)
    }
}

fn ceil_ratio(max: f64, min: f64) -> u32 {
    // Exact ratios such as 0.5/0.1 must not round up past the integer.
    ((max / min) - 1e-9).ceil().max(1.0) as u32
}

pub fn approximation_p(services: &[ServiceSpec]) -> Result<ApproximationParam, PlacementError> {
    let a: Vec<f64> = services.iter().map(|s| s.compute_demand).filter(|x| *x > 0.0).collect();
    let b: Vec<f64> = services.iter().map(|s| s.vram_demand).filter(|x| *x > 0.0).collect();
    if a.is_empty() || b.is_empty() {
        return Err(PlacementError::EmptyServices);
    }
    let (amax, amin) = (a.iter().cloned().fold(f64::MIN, f64::max), a.iter().cloned().fold(f64::MAX, f64::min));
    let (bmax, bmin) = (b.iter().cloned().fold(f64::MIN, f64::max), b.iter().cloned().fold(f64::MAX, f64::min));
    Ok(ApproximationParam { p: ceil_ratio(amax, amin) + ceil_ratio(bmax, bmin) })
}

/// Human-readable placement report.
pub fn placement_report(scenario: &Scenario, theta: &PlacementList) -> String {
    let mut out = String::new();
    out.push_str(&format!("epoch {} placements {}\n", theta.epoch, theta.len()));
    for (i, p) in theta.entries.iter().enumerate() {
        let gpus: Vec<String> = p.gpus.iter().map(|g| format!("{}:{}", g.server.0, g.gpu)).collect();
        out.push_str(&format!(
            "{i} service={} server={} gpus=[{}] cross_server={} bs={} mt={} tp={} pp={} mf={} dp={}\n",
            scenario.service(p.service).name,
            p.server.0,
            gpus.join(","),
            p.cross_server,
            p.plan.bs,
            p.plan.mt,
            p.plan.tp_degree,
            p.plan.pp_degree,
            p.plan.mf,
            p.plan.dp_groups,
        ));
    }
    out
}
