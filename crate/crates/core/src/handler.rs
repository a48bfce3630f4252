//! Per-server request handler.
//!
//! The decision ladder is a pure function of the request, what the local
//! server can do right now ([`LocalOptions`], computed by the engine from
//! exact local state) and the server's possibly stale [`ClusterView`].

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::model::{ClusterView, DeviceId, GpuRef, Millis, Request, ServerId, ServiceId};

#[derive(Debug, Clone, PartialEq)]
pub enum HandlingDecision {
    Timeout,
    SolveLocal(Vec<GpuRef>),
    SolveCrossServerParallel(Vec<ServerId>),
    SolveOnDevice(DeviceId),
    Offload(ServerId),
    OffloadExceeded,
    ResourceInsufficient,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandlerError {
    #[error("server {server} already on hop path {path:?}")]
    LoopViolation { server: ServerId, path: Vec<ServerId> },
}

/// What the receiving server can offer without forwarding the request.
/// Each field is `Some` only when that option meets the request's SLO.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalOptions {
    pub local: Option<Vec<GpuRef>>,
    pub cross_server: Option<Vec<ServerId>>,
    pub device: Option<DeviceId>,
    /// Streams only: local groups that can serve part of the frame rate.
    pub partial_local: Option<Vec<GpuRef>>,
}

/// How rung 5 picks a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffloadPolicy {
    /// Sample proportionally to idle goodput.
    Proportional,
    /// Deterministic smooth weighted round-robin on idle goodput; used to
    /// evaluate placements by expected value instead of sampling.
    Expected,
    /// Cycle through hosting servers, ignoring load information.
    RoundRobin,
    /// Never forward.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandlerPolicy {
    pub max_offload: u32,
    pub offload: OffloadPolicy,
    pub allow_cross_server: bool,
    pub allow_device: bool,
    /// Lower bound on the length of the idle-goodput window.
    pub sync_interval_ms: Millis,
}

/// Mutable per-server handler state (round-robin cursors).
#[derive(Debug, Clone, Default)]
pub struct HandlerState {
    rr_cursor: BTreeMap<ServiceId, usize>,
    swrr_credit: BTreeMap<(ServiceId, ServerId), f64>,
}

/// Runs the decision ladder; the first matching rung wins.
pub fn handle<R: Rng>(
    request: &Request,
    slo_ms: Millis,
    local: &LocalOptions,
    view: &ClusterView,
    now: Millis,
    policy: &HandlerPolicy,
    state: &mut HandlerState,
    rng: &mut R,
) -> HandlingDecision {
    if now > request.deadline_ms {
        return HandlingDecision::Timeout;
    }
    if let Some(gpus) = &local.local {
        return HandlingDecision::SolveLocal(gpus.clone());
    }
    if policy.allow_cross_server {
        if let Some(servers) = &local.cross_server {
            return HandlingDecision::SolveCrossServerParallel(servers.clone());
        }
    }
    if policy.allow_device {
        if let Some(device) = local.device {
            return HandlingDecision::SolveOnDevice(device);
        }
    }
    let can_forward = policy.offload != OffloadPolicy::Disabled && policy.max_offload > 0;
    if can_forward && request.offload_count < policy.max_offload {
        let target = match policy.offload {
            OffloadPolicy::Proportional => {
                offload_target(request, slo_ms, view, now, policy.sync_interval_ms, rng)
            }
            OffloadPolicy::Expected => {
                expected_target(request, slo_ms, view, now, policy.sync_interval_ms, state)
            }
            OffloadPolicy::RoundRobin => round_robin_target(request, view, state),
            OffloadPolicy::Disabled => None,
        };
        if let Some(m) = target {
            return HandlingDecision::Offload(m);
        }
    }
    if let Some(gpus) = &local.partial_local {
        return HandlingDecision::SolveLocal(gpus.clone());
    }
    if can_forward && request.offload_count >= policy.max_offload {
        return HandlingDecision::OffloadExceeded;
    }
    HandlingDecision::ResourceInsufficient
}

/// Idle goodput p̃ = p̂ − p of `service` on `server`, floored at 0.
///
/// p is measured over the window that ends at the snapshot, whose length is
/// the entry's staleness (at least `min_window_ms`).
pub fn idle_goodput(view: &ClusterView, server: ServerId, service: ServiceId, now: Millis, min_window_ms: Millis) -> f64 {
    let Some(entry) = view.per_server.get(&server) else {
        return 0.0;
    };
    let Some(status) = entry.services.get(&service) else {
        return 0.0;
    };
    let staleness = now.saturating_sub(entry.snapshot_ms);
    let window = staleness.max(min_window_ms).max(1);
    let actual = status.actual_rate(entry.snapshot_ms, window);
    (status.theoretical_rate - actual).max(0.0)
}

/// Candidate targets with their idle goodput, in server order.
pub fn offload_candidates(
    request: &Request,
    slo_ms: Millis,
    view: &ClusterView,
    now: Millis,
    min_window_ms: Millis,
) -> Vec<(ServerId, f64)> {
    let mut out = Vec::new();
    for (&m, entry) in &view.per_server {
        if !entry.available || request.has_visited(m) {
            continue;
        }
        let Some(status) = entry.services.get(&request.service) else {
            continue;
        };
        let staleness = now.saturating_sub(entry.snapshot_ms);
        if status.backlog_ms > staleness + slo_ms {
            continue;
        }
        out.push((m, idle_goodput(view, m, request.service, now, min_window_ms)));
    }
    out
}

/// Samples a target with probability p̃_m / Σ p̃.
pub fn offload_target<R: Rng>(
    request: &Request,
    slo_ms: Millis,
    view: &ClusterView,
    now: Millis,
    min_window_ms: Millis,
    rng: &mut R,
) -> Option<ServerId> {
    let candidates = offload_candidates(request, slo_ms, view, now, min_window_ms);
    sample_weighted(&candidates, rng)
}

/// Weighted draw over `(server, weight)` pairs; `None` when empty. When
/// every weight is zero the draw is uniform.
pub fn sample_weighted<R: Rng>(candidates: &[(ServerId, f64)], rng: &mut R) -> Option<ServerId> {
    if candidates.is_empty() {
        return None;
    }
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    if !(total > 0.0) {
        return Some(candidates[rng.random_range(0..candidates.len())].0);
    }
    let mut x = rng.random::<f64>() * total;
    for &(m, w) in candidates {
        if x < w {
            return Some(m);
        }
        x -= w;
    }
    candidates.last().map(|c| c.0)
}

fn expected_target(
    request: &Request,
    slo_ms: Millis,
    view: &ClusterView,
    now: Millis,
    min_window_ms: Millis,
    state: &mut HandlerState,
) -> Option<ServerId> {
    let mut candidates = offload_candidates(request, slo_ms, view, now, min_window_ms);
    if candidates.is_empty() {
        return None;
    }
    if !(candidates.iter().map(|c| c.1).sum::<f64>() > 0.0) {
        candidates.iter_mut().for_each(|c| c.1 = 1.0);
    }
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    let mut best: Option<(ServerId, f64)> = None;
    for &(m, w) in &candidates {
        let credit = state.swrr_credit.entry((request.service, m)).or_insert(0.0);
        *credit += w;
        if best.map_or(true, |(_, c)| *credit > c) {
            best = Some((m, *credit));
        }
    }
    let (m, _) = best?;
    *state.swrr_credit.get_mut(&(request.service, m)).expect("inserted above") -= total;
    Some(m)
}

fn round_robin_target(request: &Request, view: &ClusterView, state: &mut HandlerState) -> Option<ServerId> {
    let hosts: Vec<ServerId> = view
        .per_server
        .iter()
        .filter(|(m, e)| e.available && !request.has_visited(**m) && e.services.contains_key(&request.service))
        .map(|(m, _)| *m)
        .collect();
    if hosts.is_empty() {
        return None;
    }
    let cursor = state.rr_cursor.entry(request.service).or_insert(0);
    let m = hosts[*cursor % hosts.len()];
    *cursor = cursor.wrapping_add(1);
    Some(m)
}

/// Appends `server` to the hop path and counts the offload.
pub fn record_hop(request: &Request, server: ServerId) -> Result<Request, HandlerError> {
    if request.has_visited(server) {
        return Err(HandlerError::LoopViolation {
            server,
            path: request.hop_path.clone(),
        });
    }
    let mut r = request.clone();
    r.hop_path.push(server);
    r.offload_count += 1;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RequestId, ServiceSpec, ServiceStatus, ViewEntry};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> ServiceSpec {
        ServiceSpec {
            id: ServiceId(0),
            name: "s".into(),
            compute_demand: 0.5,
            vram_demand: 0.5,
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

    fn request(path: &[u32]) -> Request {
        let mut r = Request::new(RequestId(1), &spec(), ServerId(path[0]), 0, 1);
        r.hop_path = path.iter().map(|&p| ServerId(p)).collect();
        r.offload_count = path.len() as u32 - 1;
        r
    }

    /// View where server `m` hosts service 0 with idle goodput `p̃`.
    fn view(idle: &[(u32, f64)]) -> ClusterView {
        let mut v = ClusterView::new(ServerId(0));
        for &(m, p) in idle {
            let mut e = ViewEntry::fresh(ServerId(m), 1, 0);
            e.services.insert(
                ServiceId(0),
                ServiceStatus { theoretical_rate: p, backlog_ms: 0, checkpoints: vec![(0, 0)] },
            );
            v.per_server.insert(ServerId(m), e);
        }
        v
    }

    fn policy() -> HandlerPolicy {
        HandlerPolicy {
            max_offload: 5,
            offload: OffloadPolicy::Proportional,
            allow_cross_server: true,
            allow_device: true,
            sync_interval_ms: 50,
        }
    }

    fn decide(r: &Request, local: &LocalOptions, v: &ClusterView, now: Millis, p: &HandlerPolicy) -> HandlingDecision {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        handle(r, 100, local, v, now, p, &mut HandlerState::default(), &mut rng)
    }

    fn gpus() -> Vec<GpuRef> {
        vec![GpuRef { server: ServerId(0), gpu: 0 }]
    }

    #[test]
    fn past_deadline_times_out_even_with_capacity() {
        let local = LocalOptions { local: Some(gpus()), ..Default::default() };
        assert_eq!(decide(&request(&[0]), &local, &view(&[(1, 5.0)]), 101, &policy()), HandlingDecision::Timeout);
    }

    #[test]
    fn local_beats_idler_remote() {
        let local = LocalOptions { local: Some(gpus()), ..Default::default() };
        let d = decide(&request(&[0]), &local, &view(&[(1, 1000.0)]), 5, &policy());
        assert_eq!(d, HandlingDecision::SolveLocal(gpus()));
    }

    #[test]
    fn exceeded_at_max_offload() {
        let r = request(&[0, 1, 2, 3, 4, 5]);
        assert_eq!(r.offload_count, 5);
        let d = decide(&r, &LocalOptions::default(), &view(&[(6, 4.0)]), 5, &policy());
        assert_eq!(d, HandlingDecision::OffloadExceeded);
    }

    #[test]
    fn zero_max_offload_means_insufficient() {
        let mut p = policy();
        p.max_offload = 0;
        let d = decide(&request(&[0]), &LocalOptions::default(), &view(&[(1, 4.0)]), 5, &p);
        assert_eq!(d, HandlingDecision::ResourceInsufficient);
    }

    #[test]
    fn no_target_means_insufficient() {
        let d = decide(&request(&[0]), &LocalOptions::default(), &view(&[]), 5, &policy());
        assert_eq!(d, HandlingDecision::ResourceInsufficient);
    }

    #[test]
    fn idle_goodput_examples() {
        let mut v = view(&[(1, 10.0)]);
        // 4 units over the last 1000 ms window.
        v.per_server.get_mut(&ServerId(1)).unwrap().snapshot_ms = 2000;
        v.per_server.get_mut(&ServerId(1)).unwrap().services.get_mut(&ServiceId(0)).unwrap().checkpoints =
            vec![(1000, 0), (2000, 4)];
        assert!((idle_goodput(&v, ServerId(1), ServiceId(0), 3000, 50) - 6.0).abs() < 1e-9);
        v.per_server.get_mut(&ServerId(1)).unwrap().services.get_mut(&ServiceId(0)).unwrap().checkpoints =
            vec![(1000, 0), (2000, 10)];
        assert_eq!(idle_goodput(&v, ServerId(1), ServiceId(0), 3000, 50), 0.0);
        assert_eq!(idle_goodput(&v, ServerId(2), ServiceId(0), 3000, 50), 0.0);
        assert_eq!(idle_goodput(&v, ServerId(1), ServiceId(9), 3000, 50), 0.0);
    }

    #[test]
    fn loop_rule_excludes_visited() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = request(&[0, 1]);
        assert_eq!(offload_target(&r, 100, &view(&[(1, 3.0)]), 0, 50, &mut rng), None);
    }

    #[test]
    fn single_candidate_always_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = request(&[0]);
        for _ in 0..100 {
            assert_eq!(offload_target(&r, 100, &view(&[(2, 0.5)]), 0, 50, &mut rng), Some(ServerId(2)));
        }
    }

    #[test]
    fn backlog_beyond_slo_is_excluded() {
        let mut v = view(&[(1, 3.0), (2, 1.0)]);
        v.per_server.get_mut(&ServerId(1)).unwrap().services.get_mut(&ServiceId(0)).unwrap().backlog_ms = 500;
        let c = offload_candidates(&request(&[0]), 100, &v, 0, 50);
        assert_eq!(c, vec![(ServerId(2), 1.0)]);
    }

    #[test]
    fn zero_idle_goodput_everywhere_draws_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = request(&[0]);
        let v = view(&[(1, 0.0), (2, 0.0)]);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| offload_target(&r, 100, &v, 0, 50, &mut rng) == Some(ServerId(1)))
            .count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.03);
    }

    #[test]
    fn zero_weight_never_drawn_when_others_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = [(ServerId(1), 0.0), (ServerId(2), 2.0)];
        for _ in 0..1000 {
            assert_eq!(sample_weighted(&c, &mut rng), Some(ServerId(2)));
        }
    }

    #[test]
    fn sampling_follows_idle_goodput() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let r = request(&[0]);
        let v = view(&[(1, 3.0), (2, 1.0)]);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| offload_target(&r, 100, &v, 0, 50, &mut rng) == Some(ServerId(1)))
            .count();
        assert!((hits as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn expected_policy_matches_ratio() {
        let mut st = HandlerState::default();
        let r = request(&[0]);
        let v = view(&[(1, 3.0), (2, 1.0)]);
        let picks: Vec<_> = (0..8).map(|_| expected_target(&r, 100, &v, 0, 50, &mut st).unwrap()).collect();
        assert_eq!(picks.iter().filter(|m| **m == ServerId(1)).count(), 6);
    }

    #[test]
    fn round_robin_cycles_hosts() {
        let mut st = HandlerState::default();
        let r = request(&[0]);
        let v = view(&[(1, 0.0), (2, 0.0), (3, 9.0)]);
        let picks: Vec<_> = (0..4).map(|_| round_robin_target(&r, &v, &mut st).unwrap().0).collect();
        assert_eq!(picks, vec![1, 2, 3, 1]);
    }

    #[test]
    fn record_hop_examples() {
        let r = record_hop(&request(&[0]), ServerId(1)).unwrap();
        assert_eq!(r.hop_path, vec![ServerId(0), ServerId(1)]);
        assert_eq!(r.offload_count, 1);
        let r = record_hop(&request(&[0, 1, 2]), ServerId(3)).unwrap();
        assert_eq!(r.offload_count, 3);
        assert!(matches!(record_hop(&request(&[0]), ServerId(0)), Err(HandlerError::LoopViolation { .. })));
    }

    proptest! {
        /// Enumerates rung feasibility: whenever a local solution exists and
        /// the deadline holds, the request is never forwarded.
        #[test]
        fn ladder_order(mask in 0u8..32, count in 0u32..7, late in any::<bool>()) {
            let local = LocalOptions {
                local: (mask & 1 != 0).then(gpus),
                cross_server: (mask & 2 != 0).then(|| vec![ServerId(0), ServerId(1)]),
                device: (mask & 4 != 0).then_some(DeviceId(0)),
                partial_local: (mask & 16 != 0).then(gpus),
            };
            let v = if mask & 8 != 0 { view(&[(9, 2.0)]) } else { view(&[]) };
            let mut r = request(&[0]);
            r.offload_count = count;
            let now = if late { 101 } else { 50 };
            let d = decide(&r, &local, &v, now, &policy());
            let expected = if late {
                HandlingDecision::Timeout
            } else if mask & 1 != 0 {
                HandlingDecision::SolveLocal(gpus())
            } else if mask & 2 != 0 {
                HandlingDecision::SolveCrossServerParallel(vec![ServerId(0), ServerId(1)])
            } else if mask & 4 != 0 {
                HandlingDecision::SolveOnDevice(DeviceId(0))
            } else if mask & 8 != 0 && count < 5 {
                HandlingDecision::Offload(ServerId(9))
            } else if mask & 16 != 0 {
                HandlingDecision::SolveLocal(gpus())
            } else if count >= 5 {
                HandlingDecision::OffloadExceeded
            } else {
                HandlingDecision::ResourceInsufficient
            };
            prop_assert_eq!(d, expected);
        }

        #[test]
        fn offload_never_targets_path(path_len in 1usize..5, hosts in proptest::collection::vec(0u32..6, 1..6), seed in any::<u64>()) {
            let path: Vec<u32> = (0..path_len as u32).collect();
            let r = request(&path);
            let idle: Vec<(u32, f64)> = hosts.iter().map(|&h| (h, 1.0 + h as f64)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Some(m) = offload_target(&r, 100, &view(&idle), 0, 50, &mut rng) {
                prop_assert!(!r.has_visited(m));
            }
        }
    }
}
