//! Ring-based state synchronization, membership and device registration.
//!
//! Every round each live server publishes a fresh entry about itself and
//! merges the cached views of its two ring neighbours from the previous
//! round. Information therefore travels one hop per round and a peer at ring
//! distance `d` is seen `d` intervals late.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{
    ClusterView, DeviceSpec, GpuClass, Millis, Scenario, ServerId, ServiceId, ViewEntry,
};
use crate::allocator::categorize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("server {0} is not in the ring")]
    UnknownServer(ServerId),
    #[error("no single-GPU service can be deployed on a device")]
    NoEligibleService,
}

/// Left and right neighbour positions of `idx` on a ring of `n`.
pub fn ring_neighbors(idx: usize, n: usize) -> (usize, usize) {
    assert!(n >= 1, "ring must be non-empty");
    ((idx + n - 1) % n, (idx + 1) % n)
}

/// Live ring order plus the set of servers flagged unavailable.
#[derive(Debug, Clone, PartialEq)]
pub struct RingTopology {
    pub order: Vec<ServerId>,
    pub sync_interval_ms: Millis,
    pub flagged: BTreeSet<ServerId>,
}

impl RingTopology {
    pub fn new(order: Vec<ServerId>, sync_interval_ms: Millis) -> Self {
        Self {
            order,
            sync_interval_ms,
            flagged: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, server: ServerId) -> bool {
        self.order.contains(&server)
    }

    pub fn neighbors(&self, server: ServerId) -> Option<(ServerId, ServerId)> {
        let idx = self.order.iter().position(|s| *s == server)?;
        let (l, r) = ring_neighbors(idx, self.order.len());
        Some((self.order[l], self.order[r]))
    }

    /// Next live server after `server` in ring order (used to redirect the
    /// traffic of a server that left or failed).
    pub fn successor_of(&self, server: ServerId) -> Option<ServerId> {
        if self.order.is_empty() {
            return None;
        }
        self.order
            .iter()
            .copied()
            .find(|s| *s > server)
            .or_else(|| self.order.first().copied())
    }
}

/// Splits ring order into independent groups of `group_size` (0 = one group).
pub fn partition_groups(order: &[ServerId], group_size: u32) -> Vec<Vec<ServerId>> {
    if group_size == 0 || order.len() <= group_size as usize {
        return vec![order.to_vec()];
    }
    order.chunks(group_size as usize).map(|c| c.to_vec()).collect()
}

/// Bytes sent by one server in one round.
pub fn sync_payload_bytes(bytes_per_server: u64, n: usize) -> u64 {
    bytes_per_server * n as u64
}

fn newer(a: &ViewEntry, b: &ViewEntry) -> bool {
    (a.snapshot_ms, a.seq) > (b.snapshot_ms, b.seq)
}

/// One synchronous round.
///
/// `fresh` holds each live server's new self-entry. Every ring member keeps,
/// per source, the entry with the smallest staleness among its own cache and
/// its neighbours' caches from the previous round (source sequence number
/// breaks ties). Servers outside the ring keep their views untouched.
pub fn exchange_round(
    views: &BTreeMap<ServerId, ClusterView>,
    ring: &RingTopology,
    fresh: &BTreeMap<ServerId, ViewEntry>,
    now: Millis,
) -> BTreeMap<ServerId, ClusterView> {
    let mut out = views.clone();
    for &s in &ring.order {
        let mut merged: BTreeMap<ServerId, ViewEntry> = views
            .get(&s)
            .map(|v| v.per_server.clone())
            .unwrap_or_default();
        if let Some((l, r)) = ring.neighbors(s) {
            for peer in [l, r] {
                if peer == s {
                    continue;
                }
                let Some(pv) = views.get(&peer) else { continue };
                for (src, entry) in &pv.per_server {
                    match merged.get(src) {
                        Some(cur) if !newer(entry, cur) => {}
                        _ => {
                            merged.insert(*src, entry.clone());
                        }
                    }
                }
            }
        }
        if let Some(own) = fresh.get(&s) {
            merged.insert(s, own.clone());
        }
        for (src, entry) in merged.iter_mut() {
            entry.staleness_ms = now.saturating_sub(entry.snapshot_ms);
            if ring.flagged.contains(src) {
                entry.available = false;
            }
        }
        out.insert(s, ClusterView { owner: s, per_server: merged });
    }
    out
}

/// Removes a faulty server from the ring and flags it unavailable.
pub fn bypass_faulty(ring: &RingTopology, faulty: ServerId) -> Result<RingTopology, SyncError> {
    if !ring.contains(faulty) {
        return Err(SyncError::UnknownServer(faulty));
    }
    let mut next = ring.clone();
    next.order.retain(|s| *s != faulty);
    next.flagged.insert(faulty);
    Ok(next)
}

/// Applies joins and exits queued during an epoch; ring order follows
/// server ids so indices stay contiguous.
pub fn apply_membership(ring: &RingTopology, joins: &[ServerId], exits: &[ServerId]) -> RingTopology {
    let mut next = ring.clone();
    for &e in exits {
        if next.contains(e) {
            next.order.retain(|s| *s != e);
        } else {
            log::warn!("exit of unknown server {e} ignored");
        }
    }
    for &j in joins {
        if !next.contains(j) && !next.flagged.contains(&j) {
            next.order.push(j);
        }
    }
    next.order.sort();
    next
}

/// Ring index of each member after membership changes.
pub fn ring_indices(ring: &RingTopology) -> BTreeMap<ServerId, u32> {
    ring.order.iter().enumerate().map(|(i, s)| (*s, i as u32)).collect()
}

/// Outcome of a device registration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceAssignment {
    pub service: ServiceId,
    pub load_start_ms: Millis,
    pub ready_ms: Millis,
}

/// Model transfer time to a device, capped by the server's uplink.
pub fn device_load_ms(model_mb: f64, device_mbps: f64, cap_mbps: f64) -> Millis {
    let bw = device_mbps.min(cap_mbps);
    if !(bw > 0.0) {
        return Millis::MAX / 4;
    }
    (model_mb * 8.0 / bw * 1000.0).ceil() as Millis
}

/// Chooses the single-GPU service with the most local arrivals (lowest id on
/// ties) and schedules its model load behind earlier registrations.
/// `loader_free_ms` is the time the server's model loader becomes free and is
/// advanced past this load.
pub fn register_device(
    scenario: &Scenario,
    device: &DeviceSpec,
    local_arrivals: &BTreeMap<ServiceId, u64>,
    loader_free_ms: &mut Millis,
) -> Result<DeviceAssignment, SyncError> {
    let eligible = scenario
        .services
        .iter()
        .filter(|s| categorize(s).gpu_class == GpuClass::SingleGpu);
    let mut best: Option<(&crate::model::ServiceSpec, u64)> = None;
    for s in eligible {
        let n = local_arrivals.get(&s.id).copied().unwrap_or(0);
        if best.map_or(true, |(_, b)| n > b) {
            best = Some((s, n));
        }
    }
    let (svc, _) = best.ok_or(SyncError::NoEligibleService)?;
    let start = device.register_ms.max(*loader_free_ms);
    let ready = start
        + svc.model_load_ms
        + device_load_ms(svc.model_mb, device.load_bandwidth_mbps, scenario.control.device_bandwidth_cap_mbps);
    *loader_free_ms = ready;
    Ok(DeviceAssignment {
        service: svc.id,
        load_start_ms: start,
        ready_ms: ready,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring(n: u32) -> RingTopology {
        RingTopology::new((0..n).map(ServerId).collect(), 50)
    }

    fn initial(n: u32) -> BTreeMap<ServerId, ClusterView> {
        (0..n)
            .map(|i| {
                let mut v = ClusterView::new(ServerId(i));
                v.per_server.insert(ServerId(i), ViewEntry::fresh(ServerId(i), 0, 0));
                (ServerId(i), v)
            })
            .collect()
    }

    fn run_rounds(n: u32, rounds: u64) -> BTreeMap<ServerId, ClusterView> {
        let r = ring(n);
        let mut views = initial(n);
        for k in 1..=rounds {
            let now = k * 50;
            let fresh = (0..n).map(|i| (ServerId(i), ViewEntry::fresh(ServerId(i), k, now))).collect();
            views = exchange_round(&views, &r, &fresh, now);
        }
        views
    }

    /// Ring distance, computed independently by BFS.
    fn bfs_distance(n: usize, from: usize, to: usize) -> usize {
        let mut dist = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::from([from]);
        dist[from] = 0;
        while let Some(u) = queue.pop_front() {
            for v in [(u + 1) % n, (u + n - 1) % n] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist[to]
    }

    #[test]
    fn neighbor_examples() {
        assert_eq!(ring_neighbors(0, 4), (3, 1));
        assert_eq!(ring_neighbors(2, 3), (1, 0));
        assert_eq!(ring_neighbors(0, 1), (0, 0));
    }

    #[test]
    fn two_servers_one_round() {
        let v = run_rounds(2, 1);
        assert_eq!(v[&ServerId(0)].staleness(ServerId(1)), Some(50));
        assert_eq!(v[&ServerId(1)].staleness(ServerId(0)), Some(50));
    }

    #[test]
    fn antipode_arrives_after_distance_rounds() {
        let n = 6;
        let d = bfs_distance(6, 0, 3);
        assert_eq!(d, 3);
        assert!(run_rounds(n, (d - 1) as u64)[&ServerId(0)].per_server.get(&ServerId(3)).is_none());
        let v = run_rounds(n, d as u64);
        assert_eq!(v[&ServerId(0)].staleness(ServerId(3)), Some(3 * 50));
    }

    #[test]
    fn singleton_round_only_refreshes_self() {
        let v = run_rounds(1, 3);
        assert_eq!(v[&ServerId(0)].per_server.len(), 1);
        assert_eq!(v[&ServerId(0)].staleness(ServerId(0)), Some(0));
    }

    #[test]
    fn exchange_with_identical_views_only_ages() {
        let r = ring(4);
        let converged = run_rounds(4, 4);
        let shared = converged[&ServerId(0)].per_server.clone();
        let views: BTreeMap<ServerId, ClusterView> = (0..4)
            .map(|i| (ServerId(i), ClusterView { owner: ServerId(i), per_server: shared.clone() }))
            .collect();
        let next = exchange_round(&views, &r, &BTreeMap::new(), 400);
        for v in next.values() {
            assert_eq!(v.per_server.len(), shared.len());
            for (src, e) in &v.per_server {
                let old = &shared[src];
                assert_eq!((e.seq, e.snapshot_ms, &e.services), (old.seq, old.snapshot_ms, &old.services));
                assert_eq!(e.staleness_ms, 400 - old.snapshot_ms);
            }
        }
    }

    #[test]
    fn exchange_without_fresh_entries_never_regresses() {
        let r = ring(3);
        let views = run_rounds(3, 4);
        let empty = BTreeMap::new();
        let next = exchange_round(&views, &r, &empty, 250);
        for (s, v) in &next {
            for (src, e) in &v.per_server {
                let old = &views[s].per_server[src];
                assert!((e.snapshot_ms, e.seq) >= (old.snapshot_ms, old.seq));
                assert_eq!(e.staleness_ms, 250 - e.snapshot_ms);
            }
        }
    }

    #[test]
    fn bypass_splices_ring() {
        let r = RingTopology::new(vec![ServerId(0), ServerId(1), ServerId(2)], 50);
        let r2 = bypass_faulty(&r, ServerId(1)).unwrap();
        assert_eq!(r2.order, vec![ServerId(0), ServerId(2)]);
        assert_eq!(r2.neighbors(ServerId(0)), Some((ServerId(2), ServerId(2))));
        assert!(r2.flagged.contains(&ServerId(1)));
        assert_eq!(bypass_faulty(&r2, ServerId(1)), Err(SyncError::UnknownServer(ServerId(1))));
        let lone = RingTopology::new(vec![ServerId(4)], 50);
        assert!(bypass_faulty(&lone, ServerId(4)).unwrap().is_empty());
    }

    #[test]
    fn flagged_server_unavailable_everywhere() {
        let views = run_rounds(4, 4);
        let r = bypass_faulty(&ring(4), ServerId(2)).unwrap();
        let fresh = [0u32, 1, 3].iter().map(|&i| (ServerId(i), ViewEntry::fresh(ServerId(i), 5, 250))).collect();
        let next = exchange_round(&views, &r, &fresh, 250);
        for s in [0u32, 1, 3] {
            assert!(!next[&ServerId(s)].is_available(ServerId(2)));
        }
    }

    #[test]
    fn membership_examples() {
        let r = ring(3);
        let r2 = apply_membership(&r, &[ServerId(5)], &[ServerId(1)]);
        assert_eq!(r2.order, vec![ServerId(0), ServerId(2), ServerId(5)]);
        assert_eq!(ring_indices(&r2)[&ServerId(5)], 2);
        let r3 = apply_membership(&r, &[], &[ServerId(9)]);
        assert_eq!(r3.order, r.order);
    }

    #[test]
    fn successor_wraps() {
        let r = RingTopology::new(vec![ServerId(0), ServerId(2), ServerId(3)], 50);
        assert_eq!(r.successor_of(ServerId(1)), Some(ServerId(2)));
        assert_eq!(r.successor_of(ServerId(3)), Some(ServerId(0)));
    }

    #[test]
    fn groups_partition() {
        let order: Vec<ServerId> = (0..25).map(ServerId).collect();
        let g = partition_groups(&order, 10);
        assert_eq!(g.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![10, 10, 5]);
        assert_eq!(partition_groups(&order, 0).len(), 1);
    }

    #[test]
    fn device_load_time() {
        // 100 MB at 800 Mbps = 1 s.
        assert_eq!(device_load_ms(100.0, 800.0, 1000.0), 1000);
        assert_eq!(device_load_ms(100.0, 800.0, 400.0), 2000);
    }

    proptest! {
        #[test]
        fn staleness_bound_after_half_ring(n in 1u32..20) {
            let rounds = (n as u64).div_ceil(2);
            let views = run_rounds(n, rounds);
            for v in views.values() {
                prop_assert_eq!(v.per_server.len(), n as usize);
                for e in v.per_server.values() {
                    prop_assert!(e.staleness_ms <= rounds * 50);
                }
            }
        }

        #[test]
        fn exchange_conserves_entries(n in 2u32..10, rounds in 1u64..8) {
            let r = ring(n);
            let mut views = initial(n);
            for k in 1..=rounds {
                let now = k * 50;
                let fresh: BTreeMap<_, _> = (0..n).map(|i| (ServerId(i), ViewEntry::fresh(ServerId(i), k, now))).collect();
                let known: BTreeSet<(ServerId, u64)> = views
                    .values()
                    .flat_map(|v| v.per_server.values().map(|e| (e.source, e.seq)))
                    .chain(fresh.values().map(|e| (e.source, e.seq)))
                    .collect();
                views = exchange_round(&views, &r, &fresh, now);
                for v in views.values() {
                    for e in v.per_server.values() {
                        prop_assert!(known.contains(&(e.source, e.seq)));
                    }
                }
            }
        }
    }
}
