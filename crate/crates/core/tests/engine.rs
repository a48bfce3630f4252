use std::path::Path;

use proptest::prelude::*;

use edgeserve::model::Outcome;
use edgeserve::placement::bound::generate_instance;
use edgeserve::{load_scenario, run, run_baseline, Scenario, Strategy};

fn fixture(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    load_scenario(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn empty_trace_yields_empty_metrics() {
    let sc = fixture("minimal.toml").with_trace(Vec::new());
    let m = run(&sc, 1).unwrap();
    assert_eq!(m.submitted, 0);
    assert_eq!(m.satisfied, 0);
    assert!(m.records.is_empty());
}

#[test]
fn single_server_below_capacity_is_nearly_always_satisfied() {
    let mut sc = fixture("minimal.toml");
    sc.servers.truncate(1);
    let sc = load_scenario(&sc.to_toml()).unwrap();
    let m = run(&sc, sc.control.seed).unwrap();
    assert!(m.submitted > 150);
    assert!(m.satisfaction() > 0.99, "{}", m.satisfaction());
}

#[test]
fn round_robin_matches_full_on_symmetric_load() {
    let sc = fixture("symmetric.toml");
    let full = run(&sc, sc.control.seed).unwrap().satisfied as f64;
    let rr = run_baseline(&sc, Strategy::RoundRobin, sc.control.seed).unwrap().satisfied as f64;
    assert!((full - rr).abs() <= 0.05 * full, "full {full} rr {rr}");
}

#[test]
fn no_offload_loses_on_hotspot() {
    let sc = fixture("hotspot.toml");
    let full = run(&sc, sc.control.seed).unwrap();
    let local = run_baseline(&sc, Strategy::NoOffload, sc.control.seed).unwrap();
    assert!(local.satisfied < full.satisfied);
    assert_eq!(local.mean_offload_count(), 0.0);
}

#[test]
fn centralized_scheduler_does_not_beat_full_on_bursts() {
    let sc = fixture("bursty.toml");
    let full = run(&sc, sc.control.seed).unwrap();
    let central = run_baseline(&sc, Strategy::CentralizedGroup, sc.control.seed).unwrap();
    assert!(central.satisfied <= full.satisfied);
}

#[test]
fn same_seed_same_metrics() {
    let sc = fixture("hotspot.toml");
    assert_eq!(run(&sc, 3).unwrap(), run(&sc, 3).unwrap());
}

#[test]
fn zero_max_offload_turns_remote_work_into_insufficient() {
    let mut sc = fixture("hotspot.toml");
    sc.control.max_offload = 0;
    let m = run(&sc, sc.control.seed).unwrap();
    assert!(m.records.iter().all(|r| r.offload_count == 0));
    assert!(m.outcome_count(Outcome::ResourceInsufficient) > 0);
    assert_eq!(m.outcome_count(Outcome::OffloadExceeded), 0);
}

#[test]
fn failed_server_is_never_targeted_after_bypass() {
    let sc = fixture("fault8.toml");
    let m = run(&sc, sc.control.seed).unwrap();
    assert_eq!(m.bypass_violations, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Per-request records account for every unit in the totals.
    #[test]
    fn records_add_up(seed in 0u64..5_000, run_seed in any::<u64>()) {
        let sc = generate_instance(seed);
        let m = run(&sc, run_seed).unwrap();
        prop_assert_eq!(m.records.len(), sc.trace.len());
        prop_assert_eq!(m.records.iter().map(|r| r.satisfied).sum::<u64>(), m.satisfied);
        prop_assert_eq!(m.records.iter().map(|r| r.frame_count as u64).sum::<u64>(), m.submitted);
        prop_assert!(m.satisfied <= m.submitted);
        for r in &m.records {
            prop_assert_eq!(r.hop_path[0], r.origin);
            prop_assert_eq!(r.hop_path.len() as u32, r.offload_count + 1);
            if let Some(c) = r.completion_ms {
                prop_assert!(c >= r.arrival_ms);
            }
        }
    }
}
