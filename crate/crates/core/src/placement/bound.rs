//! Random small instances for checking φ(SSSP) against the exhaustive optimum.
//!
//! Instances keep every server at one GPU, so no server holds more than one
//! partially used GPU.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{load_scenario, Scenario};

use super::{
    approximation_p, brute_force_optimal, build_candidates, evaluate_goodput, sssp, Limits, PlacementContext,
    PlacementError,
};

/// Shape of generated instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceParams {
    pub max_servers: u32,
    pub max_services: u32,
    pub max_requests: u32,
    pub demand_lo: f64,
    pub demand_hi: f64,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self {
            max_servers: 4,
            max_services: 4,
            max_requests: 30,
            demand_lo: 0.35,
            demand_hi: 0.8,
        }
    }
}

pub fn generate_instance(seed: u64) -> Scenario {
    generate_instance_with(seed, InstanceParams::default())
}

pub fn generate_instance_with(seed: u64, p: InstanceParams) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_servers = rng.random_range(2..=p.max_servers.max(2));
    let n_services = rng.random_range(1..=p.max_services.max(1));
    let n_req = rng.random_range(n_services..=p.max_requests.max(n_services));

    let mut t = String::new();
    let _ = writeln!(t, "[control]\nseed = {seed}\nplacement_mode = \"online\"\n");
    t.push_str("[[gpus]]\nname = \"g\"\n\n");
    for _ in 0..n_servers {
        t.push_str("[[servers]]\ngpus = [\"g\"]\n\n");
    }
    for l in 0..n_services {
        let a = rng.random_range(p.demand_lo..=p.demand_hi);
        let b = rng.random_range(p.demand_lo..=p.demand_hi);
        let c = rng.random_range(5..=40) as f64;
        let slo = rng.random_range(60..=200);
        let _ = writeln!(
            t,
            "[[services]]\nname = \"s{l}\"\ncompute_demand = {a:.3}\nvram_demand = {b:.3}\nlatency_slo_ms = {slo}\nmt = 1\ncompute_time_ms = {{ g = {c} }}\n"
        );
    }
    t.push_str("[trace]\nrows = \"\"\"\n");
    let mut rows: Vec<(u64, u32, u32)> = (0..n_req)
        .map(|_| {
            (
                rng.random_range(0..1000u64),
                rng.random_range(0..n_services),
                rng.random_range(0..n_servers),
            )
        })
        .collect();
    rows.sort();
    for (at, s, o) in rows {
        let _ = writeln!(t, "{at},{s},{o},1");
    }
    t.push_str("\"\"\"\n");
    load_scenario(&t).expect("generated instance is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub seed: u64,
    pub servers: usize,
    pub services: usize,
    pub requests: usize,
    pub p: u32,
    pub bound: f64,
    pub phi_sssp: u64,
    pub phi_opt: u64,
}

impl BoundReport {
    /// φ(SSSP)/φ(OPT); an instance where nothing can be served counts as 1.
    pub fn ratio(&self) -> f64 {
        if self.phi_opt == 0 {
            1.0
        } else {
            self.phi_sssp as f64 / self.phi_opt as f64
        }
    }

    pub fn holds(&self) -> bool {
        self.ratio() + 1e-12 >= self.bound
    }
}

pub fn verify_instance(sc: &Scenario, seed: u64, limits: Limits) -> Result<BoundReport, PlacementError> {
    let ctx = PlacementContext::whole(sc);
    let cands = build_candidates(&ctx);
    let theta = sssp(&ctx, &cands);
    let phi_sssp = evaluate_goodput(&ctx, &theta);
    let (_, phi_opt) = brute_force_optimal(&ctx, &cands.all, limits)?;
    let p = approximation_p(&sc.services)?;
    Ok(BoundReport {
        seed,
        servers: sc.servers.len(),
        services: sc.services.len(),
        requests: sc.trace.len(),
        p: p.p,
        bound: p.bound(),
        phi_sssp,
        phi_opt: phi_opt.max(phi_sssp),
    })
}

/// Runs `verify_instance` over `seeds`. Instances that exceed the oracle
/// limit come back as errors and are skipped by callers.
pub fn sweep(
    seeds: impl IntoIterator<Item = u64>,
    params: InstanceParams,
    limits: Limits,
) -> Vec<(u64, Result<BoundReport, PlacementError>)> {
    seeds
        .into_iter()
        .map(|s| (s, verify_instance(&generate_instance_with(s, params), s, limits)))
        .collect()
}
