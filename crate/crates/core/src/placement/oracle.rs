//! Exhaustive search over placement multisets, used to check the greedy bound.

use crate::model::PlacementList;

use super::{evaluate_goodput, try_place, Candidate, ClusterResources, PlacementContext, PlacementError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_configs: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_configs: 1_000_000 }
    }
}

struct Search<'c, 'a> {
    ctx: &'c PlacementContext<'a>,
    cands: &'c [Candidate],
    limit: u64,
    visited: u64,
    best: (PlacementList, u64),
}

impl Search<'_, '_> {
    fn visit(&mut self, theta: &mut PlacementList, res: &ClusterResources, from: usize) -> Result<(), PlacementError> {
        self.visited += 1;
        if self.visited > self.limit {
            return Err(PlacementError::TooLarge { limit: self.limit });
        }
        let phi = evaluate_goodput(self.ctx, theta);
        if phi > self.best.1 {
            self.best = (theta.clone(), phi);
        }
        for j in from..self.cands.len() {
            let c = &self.cands[j];
            let Ok(p) = try_place(self.ctx, res, c) else { continue };
            let mut next = res.clone();
            next.reserve(self.ctx.scenario.service(c.service), &c.plan, &p.gpus);
            theta.entries.push(p);
            let r = self.visit(theta, &next, j);
            theta.entries.pop();
            r?;
        }
        Ok(())
    }
}

/// Enumerates every feasible multiset of `cands` (each candidate repeated
/// while resources allow) and returns the maximizer of φ.
pub fn brute_force_optimal(
    ctx: &PlacementContext,
    cands: &[Candidate],
    limits: Limits,
) -> Result<(PlacementList, u64), PlacementError> {
    let mut s = Search {
        ctx,
        cands,
        limit: limits.max_configs,
        visited: 0,
        best: (PlacementList::new(0), 0),
    };
    let res = ClusterResources::new(ctx.scenario, &ctx.servers);
    let mut theta = PlacementList::new(0);
    s.visit(&mut theta, &res, 0)?;
    Ok(s.best)
}
