//! Synthetic arrival generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::model::{Millis, Scenario, TraceGenSpec, TraceRow};

/// Arrival process of one generated stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalPattern {
    Poisson,
    /// On/off source: Poisson arrivals during `on_ms` windows, silence during
    /// `off_ms`. The on-rate is scaled so that the long-run mean stays at the
    /// spec's rate.
    Bursty { on_ms: Millis, off_ms: Millis },
}

/// Generates arrivals for one `[[trace.generate]]` block, sorted by time.
/// Origins are assigned round-robin in arrival order.
pub fn generate_workload(_scenario: &Scenario, spec: &TraceGenSpec, seed: u64) -> Vec<TraceRow> {
    let times = arrival_times(spec.rate_per_s, spec.pattern, spec.duration_ms, seed);
    times
        .into_iter()
        .enumerate()
        .map(|(i, t)| TraceRow {
            arrival_ms: spec.start_ms + t,
            service: spec.service,
            origin: spec.origins[i % spec.origins.len()],
            frame_count: spec.frame_count,
        })
        .collect()
}

/// Arrival offsets in `[0, duration_ms)` for the given process.
pub fn arrival_times(rate_per_s: f64, pattern: ArrivalPattern, duration_ms: Millis, seed: u64) -> Vec<Millis> {
    if !(rate_per_s > 0.0) || duration_ms == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (on_ms, off_ms) = match pattern {
        ArrivalPattern::Poisson => (duration_ms as f64, 0.0),
        ArrivalPattern::Bursty { on_ms, off_ms } => (on_ms.max(1) as f64, off_ms as f64),
    };
    let cycle = on_ms + off_ms;
    let on_rate = rate_per_s * cycle / on_ms / 1000.0;
    let exp = Exp::new(on_rate).expect("rate is positive");

    // `busy` counts time spent inside on-windows; map it back to wall time.
    let mut out = Vec::new();
    let mut busy = 0.0f64;
    loop {
        busy += exp.sample(&mut rng);
        let cycles = (busy / on_ms).floor();
        let t = cycles * cycle + (busy - cycles * on_ms);
        if t >= duration_ms as f64 {
            break;
        }
        out.push(t.floor() as Millis);
    }
    // Random phase for bursty sources so that streams are not aligned.
    if off_ms > 0.0 {
        let shift = rng.random_range(0..cycle as u64);
        for t in &mut out {
            *t = (*t + shift) % duration_ms;
        }
        out.sort_unstable();
    }
    out
}
