use std::collections::BTreeMap;

use super::{GpuRef, Millis, RequestId, ServerId, ServiceId, TaskCategory};

/// Terminal state of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Outcome {
    /// Served; `RequestRecord::satisfied` holds the credited units.
    Completed,
    Timeout,
    OffloadExceeded,
    ResourceInsufficient,
    /// Dropped by a failed server or an offload to one.
    Lost,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Timeout => "timeout",
            Outcome::OffloadExceeded => "offload_exceeded",
            Outcome::ResourceInsufficient => "resource_insufficient",
            Outcome::Lost => "lost",
        }
    }
}

/// Final log line for one request, kept so that accounting can be re-derived.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub id: RequestId,
    pub service: ServiceId,
    pub category: TaskCategory,
    pub origin: ServerId,
    pub arrival_ms: Millis,
    pub frame_count: u32,
    pub hop_path: Vec<ServerId>,
    pub offload_count: u32,
    pub outcome: Outcome,
    pub completion_ms: Option<Millis>,
    pub frames_done: u32,
    pub achieved_fps: Option<f64>,
    pub satisfied: u64,
}

/// Bucketed counts with fixed upper bounds; the last bucket is open.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bounds: Vec<u64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn latency_ms() -> Self {
        let bounds = vec![10, 20, 50, 100, 200, 500, 1000, 2000, 5000];
        let counts = vec![0; bounds.len() + 1];
        Self { bounds, counts }
    }

    pub fn record(&mut self, value: u64) {
        let idx = self
            .bounds
            .iter()
            .position(|b| value <= *b)
            .unwrap_or(self.bounds.len());
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-GPU busy accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct GpuUsage {
    pub gpu: GpuRef,
    pub model: String,
    /// Busy time weighted by the compute share of the slice that ran.
    pub weighted_busy_ms: f64,
}

/// Per-second time-series row, keyed by arrival second.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SecondBucket {
    pub submitted: u64,
    pub satisfied: u64,
    pub offloads: u64,
    pub requests: u64,
}

/// Aggregated results of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub strategy: String,
    pub seed: u64,
    /// Sum of credited units (the placement objective).
    pub satisfied: u64,
    /// Sum of submitted units (frames for streams, one per latency request).
    pub submitted: u64,
    pub per_category: BTreeMap<TaskCategory, (u64, u64)>,
    pub outcomes: BTreeMap<Outcome, u64>,
    pub latency_histogram: Histogram,
    /// `offload_histogram[k]` = requests that terminated after k offloads.
    pub offload_histogram: Vec<u64>,
    pub gpu_usage: Vec<GpuUsage>,
    pub timeseries: Vec<SecondBucket>,
    /// Trace span used for rate metrics.
    pub horizon_ms: Millis,
    pub sync_rounds: u64,
    pub sync_bytes: u64,
    pub placement_epochs: u64,
    /// Offload decisions that targeted a server already bypassed by the ring.
    pub bypass_violations: u64,
    pub events: u64,
    pub records: Vec<RequestRecord>,
}

impl Metrics {
    pub fn new(strategy: &str, seed: u64) -> Self {
        Self {
            strategy: strategy.to_string(),
            seed,
            satisfied: 0,
            submitted: 0,
            per_category: BTreeMap::new(),
            outcomes: BTreeMap::new(),
            latency_histogram: Histogram::latency_ms(),
            offload_histogram: Vec::new(),
            gpu_usage: Vec::new(),
            timeseries: Vec::new(),
            horizon_ms: 0,
            sync_rounds: 0,
            sync_bytes: 0,
            placement_epochs: 0,
            bypass_violations: 0,
            events: 0,
            records: Vec::new(),
        }
    }

    pub fn satisfaction(&self) -> f64 {
        if self.submitted == 0 {
            1.0
        } else {
            self.satisfied as f64 / self.submitted as f64
        }
    }

    /// Satisfied units per second of trace.
    pub fn goodput(&self) -> f64 {
        rate(self.satisfied, self.horizon_ms)
    }

    pub fn category_goodput(&self, category: TaskCategory) -> f64 {
        let sat = self.per_category.get(&category).map_or(0, |c| c.0);
        rate(sat, self.horizon_ms)
    }

    pub fn mean_offload_count(&self) -> f64 {
        let n: u64 = self.offload_histogram.iter().sum();
        if n == 0 {
            return 0.0;
        }
        let s: u64 = self
            .offload_histogram
            .iter()
            .enumerate()
            .map(|(k, c)| k as u64 * c)
            .sum();
        s as f64 / n as f64
    }

    pub fn outcome_count(&self, outcome: Outcome) -> u64 {
        self.outcomes.get(&outcome).copied().unwrap_or(0)
    }

    /// Latency percentile over completed latency-sensitive requests.
    pub fn latency_percentile(&self, q: f64) -> Option<Millis> {
        let mut lat: Vec<Millis> = self
            .records
            .iter()
            .filter(|r| r.achieved_fps.is_none())
            .filter_map(|r| r.completion_ms.map(|c| c - r.arrival_ms))
            .collect();
        if lat.is_empty() {
            return None;
        }
        lat.sort_unstable();
        let idx = ((lat.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
        Some(lat[idx])
    }

    pub fn gpu_utilization(&self, usage: &GpuUsage) -> f64 {
        if self.horizon_ms == 0 {
            0.0
        } else {
            usage.weighted_busy_ms / self.horizon_ms as f64
        }
    }
}

fn rate(units: u64, horizon_ms: Millis) -> f64 {
    if horizon_ms == 0 {
        0.0
    } else {
        units as f64 * 1000.0 / horizon_ms as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets_by_upper_bound() {
        let mut h = Histogram::latency_ms();
        h.record(10);
        h.record(11);
        h.record(1_000_000);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[1], 1);
        assert_eq!(*h.counts.last().unwrap(), 1);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn empty_metrics_are_neutral() {
        let m = Metrics::new("full", 1);
        assert_eq!(m.goodput(), 0.0);
        assert_eq!(m.mean_offload_count(), 0.0);
        assert_eq!(m.satisfaction(), 1.0);
        assert!(m.latency_percentile(0.5).is_none());
    }
}
