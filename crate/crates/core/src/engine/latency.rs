//! Latency lookups: batch compute time and network transfer.

use crate::allocator::ProfileTable;
use crate::model::{GpuModelId, Millis, ServiceSpec};

use super::EngineError;

/// Transfer time of `bytes` over a link plus the fixed per-hop overhead.
pub fn transmit_latency(bytes: u64, bandwidth_mbps: f64, overhead_ms: Millis) -> Result<Millis, EngineError> {
    if !(bandwidth_mbps > 0.0) {
        return Err(EngineError::ZeroBandwidth);
    }
    if bandwidth_mbps.is_infinite() {
        return Ok(overhead_ms);
    }
    let ms = (bytes as f64 * 8.0 / (bandwidth_mbps * 1000.0)).ceil() as Millis;
    Ok(ms + overhead_ms)
}

/// Compute-time lookup backed by the scenario's profile table.
#[derive(Debug, Clone, Copy)]
pub struct LatencyTable<'a> {
    profiles: &'a ProfileTable,
}

impl<'a> LatencyTable<'a> {
    pub fn new(profiles: &'a ProfileTable) -> Self {
        Self { profiles }
    }

    /// Milliseconds for one batch of `bs` on one slice at replication `mt`.
    /// `compute_time_ms` already describes a whole model-parallel group, so
    /// the MP degree does not enter the lookup.
    pub fn compute_ms(&self, service: &ServiceSpec, gpu: GpuModelId, bs: u32, mt: u32) -> f64 {
        self.profiles.lookup(service, gpu, bs, mt).latency_ms.max(1e-3)
    }

    pub fn load_ms(&self, service: &ServiceSpec) -> Millis {
        service.model_load_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transmit_examples() {
        assert_eq!(transmit_latency(0, 100.0, 1).unwrap(), 1);
        assert_eq!(transmit_latency(125_000, 100.0, 1).unwrap(), 11);
        assert!(transmit_latency(1_000_000, 100.0, 1).unwrap() < 100);
        // 50 KB task payload over 100 Mbps: about 5 ms.
        assert_eq!(transmit_latency(50_000, 100.0, 1).unwrap(), 5);
        assert!(matches!(transmit_latency(10, 0.0, 1), Err(EngineError::ZeroBandwidth)));
    }
}
