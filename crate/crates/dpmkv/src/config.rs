//! Central configuration for the simulator. Every cost constant, capacity and
//! policy parameter lives here so experiments are reproducible from a single
//! block; scenario fixtures override fields and record the result next to
//! their outputs.

use serde::{Deserialize, Serialize};

/// Simulated time is measured in abstract units; the reference calibration is
/// 1 unit = 10 microseconds, which puts one network round trip (3 units) at
/// 30 us and the 500 ms RPC timeout at 50_000 units.
pub const UNITS_PER_MS: u64 = 100;

/// Timing model of the simulated interconnect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingConfig {
    /// Clock advance charged per network round trip.
    pub rt_latency: u64,
    /// Portion of an RPC round trip spent on the request leg.
    pub rpc_request_leg: u64,
    /// Portion of an RPC round trip spent on the response leg.
    pub rpc_response_leg: u64,
    /// Clock advance per local service step.
    pub service_step: u64,
    /// RPC timeout (500 ms at the reference calibration).
    pub rpc_timeout: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            rt_latency: 3,
            rpc_request_leg: 2,
            rpc_response_leg: 1,
            service_step: 1,
            rpc_timeout: 500 * UNITS_PER_MS,
        }
    }
}

/// Shared persistent-memory pool and log-segment parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Flat pool size in bytes.
    pub pool_size: u64,
    /// Log segment capacity. Desk-scale default 256 KiB (the reference
    /// deployment used 8 MB; shrunk to keep runs small).
    pub segment_capacity: u64,
    /// Merge worker count at the pool-side processor.
    pub merge_workers: usize,
    /// How often the collector scans for reclaimable segments.
    pub gc_interval: u64,
    /// Quiescence window: a segment is reclaimed only if its last
    /// invalidation is at least this old, so an address obtained from a
    /// bucket or indirect-cell read cannot be reclaimed under the dependent
    /// value read.
    pub gc_grace: u64,
    /// Local steps charged per merged entry.
    pub merge_step_per_entry: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            pool_size: 256 << 20,
            segment_capacity: 256 << 10,
            merge_workers: 2,
            gc_interval: 2_000,
            gc_grace: 64,
            merge_step_per_entry: 1,
        }
    }
}

/// Metadata index geometry. The bucket array is a power of two; by default it
/// is sized from `expected_keys` for a load factor of at most 0.7 keys per
/// slot and never resized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexConfig {
    pub expected_keys: u64,
    /// Keys per slot the array is sized for (3 slots per bucket).
    pub load_factor: f64,
    /// Explicit bucket count override (power of two). 0 = derive from
    /// `expected_keys` and `load_factor`.
    pub bucket_count: u64,
    /// Bytes reserved for chain nodes, as a fraction of the bucket array.
    pub chain_region_factor: f64,
    /// Capacity of the indirect-cell region (number of cells).
    pub indirect_cells: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            expected_keys: 100_000,
            load_factor: 0.7,
            bucket_count: 0,
            chain_region_factor: 0.5,
            indirect_cells: 1024,
        }
    }
}

impl IndexConfig {
    pub fn derived_bucket_count(&self) -> u64 {
        if self.bucket_count > 0 {
            debug_assert!(self.bucket_count.is_power_of_two());
            return self.bucket_count;
        }
        let slots_per_bucket = 3.0;
        let want = (self.expected_keys as f64 / (slots_per_bucket * self.load_factor)).ceil();
        (want as u64).max(1).next_power_of_two()
    }
}

/// Cache sizing and the adaptive policy's tuning constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Per-node cache capacity in bytes.
    pub capacity_bytes: u64,
    /// Fixed bookkeeping bytes charged per entry on top of key and payload.
    pub entry_overhead: u64,
    /// Bytes charged for a shortcut payload (address + length).
    pub shortcut_size: u64,
    /// Smoothing factor of the exponential moving average of miss cost.
    pub ema_alpha: f64,
    /// Eviction/admission policy.
    pub policy: CachePolicyKind,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity_bytes: 4 << 20,
            entry_overhead: 32,
            shortcut_size: 16,
            ema_alpha: 0.1,
            policy: CachePolicyKind::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CachePolicyKind {
    /// Adaptive value/shortcut split with hit-rate-aware promotion.
    Adaptive,
    /// Cache shortcuts only, LRU.
    ShortcutOnly,
    /// Cache full values only, LRU.
    ValueOnly,
    /// Reserve `percent` of capacity for values, rest for shortcuts, LRU in
    /// each region.
    StaticSplit { percent: u8 },
    /// No caching at all.
    NoCache,
}

impl CachePolicyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dac" | "adaptive" => Some(CachePolicyKind::Adaptive),
            "shortcut-only" => Some(CachePolicyKind::ShortcutOnly),
            "value-only" => Some(CachePolicyKind::ValueOnly),
            "no-cache" => Some(CachePolicyKind::NoCache),
            other => other
                .strip_prefix("static-")
                .and_then(|p| p.parse::<u8>().ok())
                .filter(|p| *p <= 100)
                .map(|percent| CachePolicyKind::StaticSplit { percent }),
        }
    }

    pub fn label(&self) -> String {
        match self {
            CachePolicyKind::Adaptive => "dac".into(),
            CachePolicyKind::ShortcutOnly => "shortcut-only".into(),
            CachePolicyKind::ValueOnly => "value-only".into(),
            CachePolicyKind::StaticSplit { percent } => format!("static-{percent}"),
            CachePolicyKind::NoCache => "no-cache".into(),
        }
    }
}

/// Write-path batching parameters of a KVS node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WriteConfig {
    /// Flush when the open batch reaches this many bytes...
    pub flush_bytes: u64,
    /// ...or this much time passed since the first enqueued entry.
    pub flush_max_delay: u64,
    /// Back-pressure threshold: block flushes while this many own segments
    /// are un-merged.
    pub unmerged_threshold: usize,
}

impl Default for WriteConfig {
    fn default() -> Self {
        WriteConfig { flush_bytes: 16 << 10, flush_max_delay: 10, unmerged_threshold: 2 }
    }
}

/// Routing parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingConfig {
    /// Virtual nodes per KVS node on the global ring.
    pub virtual_nodes: u32,
    /// Worker threads per KVS node (local ring size).
    pub workers_per_kn: u32,
    /// Membership refreshes a client attempts before reporting unavailability.
    pub client_retry_budget: u32,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { virtual_nodes: 128, workers_per_kn: 2, client_retry_budget: 3 }
    }
}

/// Control-plane policy parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Epoch length in time units.
    pub epoch_length: u64,
    /// Minimum spacing between membership actions; must be >= epoch_length.
    pub grace_period: u64,
    /// Average-latency objective in time units.
    pub avg_slo: u64,
    /// Tail-latency objective in time units.
    pub p99_slo: u64,
    /// A node is over-utilized above this occupancy.
    pub over_util_lower_bound: f64,
    /// A node is under-utilized below this occupancy.
    pub under_util_upper_bound: f64,
    /// A key is hot above mean + hotness_sigma * stddev of key frequency.
    pub hotness_sigma: f64,
    /// A replicated key is cold below mean - coldness_sigma * stddev.
    pub coldness_sigma: f64,
    /// Per-node top-K key digest size.
    pub top_k: usize,
    /// Heartbeats missed in a row before a node is declared failed.
    pub heartbeat_miss_threshold: u32,
    /// Nodes that may be activated on top of the initial membership.
    pub spare_kns: u32,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            epoch_length: 10_000,
            grace_period: 30_000,
            avg_slo: 12,
            p99_slo: 160,
            over_util_lower_bound: 0.20,
            under_util_upper_bound: 0.10,
            hotness_sigma: 3.0,
            coldness_sigma: 1.0,
            top_k: 32,
            heartbeat_miss_threshold: 3,
            spare_kns: 0,
        }
    }
}

/// Full simulator configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimConfig {
    pub timing: TimingConfig,
    pub pool: PoolConfig,
    pub index: IndexConfig,
    pub cache: CacheConfig,
    pub write: WriteConfig,
    pub routing: RoutingConfig,
    pub policy: PolicyConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_count_is_power_of_two_and_respects_load_factor() {
        let mut idx = IndexConfig { expected_keys: 100_000, ..Default::default() };
        let b = idx.derived_bucket_count();
        assert!(b.is_power_of_two());
        // 100_000 keys over 3-slot buckets at load factor <= 0.7 needs at
        // least ceil(100_000 / 2.1) = 47_620 buckets; next power of two.
        assert_eq!(b, 65_536);
        idx.bucket_count = 1024;
        assert_eq!(idx.derived_bucket_count(), 1024);
    }

    #[test]
    fn policy_labels_round_trip() {
        for s in ["dac", "shortcut-only", "value-only", "no-cache", "static-20", "static-80"] {
            let p = CachePolicyKind::parse(s).unwrap();
            assert_eq!(p.label(), s);
        }
        assert!(CachePolicyKind::parse("static-101").is_none());
        assert!(CachePolicyKind::parse("bogus").is_none());
    }
}
