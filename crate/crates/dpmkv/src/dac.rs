//! Per-worker bounded-byte cache over pool-resident data, holding two entry
//! forms: full value copies (a hit costs no fabric round trips) and
//! shortcuts — the pool address and length of a value (a hit costs the one
//! read that fetches the value, skipping index traversal).
//!
//! The adaptive policy starts by caching values while space is free; once
//! space runs out new keys are admitted as shortcuts, making room by
//! demoting least-recently-used values to shortcut form first and then
//! evicting least-frequently-used shortcuts. A shortcut whose hit count
//! justifies it is promoted back to a value: promotion evicts the cheapest
//! (fewest-hits) shortcuts and is taken only when the round trips saved by
//! the promoted entry cover the expected cost of the induced misses, priced
//! at a moving average of observed miss round trips.
//!
//! Invariants:
//! - `used ≤ capacity` after every operation,
//! - promotion and demotion preserve an entry's hit count,
//! - a demoted entry's shortcut address is exactly where its value form was
//!   fetched from or last written,
//! - an evicted shortcut always has the minimum hit count among shortcuts at
//!   eviction time (ties resolved toward the older last use).

use std::collections::{BTreeSet, HashMap};

use crate::config::{CacheConfig, CachePolicyKind};

// ---------------------------------------------------------------------------
// Entries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Form {
    Value { bytes: Vec<u8>, value_addr: u64 },
    Shortcut { value_addr: u64, value_len: u32 },
}

#[derive(Debug, Clone)]
struct Entry {
    form: Form,
    access_count: u64,
    last_use: u64,
    charged: u64,
}

/// Result of a cache probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lookup {
    /// Value served locally; no fabric ops needed.
    HitValue(Vec<u8>),
    /// Address known; caller pays one read to fetch the value.
    HitShortcut { value_addr: u64, value_len: u32 },
    Miss,
}

/// What `admit_on_miss` did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admitted {
    Value,
    Shortcut,
    /// Entry cannot fit at all; the key stays uncached.
    Bypassed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmitReport {
    pub admitted: Admitted,
    pub demoted: Vec<Vec<u8>>,
    pub evicted: Vec<Vec<u8>>,
}

/// Outcome of the promotion rule on a shortcut hit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromotionDecision {
    /// Worth promoting; the listed shortcuts are the ones to evict.
    Promote { evict: Vec<Vec<u8>> },
    Keep,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DacMetrics {
    pub hits_value: u64,
    pub hits_shortcut: u64,
    pub misses: u64,
    pub promotions: u64,
    pub demotions: u64,
    pub evictions: u64,
    pub ema_miss_rt: f64,
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

pub struct Dac {
    cfg: CacheConfig,
    used: u64,
    /// Logical timestamp; bumped on every touch, so recency orders are
    /// total.
    clock: u64,
    entries: HashMap<Vec<u8>, Entry>,
    /// Recency order over value entries: (last_use, key).
    value_lru: BTreeSet<(u64, Vec<u8>)>,
    /// Frequency order over shortcut entries: (access_count, last_use, key);
    /// the minimum is the eviction victim (fewest hits, then oldest use).
    shortcut_lfu: BTreeSet<(u64, u64, Vec<u8>)>,
    /// In the static-split policy, bytes used by each region.
    used_value_region: u64,
    ema_miss_rt: Option<f64>,
    metrics: DacMetrics,
}

impl Dac {
    pub fn new(cfg: CacheConfig) -> Dac {
        Dac {
            cfg,
            used: 0,
            clock: 0,
            entries: HashMap::new(),
            value_lru: BTreeSet::new(),
            shortcut_lfu: BTreeSet::new(),
            used_value_region: 0,
            ema_miss_rt: None,
            metrics: DacMetrics::default(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.cfg.capacity_bytes
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<u8>> {
        self.entries.keys()
    }

    pub fn metrics(&self) -> DacMetrics {
        DacMetrics { ema_miss_rt: self.ema_miss_rt.unwrap_or(0.0), ..self.metrics.clone() }
    }

    pub fn ema_miss_rt(&self) -> f64 {
        self.ema_miss_rt.unwrap_or(0.0)
    }

    fn free(&self) -> u64 {
        // Saturating: demoting a value smaller than a shortcut grows `used`
        // past the budget mid-admission; the eviction loop that follows
        // drains the overshoot before the operation returns.
        self.cfg.capacity_bytes.saturating_sub(self.used)
    }

    fn value_cost(&self, key: &[u8], value_len: u64) -> u64 {
        key.len() as u64 + self.cfg.entry_overhead + value_len
    }

    fn shortcut_cost(&self, key: &[u8]) -> u64 {
        key.len() as u64 + self.cfg.entry_overhead + self.cfg.shortcut_size
    }

    // -- order maintenance ---------------------------------------------------

    fn order_remove(&mut self, key: &[u8], e: &Entry) {
        match e.form {
            Form::Value { .. } => {
                self.value_lru.remove(&(e.last_use, key.to_vec()));
            }
            Form::Shortcut { .. } => {
                self.shortcut_lfu.remove(&(e.access_count, e.last_use, key.to_vec()));
            }
        }
    }

    fn order_insert(&mut self, key: &[u8], e: &Entry) {
        match e.form {
            Form::Value { .. } => {
                self.value_lru.insert((e.last_use, key.to_vec()));
            }
            Form::Shortcut { .. } => {
                self.shortcut_lfu.insert((e.access_count, e.last_use, key.to_vec()));
            }
        }
    }

    fn check_budget(&self) {
        debug_assert!(self.used <= self.cfg.capacity_bytes, "cache byte budget exceeded");
    }

    // -- probes ---------------------------------------------------------------

    /// Probe the cache; hits bump the entry's hit count and recency. Issues
    /// no fabric operations.
    pub fn lookup(&mut self, key: &[u8]) -> Lookup {
        self.clock += 1;
        let now = self.clock;
        let Some(mut e) = self.entries.remove(key) else {
            self.metrics.misses += 1;
            return Lookup::Miss;
        };
        self.order_remove(key, &e);
        e.access_count += 1;
        e.last_use = now;
        let out = match &e.form {
            Form::Value { bytes, .. } => {
                self.metrics.hits_value += 1;
                Lookup::HitValue(bytes.clone())
            }
            Form::Shortcut { value_addr, value_len } => {
                self.metrics.hits_shortcut += 1;
                Lookup::HitShortcut { value_addr: *value_addr, value_len: *value_len }
            }
        };
        self.order_insert(key, &e);
        self.entries.insert(key.to_vec(), e);
        out
    }

    /// Feed one observed miss cost (round trips) into the moving average.
    /// The first sample initializes the average exactly.
    pub fn record_miss_cost(&mut self, rts: u64) {
        debug_assert!(rts >= 1);
        let x = rts as f64;
        self.ema_miss_rt = Some(match self.ema_miss_rt {
            None => x,
            Some(ema) => (1.0 - self.cfg.ema_alpha) * ema + self.cfg.ema_alpha * x,
        });
    }

    // -- admission -------------------------------------------------------------

    /// Install a key after a miss resolved it. `value_bytes` is the fetched
    /// value when the caller has it; without it only a shortcut can be
    /// admitted.
    pub fn admit_on_miss(
        &mut self,
        key: &[u8],
        value_addr: u64,
        value_len: u32,
        value_bytes: Option<&[u8]>,
    ) -> AdmitReport {
        debug_assert!(!self.entries.contains_key(key), "admit of a cached key");
        let report = match self.cfg.policy {
            CachePolicyKind::NoCache => {
                AdmitReport { admitted: Admitted::Bypassed, demoted: vec![], evicted: vec![] }
            }
            CachePolicyKind::Adaptive => {
                self.admit_adaptive(key, value_addr, value_len, value_bytes)
            }
            CachePolicyKind::ValueOnly => self.admit_value_lru(key, value_addr, value_bytes),
            CachePolicyKind::ShortcutOnly => self.admit_shortcut_lru(key, value_addr, value_len),
            CachePolicyKind::StaticSplit { percent } => {
                self.admit_static(key, value_addr, value_len, value_bytes, percent)
            }
        };
        self.check_budget();
        report
    }

    fn insert_entry(&mut self, key: &[u8], form: Form, charged: u64) {
        self.clock += 1;
        let e = Entry { form, access_count: 1, last_use: self.clock, charged };
        self.used += charged;
        if matches!(e.form, Form::Value { .. }) && self.is_static() {
            self.used_value_region += charged;
        }
        self.order_insert(key, &e);
        self.entries.insert(key.to_vec(), e);
    }

    fn is_static(&self) -> bool {
        matches!(self.cfg.policy, CachePolicyKind::StaticSplit { .. })
    }

    fn admit_adaptive(
        &mut self,
        key: &[u8],
        value_addr: u64,
        value_len: u32,
        value_bytes: Option<&[u8]>,
    ) -> AdmitReport {
        if let Some(bytes) = value_bytes {
            let vcost = self.value_cost(key, bytes.len() as u64);
            if self.free() >= vcost {
                self.insert_entry(
                    key,
                    Form::Value { bytes: bytes.to_vec(), value_addr },
                    vcost,
                );
                return AdmitReport { admitted: Admitted::Value, demoted: vec![], evicted: vec![] };
            }
        }
        let scost = self.shortcut_cost(key);
        if scost > self.cfg.capacity_bytes {
            return AdmitReport { admitted: Admitted::Bypassed, demoted: vec![], evicted: vec![] };
        }
        let mut demoted = Vec::new();
        while self.free() < scost {
            let Some(victim) = self.value_lru.iter().next().map(|(_, k)| k.clone()) else { break };
            self.demote(&victim);
            demoted.push(victim);
        }
        let mut evicted = Vec::new();
        while self.free() < scost {
            let victim = self
                .shortcut_lfu
                .iter()
                .next()
                .map(|(_, _, k)| k.clone())
                .expect("budget math: something must be evictable");
            self.evict(&victim);
            evicted.push(victim);
        }
        self.insert_entry(key, Form::Shortcut { value_addr, value_len }, scost);
        AdmitReport { admitted: Admitted::Shortcut, demoted, evicted }
    }

    fn admit_value_lru(
        &mut self,
        key: &[u8],
        value_addr: u64,
        value_bytes: Option<&[u8]>,
    ) -> AdmitReport {
        let Some(bytes) = value_bytes else {
            return AdmitReport { admitted: Admitted::Bypassed, demoted: vec![], evicted: vec![] };
        };
        let vcost = self.value_cost(key, bytes.len() as u64);
        if vcost > self.cfg.capacity_bytes {
            return AdmitReport { admitted: Admitted::Bypassed, demoted: vec![], evicted: vec![] };
        }
        let mut evicted = Vec::new();
        while self.free() < vcost {
            let victim =
                self.value_lru.iter().next().map(|(_, k)| k.clone()).expect("values evictable");
            self.evict(&victim);
            evicted.push(victim);
        }
        self.insert_entry(key, Form::Value { bytes: bytes.to_vec(), value_addr }, vcost);
        AdmitReport { admitted: Admitted::Value, demoted: vec![], evicted }
    }

    fn admit_shortcut_lru(&mut self, key: &[u8], value_addr: u64, value_len: u32) -> AdmitReport {
        let scost = self.shortcut_cost(key);
        if scost > self.cfg.capacity_bytes {
            return AdmitReport { admitted: Admitted::Bypassed, demoted: vec![], evicted: vec![] };
        }
        let mut evicted = Vec::new();
        while self.free() < scost {
            // Recency eviction for this baseline: oldest use among
            // shortcuts, regardless of count.
            let victim = self
                .shortcut_lfu
                .iter()
                .min_by_key(|(_, lu, _)| *lu)
                .map(|(_, _, k)| k.clone())
                .expect("shortcuts evictable");
            self.evict(&victim);
            evicted.push(victim);
        }
        self.insert_entry(key, Form::Shortcut { value_addr, value_len }, scost);
        AdmitReport { admitted: Admitted::Shortcut, demoted: vec![], evicted }
    }

    fn admit_static(
        &mut self,
        key: &[u8],
        value_addr: u64,
        value_len: u32,
        value_bytes: Option<&[u8]>,
        percent: u8,
    ) -> AdmitReport {
        let value_budget = self.cfg.capacity_bytes * percent as u64 / 100;
        let shortcut_budget = self.cfg.capacity_bytes - value_budget;
        let mut demoted = Vec::new();
        if let Some(bytes) = value_bytes {
            let vcost = self.value_cost(key, bytes.len() as u64);
            if vcost <= value_budget {
                // Make room inside the value region; displaced values fall
                // into the shortcut region.
                while self.used_value_region + vcost > value_budget {
                    let victim = self
                        .value_lru
                        .iter()
                        .next()
                        .map(|(_, k)| k.clone())
                        .expect("value region occupied");
                    self.demote(&victim);
                    demoted.push(victim);
                }
                let mut evicted = Vec::new();
                self.shrink_static_shortcut_region(shortcut_budget, 0, &mut evicted);
                self.insert_entry(key, Form::Value { bytes: bytes.to_vec(), value_addr }, vcost);
                return AdmitReport { admitted: Admitted::Value, demoted, evicted };
            }
        }
        let scost = self.shortcut_cost(key);
        if scost > shortcut_budget {
            return AdmitReport { admitted: Admitted::Bypassed, demoted, evicted: vec![] };
        }
        let mut evicted = Vec::new();
        self.shrink_static_shortcut_region(shortcut_budget, scost, &mut evicted);
        self.insert_entry(key, Form::Shortcut { value_addr, value_len }, scost);
        AdmitReport { admitted: Admitted::Shortcut, demoted, evicted }
    }

    /// Evict oldest-use shortcuts until the shortcut region fits its budget
    /// with `incoming` more bytes.
    fn shrink_static_shortcut_region(
        &mut self,
        shortcut_budget: u64,
        incoming: u64,
        evicted: &mut Vec<Vec<u8>>,
    ) {
        loop {
            let shortcut_used = self.used - self.used_value_region;
            if shortcut_used + incoming <= shortcut_budget {
                return;
            }
            let victim = self
                .shortcut_lfu
                .iter()
                .min_by_key(|(_, lu, _)| *lu)
                .map(|(_, _, k)| k.clone())
                .expect("shortcut region occupied");
            self.evict(&victim);
            evicted.push(victim);
        }
    }

    // -- promotion / demotion ---------------------------------------------------

    /// Evaluate the promotion rule for a shortcut that just hit. The evict
    /// set is the fewest-hits-first run of other shortcuts whose bytes
    /// (with current free space and the promoted entry's own shortcut
    /// bytes) cover the value form. Promotion is worth it when the round
    /// trips the promoted entry saves (one per hit) outweigh the expected
    /// re-fetch cost of the evicted shortcuts.
    pub fn consider_promotion(&self, key: &[u8]) -> PromotionDecision {
        if !matches!(self.cfg.policy, CachePolicyKind::Adaptive) {
            return PromotionDecision::Keep; // fixed-composition policies never promote
        }
        let Some(e) = self.entries.get(key) else { return PromotionDecision::Keep };
        let Form::Shortcut { value_len, .. } = e.form else { return PromotionDecision::Keep };
        let vcost = self.value_cost(key, value_len as u64);
        if vcost > self.cfg.capacity_bytes {
            return PromotionDecision::Keep;
        }
        let mut available = self.free() + e.charged;
        let mut evict = Vec::new();
        let mut evicted_hits = 0u64;
        for (count, _, k) in self.shortcut_lfu.iter() {
            if available >= vcost {
                break;
            }
            if k == key {
                continue;
            }
            available += self.entries[k].charged;
            evicted_hits += count;
            evict.push(k.clone());
        }
        if available < vcost {
            return PromotionDecision::Keep; // shortcuts alone cannot make room
        }
        let saved = e.access_count as f64; // one round trip per hit
        let cost = evicted_hits as f64 * self.ema_miss_rt.unwrap_or(0.0);
        if saved >= cost {
            PromotionDecision::Promote { evict }
        } else {
            PromotionDecision::Keep
        }
    }

    /// Turn a shortcut into a value entry using bytes the caller fetched,
    /// evicting the set chosen by `consider_promotion`. Hit counts carry
    /// over.
    pub fn complete_promotion(&mut self, key: &[u8], value_bytes: &[u8], evict: &[Vec<u8>]) {
        for k in evict {
            self.evict(k);
        }
        let Some(mut e) = self.entries.remove(key) else { return };
        self.order_remove(key, &e);
        self.used -= e.charged;
        let Form::Shortcut { value_addr, .. } = e.form else {
            unreachable!("promotion of a non-shortcut")
        };
        e.charged = self.value_cost(key, value_bytes.len() as u64);
        e.form = Form::Value { bytes: value_bytes.to_vec(), value_addr };
        self.used += e.charged;
        if self.is_static() {
            self.used_value_region += e.charged;
        }
        self.order_insert(key, &e);
        self.entries.insert(key.to_vec(), e);
        self.metrics.promotions += 1;
        self.check_budget();
    }

    /// Convert a value entry to shortcut form in place; the shortcut points
    /// where the value bytes live in the pool. Hit counts carry over.
    fn demote(&mut self, key: &[u8]) {
        let Some(mut e) = self.entries.remove(key) else { return };
        self.order_remove(key, &e);
        self.used -= e.charged;
        if self.is_static() {
            self.used_value_region -= e.charged;
        }
        let Form::Value { bytes, value_addr } = &e.form else {
            unreachable!("demotion of a non-value")
        };
        let value_len = bytes.len() as u32;
        e.form = Form::Shortcut { value_addr: *value_addr, value_len };
        e.charged = self.shortcut_cost(key);
        self.used += e.charged;
        self.order_insert(key, &e);
        self.entries.insert(key.to_vec(), e);
        self.metrics.demotions += 1;
    }

    fn evict(&mut self, key: &[u8]) {
        if let Some(e) = self.entries.remove(key) {
            self.order_remove(key, &e);
            self.used -= e.charged;
            if self.is_static() && matches!(e.form, Form::Value { .. }) {
                self.used_value_region -= e.charged;
            }
            self.metrics.evictions += 1;
        }
    }

    // -- writes and invalidation -------------------------------------------------

    /// Reflect a locally performed write: a cached value entry gets the new
    /// bytes, a cached shortcut is repointed at the new location. Costs no
    /// fabric ops (the writer knows both). Uncached keys stay uncached.
    pub fn on_local_put(&mut self, key: &[u8], value_addr: u64, value_bytes: &[u8]) {
        let Some(mut e) = self.entries.remove(key) else { return };
        self.order_remove(key, &e);
        match &mut e.form {
            Form::Value { bytes, value_addr: addr } => {
                self.used -= e.charged;
                if self.is_static() {
                    self.used_value_region -= e.charged;
                }
                *bytes = value_bytes.to_vec();
                *addr = value_addr;
                e.charged = key.len() as u64 + self.cfg.entry_overhead + value_bytes.len() as u64;
                self.used += e.charged;
                if self.is_static() {
                    self.used_value_region += e.charged;
                }
            }
            Form::Shortcut { value_addr: addr, value_len } => {
                *addr = value_addr;
                *value_len = value_bytes.len() as u32;
            }
        }
        self.order_insert(key, &e);
        self.entries.insert(key.to_vec(), e);
        // A size-growing update may overshoot; shed coldest entries.
        let mut guard = 0;
        while self.used > self.cfg.capacity_bytes {
            guard += 1;
            assert!(guard < 1_000_000, "eviction loop stuck");
            let victim = self
                .value_lru
                .iter()
                .next()
                .map(|(_, k)| k.clone())
                .filter(|k| k.as_slice() != key)
                .or_else(|| {
                    self.shortcut_lfu
                        .iter()
                        .map(|(_, _, k)| k.clone())
                        .find(|k| k.as_slice() != key)
                });
            match victim {
                Some(v) => self.evict(&v),
                None => {
                    // Only the updated key remains and it no longer fits.
                    self.evict(&key.to_vec());
                    break;
                }
            }
        }
        self.check_budget();
    }

    /// Drop one key (no-op when absent).
    pub fn invalidate(&mut self, key: &[u8]) {
        if let Some(e) = self.entries.remove(key) {
            self.order_remove(key, &e);
            self.used -= e.charged;
            if self.is_static() && matches!(e.form, Form::Value { .. }) {
                self.used_value_region -= e.charged;
            }
        }
    }

    /// Drop everything (ownership handoff).
    pub fn clear(&mut self) {
        self.entries.clear();
        self.value_lru.clear();
        self.shortcut_lfu.clear();
        self.used = 0;
        self.used_value_region = 0;
    }

    // -- introspection (tests/oracles) --------------------------------------------

    #[cfg(test)]
    fn access_count(&self, key: &[u8]) -> Option<u64> {
        self.entries.get(key).map(|e| e.access_count)
    }

    pub fn is_value_entry(&self, key: &[u8]) -> Option<bool> {
        self.entries.get(key).map(|e| matches!(e.form, Form::Value { .. }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(capacity: u64, policy: CachePolicyKind) -> CacheConfig {
        CacheConfig {
            capacity_bytes: capacity,
            entry_overhead: 32,
            shortcut_size: 16,
            ema_alpha: 0.1,
            policy,
        }
    }

    fn key(i: usize) -> Vec<u8> {
        format!("key{i:03}").into_bytes() // 6 bytes
    }

    const KEY_LEN: u64 = 6;
    const VCOST_100: u64 = KEY_LEN + 32 + 100; // 138
    const SCOST: u64 = KEY_LEN + 32 + 16; // 54

    #[test]
    fn empty_cache_misses() {
        let mut d = Dac::new(cfg(4096, CachePolicyKind::Adaptive));
        assert_eq!(d.lookup(b"anything"), Lookup::Miss);
        assert_eq!(d.metrics().misses, 1);
    }

    #[test]
    fn first_admission_with_room_caches_the_value() {
        let mut d = Dac::new(cfg(4096, CachePolicyKind::Adaptive));
        let r = d.admit_on_miss(&key(0), 1000, 100, Some(&[7u8; 100]));
        assert_eq!(r.admitted, Admitted::Value);
        assert_eq!(d.lookup(&key(0)), Lookup::HitValue(vec![7u8; 100]));
        assert_eq!(d.used(), VCOST_100);
    }

    #[test]
    fn hits_bump_access_count() {
        let mut d = Dac::new(cfg(4096, CachePolicyKind::Adaptive));
        d.admit_on_miss(&key(0), 1000, 100, Some(&[1u8; 100]));
        assert_eq!(d.access_count(&key(0)), Some(1));
        d.lookup(&key(0));
        assert_eq!(d.access_count(&key(0)), Some(2));
        d.lookup(&key(0));
        assert_eq!(d.access_count(&key(0)), Some(3));
    }

    #[test]
    fn full_value_cache_demotes_exactly_enough_lru_values() {
        // Capacity fits exactly three 100-byte value entries.
        let mut d = Dac::new(cfg(3 * VCOST_100, CachePolicyKind::Adaptive));
        for i in 0..3 {
            assert_eq!(
                d.admit_on_miss(&key(i), 1000 + i as u64, 100, Some(&[i as u8; 100])).admitted,
                Admitted::Value
            );
        }
        // Touch 0 and 1 so key 2 is the least recently used.
        d.lookup(&key(0));
        d.lookup(&key(1));
        let r = d.admit_on_miss(&key(3), 4000, 100, Some(&[3u8; 100]));
        assert_eq!(r.admitted, Admitted::Shortcut);
        // One demotion frees 138 - 54 = 84 bytes ≥ the 54-byte shortcut.
        assert_eq!(r.demoted, vec![key(2)]);
        assert!(r.evicted.is_empty());
        assert!(d.used() <= d.capacity());
        assert_eq!(
            d.lookup(&key(2)),
            Lookup::HitShortcut { value_addr: 1002, value_len: 100 },
            "demoted entry keeps the address its value was fetched from"
        );
    }

    #[test]
    fn full_shortcut_cache_evicts_fewest_hits_then_oldest() {
        let cap = 3 * SCOST;
        let mut d = Dac::new(cfg(cap, CachePolicyKind::Adaptive));
        for i in 0..3 {
            // No value bytes supplied: all enter as shortcuts.
            assert_eq!(
                d.admit_on_miss(&key(i), 1000 + i as u64, 100, None).admitted,
                Admitted::Shortcut
            );
        }
        // Counts: key0=3 hits, key1=1, key2=1; key1 older than key2.
        d.lookup(&key(0));
        d.lookup(&key(0));
        d.lookup(&key(1));
        d.lookup(&key(2));
        let r = d.admit_on_miss(&key(3), 4000, 100, None);
        assert_eq!(r.admitted, Admitted::Shortcut);
        assert_eq!(r.evicted, vec![key(1)], "minimum count, tie broken toward older use");
        assert!(d.contains(&key(0)) && d.contains(&key(2)) && d.contains(&key(3)));
    }

    #[test]
    fn oversize_entries_bypass() {
        let mut d = Dac::new(cfg(40, CachePolicyKind::Adaptive)); // smaller than one shortcut
        let r = d.admit_on_miss(&key(0), 1000, 100, Some(&[0u8; 100]));
        assert_eq!(r.admitted, Admitted::Bypassed);
        assert_eq!(d.used(), 0);
        assert_eq!(d.lookup(&key(0)), Lookup::Miss);
    }

    #[test]
    fn miss_cost_average_initializes_then_smooths() {
        let mut d = Dac::new(cfg(4096, CachePolicyKind::Adaptive));
        d.record_miss_cost(5);
        assert_eq!(d.ema_miss_rt(), 5.0);
        d.record_miss_cost(2);
        assert!((d.ema_miss_rt() - 4.7).abs() < 1e-12, "0.9*5 + 0.1*2");
        for _ in 0..2000 {
            d.record_miss_cost(3);
        }
        assert!((d.ema_miss_rt() - 3.0).abs() < 1e-9, "converges to the constant");
    }

    /// Promotion rule, evaluated exactly: saved = hits(P) × 1, cost =
    /// Σ evicted hits × average miss round trips.
    #[test]
    fn promotion_rule_boundary_cases() {
        // Geometry: capacity 4*SCOST + 20 so four shortcuts fit with 20
        // spare; promoting P to a 150-byte value (vcost 188) requires
        // evicting all three other shortcuts: 20 + 54 + 3*54 = 236 ≥ 188,
        // while any two are insufficient (20+54+108 = 182 < 188).
        let cap = 4 * SCOST + 20;
        let mut d = Dac::new(cfg(cap, CachePolicyKind::Adaptive));
        for i in 0..4 {
            d.admit_on_miss(&key(i), 1000 + i as u64, 150, None);
        }
        // Hit counts: P=key(3) gets 20; others 2, 1, 1 (admission counted 1).
        for _ in 0..19 {
            d.lookup(&key(3));
        }
        d.lookup(&key(0)); // count 2
        // key(1), key(2) stay at 1.
        d.record_miss_cost(5); // ema = 5.0
        match d.consider_promotion(&key(3)) {
            PromotionDecision::Promote { evict } => {
                // Evict set walks fewest-hits-first: counts {1,1,2} sum 4;
                // 20×1 ≥ 4×5.0 exactly.
                assert_eq!(evict.len(), 3);
                let mut sorted = evict.clone();
                sorted.sort();
                assert_eq!(sorted, vec![key(0), key(1), key(2)]);
            }
            PromotionDecision::Keep => panic!("20 ≥ 20 must promote"),
        }
        // Drop P's count to 10 by rebuilding a fresh cache with the same
        // shape: 10 < 20 keeps the shortcut.
        let mut d = Dac::new(cfg(cap, CachePolicyKind::Adaptive));
        for i in 0..4 {
            d.admit_on_miss(&key(i), 1000 + i as u64, 150, None);
        }
        for _ in 0..9 {
            d.lookup(&key(3));
        }
        d.lookup(&key(0));
        d.record_miss_cost(5);
        assert_eq!(d.consider_promotion(&key(3)), PromotionDecision::Keep);
    }

    #[test]
    fn promotion_with_free_space_has_empty_evict_set() {
        let mut d = Dac::new(cfg(4096, CachePolicyKind::Adaptive));
        d.admit_on_miss(&key(0), 1000, 64, None);
        d.lookup(&key(0));
        // No miss cost recorded; empty evict set means zero cost anyway.
        match d.consider_promotion(&key(0)) {
            PromotionDecision::Promote { evict } => assert!(evict.is_empty()),
            PromotionDecision::Keep => panic!("free space promotion is always worth it"),
        }
        d.complete_promotion(&key(0), &[9u8; 64], &[]);
        assert_eq!(d.lookup(&key(0)), Lookup::HitValue(vec![9u8; 64]));
    }

    #[test]
    fn promote_then_demote_preserves_access_count() {
        let mut d = Dac::new(cfg(4096, CachePolicyKind::Adaptive));
        d.admit_on_miss(&key(0), 1000, 64, None);
        for _ in 0..6 {
            d.lookup(&key(0));
        }
        let before = d.access_count(&key(0)).unwrap();
        d.complete_promotion(&key(0), &[1u8; 64], &[]);
        assert_eq!(d.access_count(&key(0)), Some(before), "promotion inherits the count");
        d.demote(&key(0));
        assert_eq!(d.access_count(&key(0)), Some(before), "demotion inherits the count");
        assert_eq!(
            d.lookup(&key(0)),
            Lookup::HitShortcut { value_addr: 1000, value_len: 64 },
            "round trip back to the original address"
        );
    }

    #[test]
    fn invalidate_and_clear() {
        let mut d = Dac::new(cfg(4096, CachePolicyKind::Adaptive));
        d.admit_on_miss(&key(0), 1000, 64, Some(&[1u8; 64]));
        d.admit_on_miss(&key(1), 2000, 64, None);
        d.invalidate(&key(9)); // absent: no-op
        d.invalidate(&key(0));
        assert_eq!(d.lookup(&key(0)), Lookup::Miss);
        d.clear();
        assert_eq!(d.used(), 0);
        assert_eq!(d.lookup(&key(1)), Lookup::Miss);
        assert!(d.is_empty());
    }

    #[test]
    fn local_put_updates_value_and_repoints_shortcut() {
        let mut d = Dac::new(cfg(4096, CachePolicyKind::Adaptive));
        d.admit_on_miss(&key(0), 1000, 4, Some(b"aaaa"));
        d.on_local_put(&key(0), 5000, b"bbbbbb");
        assert_eq!(d.lookup(&key(0)), Lookup::HitValue(b"bbbbbb".to_vec()));
        d.admit_on_miss(&key(1), 2000, 4, None);
        d.on_local_put(&key(1), 6000, b"cccc");
        assert_eq!(d.lookup(&key(1)), Lookup::HitShortcut { value_addr: 6000, value_len: 4 });
    }

    #[test]
    fn value_only_policy_evicts_lru_values() {
        let mut d = Dac::new(cfg(3 * VCOST_100, CachePolicyKind::ValueOnly));
        for i in 0..3 {
            d.admit_on_miss(&key(i), 1000, 100, Some(&[i as u8; 100]));
        }
        d.lookup(&key(0));
        d.lookup(&key(1));
        let r = d.admit_on_miss(&key(3), 4000, 100, Some(&[3u8; 100]));
        assert_eq!(r.admitted, Admitted::Value);
        assert_eq!(r.evicted, vec![key(2)]);
        assert_eq!(d.lookup(&key(2)), Lookup::Miss, "no demotion in this baseline");
    }

    #[test]
    fn shortcut_only_policy_never_caches_values() {
        let mut d = Dac::new(cfg(2 * SCOST, CachePolicyKind::ShortcutOnly));
        let r = d.admit_on_miss(&key(0), 1000, 100, Some(&[0u8; 100]));
        assert_eq!(r.admitted, Admitted::Shortcut);
        d.admit_on_miss(&key(1), 2000, 100, None);
        d.lookup(&key(0)); // refresh recency; key(1) now oldest
        let r = d.admit_on_miss(&key(2), 3000, 100, None);
        assert_eq!(r.evicted, vec![key(1)], "recency eviction in this baseline");
    }

    #[test]
    fn no_cache_policy_bypasses_everything() {
        let mut d = Dac::new(cfg(1 << 20, CachePolicyKind::NoCache));
        let r = d.admit_on_miss(&key(0), 1000, 100, Some(&[0u8; 100]));
        assert_eq!(r.admitted, Admitted::Bypassed);
        assert_eq!(d.lookup(&key(0)), Lookup::Miss);
        assert_eq!(d.used(), 0);
    }

    #[test]
    fn static_split_respects_region_budgets() {
        // 50%: value region 500 bytes (fits 3 × 138), shortcut region 500
        // (fits 9 × 54).
        let mut d = Dac::new(cfg(1000, CachePolicyKind::StaticSplit { percent: 50 }));
        for i in 0..4 {
            let r = d.admit_on_miss(&key(i), 1000 + i as u64, 100, Some(&[i as u8; 100]));
            assert_eq!(r.admitted, Admitted::Value);
        }
        // The fourth admission displaced the LRU value into the shortcut
        // region.
        assert_eq!(d.is_value_entry(&key(0)), Some(false));
        assert_eq!(d.is_value_entry(&key(3)), Some(true));
        assert!(d.used() <= d.capacity());
        let m = d.metrics();
        assert_eq!(m.demotions, 1);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        /// Arbitrary op sequences never overrun the byte budget, and the
        /// byte ledger always equals the sum of per-entry charges.
        #[test]
        fn budget_holds_for_any_ops(
            ops in proptest::collection::vec(
                (0usize..24, 1u32..200, proptest::bool::ANY, 0u8..4), 1..400),
            capacity in 256u64..4096,
        ) {
            let mut d = Dac::new(cfg(capacity, CachePolicyKind::Adaptive));
            for (i, (kidx, vlen, flag, action)) in ops.into_iter().enumerate() {
                let k = key(kidx);
                match action {
                    0 => {
                        if let Lookup::Miss = d.lookup(&k) {
                            d.record_miss_cost(3);
                            let bytes = vec![i as u8; vlen as usize];
                            d.admit_on_miss(&k, i as u64, vlen, flag.then_some(bytes.as_slice()));
                        }
                    }
                    1 => {
                        if let Lookup::HitShortcut { value_len, .. } = d.lookup(&k) {
                            if let PromotionDecision::Promote { evict } = d.consider_promotion(&k) {
                                d.complete_promotion(&k, &vec![i as u8; value_len as usize], &evict);
                            }
                        }
                    }
                    2 => d.on_local_put(&k, i as u64, &vec![i as u8; vlen as usize]),
                    _ => d.invalidate(&k),
                }
                proptest::prop_assert!(d.used() <= d.capacity());
                let tracked: u64 = d.entries.values().map(|e| e.charged).sum();
                proptest::prop_assert_eq!(tracked, d.used());
            }
        }
    }

    /// Replay oracle: a long random mixed workload keeps every structural
    /// invariant — budget, order-set consistency, eviction minimality.
    #[test]
    fn random_workload_holds_invariants() {
        use crate::hash::SplitMix64;
        for seed in [3u64, 17, 40] {
            for policy in [
                CachePolicyKind::Adaptive,
                CachePolicyKind::ValueOnly,
                CachePolicyKind::ShortcutOnly,
                CachePolicyKind::StaticSplit { percent: 40 },
            ] {
                let mut rng = SplitMix64::new(seed).fork("dac-fuzz");
                let mut d = Dac::new(cfg(2048, policy));
                for step in 0..4000 {
                    let k = key(rng.next_below(40) as usize);
                    match d.lookup(&k) {
                        Lookup::Miss => {
                            let vlen = 16 + rng.next_below(120) as usize;
                            let with_bytes = rng.next_bool();
                            let bytes = vec![step as u8; vlen];
                            d.record_miss_cost(2 + rng.next_below(5));
                            d.admit_on_miss(
                                &k,
                                step,
                                vlen as u32,
                                with_bytes.then_some(bytes.as_slice()),
                            );
                        }
                        Lookup::HitShortcut { value_len, .. } => {
                            if let PromotionDecision::Promote { evict } = d.consider_promotion(&k)
                            {
                                let bytes = vec![step as u8; value_len as usize];
                                d.complete_promotion(&k, &bytes, &evict);
                            }
                        }
                        Lookup::HitValue(_) => {}
                    }
                    assert!(d.used() <= d.capacity(), "budget at step {step}");
                    let tracked: u64 = d.entries.values().map(|e| e.charged).sum();
                    assert_eq!(tracked, d.used(), "byte accounting at step {step}");
                    assert_eq!(
                        d.value_lru.len() + d.shortcut_lfu.len(),
                        d.entries.len(),
                        "order sets cover entries at step {step}"
                    );
                }
            }
        }
    }
}
