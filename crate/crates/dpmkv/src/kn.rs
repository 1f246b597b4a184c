//! KVS node: the compute front of the store. Holds no durable state — every
//! op bottoms out in one-sided fabric ops against the shared pool, so any
//! node can take over any partition after a merge.
//!
//! Layout of a node:
//!   - fixed worker tasks, each owning a shard of the per-node cache; client
//!     requests hash to a worker by key, so one key is always served by one
//!     worker (no cross-worker cache races);
//!   - a write hub task owning the batch log: appends accumulate in an open
//!     segment and flush on a byte threshold or a deadline, acks release at
//!     flush completion, sealed segments are handed to the pool for merging
//!     with a bounded number outstanding (back-pressure);
//!   - a serialized direct log for keys with more than one owner: those
//!     writes go out-of-place immediately and publish by CAS on the key's
//!     indirection cell, so peers' next cell walk observes them.
//!
//! Caching rules keep correctness local: single-owner keys may cache full
//! values (nobody else writes them); multi-owner keys cache at most a
//! shortcut to the indirection cell, and every read walks the cell, so a
//! peer's publish is never shadowed. Flushed-but-unmerged entries are served
//! from a node-local copy of the open segment, which both preserves
//! read-your-writes and keeps half-merged state out of remote view.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::rc::Rc;

use crate::config::{CacheConfig, WriteConfig};
use crate::dac::{Admitted, Dac, DacMetrics, Lookup, PromotionDecision};
use crate::dpm::layout::{decode_entry, encode_entry, entry_len, EntryKind, Layout, ENTRY_HEADER};
use crate::dpm::{index_lookup, DpmRef, LookupOutcome};
use crate::fabric::{Mailbox, NodeCtx, NodeId, ReplyHandle, RpcRequest, RtCategory, Sim};
use crate::hash::hash64_salted;
use crate::routing::Membership;
use crate::wire::{
    from_json, to_json, DataReq, DataResp, DpmMsg, DpmResp, KnCtl, KnCtlResp, KnStatsWire,
};

// ---------------------------------------------------------------------------
// Local view of flushed-but-unmerged segments
// ---------------------------------------------------------------------------

const BLOOM_BITS: u64 = 8192;
const BLOOM_HASHES: u64 = 3;

/// Per-segment key filter. A negative probe skips the segment outright; a
/// positive falls through to an exact map, so false positives only cost
/// local work, never a fabric op.
struct Bloom {
    bits: Vec<u64>,
}

impl Bloom {
    fn new() -> Bloom {
        Bloom { bits: vec![0; (BLOOM_BITS / 64) as usize] }
    }

    fn insert(&mut self, key: &[u8]) {
        for i in 0..BLOOM_HASHES {
            let b = hash64_salted(i, key) % BLOOM_BITS;
            self.bits[(b / 64) as usize] |= 1 << (b % 64);
        }
    }

    fn may_contain(&self, key: &[u8]) -> bool {
        (0..BLOOM_HASHES).all(|i| {
            let b = hash64_salted(i, key) % BLOOM_BITS;
            self.bits[(b / 64) as usize] >> (b % 64) & 1 == 1
        })
    }
}

/// Node-local copy of the flushed region of one own batch segment. Answers
/// reads for entries the pool has not merged yet; dropped when the merge
/// completes and the shared index takes over.
struct LocalSeg {
    bloom: Bloom,
    /// key -> (seq, kind, value); later flushes overwrite earlier ones, which
    /// matches append order because sequence numbers grow per node.
    entries: HashMap<Vec<u8>, (u64, EntryKind, Vec<u8>)>,
}

impl LocalSeg {
    fn new() -> LocalSeg {
        LocalSeg { bloom: Bloom::new(), entries: HashMap::new() }
    }
}

/// Log bookkeeping shared between the hub, the direct log, and the RPC
/// handler (merge notifications land there).
struct LogShared {
    threshold: usize,
    sealed_unmerged: BTreeSet<u64>,
    peak_unmerged: usize,
    /// Own batch segments, open and sealed, until their merge completes.
    local_segs: BTreeMap<u64, LocalSeg>,
    /// Entry addresses our CAS publishes superseded; reported to the pool
    /// with the next seal (or a standalone reconcile at handoff).
    pending_invalidated: Vec<u64>,
    merge_waiters: Vec<Mailbox<()>>,
    next_seq: u64,
}

impl LogShared {
    /// Sequence numbers order entries for the same key at merge time. The
    /// clock forms the high bits so that writes separated by an ownership
    /// transfer (which spans many time units) stay ordered even across
    /// nodes; the low bits keep same-instant local appends strictly
    /// increasing.
    fn alloc_seq(&mut self, now: u64) -> u64 {
        let s = (now << 10).max(self.next_seq + 1);
        self.next_seq = s;
        s
    }

    fn note_sealed(&mut self, base: u64) {
        self.sealed_unmerged.insert(base);
        self.peak_unmerged = self.peak_unmerged.max(self.sealed_unmerged.len());
    }

    fn on_merge_done(&mut self, base: u64) {
        self.sealed_unmerged.remove(&base);
        self.local_segs.remove(&base);
        for w in self.merge_waiters.drain(..) {
            w.push(());
        }
    }

    /// Newest locally flushed entry for `key` across all unmerged segments.
    fn probe(&self, key: &[u8]) -> Option<(u64, EntryKind, Vec<u8>)> {
        let mut best: Option<(u64, EntryKind, Vec<u8>)> = None;
        for seg in self.local_segs.values() {
            if !seg.bloom.may_contain(key) {
                continue;
            }
            if let Some(e) = seg.entries.get(key) {
                if best.as_ref().is_none_or(|b| e.0 > b.0) {
                    best = Some(e.clone());
                }
            }
        }
        best
    }
}

/// Block until fewer than `threshold` own segments await merging. Woken by
/// the RPC handler when a merge notification arrives.
async fn wait_merge_capacity(inner: &KnInner) {
    loop {
        let waiter = {
            let mut s = inner.shared.borrow_mut();
            if s.sealed_unmerged.len() < s.threshold {
                return;
            }
            let mb = Mailbox::new(&inner.sim);
            s.merge_waiters.push(mb.clone());
            mb
        };
        waiter.recv().await;
    }
}

// ---------------------------------------------------------------------------
// Write hub: the batch log
// ---------------------------------------------------------------------------

enum HubJob {
    Append { key: Vec<u8>, value: Vec<u8>, kind: EntryKind, ack: Mailbox<()> },
    /// Deadline for the batch that was open when it was armed; ignored if
    /// that batch already flushed.
    Deadline { batch_id: u64 },
    /// Flush and seal everything open, then wait until the pool has merged
    /// all segments sealed so far; reports how many that was.
    Drain { done: Mailbox<u64> },
}

struct PendingEntry {
    key: Vec<u8>,
    value: Vec<u8>,
    kind: EntryKind,
    seq: u64,
    entry_off: u64,
    ack: Mailbox<()>,
}

struct HubState {
    seg: Option<u64>,
    write_off: u64,
    flushed_off: u64,
    prealloc: Option<u64>,
    batch: Vec<PendingEntry>,
    batch_bytes: Vec<u8>,
    batch_id: u64,
}

async fn hub_task(inner: Rc<KnInner>, ctx: NodeCtx, jobs: Mailbox<HubJob>) {
    let mut st = HubState {
        seg: None,
        write_off: 0,
        flushed_off: 0,
        prealloc: None,
        batch: Vec::new(),
        batch_bytes: Vec::new(),
        batch_id: 0,
    };
    loop {
        match jobs.recv().await {
            HubJob::Append { key, value, kind, ack } => {
                let len = entry_len(key.len() as u64, value.len() as u64);
                if st.seg.is_none() || st.write_off + len > inner.lay.segment_capacity {
                    rollover(&inner, &ctx, &mut st).await;
                }
                let seq = inner.shared.borrow_mut().alloc_seq(ctx.now());
                let bytes = encode_entry(&key, &value, kind, seq);
                let entry_off = st.write_off;
                st.write_off += len;
                if st.batch.is_empty() {
                    arm_deadline(&inner, &ctx, &jobs, st.batch_id);
                }
                st.batch_bytes.extend_from_slice(&bytes);
                st.batch.push(PendingEntry { key, value, kind, seq, entry_off, ack });
                if st.write_off - st.flushed_off >= inner.write.flush_bytes {
                    flush_batch(&inner, &ctx, &mut st).await;
                }
            }
            HubJob::Deadline { batch_id } => {
                if batch_id == st.batch_id && !st.batch.is_empty() {
                    flush_batch(&inner, &ctx, &mut st).await;
                }
            }
            HubJob::Drain { done } => {
                let segments = drain_logs(&inner, &ctx, &mut st).await;
                done.push(segments);
            }
        }
    }
}

fn arm_deadline(inner: &KnInner, ctx: &NodeCtx, jobs: &Mailbox<HubJob>, batch_id: u64) {
    let jobs = jobs.clone();
    let delay = inner.write.flush_max_delay;
    let ctx2 = NodeCtx::new(&inner.sim, inner.me);
    let _ = ctx;
    inner.sim.spawn(inner.me, async move {
        ctx2.sleep_units(delay).await;
        jobs.push(HubJob::Deadline { batch_id });
    });
}

/// Write the open batch to the segment, mirror it into the local view,
/// update worker caches in append order, and release the acks. This is the
/// commit point of a batched write: nothing is visible (or acknowledged)
/// before the flush returns.
async fn flush_batch(inner: &KnInner, ctx: &NodeCtx, st: &mut HubState) {
    if st.batch.is_empty() {
        return;
    }
    let base = st.seg.expect("batch without a segment");
    ctx.step(1).await;
    inner.busy_add(inner.step_unit);
    let data = std::mem::take(&mut st.batch_bytes);
    ctx.write(base + st.flushed_off, data, RtCategory::WriteFlush).await.expect("batch flush");
    let batch = std::mem::take(&mut st.batch);
    {
        let mut s = inner.shared.borrow_mut();
        let seg = s.local_segs.get_mut(&base).expect("local view of open segment");
        for e in &batch {
            seg.bloom.insert(&e.key);
            seg.entries.insert(e.key.clone(), (e.seq, e.kind, e.value.clone()));
        }
    }
    for e in &batch {
        let wk = inner.worker_of(&e.key);
        let mut dac = inner.dacs[wk].borrow_mut();
        match e.kind {
            EntryKind::Put => {
                let value_addr = base + e.entry_off + ENTRY_HEADER + e.key.len() as u64;
                dac.on_local_put(&e.key, value_addr, &e.value);
            }
            EntryKind::Delete => dac.invalidate(&e.key),
            _ => unreachable!("direct entry in the batch log"),
        }
    }
    st.flushed_off = st.write_off;
    st.batch_id += 1;
    for e in batch {
        e.ack.push(());
    }
}

/// Flush, seal the current segment (waiting out back-pressure), and open a
/// fresh one.
async fn rollover(inner: &KnInner, ctx: &NodeCtx, st: &mut HubState) {
    flush_batch(inner, ctx, st).await;
    if let Some(base) = st.seg.take() {
        debug_assert!(st.flushed_off > 0, "rolled an empty segment");
        let got = seal_segment(inner, ctx, base, st.prealloc.is_none()).await;
        st.prealloc = st.prealloc.take().or(got);
    }
    let base = match st.prealloc.take() {
        Some(b) => b,
        None => alloc_segment(inner, ctx).await,
    };
    inner.shared.borrow_mut().local_segs.insert(base, LocalSeg::new());
    st.seg = Some(base);
    st.write_off = 0;
    st.flushed_off = 0;
}

/// Seal `base` at the pool, piggybacking accumulated invalidation reports
/// and optionally asking for the next segment in the same round trip. The
/// segment is recorded as un-merged *before* the call so a merge completion
/// racing the reply can never be missed.
async fn seal_segment(inner: &KnInner, ctx: &NodeCtx, base: u64, want_prealloc: bool) -> Option<u64> {
    wait_merge_capacity(inner).await;
    let invalidated = {
        let mut s = inner.shared.borrow_mut();
        s.note_sealed(base);
        std::mem::take(&mut s.pending_invalidated)
    };
    let msg = DpmMsg::EnqueueMerge { seg_base: base, invalidated, want_prealloc };
    let resp = ctx.rpc(inner.dpm, to_json(&msg)).await.expect("pool unreachable");
    match from_json::<DpmResp>(&resp) {
        Some(DpmResp::Enqueued { prealloc }) => prealloc,
        other => panic!("seal rejected: {other:?}"),
    }
}

async fn alloc_segment(inner: &KnInner, ctx: &NodeCtx) -> u64 {
    let resp = ctx.rpc(inner.dpm, to_json(&DpmMsg::AllocSegment)).await.expect("pool unreachable");
    match from_json::<DpmResp>(&resp) {
        Some(DpmResp::Segment { base }) => base,
        other => panic!("segment allocation failed: {other:?}"),
    }
}

/// Handoff half of the hub: push every pending write to the pool and wait
/// until everything sealed so far (batch and direct) is merged. New appends
/// queue behind this job and resume afterwards.
async fn drain_logs(inner: &KnInner, ctx: &NodeCtx, st: &mut HubState) -> u64 {
    flush_batch(inner, ctx, st).await;
    let mut waiting: BTreeSet<u64> = inner.shared.borrow().sealed_unmerged.clone();
    if let Some(base) = st.seg {
        if st.flushed_off > 0 {
            st.seg = None;
            st.write_off = 0;
            st.flushed_off = 0;
            seal_segment(inner, ctx, base, false).await;
            waiting.insert(base);
        }
    }
    direct_lock(inner).await;
    let open_direct = {
        let mut d = inner.direct.borrow_mut();
        if d.write_off > 0 {
            d.write_off = 0;
            d.seg.take()
        } else {
            None
        }
    };
    if let Some(base) = open_direct {
        seal_segment(inner, ctx, base, false).await;
        waiting.insert(base);
    }
    direct_unlock(inner);
    let leftovers = std::mem::take(&mut inner.shared.borrow_mut().pending_invalidated);
    if !leftovers.is_empty() {
        let resp = ctx
            .rpc(inner.dpm, to_json(&DpmMsg::Reconcile { invalidated: leftovers }))
            .await
            .expect("pool unreachable");
        debug_assert!(matches!(from_json::<DpmResp>(&resp), Some(DpmResp::Reconciled)));
    }
    loop {
        let waiter = {
            let mut s = inner.shared.borrow_mut();
            if waiting.iter().all(|b| !s.sealed_unmerged.contains(b)) {
                None
            } else {
                let mb = Mailbox::new(&inner.sim);
                s.merge_waiters.push(mb.clone());
                Some(mb)
            }
        };
        match waiter {
            None => return waiting.len() as u64,
            Some(mb) => mb.recv().await,
        }
    }
}

// ---------------------------------------------------------------------------
// Direct log: out-of-place publishes for multi-owner keys
// ---------------------------------------------------------------------------

/// Append state for direct entries. Appends are serialized by a lock so a
/// crash can tear at most the tail of the segment — a gap below a durable
/// entry would hide it from recovery while its cell still points there.
struct DirectLog {
    seg: Option<u64>,
    write_off: u64,
    locked: bool,
    waiters: VecDeque<Mailbox<()>>,
}

async fn direct_lock(inner: &KnInner) {
    loop {
        let waiter = {
            let mut d = inner.direct.borrow_mut();
            if !d.locked {
                d.locked = true;
                return;
            }
            let mb = Mailbox::new(&inner.sim);
            d.waiters.push_back(mb.clone());
            mb
        };
        waiter.recv().await;
    }
}

fn direct_unlock(inner: &KnInner) {
    let mut d = inner.direct.borrow_mut();
    d.locked = false;
    if let Some(w) = d.waiters.pop_front() {
        w.push(());
    }
}

/// Durably write one direct entry; returns its address. One write round
/// trip in steady state (plus sealing/allocation when a segment fills).
async fn direct_append(inner: &KnInner, ctx: &NodeCtx, key: &[u8], value: &[u8], kind: EntryKind) -> u64 {
    direct_lock(inner).await;
    let len = entry_len(key.len() as u64, value.len() as u64);
    loop {
        let fits = {
            let d = inner.direct.borrow();
            d.seg.is_some_and(|_| d.write_off + len <= inner.lay.segment_capacity)
        };
        if fits {
            break;
        }
        let old = {
            let mut d = inner.direct.borrow_mut();
            d.write_off = 0;
            d.seg.take()
        };
        if let Some(base) = old {
            seal_segment(inner, ctx, base, false).await;
        }
        let base = alloc_segment(inner, ctx).await;
        let mut d = inner.direct.borrow_mut();
        d.seg = Some(base);
        d.write_off = 0;
    }
    let (base, off) = {
        let mut d = inner.direct.borrow_mut();
        let b = d.seg.expect("direct segment");
        let o = d.write_off;
        d.write_off += len;
        (b, o)
    };
    let seq = inner.shared.borrow_mut().alloc_seq(ctx.now());
    let bytes = encode_entry(key, value, kind, seq);
    ctx.write(base + off, bytes, RtCategory::WriteFlush).await.expect("direct write");
    direct_unlock(inner);
    base + off
}

/// Swing the key's indirection cell to `entry_addr`; returns the superseded
/// entry address (0 if the cell was empty). One CAS in steady state: the
/// expected word is tracked from our own publishes and cell walks, and a
/// lost race hands us the observed value for the retry.
async fn cas_publish(inner: &KnInner, ctx: &NodeCtx, cell: u64, entry_addr: u64) -> u64 {
    let mut expected = inner.cell_expect.borrow().get(&cell).copied().unwrap_or(0);
    let mut tries = 0;
    loop {
        tries += 1;
        assert!(tries < 1000, "cell publish livelock");
        let out = ctx.cas(cell, expected, entry_addr).await.expect("cell cas");
        if out.success {
            inner.cell_expect.borrow_mut().insert(cell, entry_addr);
            return expected;
        }
        expected = out.observed;
    }
}

// ---------------------------------------------------------------------------
// Per-epoch accounting
// ---------------------------------------------------------------------------

#[derive(Default, Clone, Copy)]
struct KeyStat {
    count: u64,
    lat_sum: u64,
    lat_n: u64,
}

#[derive(Default)]
struct EpochAccum {
    ops: u64,
    keys: HashMap<Vec<u8>, KeyStat>,
}

impl EpochAccum {
    fn count(&mut self, key: &[u8]) {
        self.ops += 1;
        self.keys.entry(key.to_vec()).or_default().count += 1;
    }

    fn finish(&mut self, key: &[u8], dt: u64) {
        let s = self.keys.entry(key.to_vec()).or_default();
        s.lat_sum += dt;
        s.lat_n += 1;
    }
}

// ---------------------------------------------------------------------------
// The node
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KnParams {
    pub write: WriteConfig,
    /// Node-wide cache budget; `capacity_bytes` is split evenly across the
    /// per-worker shards at spawn.
    pub cache: CacheConfig,
    /// Keys reported individually per epoch; the rest fold into a tail
    /// summary.
    pub top_k: usize,
    /// Off for the shared-everything baseline, where any node serves any
    /// key.
    pub ownership_checks: bool,
}

impl Default for KnParams {
    fn default() -> Self {
        KnParams {
            write: WriteConfig::default(),
            cache: CacheConfig::default(),
            top_k: 32,
            ownership_checks: true,
        }
    }
}

struct Work {
    req: DataReq,
    reply: ReplyHandle,
}

struct KnInner {
    sim: Sim,
    me: NodeId,
    dpm: NodeId,
    lay: Rc<Layout>,
    write: WriteConfig,
    top_k: usize,
    ownership_checks: bool,
    step_unit: u64,
    membership: RefCell<Membership>,
    /// Set between the handoff prepare and the ownership switch: keys must
    /// be owned under both views to be served.
    pending: RefCell<Option<Membership>>,
    dacs: Vec<RefCell<Dac>>,
    shared: RefCell<LogShared>,
    direct: RefCell<DirectLog>,
    /// key -> indirection cell, learned from index walks.
    cells: RefCell<HashMap<Vec<u8>, u64>>,
    /// cell -> entry address we believe it holds (CAS expectation).
    cell_expect: RefCell<HashMap<u64, u64>>,
    accum: RefCell<EpochAccum>,
    busy: Cell<u64>,
    last_collect: Cell<u64>,
    prev_cache: Cell<(u64, u64, u64)>,
    hub: Mailbox<HubJob>,
    workers_mb: Vec<Mailbox<Work>>,
}

impl KnInner {
    fn busy_add(&self, dt: u64) {
        self.busy.set(self.busy.get() + dt);
    }

    fn worker_of(&self, key: &[u8]) -> usize {
        (self.membership.borrow().worker_for(key) as usize) % self.dacs.len()
    }

    /// Ownership check for the data path. During a handoff the departing
    /// ranges are already refused, and arriving ranges are not yet accepted.
    fn owned_now(&self, key: &[u8]) -> (bool, u64) {
        let m = self.membership.borrow();
        let version = m.version;
        if !self.ownership_checks {
            return (true, version);
        }
        let mut ok = m.owns(self.me, key);
        if ok {
            if let Some(next) = self.pending.borrow().as_ref() {
                ok = next.owns(self.me, key);
            }
        }
        (ok, version)
    }

    fn replicated(&self, key: &[u8]) -> bool {
        self.membership.borrow().owner_set(key).len() > 1
    }
}

pub struct KnNode {
    pub node: NodeId,
    inner: Rc<KnInner>,
}

impl KnNode {
    /// Bring up a node that was already added to the simulation (membership
    /// construction needs the ids before the nodes can exist).
    pub fn spawn(sim: &Sim, node: NodeId, dpm: &DpmRef, initial: Membership, params: KnParams) -> KnNode {
        let workers = initial.workers_per_kn.max(1) as usize;
        let shard_cache = CacheConfig {
            capacity_bytes: (params.cache.capacity_bytes / workers as u64).max(1),
            ..params.cache.clone()
        };
        let inner = Rc::new(KnInner {
            sim: sim.clone(),
            me: node,
            dpm: dpm.node,
            lay: dpm.layout.clone(),
            write: params.write.clone(),
            top_k: params.top_k,
            ownership_checks: params.ownership_checks,
            step_unit: sim.timing().service_step,
            membership: RefCell::new(initial),
            pending: RefCell::new(None),
            dacs: (0..workers).map(|_| RefCell::new(Dac::new(shard_cache.clone()))).collect(),
            shared: RefCell::new(LogShared {
                threshold: params.write.unmerged_threshold.max(1),
                sealed_unmerged: BTreeSet::new(),
                peak_unmerged: 0,
                local_segs: BTreeMap::new(),
                pending_invalidated: Vec::new(),
                merge_waiters: Vec::new(),
                next_seq: 0,
            }),
            direct: RefCell::new(DirectLog {
                seg: None,
                write_off: 0,
                locked: false,
                waiters: VecDeque::new(),
            }),
            cells: RefCell::new(HashMap::new()),
            cell_expect: RefCell::new(HashMap::new()),
            accum: RefCell::new(EpochAccum::default()),
            busy: Cell::new(0),
            last_collect: Cell::new(sim.now()),
            prev_cache: Cell::new((0, 0, 0)),
            hub: Mailbox::new(sim),
            workers_mb: (0..workers).map(|_| Mailbox::new(sim)).collect(),
        });
        for (wk, mb) in inner.workers_mb.iter().enumerate() {
            let ctx = NodeCtx::new(sim, node);
            sim.spawn(node, worker_task(inner.clone(), ctx, wk, mb.clone()));
        }
        {
            let ctx = NodeCtx::new(sim, node);
            sim.spawn(node, hub_task(inner.clone(), ctx, inner.hub.clone()));
        }
        install_handler(&inner);
        KnNode { node, inner }
    }

    pub fn membership_version(&self) -> u64 {
        self.inner.membership.borrow().version
    }

    /// Every cached key across all workers, ascending (cross-node cache
    /// exclusivity sweeps).
    pub fn cached_keys(&self) -> Vec<Vec<u8>> {
        let mut out: Vec<Vec<u8>> = Vec::new();
        for d in &self.inner.dacs {
            out.extend(d.borrow().keys().cloned());
        }
        out.sort();
        out
    }

    /// Whether `key` is cached as a full value (`Some(true)`), a shortcut
    /// (`Some(false)`), or not at all.
    pub fn cached_value(&self, key: &[u8]) -> Option<bool> {
        self.inner.dacs[self.inner.worker_of(key)].borrow().is_value_entry(key)
    }

    /// Cache counters summed over workers.
    pub fn cache_metrics(&self) -> DacMetrics {
        let mut out = DacMetrics::default();
        let mut ema_sum = 0.0;
        for d in &self.inner.dacs {
            let m = d.borrow().metrics();
            out.hits_value += m.hits_value;
            out.hits_shortcut += m.hits_shortcut;
            out.misses += m.misses;
            out.promotions += m.promotions;
            out.demotions += m.demotions;
            out.evictions += m.evictions;
            ema_sum += m.ema_miss_rt;
        }
        out.ema_miss_rt = ema_sum / self.inner.dacs.len() as f64;
        out
    }

    /// Most own segments ever awaiting merge at once (back-pressure bound).
    pub fn unmerged_peak(&self) -> usize {
        self.inner.shared.borrow().peak_unmerged
    }

    pub fn unmerged_now(&self) -> usize {
        self.inner.shared.borrow().sealed_unmerged.len()
    }
}

fn install_handler(inner: &Rc<KnInner>) {
    let inner2 = inner.clone();
    let h = move |sim: &Sim, req: RpcRequest| {
        if let Some((dreq, _ring_version)) = DataReq::decode(&req.payload) {
            let wk = inner2.worker_of(dreq.key());
            inner2.workers_mb[wk].push(Work { req: dreq, reply: req.reply });
            return;
        }
        if let Some(ctl) = from_json::<KnCtl>(&req.payload) {
            handle_ctl(&inner2, sim, ctl, req.reply);
        }
    };
    inner.sim.set_rpc_handler(inner.me, Rc::new(h));
}

// ---------------------------------------------------------------------------
// Control endpoint
// ---------------------------------------------------------------------------

fn handle_ctl(inner: &Rc<KnInner>, sim: &Sim, ctl: KnCtl, reply: ReplyHandle) {
    match ctl {
        KnCtl::MergeDone { seg_base } => {
            inner.shared.borrow_mut().on_merge_done(seg_base);
            sim.rpc_reply(reply, to_json(&KnCtlResp::Ok));
        }
        KnCtl::HandoffPrepare { membership } => {
            let next = Membership::from_wire(&membership);
            shed_for_transition(inner, &next);
            *inner.pending.borrow_mut() = Some(next);
            let done = Mailbox::new(sim);
            inner.hub.push(HubJob::Drain { done: done.clone() });
            let sim2 = sim.clone();
            sim.spawn(inner.me, async move {
                let segments = done.recv().await;
                sim2.rpc_reply(reply, to_json(&KnCtlResp::Drained { segments }));
            });
        }
        KnCtl::ApplyOwnership { membership } => {
            let m = Membership::from_wire(&membership);
            let new_version = m.version;
            {
                let mut cur = inner.membership.borrow_mut();
                if new_version >= cur.version {
                    *cur = m;
                }
            }
            {
                let mut p = inner.pending.borrow_mut();
                if p.as_ref().is_some_and(|n| n.version <= new_version) {
                    *p = None;
                }
            }
            let me = inner.me;
            inner.cells.borrow_mut().retain(|k, _| {
                let m = inner.membership.borrow();
                m.owner_set(k).len() > 1 && m.owns(me, k)
            });
            sim.rpc_reply(reply, to_json(&KnCtlResp::Ok));
        }
        KnCtl::CollectStats => {
            let stats = collect_stats(inner, sim);
            sim.rpc_reply(reply, to_json(&KnCtlResp::Stats(stats)));
        }
        KnCtl::InvalidateKeys { keys } => {
            for k in &keys {
                let wk = inner.worker_of(k);
                inner.dacs[wk].borrow_mut().invalidate(k);
                if let Some(cell) = inner.cells.borrow_mut().remove(k) {
                    inner.cell_expect.borrow_mut().remove(&cell);
                }
            }
            sim.rpc_reply(reply, to_json(&KnCtlResp::Ok));
        }
    }
}

/// Immediate cache work for an ownership transition: drop entries for keys
/// this node will not own, and drop every cached form of keys that gain a
/// second owner — a full value cached from the single-owner era would
/// shadow peers' publishes.
fn shed_for_transition(inner: &KnInner, next: &Membership) {
    let me = inner.me;
    for d in &inner.dacs {
        let mut dac = d.borrow_mut();
        let drop_keys: Vec<Vec<u8>> = dac
            .keys()
            .filter(|k| !next.owns(me, k) || next.owner_set(k).len() > 1)
            .cloned()
            .collect();
        for k in &drop_keys {
            dac.invalidate(k);
        }
    }
    inner.cells.borrow_mut().retain(|k, _| next.owner_set(k).len() > 1 && next.owns(me, k));
}

fn collect_stats(inner: &KnInner, sim: &Sim) -> KnStatsWire {
    let now = sim.now();
    let span = now - inner.last_collect.get();
    inner.last_collect.set(now);
    let workers = inner.dacs.len() as u64;
    let busy = inner.busy.take();
    let acc = std::mem::take(&mut *inner.accum.borrow_mut());
    let mut per_key: Vec<(Vec<u8>, KeyStat)> = acc.keys.into_iter().collect();
    per_key.sort_by(|a, b| b.1.count.cmp(&a.1.count).then_with(|| a.0.cmp(&b.0)));
    let k = inner.top_k.min(per_key.len());
    let top_keys = per_key[..k]
        .iter()
        .map(|(key, s)| {
            let avg = if s.lat_n == 0 { 0.0 } else { s.lat_sum as f64 / s.lat_n as f64 };
            (key.clone(), s.count, avg)
        })
        .collect();
    let (mut tail_distinct, mut tail_count, mut tail_count_sq) = (0u64, 0u64, 0u64);
    for (_, s) in &per_key[k..] {
        tail_distinct += 1;
        tail_count += s.count;
        tail_count_sq += s.count * s.count;
    }
    let (mut hv, mut hs, mut ms) = (0u64, 0u64, 0u64);
    for d in &inner.dacs {
        let m = d.borrow().metrics();
        hv += m.hits_value;
        hs += m.hits_shortcut;
        ms += m.misses;
    }
    let prev = inner.prev_cache.get();
    inner.prev_cache.set((hv, hs, ms));
    KnStatsWire {
        kn: inner.me,
        epoch_units: span * workers,
        busy_units: busy,
        ops: acc.ops,
        top_keys,
        tail_distinct,
        tail_count,
        tail_count_sq,
        cache_value_hits: hv - prev.0,
        cache_shortcut_hits: hs - prev.1,
        cache_misses: ms - prev.2,
    }
}

// ---------------------------------------------------------------------------
// Data path
// ---------------------------------------------------------------------------

async fn worker_task(inner: Rc<KnInner>, ctx: NodeCtx, wk: usize, jobs: Mailbox<Work>) {
    loop {
        let Work { req, reply } = jobs.recv().await;
        let t0 = ctx.now();
        ctx.step(1).await;
        let key = req.key().to_vec();
        let (owned, version) = inner.owned_now(&key);
        if !owned {
            inner.busy_add(ctx.now() - t0);
            inner.sim.rpc_reply(reply, DataResp::WrongOwner { version }.encode());
            continue;
        }
        inner.accum.borrow_mut().count(&key);
        match req {
            DataReq::Get { key } => {
                let resp = serve_get(&inner, &ctx, wk, &key).await;
                let dt = ctx.now() - t0;
                inner.busy_add(dt);
                inner.accum.borrow_mut().finish(&key, dt);
                inner.sim.rpc_reply(reply, resp.encode());
            }
            DataReq::Put { key, value } => {
                handle_write(&inner, &ctx, wk, t0, key, Some(value), reply).await;
            }
            DataReq::Delete { key } => {
                handle_write(&inner, &ctx, wk, t0, key, None, reply).await;
            }
        }
    }
}

async fn handle_write(
    inner: &Rc<KnInner>,
    ctx: &NodeCtx,
    wk: usize,
    t0: u64,
    key: Vec<u8>,
    value: Option<Vec<u8>>,
    reply: ReplyHandle,
) {
    let vlen = value.as_ref().map_or(0, |v| v.len() as u64);
    let limit = inner.lay.segment_capacity.min(inner.lay.max_entry_span);
    if entry_len(key.len() as u64, vlen) > limit {
        let dt = ctx.now() - t0;
        inner.busy_add(dt);
        inner.accum.borrow_mut().finish(&key, dt);
        inner.sim.rpc_reply(reply, DataResp::Rejected.encode());
        return;
    }
    if inner.replicated(&key) {
        let resp = serve_direct_put(inner, ctx, wk, &key, value).await;
        let dt = ctx.now() - t0;
        inner.busy_add(dt);
        inner.accum.borrow_mut().finish(&key, dt);
        inner.sim.rpc_reply(reply, resp.encode());
        return;
    }
    let kind = if value.is_some() { EntryKind::Put } else { EntryKind::Delete };
    let ack = Mailbox::new(&inner.sim);
    inner.hub.push(HubJob::Append {
        key: key.clone(),
        value: value.unwrap_or_default(),
        kind,
        ack: ack.clone(),
    });
    // The worker is free once the entry is enqueued; the reply waits on the
    // flush in its own task so a slow batch never stalls unrelated ops.
    inner.busy_add(ctx.now() - t0);
    let inner2 = inner.clone();
    ctx.spawn(async move {
        ack.recv().await;
        inner2.accum.borrow_mut().finish(&key, inner2.sim.now() - t0);
        inner2.sim.rpc_reply(reply, DataResp::Done.encode());
    });
}

/// Out-of-place publish for a multi-owner key: durable direct entry (one
/// write), then a CAS swinging the key's cell (one more round trip in steady
/// state). Linearizes at the CAS.
async fn serve_direct_put(
    inner: &Rc<KnInner>,
    ctx: &NodeCtx,
    wk: usize,
    key: &[u8],
    value: Option<Vec<u8>>,
) -> DataResp {
    let Some(cell) = cell_for(inner, ctx, key).await else {
        debug_assert!(false, "multi-owner key without an indirection cell");
        return DataResp::Rejected;
    };
    let kind = if value.is_some() { EntryKind::DirectPut } else { EntryKind::DirectDelete };
    let bytes = value.unwrap_or_default();
    let entry_addr = direct_append(inner, ctx, key, &bytes, kind).await;
    let superseded = cas_publish(inner, ctx, cell, entry_addr).await;
    if superseded != 0 {
        inner.shared.borrow_mut().pending_invalidated.push(superseded);
    }
    {
        // A cached full value would shadow this publish; cell shortcuts stay
        // valid because they point at the cell, not the entry.
        let mut dac = inner.dacs[wk].borrow_mut();
        if dac.is_value_entry(key) == Some(true) {
            dac.invalidate(key);
        }
    }
    DataResp::Done
}

/// The key's indirection cell, from the local map or one index walk.
async fn cell_for(inner: &KnInner, ctx: &NodeCtx, key: &[u8]) -> Option<u64> {
    if let Some(c) = inner.cells.borrow().get(key).copied() {
        return Some(c);
    }
    let res = index_lookup(ctx, &inner.lay, key).await.ok()?;
    match res.outcome {
        LookupOutcome::Found(hit) if hit.indirect && inner.lay.is_cell_addr(hit.shortcut_addr) => {
            inner.cells.borrow_mut().insert(key.to_vec(), hit.shortcut_addr);
            Some(hit.shortcut_addr)
        }
        _ => None,
    }
}

enum CellRead {
    Value(Vec<u8>),
    Tombstone,
    /// Cell empty, repointed to another key, or the entry was reclaimed
    /// under us — fall back to an index walk.
    Stale,
}

/// Two dependent reads: cell word, then the entry it names. The entry's own
/// key is verified so a reused cell can never leak another key's value.
async fn read_via_cell(inner: &KnInner, ctx: &NodeCtx, cell: u64, key: &[u8]) -> CellRead {
    let word = ctx.read(cell, 8, RtCategory::ReadHitShortcut).await.expect("cell read");
    let entry_addr = u64::from_le_bytes(word[..8].try_into().unwrap());
    if entry_addr == 0 {
        return CellRead::Stale;
    }
    inner.cell_expect.borrow_mut().insert(cell, entry_addr);
    let seg_end = inner.lay.segment_base_of(entry_addr) + inner.lay.segment_capacity;
    let span = inner.lay.max_entry_span.min(seg_end - entry_addr);
    let Ok(bytes) = ctx.read(entry_addr, span, RtCategory::ReadHitShortcut).await else {
        return CellRead::Stale;
    };
    let Some(view) = decode_entry(&bytes, 0) else {
        return CellRead::Stale;
    };
    if view.key(&bytes) != key {
        return CellRead::Stale;
    }
    if view.kind.is_tombstone() {
        return CellRead::Tombstone;
    }
    CellRead::Value(view.value(&bytes).to_vec())
}

async fn serve_get(inner: &KnInner, ctx: &NodeCtx, wk: usize, key: &[u8]) -> DataResp {
    let cached = inner.dacs[wk].borrow_mut().lookup(key);
    match cached {
        Lookup::HitValue(v) => return DataResp::Value(v),
        Lookup::HitShortcut { value_addr, value_len } => {
            if inner.lay.is_cell_addr(value_addr) {
                match read_via_cell(inner, ctx, value_addr, key).await {
                    CellRead::Value(v) => return DataResp::Value(v),
                    CellRead::Tombstone => return DataResp::NotFound,
                    CellRead::Stale => inner.dacs[wk].borrow_mut().invalidate(key),
                }
            } else {
                match ctx.read(value_addr, value_len as u64, RtCategory::ReadHitShortcut).await {
                    Ok(v) => {
                        let mut dac = inner.dacs[wk].borrow_mut();
                        if let PromotionDecision::Promote { evict } = dac.consider_promotion(key) {
                            dac.complete_promotion(key, &v, &evict);
                        }
                        return DataResp::Value(v);
                    }
                    // The target segment was reclaimed under a stale address.
                    Err(_) => inner.dacs[wk].borrow_mut().invalidate(key),
                }
            }
        }
        Lookup::Miss => {}
    }
    // Flushed-but-unmerged local writes. Multi-owner keys skip this: their
    // publishes route through the cell, and pre-replication batch entries
    // are merged before a key ever gains a second owner.
    if !inner.replicated(key) {
        if let Some((_, kind, v)) = inner.shared.borrow().probe(key) {
            return if kind.is_tombstone() { DataResp::NotFound } else { DataResp::Value(v) };
        }
    }
    let mut tries = 0;
    let res = loop {
        match index_lookup(ctx, &inner.lay, key).await {
            Ok(r) => break r,
            // A reclaim hit an address we chased; the repointed index makes
            // the retry clean.
            Err(_) => {
                tries += 1;
                assert!(tries < 16, "index walk kept faulting");
                ctx.step(1).await;
            }
        }
    };
    match res.outcome {
        LookupOutcome::Found(hit) => {
            if hit.indirect && inner.lay.is_cell_addr(hit.shortcut_addr) {
                inner.cells.borrow_mut().insert(key.to_vec(), hit.shortcut_addr);
            }
            let mut dac = inner.dacs[wk].borrow_mut();
            dac.record_miss_cost(res.rts);
            if !dac.contains(key) {
                // Indirect keys are admitted address-only: caching the bytes
                // would go stale on a peer's publish.
                let bytes = if hit.indirect { None } else { Some(&hit.value[..]) };
                let report = dac.admit_on_miss(key, hit.shortcut_addr, hit.value_len, bytes);
                if !hit.indirect && matches!(report.admitted, Admitted::Shortcut) {
                    if let PromotionDecision::Promote { evict } = dac.consider_promotion(key) {
                        dac.complete_promotion(key, &hit.value, &evict);
                    }
                }
            }
            DataResp::Value(hit.value)
        }
        LookupOutcome::NotFound => DataResp::NotFound,
    }
}

// ---------------------------------------------------------------------------
