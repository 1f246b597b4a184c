//! Pool-side endpoint: segment allocator, merge workers, metadata index and
//! garbage collector.
//!
//! The metadata index is a fixed-capacity power-of-two bucket array with
//! 3-slot buckets and chain links, updated in place by merge workers
//! (log-free writes). Writers serialize per bucket by holding the head
//! bucket's version word odd for the duration of a mutation; one-sided
//! readers that observe an odd version retry, so every passed version check
//! yields a bucket state that existed at some instant. Chain-node mutations
//! happen inside the head lock and are applied at single instants, so readers
//! never observe torn frames.
//!
//! Merges consume sealed segments in per-writer FIFO order (sequence order
//! within a partition is preserved); a key's previous value location is
//! invalidated on its segment as updates and tombstones apply. A segment is
//! reclaimed once merged and fully invalid, after a short quiescence window
//! so no in-flight dependent read can target the reclaimed range.

pub mod layout;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use crate::config::{IndexConfig, PoolConfig};
use crate::fabric::{Mailbox, NodeCtx, NodeId, RtCategory, Sim};
use crate::hash::hash64;
use crate::wire::{from_json, to_json, DpmMsg, DpmResp, KnCtl};
use layout::{
    chain_next_addr, committed_prefix, decode_entry, slot_addr, version_addr, BucketFrame,
    EntryKind, Layout, Slot, BUCKET_STRIDE, ENTRY_HEADER, SLOTS_PER_BUCKET,
};

// ---------------------------------------------------------------------------
// Segment metadata
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SegmentMeta {
    pub owner: NodeId,
    pub sealed: bool,
    pub merged: bool,
    /// Value-bearing entries stored in the segment (tombstones excluded).
    pub total_values: u64,
    /// How many of those have been superseded or deleted.
    pub invalid_values: u64,
    pub last_invalidate: u64,
    pub created_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DpmCounters {
    pub merged_segments: u64,
    pub merged_entries: u64,
    pub tombstones: u64,
    pub invalidations: u64,
    pub reclaimed_segments: u64,
    pub allocated_segments: u64,
}

#[derive(Debug, Clone)]
pub struct SegmentInfo {
    pub base: u64,
    pub owner: NodeId,
    pub sealed: bool,
    pub merged: bool,
    pub total_values: u64,
    pub invalid_values: u64,
}

/// What the index currently says about a key (pool-side inspection).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedValue {
    pub value: Vec<u8>,
    pub value_addr: u64,
    pub indirect: bool,
}

struct DpmState {
    layout: Layout,
    cfg: PoolConfig,
    segments: BTreeMap<u64, SegmentMeta>,
    free_segments: Vec<u64>,
    arena_next: u64,
    chain_next: u64,
    cell_next: u64,
    cell_free: Vec<u64>,
    cells: BTreeMap<Vec<u8>, u64>,
    queues: BTreeMap<NodeId, VecDeque<u64>>,
    in_progress: BTreeSet<NodeId>,
    counters: DpmCounters,
    stop: bool,
}

/// Pool-side node handle.
pub struct DpmNode {
    pub node: NodeId,
    sim: Sim,
    state: Rc<RefCell<DpmState>>,
    work: Mailbox<()>,
}

/// What other modules need to reach the pool: its endpoint and region map.
#[derive(Clone)]
pub struct DpmRef {
    pub node: NodeId,
    pub layout: Rc<Layout>,
}

impl DpmNode {
    pub fn spawn(
        sim: &Sim,
        pool_cfg: &PoolConfig,
        index_cfg: &IndexConfig,
        max_key_len: u64,
        max_value_len: u64,
    ) -> DpmNode {
        let node = sim.add_node("dpm");
        let lay = Layout::compute(pool_cfg, index_cfg, max_key_len, max_value_len);
        let state = Rc::new(RefCell::new(DpmState {
            layout: lay,
            cfg: pool_cfg.clone(),
            segments: BTreeMap::new(),
            free_segments: Vec::new(),
            arena_next: 0,
            chain_next: 0,
            cell_next: 0,
            cell_free: Vec::new(),
            cells: BTreeMap::new(),
            queues: BTreeMap::new(),
            in_progress: BTreeSet::new(),
            counters: DpmCounters::default(),
            stop: false,
        }));
        let work = Mailbox::new(sim);
        let dpm = DpmNode { node, sim: sim.clone(), state, work };
        dpm.install_handler();
        for _ in 0..pool_cfg.merge_workers {
            let ctx = NodeCtx::new(sim, node);
            let st = dpm.state.clone();
            let mb = dpm.work.clone();
            sim.spawn(node, async move { merge_worker(ctx, st, mb).await });
        }
        {
            let ctx = NodeCtx::new(sim, node);
            let st = dpm.state.clone();
            sim.spawn(node, async move { gc_loop(ctx, st).await });
        }
        dpm
    }

    pub fn handle(&self) -> DpmRef {
        DpmRef { node: self.node, layout: Rc::new(self.state.borrow().layout.clone()) }
    }

    pub fn counters(&self) -> DpmCounters {
        self.state.borrow().counters.clone()
    }

    pub fn segment_infos(&self) -> Vec<SegmentInfo> {
        self.state
            .borrow()
            .segments
            .iter()
            .map(|(&base, m)| SegmentInfo {
                base,
                owner: m.owner,
                sealed: m.sealed,
                merged: m.merged,
                total_values: m.total_values,
                invalid_values: m.invalid_values,
            })
            .collect()
    }

    /// Ask the collector to stop at its next tick (lets a run drain).
    pub fn stop(&self) {
        self.state.borrow_mut().stop = true;
    }

    /// Synchronous collection pass; returns reclaimed segment bases.
    pub fn run_gc(&self) -> Vec<u64> {
        gc_scan(&self.sim, &self.state)
    }

    /// Pool-side walk of the whole index (instrumentation/oracle use only).
    pub fn snapshot_index(&self) -> BTreeMap<Vec<u8>, IndexedValue> {
        let st = self.state.borrow();
        let lay = &st.layout;
        let mut out = BTreeMap::new();
        self.sim.with_pool(|pool| {
            for b in 0..lay.bucket_count {
                let mut frame_addr = lay.bucket_base + b * BUCKET_STRIDE;
                loop {
                    let bytes = pool.read(frame_addr, BUCKET_STRIDE).expect("index frame");
                    let frame = BucketFrame::decode(&bytes);
                    for slot in frame.slots.iter().filter(|s| !s.is_empty()) {
                        let (value, value_addr, indirect) = if lay.is_cell_addr(slot.value_addr) {
                            let entry_addr = pool.read_u64(slot.value_addr).expect("cell");
                            if entry_addr == 0 {
                                continue;
                            }
                            let span = lay.max_entry_span.min(pool.size() - entry_addr);
                            let region = pool.read(entry_addr, span).expect("entry");
                            let e = decode_entry(&region, 0).expect("committed entry behind cell");
                            (e.value(&region).to_vec(), entry_addr + ENTRY_HEADER + e.key_len, true)
                        } else {
                            let v = pool
                                .read(slot.value_addr, slot.value_len as u64)
                                .expect("value bytes");
                            (v, slot.value_addr, false)
                        };
                        let key = if indirect {
                            let entry_addr = pool.read_u64(slot.value_addr).expect("cell");
                            let span = lay.max_entry_span.min(pool.size() - entry_addr);
                            let region = pool.read(entry_addr, span).expect("entry");
                            let e = decode_entry(&region, 0).expect("entry");
                            e.key(&region).to_vec()
                        } else {
                            pool.read(slot.key_locator, slot.key_len as u64).expect("key bytes")
                        };
                        out.insert(key, IndexedValue { value, value_addr, indirect });
                    }
                    if frame.chain_next == 0 {
                        break;
                    }
                    frame_addr = frame.chain_next;
                }
            }
        });
        out
    }

    fn install_handler(&self) {
        let state = self.state.clone();
        let work = self.work.clone();
        let node = self.node;
        self.sim.set_rpc_handler(
            node,
            Rc::new(move |sim: &Sim, req| {
                let state = state.clone();
                let work = work.clone();
                let ctx = NodeCtx::new(sim, node);
                let sim2 = sim.clone();
                sim.spawn(node, async move {
                    ctx.step(1).await;
                    let resp = match from_json::<DpmMsg>(&req.payload) {
                        Some(msg) => handle_msg(&ctx, &state, &work, req.from, msg).await,
                        None => DpmResp::Error { what: "bad payload".into() },
                    };
                    sim2.rpc_reply(req.reply, to_json(&resp));
                });
            }),
        );
    }
}

async fn handle_msg(
    ctx: &NodeCtx,
    state: &Rc<RefCell<DpmState>>,
    work: &Mailbox<()>,
    from: NodeId,
    msg: DpmMsg,
) -> DpmResp {
    match msg {
        DpmMsg::AllocSegment => match allocate_segment(ctx, state, from) {
            Some(base) => DpmResp::Segment { base },
            None => DpmResp::Error { what: "segment arena exhausted".into() },
        },
        DpmMsg::EnqueueMerge { seg_base, invalidated, want_prealloc } => {
            {
                reconcile_superseded(ctx, state, &invalidated);
                let mut st = state.borrow_mut();
                let Some(meta) = st.segments.get_mut(&seg_base) else {
                    return DpmResp::Error { what: format!("unknown segment {seg_base}") };
                };
                meta.sealed = true;
                let owner = meta.owner;
                st.queues.entry(owner).or_default().push_back(seg_base);
            }
            work.push(());
            let prealloc = if want_prealloc { allocate_segment(ctx, state, from) } else { None };
            DpmResp::Enqueued { prealloc }
        }
        DpmMsg::Reconcile { invalidated } => {
            reconcile_superseded(ctx, state, &invalidated);
            DpmResp::Reconciled
        }
        DpmMsg::SyncMerge { kns, seal_open } => {
            let merged = sync_merge(ctx, state, &kns, seal_open).await;
            DpmResp::SyncDone { merged_segments: merged }
        }
        DpmMsg::InstallIndirect { key } => match install_indirect(ctx, state, &key).await {
            Ok(cell) => DpmResp::CellInstalled { cell },
            Err(what) => DpmResp::Error { what },
        },
        DpmMsg::RemoveIndirect { key } => match remove_indirect(ctx, state, &key).await {
            Ok(()) => DpmResp::CellRemoved,
            Err(what) => DpmResp::Error { what },
        },
    }
}

// ---------------------------------------------------------------------------
// Allocator
// ---------------------------------------------------------------------------

fn allocate_segment(ctx: &NodeCtx, state: &Rc<RefCell<DpmState>>, owner: NodeId) -> Option<u64> {
    let mut st = state.borrow_mut();
    let cap = st.layout.segment_capacity;
    let base = if let Some(base) = st.free_segments.pop() {
        ctx.sim.with_pool(|p| p.unpoison(base, cap));
        base
    } else {
        if st.arena_next >= st.layout.arena_segments {
            return None;
        }
        let slot = st.arena_next;
        st.arena_next += 1;
        st.layout.segment_addr(slot)
    };
    let now = ctx.now();
    st.counters.allocated_segments += 1;
    st.segments.insert(
        base,
        SegmentMeta {
            owner,
            sealed: false,
            merged: false,
            total_values: 0,
            invalid_values: 0,
            last_invalidate: 0,
            created_at: now,
        },
    );
    Some(base)
}

fn invalidate_value(st: &mut DpmState, value_addr: u64, now: u64) {
    let base = st.layout.segment_base_of(value_addr);
    let meta = st.segments.get_mut(&base).expect("invalidate targets a live segment");
    meta.invalid_values += 1;
    meta.last_invalidate = now;
    st.counters.invalidations += 1;
}

/// Writers report the ENTRY addresses their direct CAS publishes replaced
/// (that is all a failed/successful CAS hands them); the pool derives each
/// entry's value span locally and marks it dead.
fn reconcile_superseded(ctx: &NodeCtx, state: &Rc<RefCell<DpmState>>, entries: &[u64]) {
    let now = ctx.now();
    for &entry_addr in entries {
        if entry_addr == 0 {
            continue;
        }
        let value_addr = old_value_addr(&ctx.sim, entry_addr);
        invalidate_value(&mut state.borrow_mut(), value_addr, now);
    }
}

// ---------------------------------------------------------------------------
// Bucket writer lock
// ---------------------------------------------------------------------------

/// Acquire the head bucket's writer lock by flipping its version odd. The
/// held-odd window is observable by concurrent one-sided readers, which
/// retry.
async fn lock_bucket(ctx: &NodeCtx, bucket_addr: u64) {
    loop {
        let acquired = ctx.sim.with_pool(|p| {
            let v = p.read_u64(version_addr(bucket_addr)).expect("bucket version");
            if v % 2 == 0 {
                p.write_u64(version_addr(bucket_addr), v + 1).expect("bucket version");
                true
            } else {
                false
            }
        });
        if acquired {
            return;
        }
        ctx.step(1).await;
    }
}

fn unlock_bucket(sim: &Sim, bucket_addr: u64) {
    sim.with_pool(|p| {
        let v = p.read_u64(version_addr(bucket_addr)).expect("bucket version");
        debug_assert!(v % 2 == 1, "unlock of unlocked bucket");
        p.write_u64(version_addr(bucket_addr), v + 1).expect("bucket version");
    });
}

/// Where a key lives (or would live) in a bucket chain. Pool-side walk.
struct KeyPlace {
    found: Option<(u64, usize, Slot)>,
    first_free: Option<(u64, usize)>,
    tail_frame: u64,
}

fn locate_key(sim: &Sim, lay: &Layout, key: &[u8]) -> KeyPlace {
    let fp = hash64(key);
    let mut frame_addr = lay.bucket_addr_for_hash(fp);
    let mut place = KeyPlace { found: None, first_free: None, tail_frame: frame_addr };
    sim.with_pool(|pool| loop {
        let bytes = pool.read(frame_addr, BUCKET_STRIDE).expect("index frame");
        let frame = BucketFrame::decode(&bytes);
        for (i, slot) in frame.slots.iter().enumerate() {
            if slot.is_empty() {
                if place.first_free.is_none() {
                    place.first_free = Some((frame_addr, i));
                }
                continue;
            }
            if slot.fingerprint == fp && slot.key_len as usize == key.len() {
                let stored = if lay.is_cell_addr(slot.value_addr) {
                    let entry_addr = pool.read_u64(slot.value_addr).expect("cell");
                    if entry_addr == 0 {
                        continue;
                    }
                    pool.read(entry_addr + ENTRY_HEADER, slot.key_len as u64).expect("key")
                } else {
                    pool.read(slot.key_locator, slot.key_len as u64).expect("key")
                };
                if stored == key {
                    place.found = Some((frame_addr, i, *slot));
                }
            }
        }
        place.tail_frame = frame_addr;
        if frame.chain_next == 0 || place.found.is_some() {
            break;
        }
        frame_addr = frame.chain_next;
    });
    place
}

// ---------------------------------------------------------------------------
// Merge
// ---------------------------------------------------------------------------

async fn merge_worker(ctx: NodeCtx, state: Rc<RefCell<DpmState>>, work: Mailbox<()>) {
    loop {
        work.recv().await;
        while let Some((kn, seg)) = take_eligible(&state, None) {
            merge_segment(&ctx, &state, seg).await;
            finish_segment(&ctx, &state, kn, seg);
        }
    }
}

/// Pop the next mergeable segment: smallest-id writer that has work and is
/// not already being merged (per-writer FIFO preserved). `only` restricts
/// eligibility to the given writers.
fn take_eligible(state: &Rc<RefCell<DpmState>>, only: Option<&[NodeId]>) -> Option<(NodeId, u64)> {
    let mut st = state.borrow_mut();
    let candidates: Vec<NodeId> = st
        .queues
        .iter()
        .filter(|(kn, q)| {
            !q.is_empty()
                && !st.in_progress.contains(kn)
                && only.map(|set| set.contains(kn)).unwrap_or(true)
        })
        .map(|(&kn, _)| kn)
        .collect();
    let kn = *candidates.first()?;
    let seg = st.queues.get_mut(&kn).unwrap().pop_front().unwrap();
    st.in_progress.insert(kn);
    Some((kn, seg))
}

fn finish_segment(ctx: &NodeCtx, state: &Rc<RefCell<DpmState>>, kn: NodeId, seg: u64) {
    {
        let mut st = state.borrow_mut();
        st.in_progress.remove(&kn);
        st.counters.merged_segments += 1;
    }
    let sim = ctx.sim.clone();
    let dpm_node = ctx.node;
    // Completion notification: lets the writer drop its local copy and
    // release back-pressure. Fire and forget; a dead writer times out.
    if sim.node_alive(kn) {
        let nctx = NodeCtx::new(&sim, dpm_node);
        sim.spawn(dpm_node, async move {
            let _ = nctx.rpc(kn, to_json(&KnCtl::MergeDone { seg_base: seg })).await;
        });
    }
}

async fn merge_segment(ctx: &NodeCtx, state: &Rc<RefCell<DpmState>>, seg_base: u64) {
    let bytes = {
        let cap = state.borrow().layout.segment_capacity;
        ctx.sim.with_pool(|p| p.read(seg_base, cap).expect("segment bytes"))
    };
    let entries = committed_prefix(&bytes);
    let step = state.borrow().cfg.merge_step_per_entry;
    let mut total_values = 0u64;
    let mut tombstones = 0u64;
    for e in &entries {
        // Per-entry processing cost; this is what lets unmerged segments
        // accumulate behind a busy merger.
        if step > 0 {
            ctx.step(step).await;
        }
        match e.kind {
            EntryKind::Put => {
                total_values += 1;
                apply_put(
                    ctx,
                    state,
                    e.key(&bytes),
                    seg_base + e.key_off(),
                    seg_base + e.value_off(),
                    e.key_len as u32,
                    e.value_len as u32,
                    e.seq,
                )
                .await;
            }
            EntryKind::Delete => {
                tombstones += 1;
                apply_delete(ctx, state, e.key(&bytes), e.seq).await;
            }
            // Already published via its indirect cell; only storage
            // accounting remains. Direct tombstones also count: the cell
            // references them until a later publish supersedes them.
            EntryKind::DirectPut | EntryKind::DirectDelete => total_values += 1,
        }
    }
    let mut st = state.borrow_mut();
    let meta = st.segments.get_mut(&seg_base).expect("merged segment has metadata");
    meta.merged = true;
    meta.sealed = true;
    meta.total_values = total_values;
    st.counters.merged_entries += entries.len() as u64;
    st.counters.tombstones += tombstones;
}

#[allow(clippy::too_many_arguments)]
async fn apply_put(
    ctx: &NodeCtx,
    state: &Rc<RefCell<DpmState>>,
    key: &[u8],
    key_locator: u64,
    value_addr: u64,
    key_len: u32,
    value_len: u32,
    seq: u64,
) {
    let lay = state.borrow().layout.clone();
    let bucket = lay.bucket_addr_for_hash(hash64(key));
    lock_bucket(ctx, bucket).await;
    ctx.step(1).await; // observable odd window
    let place = locate_key(&ctx.sim, &lay, key);
    let now = ctx.now();
    match place.found {
        Some((_, _, slot)) if lay.is_cell_addr(slot.value_addr) => {
            // The key is routed through an indirect cell (this batched write
            // was sealed before a replication change and merged after it):
            // publish through the cell, but only if nothing newer already
            // did.
            let cell = slot.value_addr;
            let entry_addr = key_locator - ENTRY_HEADER;
            let superseded = ctx.sim.with_pool(|p| {
                let cur = p.read_u64(cell).expect("cell");
                let cur_seq = entry_seq(p, cur);
                if cur_seq >= seq {
                    None // a newer publisher won; this value is dead on arrival
                } else {
                    let (ok, _) = p.cas(cell, cur, entry_addr).expect("cell cas");
                    debug_assert!(ok, "cell raced while bucket lock held");
                    Some(cur)
                }
            });
            let mut st = state.borrow_mut();
            match superseded {
                Some(old_entry) if old_entry != 0 => {
                    let old_value = old_value_addr(&ctx.sim, old_entry);
                    invalidate_value(&mut st, old_value, now);
                }
                Some(_) => {}
                None => invalidate_value(&mut st, value_addr, now),
            }
        }
        Some((frame, i, slot)) => {
            // In-place update of the live slot; previous value location
            // becomes garbage.
            {
                let mut st = state.borrow_mut();
                invalidate_value(&mut st, slot.value_addr, now);
            }
            let new_slot = Slot {
                fingerprint: slot.fingerprint,
                key_locator,
                value_addr,
                key_len,
                value_len,
            };
            ctx.sim.with_pool(|p| {
                p.write(slot_addr(frame, i), &new_slot.encode()).expect("slot write")
            });
        }
        None => {
            let slot = Slot { fingerprint: hash64(key), key_locator, value_addr, key_len, value_len };
            match place.first_free {
                Some((frame, i)) => {
                    ctx.sim.with_pool(|p| {
                        p.write(slot_addr(frame, i), &slot.encode()).expect("slot write")
                    });
                }
                None => {
                    // Chain is full: append a node. It is filled before it is
                    // linked, so readers never see a partial node.
                    let node_addr = {
                        let mut st = state.borrow_mut();
                        assert!(
                            st.chain_next < st.layout.chain_capacity,
                            "index chain region exhausted; size the index for the key count"
                        );
                        let a = st.layout.chain_node_addr(st.chain_next);
                        st.chain_next += 1;
                        a
                    };
                    ctx.sim.with_pool(|p| {
                        p.write(slot_addr(node_addr, 0), &slot.encode()).expect("slot write");
                        p.write_u64(chain_next_addr(place.tail_frame), node_addr)
                            .expect("chain link");
                    });
                }
            }
        }
    }
    unlock_bucket(&ctx.sim, bucket);
}

async fn apply_delete(ctx: &NodeCtx, state: &Rc<RefCell<DpmState>>, key: &[u8], seq: u64) {
    let lay = state.borrow().layout.clone();
    let bucket = lay.bucket_addr_for_hash(hash64(key));
    lock_bucket(ctx, bucket).await;
    ctx.step(1).await;
    let place = locate_key(&ctx.sim, &lay, key);
    if let Some((frame, i, slot)) = place.found {
        let now = ctx.now();
        let victim_value = if lay.is_cell_addr(slot.value_addr) {
            let cell = slot.value_addr;
            let entry_addr = ctx.sim.with_pool(|p| p.read_u64(cell).expect("cell"));
            if ctx.sim.with_pool(|p| entry_seq(p, entry_addr)) >= seq {
                // A newer publisher wrote after this tombstone was logged;
                // the tombstone is stale and must not remove the key.
                unlock_bucket(&ctx.sim, bucket);
                return;
            }
            let mut st = state.borrow_mut();
            st.cell_free.push(cell);
            st.cells.remove(key);
            drop(st);
            (entry_addr != 0).then(|| old_value_addr(&ctx.sim, entry_addr))
        } else {
            Some(slot.value_addr)
        };
        if let Some(addr) = victim_value {
            let mut st = state.borrow_mut();
            invalidate_value(&mut st, addr, now);
        }
        ctx.sim
            .with_pool(|p| p.write(slot_addr(frame, i), &Slot::default().encode()))
            .expect("slot clear");
    }
    unlock_bucket(&ctx.sim, bucket);
}

/// Sequence number recorded in the entry at `entry_addr` (0 for the null
/// address).
fn entry_seq(p: &crate::fabric::pool::Pool, entry_addr: u64) -> u64 {
    if entry_addr == 0 {
        return 0;
    }
    let b = p.read(entry_addr + 9, 8).expect("entry seq");
    u64::from_le_bytes(b.try_into().unwrap())
}

/// Value address of the entry at `entry_addr` (pool-side header parse).
fn old_value_addr(sim: &Sim, entry_addr: u64) -> u64 {
    sim.with_pool(|p| {
        let key_len = p.read(entry_addr, 4).expect("entry header");
        let key_len = u32::from_le_bytes(key_len.try_into().unwrap()) as u64;
        entry_addr + ENTRY_HEADER + key_len
    })
}

async fn sync_merge(
    ctx: &NodeCtx,
    state: &Rc<RefCell<DpmState>>,
    kns: &[NodeId],
    seal_open: bool,
) -> u64 {
    if seal_open {
        let mut st = state.borrow_mut();
        let open: Vec<u64> = st
            .segments
            .iter()
            .filter(|(_, m)| kns.contains(&m.owner) && !m.sealed && !m.merged)
            .map(|(&b, _)| b)
            .collect();
        for base in open {
            let owner = st.segments.get_mut(&base).map(|m| {
                m.sealed = true;
                m.owner
            });
            if let Some(owner) = owner {
                st.queues.entry(owner).or_default().push_back(base);
            }
        }
    }
    let mut merged = 0u64;
    loop {
        if let Some((kn, seg)) = take_eligible(state, Some(kns)) {
            merge_segment(ctx, state, seg).await;
            finish_segment(ctx, state, kn, seg);
            merged += 1;
            continue;
        }
        let pending = {
            let st = state.borrow();
            kns.iter().any(|kn| {
                st.in_progress.contains(kn)
                    || st.queues.get(kn).map(|q| !q.is_empty()).unwrap_or(false)
            })
        };
        if !pending {
            return merged;
        }
        ctx.step(2).await;
    }
}

// ---------------------------------------------------------------------------
// Indirect cells
// ---------------------------------------------------------------------------

async fn install_indirect(
    ctx: &NodeCtx,
    state: &Rc<RefCell<DpmState>>,
    key: &[u8],
) -> Result<u64, String> {
    if let Some(&cell) = state.borrow().cells.get(key) {
        return Ok(cell); // idempotent
    }
    let lay = state.borrow().layout.clone();
    let bucket = lay.bucket_addr_for_hash(hash64(key));
    lock_bucket(ctx, bucket).await;
    ctx.step(1).await;
    let place = locate_key(&ctx.sim, &lay, key);
    let result = match place.found {
        None => Err("key not present in index".to_string()),
        Some((_, _, slot)) if lay.is_cell_addr(slot.value_addr) => Ok(slot.value_addr),
        Some((frame, i, slot)) => {
            let cell = {
                let mut st = state.borrow_mut();
                match st.cell_free.pop() {
                    Some(c) => c,
                    None => {
                        if st.cell_next >= st.layout.cell_count {
                            unlock_bucket(&ctx.sim, bucket);
                            return Err("indirect cell region exhausted".into());
                        }
                        let c = st.layout.cell_addr(st.cell_next);
                        st.cell_next += 1;
                        c
                    }
                }
            };
            let entry_addr = slot.key_locator - ENTRY_HEADER;
            let mut new_slot = slot;
            new_slot.value_addr = cell;
            ctx.sim.with_pool(|p| {
                p.write_u64(cell, entry_addr).expect("cell init");
                p.write(slot_addr(frame, i), &new_slot.encode()).expect("slot write");
            });
            state.borrow_mut().cells.insert(key.to_vec(), cell);
            Ok(cell)
        }
    };
    unlock_bucket(&ctx.sim, bucket);
    result
}

async fn remove_indirect(
    ctx: &NodeCtx,
    state: &Rc<RefCell<DpmState>>,
    key: &[u8],
) -> Result<(), String> {
    let Some(cell) = state.borrow_mut().cells.remove(key) else {
        return Err("key has no indirect cell".to_string());
    };
    let lay = state.borrow().layout.clone();
    let bucket = lay.bucket_addr_for_hash(hash64(key));
    lock_bucket(ctx, bucket).await;
    ctx.step(1).await;
    let place = locate_key(&ctx.sim, &lay, key);
    if let Some((frame, i, slot)) = place.found {
        if slot.value_addr == cell {
            let entry_addr = ctx.sim.with_pool(|p| p.read_u64(cell).expect("cell"));
            let header = (entry_addr != 0).then(|| {
                ctx.sim.with_pool(|p| {
                    let hdr = p.read(entry_addr, 9).expect("entry header");
                    (
                        u32::from_le_bytes(hdr[0..4].try_into().unwrap()),
                        u32::from_le_bytes(hdr[4..8].try_into().unwrap()),
                        EntryKind::from_code(hdr[8]),
                    )
                })
            });
            match header {
                Some((key_len, value_len, Some(kind))) if !kind.is_tombstone() => {
                    // Restore direct addressing at the cell's current value.
                    let new_slot = Slot {
                        fingerprint: slot.fingerprint,
                        key_locator: entry_addr + ENTRY_HEADER,
                        value_addr: entry_addr + ENTRY_HEADER + key_len as u64,
                        key_len,
                        value_len,
                    };
                    ctx.sim
                        .with_pool(|p| p.write(slot_addr(frame, i), &new_slot.encode()))
                        .expect("slot write");
                }
                _ => {
                    // The key's latest publish is a delete: remove it from
                    // the index and release the tombstone's storage claim.
                    ctx.sim
                        .with_pool(|p| p.write(slot_addr(frame, i), &Slot::default().encode()))
                        .expect("slot clear");
                    if entry_addr != 0 {
                        let victim = old_value_addr(&ctx.sim, entry_addr);
                        let now = ctx.now();
                        let mut st = state.borrow_mut();
                        invalidate_value(&mut st, victim, now);
                    }
                }
            }
        }
    }
    state.borrow_mut().cell_free.push(cell);
    unlock_bucket(&ctx.sim, bucket);
    Ok(())
}

// ---------------------------------------------------------------------------
// Garbage collection
// ---------------------------------------------------------------------------

async fn gc_loop(ctx: NodeCtx, state: Rc<RefCell<DpmState>>) {
    loop {
        let interval = state.borrow().cfg.gc_interval;
        ctx.daemon_sleep(interval).await;
        if state.borrow().stop {
            return;
        }
        let _ = gc_scan(&ctx.sim, &state);
    }
}

/// Reclaim every segment that is merged, fully invalid and quiescent.
/// Reclaimed ranges are poisoned until reused.
fn gc_scan(sim: &Sim, state: &Rc<RefCell<DpmState>>) -> Vec<u64> {
    let mut st = state.borrow_mut();
    let now = sim.now();
    let grace = st.cfg.gc_grace;
    let cap = st.layout.segment_capacity;
    let victims: Vec<u64> = st
        .segments
        .iter()
        .filter(|(_, m)| {
            m.merged
                && m.sealed
                && m.invalid_values == m.total_values
                && now.saturating_sub(m.last_invalidate) >= grace
        })
        .map(|(&b, _)| b)
        .collect();
    for &base in &victims {
        st.segments.remove(&base);
        sim.with_pool(|p| p.poison(base, cap));
        st.free_segments.push(base);
        st.counters.reclaimed_segments += 1;
    }
    victims
}

// ---------------------------------------------------------------------------
// One-sided lookup (compute-node side)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupHit {
    pub value: Vec<u8>,
    /// Address a shortcut should point at: the value bytes for direct keys,
    /// the indirect cell for replicated keys.
    pub shortcut_addr: u64,
    pub value_len: u32,
    pub indirect: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupOutcome {
    Found(LookupHit),
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupResult {
    pub outcome: LookupOutcome,
    pub rts: u64,
    pub chain_hops: u64,
    pub version_retries: u64,
}

/// Traverse the index with one-sided reads: head bucket (retry while a
/// writer holds it odd), chain hops, then one read covering key and value
/// for verification. Cost: 1 + hops + 1 round trips, plus one cell hop for
/// replicated keys.
pub async fn index_lookup(
    ctx: &NodeCtx,
    lay: &Layout,
    key: &[u8],
) -> Result<LookupResult, crate::fabric::pool::Fault> {
    let fp = hash64(key);
    let bucket = lay.bucket_addr_for_hash(fp);
    let mut rts = 0u64;
    let mut hops = 0u64;
    let mut retries = 0u64;
    'restart: loop {
        let mut frame_addr = bucket;
        loop {
            let bytes = ctx.read(frame_addr, BUCKET_STRIDE, RtCategory::MissTraversal).await?;
            rts += 1;
            let frame = BucketFrame::decode(&bytes);
            if frame_addr == bucket && !frame.quiescent() {
                retries += 1;
                continue 'restart;
            }
            for i in 0..SLOTS_PER_BUCKET {
                let slot = frame.slots[i];
                if slot.is_empty() || slot.fingerprint != fp || slot.key_len as usize != key.len()
                {
                    continue;
                }
                if lay.is_cell_addr(slot.value_addr) {
                    let cell = ctx.read(slot.value_addr, 8, RtCategory::MissTraversal).await?;
                    rts += 1;
                    let entry_addr = u64::from_le_bytes(cell.try_into().unwrap());
                    if entry_addr == 0 {
                        continue;
                    }
                    let span = lay.max_entry_span.min(lay.pool_size - entry_addr);
                    let region = ctx.read(entry_addr, span, RtCategory::MissTraversal).await?;
                    rts += 1;
                    let Some(e) = decode_entry(&region, 0) else { continue };
                    if e.key(&region) != key {
                        continue;
                    }
                    if e.kind.is_tombstone() {
                        // The latest publish through the cell is a delete.
                        return Ok(LookupResult {
                            outcome: LookupOutcome::NotFound,
                            rts,
                            chain_hops: hops,
                            version_retries: retries,
                        });
                    }
                    return Ok(LookupResult {
                        outcome: LookupOutcome::Found(LookupHit {
                            value: e.value(&region).to_vec(),
                            shortcut_addr: slot.value_addr,
                            value_len: e.value_len as u32,
                            indirect: true,
                        }),
                        rts,
                        chain_hops: hops,
                        version_retries: retries,
                    });
                }
                let span = slot.key_len as u64 + slot.value_len as u64;
                let region = ctx.read(slot.key_locator, span, RtCategory::MissTraversal).await?;
                rts += 1;
                if &region[..slot.key_len as usize] != key {
                    continue;
                }
                return Ok(LookupResult {
                    outcome: LookupOutcome::Found(LookupHit {
                        value: region[slot.key_len as usize..].to_vec(),
                        shortcut_addr: slot.value_addr,
                        value_len: slot.value_len,
                        indirect: false,
                    }),
                    rts,
                    chain_hops: hops,
                    version_retries: retries,
                });
            }
            if frame.chain_next != 0 {
                frame_addr = frame.chain_next;
                hops += 1;
                continue;
            }
            return Ok(LookupResult {
                outcome: LookupOutcome::NotFound,
                rts,
                chain_hops: hops,
                version_retries: retries,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TimingConfig;
    use crate::fabric::RtCategory;
    use crate::hash::SplitMix64;
    use layout::encode_entry;

    fn small_sim(seed: u64) -> (Sim, DpmNode, NodeId) {
        let pool_cfg = PoolConfig {
            pool_size: 8 << 20,
            segment_capacity: 4096,
            merge_workers: 2,
            // Out of the way of these scripted timelines; collection is
            // driven explicitly via `run_gc`.
            gc_interval: 1_000_000,
            gc_grace: 64,
            merge_step_per_entry: 1,
        };
        let index_cfg = IndexConfig { expected_keys: 64, indirect_cells: 64, ..Default::default() };
        let sim = Sim::new(TimingConfig::default(), pool_cfg.pool_size, seed);
        let dpm = DpmNode::spawn(&sim, &pool_cfg, &index_cfg, 32, 256);
        let kn = sim.add_node("kn");
        // Acknowledge merge-completion notifications so they do not dangle.
        sim.set_rpc_handler(
            kn,
            Rc::new(move |sim: &Sim, req| {
                sim.rpc_reply(req.reply, to_json(&crate::wire::KnCtlResp::Ok));
            }),
        );
        (sim, dpm, kn)
    }

    async fn alloc_seg(ctx: &NodeCtx, dpm: NodeId) -> u64 {
        let resp = ctx.rpc(dpm, to_json(&DpmMsg::AllocSegment)).await.expect("alloc rpc");
        match from_json::<DpmResp>(&resp).expect("alloc resp") {
            DpmResp::Segment { base } => base,
            other => panic!("unexpected alloc response: {other:?}"),
        }
    }

    async fn write_entries(
        ctx: &NodeCtx,
        seg: u64,
        entries: &[(Vec<u8>, Vec<u8>, EntryKind, u64)],
    ) -> Vec<u64> {
        let mut image = Vec::new();
        let mut offs = Vec::new();
        for (k, v, kind, seq) in entries {
            offs.push(seg + image.len() as u64);
            image.extend_from_slice(&encode_entry(k, v, *kind, *seq));
        }
        ctx.write(seg, image, RtCategory::WriteFlush).await.expect("segment write");
        offs
    }

    async fn enqueue(ctx: &NodeCtx, dpm: NodeId, seg: u64, invalidated: Vec<u64>) {
        let msg = DpmMsg::EnqueueMerge { seg_base: seg, invalidated, want_prealloc: false };
        let resp = ctx.rpc(dpm, to_json(&msg)).await.expect("enqueue rpc");
        assert!(matches!(from_json::<DpmResp>(&resp), Some(DpmResp::Enqueued { .. })));
    }

    #[test]
    fn merge_applies_updates_and_self_supersede_invalidates() {
        let (sim, dpm, kn) = small_sim(11);
        let dpm_node = dpm.node;
        let ctx = NodeCtx::new(&sim, kn);
        sim.spawn(kn, async move {
            let seg = alloc_seg(&ctx, dpm_node).await;
            write_entries(
                &ctx,
                seg,
                &[
                    (b"alpha".to_vec(), b"one".to_vec(), EntryKind::Put, 1),
                    (b"beta".to_vec(), b"two".to_vec(), EntryKind::Put, 2),
                    (b"alpha".to_vec(), b"three".to_vec(), EntryKind::Put, 3),
                ],
            )
            .await;
            enqueue(&ctx, dpm_node, seg, vec![]).await;
        });
        sim.run_until_idle();
        let snap = dpm.snapshot_index();
        assert_eq!(snap.get(b"alpha".as_slice()).map(|v| v.value.clone()), Some(b"three".to_vec()));
        assert_eq!(snap.get(b"beta".as_slice()).map(|v| v.value.clone()), Some(b"two".to_vec()));
        let infos = dpm.segment_infos();
        assert_eq!(infos.len(), 1);
        assert!(infos[0].merged);
        assert_eq!(infos[0].total_values, 3);
        assert_eq!(infos[0].invalid_values, 1);
        dpm.stop();
    }

    #[test]
    fn lookup_costs_two_round_trips_for_bucket_resident_key() {
        let (sim, dpm, kn) = small_sim(12);
        let dpm_node = dpm.node;
        let lay = dpm.handle().layout;
        let ctx = NodeCtx::new(&sim, kn);
        let lay2 = lay.clone();
        let found = sim
            .block_on(kn, async move {
                let seg = alloc_seg(&ctx, dpm_node).await;
                write_entries(
                    &ctx,
                    seg,
                    &[(b"k1".to_vec(), b"v1".to_vec(), EntryKind::Put, 1)],
                )
                .await;
                enqueue(&ctx, dpm_node, seg, vec![]).await;
                ctx.sleep_units(100).await; // let the merge worker finish
                index_lookup(&ctx, &lay2, b"k1").await.expect("lookup")
            })
            .expect("task finished");
        sim.run_until_idle();
        match found.outcome {
            LookupOutcome::Found(hit) => {
                assert_eq!(hit.value, b"v1");
                assert!(!hit.indirect);
            }
            other => panic!("expected hit, got {other:?}"),
        }
        assert_eq!(found.chain_hops, 0);
        assert_eq!(found.rts, 2, "bucket read plus key/value read");
        dpm.stop();
    }

    #[test]
    fn missing_key_lookup_is_single_bucket_read() {
        let (sim, dpm, kn) = small_sim(13);
        let lay = dpm.handle().layout;
        let ctx = NodeCtx::new(&sim, kn);
        let res = sim
            .block_on(kn, async move { index_lookup(&ctx, &lay, b"ghost").await.expect("lookup") })
            .expect("task finished");
        sim.run_until_idle();
        assert_eq!(res.outcome, LookupOutcome::NotFound);
        assert_eq!(res.rts, 1);
        dpm.stop();
    }

    /// Sequential-replay oracle: random puts/deletes across several segments
    /// of one writer must leave the index equal to a map replay in log
    /// order.
    #[test]
    fn merge_replay_matches_sequential_model() {
        for seed in [1u64, 7, 23, 99] {
            let (sim, dpm, kn) = small_sim(seed);
            let dpm_node = dpm.node;
            let mut rng = SplitMix64::new(seed).fork("replay");
            let mut model: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
            let mut script: Vec<Vec<(Vec<u8>, Vec<u8>, EntryKind, u64)>> = Vec::new();
            let mut seq = 0u64;
            for _ in 0..4 {
                let mut segment = Vec::new();
                for _ in 0..24 {
                    let key = format!("key-{:02}", rng.next_below(16)).into_bytes();
                    seq += 1;
                    if rng.next_below(4) == 0 {
                        model.remove(&key);
                        segment.push((key, Vec::new(), EntryKind::Delete, seq));
                    } else {
                        let value = format!("val-{seq}").into_bytes();
                        model.insert(key.clone(), value.clone());
                        segment.push((key, value, EntryKind::Put, seq));
                    }
                }
                script.push(segment);
            }
            let ctx = NodeCtx::new(&sim, kn);
            sim.spawn(kn, async move {
                for segment in script {
                    let seg = alloc_seg(&ctx, dpm_node).await;
                    write_entries(&ctx, seg, &segment).await;
                    enqueue(&ctx, dpm_node, seg, vec![]).await;
                }
            });
            sim.run_until_idle();
            let snap = dpm.snapshot_index();
            let got: BTreeMap<Vec<u8>, Vec<u8>> =
                snap.into_iter().map(|(k, v)| (k, v.value)).collect();
            assert_eq!(got, model, "seed {seed}");
            dpm.stop();
        }
    }

    #[test]
    fn fully_invalid_segments_reclaim_after_grace_and_poison() {
        let (sim, dpm, kn) = small_sim(21);
        let dpm_node = dpm.node;
        let ctx = NodeCtx::new(&sim, kn);
        let bases = sim
            .block_on(kn, async move {
                let s1 = alloc_seg(&ctx, dpm_node).await;
                write_entries(&ctx, s1, &[(b"k".to_vec(), b"v".to_vec(), EntryKind::Put, 1)])
                    .await;
                enqueue(&ctx, dpm_node, s1, vec![]).await;
                let s2 = alloc_seg(&ctx, dpm_node).await;
                write_entries(&ctx, s2, &[(b"k".to_vec(), Vec::new(), EntryKind::Delete, 2)])
                    .await;
                enqueue(&ctx, dpm_node, s2, vec![]).await;
                (s1, s2)
            })
            .expect("setup finished");
        sim.run_until_idle();
        let (s1, s2) = bases;
        assert!(dpm.snapshot_index().is_empty(), "tombstone removed the key");
        // Immediately after the merge the grace window has not elapsed for
        // the data segment (its invalidation is recent).
        let early = dpm.run_gc();
        assert!(!early.contains(&s1), "grace window holds the data segment");
        let ctx2 = NodeCtx::new(&sim, kn);
        sim.spawn(kn, async move { ctx2.sleep_units(200).await });
        sim.run_until_idle();
        let late = dpm.run_gc();
        assert!(late.contains(&s1));
        assert!(early.contains(&s2) || late.contains(&s2), "all-tombstone segment reclaims");
        sim.with_pool(|p| {
            assert!(p.poisoned_ranges().any(|(b, _)| b == s1), "reclaimed range is fenced");
        });
        // Reallocation reuses and unfences the range.
        let ctx3 = NodeCtx::new(&sim, kn);
        let again = sim
            .block_on(kn, async move { alloc_seg(&ctx3, dpm_node).await })
            .expect("realloc");
        sim.run_until_idle();
        sim.with_pool(|p| {
            assert!(!p.poisoned_ranges().any(|(b, _)| b == again));
            assert_eq!(p.read(again, 16).unwrap(), vec![0u8; 16], "reused segment zeroed");
        });
        dpm.stop();
    }

    #[test]
    fn reader_retries_while_bucket_version_is_odd() {
        let (sim, dpm, kn) = small_sim(31);
        let dpm_node = dpm.node;
        let lay = dpm.handle().layout;
        let ctx = NodeCtx::new(&sim, kn);
        let lay2 = lay.clone();
        sim.spawn(kn, async move {
            let seg = alloc_seg(&ctx, dpm_node).await;
            write_entries(&ctx, seg, &[(b"pin".to_vec(), b"v".to_vec(), EntryKind::Put, 1)])
                .await;
            enqueue(&ctx, dpm_node, seg, vec![]).await;
        });
        sim.run_until_idle();
        let bucket = lay.bucket_addr_for_hash(hash64(b"pin"));
        sim.with_pool(|p| p.write_u64(version_addr(bucket), 1).unwrap()); // writer present
        let ctx2 = NodeCtx::new(&sim, kn);
        let result = Rc::new(RefCell::new(None));
        let result2 = result.clone();
        sim.spawn(kn, async move {
            let r = index_lookup(&ctx2, &lay2, b"pin").await.expect("lookup");
            *result2.borrow_mut() = Some(r);
        });
        let unlocker = NodeCtx::new(&sim, kn);
        sim.spawn(kn, async move {
            unlocker.sleep_units(30).await;
            unlocker.sim.with_pool(|p| p.write_u64(version_addr(bucket), 2).unwrap());
        });
        sim.run_until_idle();
        let r = result.borrow_mut().take().expect("lookup completed after unlock");
        assert!(r.version_retries >= 1, "reader observed the odd window");
        assert!(matches!(r.outcome, LookupOutcome::Found(_)));
        dpm.stop();
    }

    #[test]
    fn indirect_cell_install_cas_publish_and_remove() {
        let (sim, dpm, kn) = small_sim(41);
        let dpm_node = dpm.node;
        let lay = dpm.handle().layout;
        let ctx = NodeCtx::new(&sim, kn);
        let lay2 = lay.clone();
        let outcome = sim
            .block_on(kn, async move {
                // Seed the key through the normal merge path.
                let s1 = alloc_seg(&ctx, dpm_node).await;
                let offs = write_entries(
                    &ctx,
                    s1,
                    &[(b"rep".to_vec(), b"v-old".to_vec(), EntryKind::Put, 1)],
                )
                .await;
                enqueue(&ctx, dpm_node, s1, vec![]).await;
                ctx.sleep_units(100).await;
                // Promote to an indirect cell.
                let resp = ctx
                    .rpc(dpm_node, to_json(&DpmMsg::InstallIndirect { key: b"rep".to_vec() }))
                    .await
                    .expect("install rpc");
                let cell = match from_json::<DpmResp>(&resp) {
                    Some(DpmResp::CellInstalled { cell }) => cell,
                    other => panic!("install failed: {other:?}"),
                };
                let via_cell = index_lookup(&ctx, &lay2, b"rep").await.expect("lookup");
                let LookupOutcome::Found(hit) = &via_cell.outcome else { panic!("missing") };
                assert_eq!(hit.value, b"v-old");
                assert!(hit.indirect);
                assert_eq!(hit.shortcut_addr, cell);
                assert_eq!(via_cell.rts, 3, "bucket, cell, entry");
                // Publish a new value with a sealed direct entry plus CAS.
                let s2 = alloc_seg(&ctx, dpm_node).await;
                let entry = encode_entry(b"rep", b"v-new", EntryKind::DirectPut, 9);
                ctx.write(s2, entry, RtCategory::WriteFlush).await.expect("entry write");
                let _ = offs;
                let observed = loop {
                    let cur = ctx.read(cell, 8, RtCategory::MissTraversal).await.expect("cell");
                    let cur = u64::from_le_bytes(cur.try_into().unwrap());
                    if ctx.cas(cell, cur, s2).await.expect("cas").success {
                        break cur;
                    }
                };
                // Retire the superseded entry and account the new segment.
                enqueue(&ctx, dpm_node, s2, vec![observed]).await;
                ctx.sleep_units(100).await;
                let after = index_lookup(&ctx, &lay2, b"rep").await.expect("lookup");
                let LookupOutcome::Found(hit2) = &after.outcome else { panic!("missing") };
                assert_eq!(hit2.value, b"v-new");
                // Demote back to a direct slot.
                let resp = ctx
                    .rpc(dpm_node, to_json(&DpmMsg::RemoveIndirect { key: b"rep".to_vec() }))
                    .await
                    .expect("remove rpc");
                assert!(matches!(from_json::<DpmResp>(&resp), Some(DpmResp::CellRemoved)));
                index_lookup(&ctx, &lay2, b"rep").await.expect("lookup")
            })
            .expect("scenario finished");
        sim.run_until_idle();
        let LookupOutcome::Found(hit) = outcome.outcome else { panic!("missing after remove") };
        assert_eq!(hit.value, b"v-new");
        assert!(!hit.indirect, "slot points straight at the entry again");
        assert_eq!(outcome.rts, 2);
        let infos = dpm.segment_infos();
        let s1_info = infos.iter().find(|i| i.total_values == 1 && i.invalid_values == 1);
        assert!(s1_info.is_some(), "superseded value was retired");
        dpm.stop();
    }

    #[test]
    fn stale_batched_put_does_not_clobber_newer_cas_publish() {
        let (sim, dpm, kn) = small_sim(51);
        let dpm_node = dpm.node;
        let lay = dpm.handle().layout;
        let ctx = NodeCtx::new(&sim, kn);
        let lay2 = lay.clone();
        sim.spawn(kn, async move {
            let s1 = alloc_seg(&ctx, dpm_node).await;
            write_entries(&ctx, s1, &[(b"w".to_vec(), b"first".to_vec(), EntryKind::Put, 1)])
                .await;
            enqueue(&ctx, dpm_node, s1, vec![]).await;
            ctx.sleep_units(100).await;
            ctx.rpc(dpm_node, to_json(&DpmMsg::InstallIndirect { key: b"w".to_vec() }))
                .await
                .expect("install rpc");
            // Newer direct publish (seq 5).
            let s2 = alloc_seg(&ctx, dpm_node).await;
            let entry = encode_entry(b"w", b"newer", EntryKind::DirectPut, 5);
            ctx.write(s2, entry, RtCategory::WriteFlush).await.expect("entry write");
            let snap = ctx.read(lay2.bucket_addr_for_hash(hash64(b"w")), BUCKET_STRIDE,
                RtCategory::MissTraversal).await.expect("bucket");
            let frame = BucketFrame::decode(&snap);
            let cell = frame
                .slots
                .iter()
                .find(|s| !s.is_empty() && lay2.is_cell_addr(s.value_addr))
                .map(|s| s.value_addr)
                .expect("cell installed");
            let cur = ctx.read(cell, 8, RtCategory::MissTraversal).await.expect("cell");
            let cur = u64::from_le_bytes(cur.try_into().unwrap());
            let outcome = ctx.cas(cell, cur, s2).await.expect("cas");
            assert!(outcome.success);
            enqueue(&ctx, dpm_node, s2, vec![cur]).await;
            // A stale batched update (seq 3) merged after the fact must lose.
            let s3 = alloc_seg(&ctx, dpm_node).await;
            write_entries(&ctx, s3, &[(b"w".to_vec(), b"stale".to_vec(), EntryKind::Put, 3)])
                .await;
            enqueue(&ctx, dpm_node, s3, vec![]).await;
            ctx.sleep_units(200).await;
            let after = index_lookup(&ctx, &lay2, b"w").await.expect("lookup");
            let LookupOutcome::Found(hit) = after.outcome else { panic!("missing") };
            assert_eq!(hit.value, b"newer", "stale merge must not win the cell");
        });
        sim.run_until_idle();
        let infos = dpm.segment_infos();
        let stale_seg = infos.iter().find(|i| i.total_values == 1 && i.invalid_values == 1);
        assert!(stale_seg.is_some(), "dead-on-arrival value is retired immediately");
        dpm.stop();
    }
}
