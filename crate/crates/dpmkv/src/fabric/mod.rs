//! Simulated interconnect and deterministic cooperative scheduler.
//!
//! Every node interacts with the shared pool exclusively through one-sided
//! READ / WRITE / CAS ops and two-sided RPC; each op costs exactly one network
//! round trip. The engine owns the pool, a discrete-event clock and all tasks:
//! only one task runs at a time, ops complete as events ordered by
//! `(time, seeded tie-break, sequence)`, and therefore a run is a pure
//! function of configuration and seed.
//!
//! Timing model: an op issued at `t` applies and completes atomically at
//! `t + rt_latency`. RPCs split the round trip into a request leg (delivery to
//! the destination handler) and a response leg. Local service steps advance
//! the clock through [`NodeCtx::step`].

pub mod pool;

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use serde::{Deserialize, Serialize};

use crate::config::TimingConfig;
use crate::hash::SplitMix64;
use pool::{Fault, Pool, ATOMIC_UNIT};

// ---------------------------------------------------------------------------
// Identifiers and accounting
// ---------------------------------------------------------------------------

/// Simulated node (endpoint) identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Address into the flat pool.
pub type Addr = u64;
pub type OpId = u64;
pub type TaskId = u64;

/// Semantic category an issuer assigns to each round trip; the per-node
/// ledger keeps one counter per category.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum RtCategory {
    ReadHitShortcut,
    MissTraversal,
    WriteFlush,
    Cas,
    Rpc,
}

pub const RT_CATEGORIES: [RtCategory; 5] = [
    RtCategory::ReadHitShortcut,
    RtCategory::MissTraversal,
    RtCategory::WriteFlush,
    RtCategory::Cas,
    RtCategory::Rpc,
];

impl RtCategory {
    #[inline]
    fn index(self) -> usize {
        match self {
            RtCategory::ReadHitShortcut => 0,
            RtCategory::MissTraversal => 1,
            RtCategory::WriteFlush => 2,
            RtCategory::Cas => 3,
            RtCategory::Rpc => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RtCategory::ReadHitShortcut => "read_hit_shortcut",
            RtCategory::MissTraversal => "miss_traversal",
            RtCategory::WriteFlush => "write_flush",
            RtCategory::Cas => "cas",
            RtCategory::Rpc => "rpc",
        }
    }
}

/// Per-node round-trip ledger. `total_ops` always equals the sum of the
/// category counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtStats {
    pub counts: [u64; 5],
    pub total_ops: u64,
}

impl RtStats {
    fn charge(&mut self, cat: RtCategory) {
        self.counts[cat.index()] += 1;
        self.total_ops += 1;
    }

    pub fn get(&self, cat: RtCategory) -> u64 {
        self.counts[cat.index()]
    }

    pub fn total(&self) -> u64 {
        self.total_ops
    }

    /// Counterpart of `a - b` for ledgers taken before and after a phase.
    pub fn delta_from(&self, earlier: &RtStats) -> RtStats {
        let mut counts = [0u64; 5];
        for i in 0..5 {
            counts[i] = self.counts[i] - earlier.counts[i];
        }
        RtStats { counts, total_ops: self.total_ops - earlier.total_ops }
    }
}

// ---------------------------------------------------------------------------
// Op outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CasOutcome {
    pub success: bool,
    /// Word value at the linearization instant (old value on success).
    pub observed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum RpcFailure {
    #[error("rpc timed out")]
    TimedOut,
}

#[derive(Debug)]
enum OpOutcome {
    Bytes(Vec<u8>),
    Unit,
    Cas(CasOutcome),
    Reply(Vec<u8>),
    Faulted(Fault),
    TimedOut,
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum EvKind {
    /// One-sided op (or sleep) applies and completes.
    Apply(OpId),
    /// RPC request reaches its destination handler.
    RpcDeliver(OpId),
    /// RPC response reaches the issuer.
    RpcRespond(OpId),
    /// RPC deadline passes at the issuer.
    RpcTimeout(OpId),
    /// Explicit task wake (mailboxes).
    Wake(TaskId),
}

struct Ev {
    time: u64,
    tie: u64,
    seq: u64,
    what: EvKind,
    /// Daemon events (periodic background timers) do not keep the engine
    /// alive: `run_until_idle` returns once only daemon events remain.
    daemon: bool,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.tie, self.seq) == (other.time, other.tie, other.seq)
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.tie, self.seq).cmp(&(other.time, other.tie, other.seq))
    }
}

enum InflightKind {
    Read { addr: Addr, len: u64 },
    Write { addr: Addr, data: Vec<u8> },
    Cas { addr: Addr, expected: u64, desired: u64 },
    Sleep,
    Rpc { dest: NodeId, request: Vec<u8>, reply: Option<Vec<u8>>, delivered: bool },
}

struct Inflight {
    issuer: NodeId,
    kind: InflightKind,
}

struct NodeMeta {
    alive: bool,
    handler: Option<Rc<dyn Fn(&Sim, RpcRequest)>>,
    label: String,
}

struct TaskEntry {
    node: NodeId,
    fut: Option<Pin<Box<dyn Future<Output = ()>>>>,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct Inner {
    timing: TimingConfig,
    clock: u64,
    rng: SplitMix64,
    pool: Pool,
    heap: BinaryHeap<Reverse<Ev>>,
    next_seq: u64,
    next_op: OpId,
    next_task: TaskId,
    next_node: u32,
    nodes: BTreeMap<NodeId, NodeMeta>,
    stats: BTreeMap<NodeId, RtStats>,
    inflight: HashMap<OpId, Inflight>,
    completions: HashMap<OpId, OpOutcome>,
    op_waiter: HashMap<OpId, TaskId>,
    tasks: HashMap<TaskId, TaskEntry>,
    ready: VecDeque<TaskId>,
    current: Option<TaskId>,
    trace: Option<Vec<u8>>,
    nondaemon_events: usize,
    // RPC ops that completed (or were orphaned) while their timeout event is
    // still queued.  Their share of `nondaemon_events` has already been
    // settled, so the popped timeout must be skipped without re-counting --
    // otherwise a finished request would keep the engine awake until its
    // deadline and background wakeups would drag the clock there.
    dead_timeouts: HashSet<OpId>,
}

/// Handle to the engine; cheap to clone, single-threaded.
#[derive(Clone)]
pub struct Sim {
    inner: Rc<RefCell<Inner>>,
}

/// Inbound RPC as seen by a node's handler.
pub struct RpcRequest {
    pub from: NodeId,
    pub payload: Vec<u8>,
    pub reply: ReplyHandle,
}

/// Token a handler (or a task it spawned) uses to answer an RPC.
#[derive(Clone, Copy, Debug)]
pub struct ReplyHandle {
    op: OpId,
}

impl Sim {
    pub fn new(timing: TimingConfig, pool_size: u64, seed: u64) -> Self {
        let rng = SplitMix64::new(seed).fork("fabric");
        Sim {
            inner: Rc::new(RefCell::new(Inner {
                timing,
                clock: 0,
                rng,
                pool: Pool::new(pool_size),
                heap: BinaryHeap::new(),
                next_seq: 0,
                next_op: 1,
                next_task: 1,
                next_node: 0,
                nodes: BTreeMap::new(),
                stats: BTreeMap::new(),
                inflight: HashMap::new(),
                completions: HashMap::new(),
                op_waiter: HashMap::new(),
                tasks: HashMap::new(),
                ready: VecDeque::new(),
                current: None,
                trace: None,
                nondaemon_events: 0,
                dead_timeouts: HashSet::new(),
            })),
        }
    }

    pub fn now(&self) -> u64 {
        self.inner.borrow().clock
    }

    pub fn timing(&self) -> TimingConfig {
        self.inner.borrow().timing.clone()
    }

    /// Register a node and return its id. Ids are dense and assigned in
    /// registration order.
    pub fn add_node(&self, label: &str) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        let id = NodeId(inner.next_node);
        inner.next_node += 1;
        inner
            .nodes
            .insert(id, NodeMeta { alive: true, handler: None, label: label.to_string() });
        inner.stats.insert(id, RtStats::default());
        id
    }

    pub fn node_label(&self, node: NodeId) -> String {
        self.inner.borrow().nodes.get(&node).map(|m| m.label.clone()).unwrap_or_default()
    }

    pub fn set_rpc_handler(&self, node: NodeId, handler: Rc<dyn Fn(&Sim, RpcRequest)>) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.get_mut(&node).expect("unknown node").handler = Some(handler);
    }

    pub fn node_alive(&self, node: NodeId) -> bool {
        self.inner.borrow().nodes.get(&node).map(|m| m.alive).unwrap_or(false)
    }

    pub fn stats(&self, node: NodeId) -> RtStats {
        self.inner.borrow().stats.get(&node).cloned().unwrap_or_default()
    }

    pub fn stats_all(&self) -> BTreeMap<NodeId, RtStats> {
        self.inner.borrow().stats.clone()
    }

    /// Direct pool access for pool-side processors (no round trip charged).
    pub fn with_pool<R>(&self, f: impl FnOnce(&mut Pool) -> R) -> R {
        f(&mut self.inner.borrow_mut().pool)
    }

    pub fn enable_trace(&self) {
        let mut inner = self.inner.borrow_mut();
        let mut buf = Vec::new();
        buf.extend_from_slice(b"clock,node,kind,addr,len,rts\n");
        inner.trace = Some(buf);
    }

    pub fn take_trace(&self) -> Option<Vec<u8>> {
        self.inner.borrow_mut().trace.take()
    }

    // -- scheduling ---------------------------------------------------------

    fn schedule(inner: &mut Inner, at: u64, what: EvKind) {
        Self::schedule_ex(inner, at, what, false);
    }

    fn schedule_ex(inner: &mut Inner, at: u64, what: EvKind, daemon: bool) {
        let tie = inner.rng.next_u64();
        let seq = inner.next_seq;
        inner.next_seq += 1;
        if !daemon {
            inner.nondaemon_events += 1;
        }
        inner.heap.push(Reverse(Ev { time: at, tie, seq, what, daemon }));
    }

    fn trace_op(inner: &mut Inner, node: NodeId, kind: &str, addr: u64, len: u64) {
        if let Some(buf) = inner.trace.as_mut() {
            use std::io::Write;
            let clock = inner.clock;
            let _ = writeln!(buf, "{clock},{node},{kind},{addr},{len},1");
        }
    }

    fn issue(&self, node: NodeId, cat: RtCategory, kind: InflightKind) -> OpId {
        let mut inner = self.inner.borrow_mut();
        let task = inner.current.expect("fabric ops must be issued from within a task");
        assert!(
            inner.nodes.get(&node).map(|m| m.alive).unwrap_or(false),
            "op issued by dead or unknown node {node}"
        );
        let op = inner.next_op;
        inner.next_op += 1;
        let (kind_label, addr, len) = match &kind {
            InflightKind::Read { addr, len } => ("read", *addr, *len),
            InflightKind::Write { addr, data } => ("write", *addr, data.len() as u64),
            InflightKind::Cas { addr, .. } => ("cas", *addr, ATOMIC_UNIT),
            InflightKind::Rpc { dest, request, .. } => ("rpc", dest.0 as u64, request.len() as u64),
            InflightKind::Sleep => ("sleep", 0, 0),
        };
        let is_rpc = matches!(kind, InflightKind::Rpc { .. });
        if !matches!(kind, InflightKind::Sleep) {
            inner.stats.get_mut(&node).expect("node stats").charge(cat);
            Self::trace_op(&mut inner, node, kind_label, addr, len);
        }
        inner.inflight.insert(op, Inflight { issuer: node, kind });
        inner.op_waiter.insert(op, task);
        let now = inner.clock;
        if is_rpc {
            let t = inner.timing.clone();
            Self::schedule(&mut inner, now + t.rpc_request_leg, EvKind::RpcDeliver(op));
            Self::schedule(&mut inner, now + t.rpc_timeout, EvKind::RpcTimeout(op));
        } else {
            let dt = match kind_label {
                "sleep" => len, // never taken; sleeps use issue_sleep
                _ => inner.timing.rt_latency,
            };
            Self::schedule(&mut inner, now + dt, EvKind::Apply(op));
        }
        op
    }

    fn issue_sleep(&self, node: NodeId, dt: u64, daemon: bool) -> OpId {
        let mut inner = self.inner.borrow_mut();
        let task = inner.current.expect("sleep must be issued from within a task");
        let op = inner.next_op;
        inner.next_op += 1;
        inner.inflight.insert(op, Inflight { issuer: node, kind: InflightKind::Sleep });
        inner.op_waiter.insert(op, task);
        let now = inner.clock;
        Self::schedule_ex(&mut inner, now + dt, EvKind::Apply(op), daemon);
        op
    }

    fn take_completion(&self, op: OpId) -> Option<OpOutcome> {
        self.inner.borrow_mut().completions.remove(&op)
    }

    fn complete(inner: &mut Inner, op: OpId, outcome: OpOutcome) -> Option<TaskId> {
        match inner.op_waiter.remove(&op) {
            Some(task) if inner.tasks.contains_key(&task) => {
                inner.completions.insert(op, outcome);
                Some(task)
            }
            // Waiter died (or never existed): drop the outcome.
            _ => None,
        }
    }

    /// Answer an inbound RPC. Dropped silently if the issuer died or the
    /// deadline already passed.
    pub fn rpc_reply(&self, handle: ReplyHandle, payload: Vec<u8>) {
        let mut inner = self.inner.borrow_mut();
        let now = inner.clock;
        let leg = inner.timing.rpc_response_leg;
        if let Some(inflight) = inner.inflight.get_mut(&handle.op) {
            if let InflightKind::Rpc { reply, .. } = &mut inflight.kind {
                if reply.is_none() {
                    *reply = Some(payload);
                    Self::schedule(&mut inner, now + leg, EvKind::RpcRespond(handle.op));
                }
            }
        }
    }

    /// Kill a node: its tasks stop, its handler is removed, and fates of its
    /// in-flight ops are decided by the seeded RNG (writes may apply an
    /// 8-byte-aligned prefix, a CAS applies or vanishes, reads vanish).
    pub fn kill_node(&self, node: NodeId) {
        let mut inner = self.inner.borrow_mut();
        let Some(meta) = inner.nodes.get_mut(&node) else { return };
        meta.alive = false;
        meta.handler = None;

        let mut dead_tasks: Vec<TaskId> =
            inner.tasks.iter().filter(|(_, t)| t.node == node).map(|(&id, _)| id).collect();
        dead_tasks.sort_unstable();
        for tid in dead_tasks {
            inner.tasks.remove(&tid);
        }
        let mut ready = std::mem::take(&mut inner.ready);
        ready.retain(|tid| inner.tasks.contains_key(tid));
        inner.ready = ready;

        let mut ops: Vec<OpId> =
            inner.inflight.iter().filter(|(_, f)| f.issuer == node).map(|(&op, _)| op).collect();
        ops.sort_unstable();
        for op in ops {
            inner.op_waiter.remove(&op);
            // A request already on the wire keeps its delivery and
            // server-side effects; nobody consumes the response, so its
            // timeout's event count is settled here instead of waited out.
            if matches!(inner.inflight[&op].kind, InflightKind::Rpc { .. }) {
                if inner.dead_timeouts.insert(op) {
                    inner.nondaemon_events -= 1;
                }
                continue;
            }
            let fate = match &inner.inflight[&op].kind {
                InflightKind::Read { .. } | InflightKind::Sleep => Some(()),
                InflightKind::Write { .. } => None, // handled below, needs rng
                InflightKind::Cas { .. } => None,
                InflightKind::Rpc { .. } => unreachable!(),
            };
            if fate.is_some() {
                inner.inflight.remove(&op);
                continue;
            }
            let drop_or_cut = inner.rng.next_u64();
            let entry = inner.inflight.get_mut(&op).unwrap();
            match &mut entry.kind {
                InflightKind::Write { data, .. } => {
                    // Torn flush: keep a random 8-byte-aligned prefix
                    // (possibly empty, possibly everything).
                    let atoms = data.len() as u64 / ATOMIC_UNIT + 1;
                    let keep =
                        (((drop_or_cut as u128 * atoms as u128) >> 64) as u64) * ATOMIC_UNIT;
                    let keep = keep.min(data.len() as u64) as usize;
                    if keep == 0 {
                        inner.inflight.remove(&op);
                    } else {
                        data.truncate(keep);
                    }
                }
                InflightKind::Cas { .. } => {
                    if drop_or_cut & 1 == 0 {
                        inner.inflight.remove(&op);
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    // -- task plumbing ------------------------------------------------------

    /// Spawn a task owned by `node`; it is dropped if the node dies.
    pub fn spawn(&self, node: NodeId, fut: impl Future<Output = ()> + 'static) {
        let mut inner = self.inner.borrow_mut();
        let tid = inner.next_task;
        inner.next_task += 1;
        inner.tasks.insert(tid, TaskEntry { node, fut: Some(Box::pin(fut)) });
        inner.ready.push_back(tid);
    }

    fn current_task(&self) -> TaskId {
        self.inner.borrow().current.expect("not inside a task")
    }

    fn poll_task(&self, tid: TaskId) {
        let mut fut = {
            let mut inner = self.inner.borrow_mut();
            match inner.tasks.get_mut(&tid).and_then(|t| t.fut.take()) {
                Some(f) => f,
                None => return,
            }
        };
        self.inner.borrow_mut().current = Some(tid);
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        let done = fut.as_mut().poll(&mut cx).is_ready();
        let mut inner = self.inner.borrow_mut();
        inner.current = None;
        if done {
            inner.tasks.remove(&tid);
        } else if let Some(entry) = inner.tasks.get_mut(&tid) {
            entry.fut = Some(fut);
        }
        // else: the task's node was killed while it ran; the future is
        // dropped here.
    }

    /// Run until no events and no runnable tasks remain, ignoring daemon
    /// timers (periodic background loops): once only those are left, the
    /// engine is considered idle. Tasks parked on mailboxes may outlive
    /// this; they simply never run again.
    pub fn run_until_idle(&self) {
        loop {
            loop {
                let tid = { self.inner.borrow_mut().ready.pop_front() };
                match tid {
                    Some(tid) => self.poll_task(tid),
                    None => break,
                }
            }
            let ev = {
                let mut inner = self.inner.borrow_mut();
                loop {
                    if inner.nondaemon_events == 0 {
                        break None;
                    }
                    let Some(Reverse(ev)) = inner.heap.pop() else { break None };
                    // A timeout whose event count was settled when its op
                    // completed: drop it before any bookkeeping.
                    if let EvKind::RpcTimeout(op) = ev.what {
                        if inner.dead_timeouts.remove(&op) {
                            continue;
                        }
                    }
                    if !ev.daemon {
                        inner.nondaemon_events -= 1;
                    }
                    // A deadline whose op already completed is discarded
                    // without advancing the clock.
                    if let EvKind::RpcTimeout(op) = ev.what {
                        if !inner.op_waiter.contains_key(&op) {
                            continue;
                        }
                    }
                    debug_assert!(ev.time >= inner.clock, "time went backwards");
                    inner.clock = ev.time;
                    break Some(ev);
                }
            };
            match ev {
                Some(ev) => self.dispatch(ev),
                None => break,
            }
        }
    }

    /// Convenience for tests: spawn `fut` on `node`, run to idle, return its
    /// result (None if the task never finished).
    pub fn block_on<T: 'static>(
        &self,
        node: NodeId,
        fut: impl Future<Output = T> + 'static,
    ) -> Option<T> {
        let slot: Rc<RefCell<Option<T>>> = Rc::new(RefCell::new(None));
        let out = slot.clone();
        self.spawn(node, async move {
            let v = fut.await;
            *out.borrow_mut() = Some(v);
        });
        self.run_until_idle();
        let result = slot.borrow_mut().take();
        result
    }

    fn dispatch(&self, ev: Ev) {
        match ev.what {
            EvKind::Apply(op) => self.apply_op(op),
            EvKind::RpcDeliver(op) => self.deliver_rpc(op),
            EvKind::RpcRespond(op) => {
                let mut inner = self.inner.borrow_mut();
                if let Some(Inflight { kind: InflightKind::Rpc { reply, .. }, .. }) =
                    inner.inflight.remove(&op)
                {
                    // The op's timeout is still queued but can never fire;
                    // settle its event count now so an idle engine doesn't
                    // sit out the deadline dispatching background timers.
                    if inner.dead_timeouts.insert(op) {
                        inner.nondaemon_events -= 1;
                    }
                    let payload = reply.unwrap_or_default();
                    if let Some(task) = Self::complete(&mut inner, op, OpOutcome::Reply(payload)) {
                        inner.ready.push_back(task);
                    }
                }
            }
            EvKind::RpcTimeout(op) => {
                let mut inner = self.inner.borrow_mut();
                let still_waiting = matches!(
                    inner.inflight.get(&op),
                    Some(Inflight { kind: InflightKind::Rpc { reply: None, .. }, .. })
                );
                if still_waiting {
                    inner.inflight.remove(&op);
                    if let Some(task) = Self::complete(&mut inner, op, OpOutcome::TimedOut) {
                        inner.ready.push_back(task);
                    }
                }
            }
            EvKind::Wake(task) => {
                let mut inner = self.inner.borrow_mut();
                if inner.tasks.contains_key(&task) {
                    inner.ready.push_back(task);
                }
            }
        }
    }

    fn apply_op(&self, op: OpId) {
        let mut inner = self.inner.borrow_mut();
        let Some(inflight) = inner.inflight.remove(&op) else { return };
        let outcome = match inflight.kind {
            InflightKind::Read { addr, len } => match inner.pool.read(addr, len) {
                Ok(bytes) => OpOutcome::Bytes(bytes),
                Err(f) => OpOutcome::Faulted(f),
            },
            InflightKind::Write { addr, data } => match inner.pool.write(addr, &data) {
                Ok(()) => OpOutcome::Unit,
                Err(f) => OpOutcome::Faulted(f),
            },
            InflightKind::Cas { addr, expected, desired } => {
                match inner.pool.cas(addr, expected, desired) {
                    Ok((success, observed)) => OpOutcome::Cas(CasOutcome { success, observed }),
                    Err(f) => OpOutcome::Faulted(f),
                }
            }
            InflightKind::Sleep => OpOutcome::Unit,
            InflightKind::Rpc { .. } => unreachable!("rpc ops are not Apply events"),
        };
        if let Some(task) = Self::complete(&mut inner, op, outcome) {
            inner.ready.push_back(task);
        }
    }

    fn deliver_rpc(&self, op: OpId) {
        let (handler, request) = {
            let mut inner = self.inner.borrow_mut();
            let Some(inflight) = inner.inflight.get_mut(&op) else { return };
            let issuer = inflight.issuer;
            let InflightKind::Rpc { dest, request, delivered, .. } = &mut inflight.kind else {
                return;
            };
            *delivered = true;
            let dest = *dest;
            let payload = std::mem::take(request);
            let handler = inner.nodes.get(&dest).filter(|m| m.alive).and_then(|m| m.handler.clone());
            (handler, (issuer, payload))
        };
        if let Some(handler) = handler {
            let (from, payload) = request;
            handler(self, RpcRequest { from, payload, reply: ReplyHandle { op } });
        }
        // Dead or handler-less destination: the issuer's timeout will fire.
    }
}

// ---------------------------------------------------------------------------
// Node-scoped async API
// ---------------------------------------------------------------------------

struct OpWait {
    sim: Sim,
    op: OpId,
}

impl Future for OpWait {
    type Output = OpOutcome;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        match self.sim.take_completion(self.op) {
            Some(outcome) => Poll::Ready(outcome),
            None => Poll::Pending,
        }
    }
}

/// Per-node face of the engine: issue ops, spawn tasks, advance local time.
#[derive(Clone)]
pub struct NodeCtx {
    pub sim: Sim,
    pub node: NodeId,
}

impl NodeCtx {
    pub fn new(sim: &Sim, node: NodeId) -> Self {
        NodeCtx { sim: sim.clone(), node }
    }

    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        self.sim.spawn(self.node, fut);
    }

    /// One-sided read of `[addr, addr+len)`; 1 RT; snapshot at an instant.
    pub async fn read(&self, addr: Addr, len: u64, cat: RtCategory) -> Result<Vec<u8>, Fault> {
        let op = self.sim.issue(self.node, cat, InflightKind::Read { addr, len });
        match (OpWait { sim: self.sim.clone(), op }).await {
            OpOutcome::Bytes(b) => Ok(b),
            OpOutcome::Faulted(f) => Err(f),
            other => unreachable!("read completed with {other:?}"),
        }
    }

    /// One-sided write; 1 RT regardless of length; atomic at its instant.
    pub async fn write(&self, addr: Addr, data: Vec<u8>, cat: RtCategory) -> Result<(), Fault> {
        let op = self.sim.issue(self.node, cat, InflightKind::Write { addr, data });
        match (OpWait { sim: self.sim.clone(), op }).await {
            OpOutcome::Unit => Ok(()),
            OpOutcome::Faulted(f) => Err(f),
            other => unreachable!("write completed with {other:?}"),
        }
    }

    /// One-sided compare-and-swap on an aligned 8-byte word; 1 RT.
    pub async fn cas(
        &self,
        addr: Addr,
        expected: u64,
        desired: u64,
    ) -> Result<CasOutcome, Fault> {
        let op =
            self.sim.issue(self.node, RtCategory::Cas, InflightKind::Cas { addr, expected, desired });
        match (OpWait { sim: self.sim.clone(), op }).await {
            OpOutcome::Cas(c) => Ok(c),
            OpOutcome::Faulted(f) => Err(f),
            other => unreachable!("cas completed with {other:?}"),
        }
    }

    /// Two-sided call; 1 RT plus destination service time; times out.
    pub async fn rpc(&self, dest: NodeId, payload: Vec<u8>) -> Result<Vec<u8>, RpcFailure> {
        let op = self.sim.issue(
            self.node,
            RtCategory::Rpc,
            InflightKind::Rpc { dest, request: payload, reply: None, delivered: false },
        );
        match (OpWait { sim: self.sim.clone(), op }).await {
            OpOutcome::Reply(bytes) => Ok(bytes),
            OpOutcome::TimedOut => Err(RpcFailure::TimedOut),
            other => unreachable!("rpc completed with {other:?}"),
        }
    }

    /// Advance the clock by `steps` local service steps.
    pub async fn step(&self, steps: u64) {
        let dt = steps * self.sim.timing().service_step;
        self.sleep_units(dt).await;
    }

    /// Advance the clock by an absolute number of time units.
    pub async fn sleep_units(&self, dt: u64) {
        if dt == 0 {
            return;
        }
        let op = self.sim.issue_sleep(self.node, dt, false);
        let _ = (OpWait { sim: self.sim.clone(), op }).await;
    }

    /// Sleep that does not keep the engine alive; for periodic background
    /// loops (collectors, heartbeats) that would otherwise prevent
    /// `run_until_idle` from ever returning.
    pub async fn daemon_sleep(&self, dt: u64) {
        if dt == 0 {
            return;
        }
        let op = self.sim.issue_sleep(self.node, dt, true);
        let _ = (OpWait { sim: self.sim.clone(), op }).await;
    }
}

// ---------------------------------------------------------------------------
// Mailbox
// ---------------------------------------------------------------------------

struct MailboxState<T> {
    queue: VecDeque<T>,
    waiters: VecDeque<TaskId>,
}

/// Deterministic single-threaded channel: senders push, parked tasks are
/// woken through the event heap (so same-instant wakes shuffle with other
/// events under the seeded tie-break).
pub struct Mailbox<T> {
    sim: Sim,
    state: Rc<RefCell<MailboxState<T>>>,
}

impl<T> Clone for Mailbox<T> {
    fn clone(&self) -> Self {
        Mailbox { sim: self.sim.clone(), state: self.state.clone() }
    }
}

impl<T: 'static> Mailbox<T> {
    pub fn new(sim: &Sim) -> Self {
        Mailbox {
            sim: sim.clone(),
            state: Rc::new(RefCell::new(MailboxState {
                queue: VecDeque::new(),
                waiters: VecDeque::new(),
            })),
        }
    }

    pub fn push(&self, value: T) {
        let waiter = {
            let mut st = self.state.borrow_mut();
            st.queue.push_back(value);
            st.waiters.pop_front()
        };
        if let Some(task) = waiter {
            let mut inner = self.sim.inner.borrow_mut();
            let now = inner.clock;
            Sim::schedule(&mut inner, now, EvKind::Wake(task));
        }
    }

    pub fn len(&self) -> usize {
        self.state.borrow().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn recv(&self) -> MailboxRecv<T> {
        MailboxRecv { mailbox: self.clone() }
    }
}

pub struct MailboxRecv<T> {
    mailbox: Mailbox<T>,
}

impl<T: 'static> Future for MailboxRecv<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        let mut st = self.mailbox.state.borrow_mut();
        if let Some(v) = st.queue.pop_front() {
            return Poll::Ready(v);
        }
        let current = self.mailbox.sim.current_task();
        if !st.waiters.contains(&current) {
            st.waiters.push_back(current);
        }
        Poll::Pending
    }
}
