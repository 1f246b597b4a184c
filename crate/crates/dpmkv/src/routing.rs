//! Ownership metadata and the client library.
//!
//! A versioned, immutable membership snapshot maps every key to its owning
//! node (consistent-hash ring with virtual nodes) and worker thread, plus an
//! explicit owner set for replicated keys. The routing node serves and
//! swaps snapshots atomically; clients cache a snapshot and refresh it only
//! when a server refuses a key or stops answering.
//!
//! Invariants:
//! - a key has exactly one primary owner per snapshot version,
//! - adding or removing a node moves only the arcs that node's virtual
//!   points carve out,
//! - snapshots at the routing node only ever advance in version,
//! - key→worker mapping is a pure function of (key, workers_per_kn), so the
//!   routing node and the owning node always agree on it.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::rc::Rc;

use crate::config::RoutingConfig;
use crate::fabric::{NodeCtx, NodeId, RpcFailure, Sim};
use crate::hash::{hash64, mix64, SplitMix64};
use crate::wire::{from_json, to_json, DataReq, DataResp, MembershipWire, RnMsg, RnResp};

// ---------------------------------------------------------------------------
// Membership snapshot
// ---------------------------------------------------------------------------

/// One immutable routing snapshot: ring members, virtual-point layout, and
/// the owner sets of replicated keys. Lookups are pure functions of the
/// snapshot.
#[derive(Debug, Clone)]
pub struct Membership {
    pub version: u64,
    /// Active nodes, ascending.
    pub kns: Vec<NodeId>,
    pub virtual_nodes: u32,
    pub workers_per_kn: u32,
    /// Owner sets (primary first) of keys served by more than one node.
    replicated: BTreeMap<Vec<u8>, Vec<NodeId>>,
    /// Virtual points, ascending; each point owns the arc ending at it.
    ring: Vec<(u64, NodeId)>,
}

/// A node's virtual points depend only on its own identity, so membership
/// changes move no other node's points.
fn virtual_point(kn: NodeId, i: u32) -> u64 {
    mix64(mix64(0x52_49_4E_47 ^ kn.0 as u64) ^ i as u64)
}

const WORKER_SALT: u64 = 0x57_4F_52_4B;

impl Membership {
    pub fn new(version: u64, mut kns: Vec<NodeId>, cfg: &RoutingConfig) -> Membership {
        kns.sort_unstable();
        kns.dedup();
        assert!(!kns.is_empty(), "membership needs at least one node");
        let mut ring = Vec::with_capacity(kns.len() * cfg.virtual_nodes as usize);
        for &kn in &kns {
            for i in 0..cfg.virtual_nodes {
                ring.push((virtual_point(kn, i), kn));
            }
        }
        ring.sort_unstable();
        Membership {
            version,
            kns,
            virtual_nodes: cfg.virtual_nodes,
            workers_per_kn: cfg.workers_per_kn.max(1),
            replicated: BTreeMap::new(),
            ring,
        }
    }

    /// Next-version copy with `kns` as the new member set; replication
    /// entries are kept but clamped to surviving owners (dropped when the
    /// primary is gone or fewer than two owners survive).
    pub fn advance(&self, kns: Vec<NodeId>) -> Membership {
        let cfg = RoutingConfig {
            virtual_nodes: self.virtual_nodes,
            workers_per_kn: self.workers_per_kn,
            client_retry_budget: 0,
        };
        let mut next = Membership::new(self.version + 1, kns, &cfg);
        for (key, owners) in &self.replicated {
            let survivors: Vec<NodeId> =
                owners.iter().copied().filter(|kn| next.kns.contains(kn)).collect();
            if survivors.len() >= 2 && next.kns.contains(&owners[0]) {
                next.replicated.insert(key.clone(), survivors);
            }
        }
        next
    }

    pub fn set_replication(&mut self, key: Vec<u8>, owners: Vec<NodeId>) {
        debug_assert!(!owners.is_empty());
        debug_assert!(owners.iter().all(|kn| self.kns.contains(kn)));
        if owners.len() <= 1 {
            self.replicated.remove(&key);
        } else {
            self.replicated.insert(key, owners);
        }
    }

    pub fn clear_replication(&mut self, key: &[u8]) {
        self.replicated.remove(key);
    }

    pub fn replicated_keys(&self) -> impl Iterator<Item = (&Vec<u8>, &Vec<NodeId>)> {
        self.replicated.iter()
    }

    /// The node whose arc covers the key's hash point.
    pub fn primary_owner(&self, key: &[u8]) -> NodeId {
        let h = hash64(key);
        let at = self.ring.partition_point(|&(p, _)| p < h);
        let (_, kn) = self.ring[at % self.ring.len()];
        kn
    }

    /// Every node allowed to serve the key, primary first.
    pub fn owner_set(&self, key: &[u8]) -> Vec<NodeId> {
        match self.replicated.get(key) {
            Some(owners) => owners.clone(),
            None => vec![self.primary_owner(key)],
        }
    }

    /// The first `r` distinct nodes met walking the ring from the key's
    /// point: the canonical owner set when the key is replicated r ways.
    /// Starts at the primary; capped at the member count.
    pub fn successors(&self, key: &[u8], r: u32) -> Vec<NodeId> {
        let h = hash64(key);
        let start = self.ring.partition_point(|&(p, _)| p < h);
        let mut out: Vec<NodeId> = Vec::new();
        for i in 0..self.ring.len() {
            let (_, kn) = self.ring[(start + i) % self.ring.len()];
            if !out.contains(&kn) {
                out.push(kn);
                if out.len() >= r as usize {
                    break;
                }
            }
        }
        out
    }

    pub fn owns(&self, kn: NodeId, key: &[u8]) -> bool {
        match self.replicated.get(key) {
            Some(owners) => owners.contains(&kn),
            None => self.primary_owner(key) == kn,
        }
    }

    /// Worker thread serving the key at its owner; identical wherever it is
    /// evaluated.
    pub fn worker_for(&self, key: &[u8]) -> u32 {
        (crate::hash::hash64_salted(WORKER_SALT, key) % self.workers_per_kn as u64) as u32
    }

    pub fn to_wire(&self) -> MembershipWire {
        MembershipWire {
            version: self.version,
            kns: self.kns.clone(),
            virtual_nodes: self.virtual_nodes,
            workers_per_kn: self.workers_per_kn,
            replicated: self
                .replicated
                .iter()
                .map(|(k, owners)| (k.clone(), owners.len() as u32, owners.clone()))
                .collect(),
        }
    }

    pub fn from_wire(w: &MembershipWire) -> Membership {
        let cfg = RoutingConfig {
            virtual_nodes: w.virtual_nodes,
            workers_per_kn: w.workers_per_kn,
            client_retry_budget: 0,
        };
        let mut m = Membership::new(w.version, w.kns.clone(), &cfg);
        m.version = w.version;
        for (key, r, owners) in &w.replicated {
            debug_assert_eq!(*r as usize, owners.len());
            m.replicated.insert(key.clone(), owners.clone());
        }
        m
    }

    /// Dump the ring as `version,kn_id,arc_start,arc_end` rows (one per
    /// virtual point; the row with arc_start > arc_end wraps through 0).
    pub fn arcs_csv(&self) -> String {
        let mut out = String::from("version,kn_id,arc_start,arc_end\n");
        for (i, &(point, kn)) in self.ring.iter().enumerate() {
            let prev = if i == 0 { self.ring[self.ring.len() - 1].0 } else { self.ring[i - 1].0 };
            let start = prev.wrapping_add(1);
            let _ = writeln!(out, "{},{},{},{}", self.version, kn.0, start, point);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Routing node
// ---------------------------------------------------------------------------

/// The metadata actor clients refresh from. Holds the latest snapshot;
/// updates are idempotent and monotone in version, so replayed or reordered
/// control-plane pushes cannot roll routing back.
pub struct RnNode {
    pub node: NodeId,
    state: Rc<RefCell<Membership>>,
}

impl RnNode {
    pub fn spawn(sim: &Sim, name: &str, initial: Membership) -> RnNode {
        let node = sim.add_node(name);
        let state = Rc::new(RefCell::new(initial));
        let st = state.clone();
        sim.set_rpc_handler(
            node,
            Rc::new(move |sim, req| {
                let resp = match from_json::<RnMsg>(&req.payload) {
                    Some(RnMsg::GetMembership) => {
                        RnResp::Membership { membership: st.borrow().to_wire() }
                    }
                    Some(RnMsg::UpdateMembership { membership }) => {
                        let mut cur = st.borrow_mut();
                        if membership.version > cur.version {
                            *cur = Membership::from_wire(&membership);
                        }
                        RnResp::Updated
                    }
                    None => RnResp::Updated,
                };
                sim.rpc_reply(req.reply, to_json(&resp));
            }),
        );
        RnNode { node, state }
    }

    pub fn snapshot(&self) -> Membership {
        self.state.borrow().clone()
    }

    /// Local install path for a co-located control plane; same monotonicity
    /// rule as the wire path.
    pub fn install(&self, m: Membership) {
        let mut cur = self.state.borrow_mut();
        if m.version > cur.version {
            *cur = m;
        }
    }
}

// ---------------------------------------------------------------------------
// Client library
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientError {
    /// Every routed attempt failed within the refresh budget.
    Unavailable,
    /// A write timed out after it was sent: it may or may not have applied.
    MaybeApplied,
    /// The server refused the payload (for example oversize).
    Rejected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub gets: u64,
    pub puts: u64,
    pub deletes: u64,
    /// Membership refreshes fetched from the routing node.
    pub refreshes: u64,
    /// Requests a server refused for ownership.
    pub wrong_owner: u64,
    /// Requests that timed out.
    pub timeouts: u64,
}

/// How a client picks the destination node for a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    /// Respect ownership: primary, or uniform over the owner set.
    Owner,
    /// Evaluation baseline: uniform over all nodes, ownership ignored
    /// (servers must run with ownership checks disabled).
    AnyNode,
}

/// Client-side routing state: a cached snapshot plus the retry/refresh
/// loop. One per client actor; methods take the actor's fabric context.
pub struct Client {
    rn: NodeId,
    cache: RefCell<Membership>,
    rng: RefCell<SplitMix64>,
    retry_budget: u32,
    mode: RouteMode,
    pub stats: RefCell<ClientStats>,
}

impl Client {
    pub fn new(rn: NodeId, initial: Membership, cfg: &RoutingConfig, rng: SplitMix64) -> Client {
        Client {
            rn,
            cache: RefCell::new(initial),
            rng: RefCell::new(rng),
            retry_budget: cfg.client_retry_budget,
            mode: RouteMode::Owner,
            stats: RefCell::new(ClientStats::default()),
        }
    }

    pub fn with_mode(mut self, mode: RouteMode) -> Client {
        self.mode = mode;
        self
    }

    pub fn cached_version(&self) -> u64 {
        self.cache.borrow().version
    }

    fn pick_destination(&self, key: &[u8]) -> (NodeId, u64) {
        let m = self.cache.borrow();
        let mut rng = self.rng.borrow_mut();
        let dest = match self.mode {
            RouteMode::AnyNode => m.kns[rng.next_below(m.kns.len() as u64) as usize],
            RouteMode::Owner => {
                let owners = m.owner_set(key);
                owners[rng.next_below(owners.len() as u64) as usize]
            }
        };
        (dest, m.version)
    }

    async fn refresh(&self, ctx: &NodeCtx) -> bool {
        self.stats.borrow_mut().refreshes += 1;
        match ctx.rpc(self.rn, to_json(&RnMsg::GetMembership)).await {
            Ok(bytes) => {
                if let Some(RnResp::Membership { membership }) = from_json::<RnResp>(&bytes) {
                    let mut cache = self.cache.borrow_mut();
                    if membership.version > cache.version {
                        *cache = Membership::from_wire(&membership);
                    }
                    true
                } else {
                    false
                }
            }
            Err(RpcFailure::TimedOut) => false,
        }
    }

    pub async fn get(&self, ctx: &NodeCtx, key: &[u8]) -> Result<Option<Vec<u8>>, ClientError> {
        self.stats.borrow_mut().gets += 1;
        let mut budget = self.retry_budget;
        loop {
            let (dest, version) = self.pick_destination(key);
            let req = DataReq::Get { key: key.to_vec() }.encode(version);
            match ctx.rpc(dest, req).await {
                Ok(bytes) => match DataResp::decode(&bytes) {
                    Some(DataResp::Value(v)) => return Ok(Some(v)),
                    Some(DataResp::NotFound) => return Ok(None),
                    Some(DataResp::WrongOwner { .. }) => {
                        self.stats.borrow_mut().wrong_owner += 1;
                        if budget == 0 {
                            return Err(ClientError::Unavailable);
                        }
                        budget -= 1;
                        self.refresh(ctx).await;
                    }
                    Some(DataResp::Rejected) => return Err(ClientError::Rejected),
                    _ => return Err(ClientError::Unavailable),
                },
                Err(RpcFailure::TimedOut) => {
                    self.stats.borrow_mut().timeouts += 1;
                    if budget == 0 {
                        return Err(ClientError::Unavailable);
                    }
                    budget -= 1;
                    self.refresh(ctx).await;
                }
            }
        }
    }

    pub async fn put(&self, ctx: &NodeCtx, key: &[u8], value: &[u8]) -> Result<(), ClientError> {
        self.stats.borrow_mut().puts += 1;
        self.write(ctx, DataReq::Put { key: key.to_vec(), value: value.to_vec() }).await
    }

    pub async fn delete(&self, ctx: &NodeCtx, key: &[u8]) -> Result<(), ClientError> {
        self.stats.borrow_mut().deletes += 1;
        self.write(ctx, DataReq::Delete { key: key.to_vec() }).await
    }

    /// Writes retry only when the server provably did nothing (an ownership
    /// refusal costs no fabric ops). A timed-out write may have landed, so
    /// it surfaces as ambiguous instead of being resent.
    async fn write(&self, ctx: &NodeCtx, req: DataReq) -> Result<(), ClientError> {
        let mut budget = self.retry_budget;
        loop {
            let (dest, version) = self.pick_destination(req.key());
            match ctx.rpc(dest, req.encode(version)).await {
                Ok(bytes) => match DataResp::decode(&bytes) {
                    Some(DataResp::Done) => return Ok(()),
                    Some(DataResp::WrongOwner { .. }) => {
                        self.stats.borrow_mut().wrong_owner += 1;
                        if budget == 0 {
                            return Err(ClientError::Unavailable);
                        }
                        budget -= 1;
                        self.refresh(ctx).await;
                    }
                    Some(DataResp::Rejected) => return Err(ClientError::Rejected),
                    _ => return Err(ClientError::Unavailable),
                },
                Err(RpcFailure::TimedOut) => {
                    self.stats.borrow_mut().timeouts += 1;
                    return Err(ClientError::MaybeApplied);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TimingConfig;
    use std::cell::Cell;

    fn cfg(virtual_nodes: u32) -> RoutingConfig {
        RoutingConfig { virtual_nodes, workers_per_kn: 2, client_retry_budget: 3 }
    }

    fn keys(n: usize) -> Vec<Vec<u8>> {
        (0..n).map(|i| format!("key-{i}").into_bytes()).collect()
    }

    #[test]
    fn single_node_owns_every_key() {
        let m = Membership::new(1, vec![NodeId(7)], &cfg(128));
        for k in keys(1000) {
            assert_eq!(m.primary_owner(&k), NodeId(7));
            assert_eq!(m.owner_set(&k), vec![NodeId(7)]);
        }
    }

    #[test]
    fn two_nodes_split_the_keyspace_evenly() {
        let m = Membership::new(1, vec![NodeId(1), NodeId(2)], &cfg(128));
        let total = 10_000;
        let first = keys(total).iter().filter(|k| m.primary_owner(k) == NodeId(1)).count();
        let share = first as f64 / total as f64;
        assert!((0.4..=0.6).contains(&share), "share {share}");
    }

    #[test]
    fn successor_walk_is_primary_first_distinct_and_capped() {
        let kns = vec![NodeId(1), NodeId(2), NodeId(3), NodeId(4)];
        let m = Membership::new(1, kns.clone(), &cfg(64));
        for k in keys(50) {
            let s3 = m.successors(&k, 3);
            assert_eq!(s3[0], m.primary_owner(&k));
            assert_eq!(s3.len(), 3);
            let mut dedup = s3.clone();
            dedup.dedup();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), 3, "owners must be distinct");
            // A smaller set is a prefix of a larger one (stable growth).
            assert_eq!(m.successors(&k, 2), s3[..2].to_vec());
            assert_eq!(m.successors(&k, 9).len(), kns.len(), "capped at members");
        }
    }

    #[test]
    fn replicated_key_reports_its_full_owner_set() {
        let kns = vec![NodeId(1), NodeId(2), NodeId(3)];
        let mut m = Membership::new(1, kns.clone(), &cfg(128));
        let hot = b"hot".to_vec();
        let primary = m.primary_owner(&hot);
        let mut owners = vec![primary];
        owners.extend(kns.iter().copied().filter(|kn| *kn != primary));
        m.set_replication(hot.clone(), owners.clone());
        assert_eq!(m.owner_set(&hot), owners, "all nodes serve the hot key");
        for kn in kns {
            assert!(m.owns(kn, &hot));
        }
        assert_eq!(m.owner_set(b"cold").len(), 1);
    }

    #[test]
    fn adding_a_node_moves_only_its_own_arcs() {
        let m3 = Membership::new(1, vec![NodeId(1), NodeId(2), NodeId(3)], &cfg(128));
        let m4 = m3.advance(vec![NodeId(1), NodeId(2), NodeId(3), NodeId(4)]);
        assert_eq!(m4.version, 2);
        let mut moved = 0usize;
        let total = 10_000;
        for k in keys(total) {
            let before = m3.primary_owner(&k);
            let after = m4.primary_owner(&k);
            if before != after {
                assert_eq!(after, NodeId(4), "churn may only flow toward the new node");
                moved += 1;
            }
        }
        // The new node carries 1/4 of the virtual points; measured movement
        // must be within 2x of that share.
        let frac = moved as f64 / total as f64;
        assert!((0.125..=0.5).contains(&frac), "moved fraction {frac}");
    }

    #[test]
    fn removing_a_node_redistributes_only_its_keys() {
        let m3 = Membership::new(1, vec![NodeId(1), NodeId(2), NodeId(3)], &cfg(128));
        let m2 = m3.advance(vec![NodeId(1), NodeId(2)]);
        for k in keys(10_000) {
            let before = m3.primary_owner(&k);
            let after = m2.primary_owner(&k);
            if before == NodeId(3) {
                assert_ne!(after, NodeId(3));
            } else {
                assert_eq!(after, before, "survivor arcs must not move");
            }
        }
    }

    #[test]
    fn advance_drops_replication_entries_missing_their_primary() {
        let mut m = Membership::new(1, vec![NodeId(1), NodeId(2), NodeId(3)], &cfg(64));
        m.set_replication(b"a".to_vec(), vec![NodeId(3), NodeId(1), NodeId(2)]);
        m.set_replication(b"b".to_vec(), vec![NodeId(1), NodeId(2), NodeId(3)]);
        let next = m.advance(vec![NodeId(1), NodeId(2)]);
        assert_eq!(next.owner_set(b"a").len(), 1, "primary gone: entry dropped");
        assert_eq!(next.owner_set(b"b"), vec![NodeId(1), NodeId(2)], "clamped to survivors");
    }

    #[test]
    fn worker_mapping_is_stable_and_spreads() {
        let a = Membership::new(1, vec![NodeId(1)], &cfg(16));
        let b = Membership::new(9, vec![NodeId(1), NodeId(2)], &cfg(16));
        let mut counts = [0usize; 2];
        for k in keys(2000) {
            assert_eq!(a.worker_for(&k), b.worker_for(&k), "pure in (key, worker count)");
            counts[a.worker_for(&k) as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 700), "roughly even split: {counts:?}");
    }

    #[test]
    fn arc_dump_covers_the_whole_ring() {
        let m = Membership::new(5, vec![NodeId(1), NodeId(2)], &cfg(8));
        let csv = m.arcs_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "version,kn_id,arc_start,arc_end");
        let rows: Vec<Vec<u64>> = lines
            .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 16, "one row per virtual point");
        let mut wraps = 0;
        let mut span: u128 = 0;
        for r in &rows {
            assert_eq!(r[0], 5);
            let (start, end) = (r[2], r[3]);
            if start > end {
                wraps += 1;
                span += (u64::MAX - start) as u128 + 1 + end as u128 + 1;
            } else {
                span += (end - start) as u128 + 1;
            }
        }
        assert_eq!(wraps, 1, "exactly one arc crosses zero");
        assert_eq!(span, 1u128 << 64, "arcs partition the hash space");
    }

    // -- live routing scenarios ------------------------------------------------

    /// Two stub servers that answer from a shared, swappable membership:
    /// the real ownership check, minus the storage stack.
    struct Fixture {
        sim: Sim,
        rn: RnNode,
        kn_a: NodeId,
        kn_b: NodeId,
        served: Rc<[Cell<u64>; 2]>,
        shared: Rc<RefCell<Membership>>,
    }

    fn fixture() -> Fixture {
        let sim = Sim::new(TimingConfig::default(), 1 << 16, 11);
        let kn_a = sim.add_node("kn-a");
        let kn_b = sim.add_node("kn-b");
        let m1 = Membership::new(1, vec![kn_a, kn_b], &cfg(64));
        let rn = RnNode::spawn(&sim, "rn", m1.clone());
        let shared = Rc::new(RefCell::new(m1));
        let served = Rc::new([Cell::new(0), Cell::new(0)]);
        for (idx, kn) in [(0usize, kn_a), (1, kn_b)] {
            let shared = shared.clone();
            let served = served.clone();
            sim.set_rpc_handler(
                kn,
                Rc::new(move |sim, req| {
                    let (dreq, _) = DataReq::decode(&req.payload).unwrap();
                    let m = shared.borrow();
                    let resp = if !m.owns(kn, dreq.key()) {
                        DataResp::WrongOwner { version: m.version }
                    } else {
                        served[idx].set(served[idx].get() + 1);
                        match dreq {
                            DataReq::Get { .. } => DataResp::Value(b"v".to_vec()),
                            _ => DataResp::Done,
                        }
                    };
                    sim.rpc_reply(req.reply, resp.encode());
                }),
            );
        }
        Fixture { sim, rn, kn_a, kn_b, served, shared }
    }

    #[test]
    fn fresh_cache_reaches_the_owner_without_rn_contact() {
        let f = fixture();
        let client_node = f.sim.add_node("client");
        let ctx = NodeCtx::new(&f.sim, client_node);
        let client =
            Rc::new(Client::new(f.rn.node, f.shared.borrow().clone(), &cfg(64), SplitMix64::new(3)));
        let c = client.clone();
        let got = f
            .sim
            .block_on(client_node, async move { c.get(&ctx, b"some-key").await })
            .unwrap();
        assert_eq!(got, Ok(Some(b"v".to_vec())));
        assert_eq!(client.stats.borrow().refreshes, 0);
    }

    #[test]
    fn stale_cache_recovers_with_exactly_one_refresh() {
        let f = fixture();
        // Client keeps v1 while the cluster moves to v2 = {kn_b} alone.
        let stale = f.shared.borrow().clone();
        let v2 = stale.advance(vec![f.kn_b]);
        *f.shared.borrow_mut() = v2.clone();
        f.rn.install(v2);
        // A key kn_a owned under v1, so the first attempt is refused.
        let key = keys(10_000)
            .into_iter()
            .find(|k| stale.primary_owner(k) == f.kn_a)
            .unwrap();
        let client_node = f.sim.add_node("client");
        let ctx = NodeCtx::new(&f.sim, client_node);
        let client = Rc::new(Client::new(f.rn.node, stale, &cfg(64), SplitMix64::new(3)));
        let c = client.clone();
        let key2 = key.clone();
        let got = f
            .sim
            .block_on(client_node, async move { c.get(&ctx, &key2).await })
            .unwrap();
        assert_eq!(got, Ok(Some(b"v".to_vec())));
        let stats = *client.stats.borrow();
        assert_eq!(stats.wrong_owner, 1);
        assert_eq!(stats.refreshes, 1, "one refresh round trip, then success");
        assert_eq!(client.cached_version(), 2);
    }

    #[test]
    fn routing_node_ignores_stale_membership_pushes() {
        let f = fixture();
        let v5 = f.shared.borrow().advance(vec![f.kn_a]).advance(vec![f.kn_a, f.kn_b]).advance(
            vec![f.kn_a],
        );
        let v5 = Membership { version: 5, ..v5 };
        let pusher = f.sim.add_node("pusher");
        let ctx = NodeCtx::new(&f.sim, pusher);
        let rn = f.rn.node;
        let w5 = v5.to_wire();
        let mut w4 = v5.to_wire();
        w4.version = 4;
        w4.kns = vec![f.kn_a, f.kn_b];
        let done = f.sim.block_on(pusher, async move {
            ctx.rpc(rn, to_json(&RnMsg::UpdateMembership { membership: w5 })).await.unwrap();
            ctx.rpc(rn, to_json(&RnMsg::UpdateMembership { membership: w4 })).await.unwrap();
        });
        assert!(done.is_some());
        assert_eq!(f.rn.snapshot().version, 5, "older update ignored");
        assert_eq!(f.rn.snapshot().kns, vec![f.kn_a]);
    }

    #[test]
    fn replicated_gets_spread_across_owners() {
        let f = fixture();
        let hot = b"hot-key".to_vec();
        let mut m = f.shared.borrow().clone();
        let primary = m.primary_owner(&hot);
        let other = if primary == f.kn_a { f.kn_b } else { f.kn_a };
        m.set_replication(hot.clone(), vec![primary, other]);
        *f.shared.borrow_mut() = m.clone();
        f.rn.install(m.clone());
        let client_node = f.sim.add_node("client");
        let ctx = NodeCtx::new(&f.sim, client_node);
        let client = Rc::new(Client::new(f.rn.node, m, &cfg(64), SplitMix64::new(5)));
        let c = client.clone();
        let hot2 = hot.clone();
        f.sim
            .block_on(client_node, async move {
                for _ in 0..3000 {
                    c.get(&ctx, &hot2).await.unwrap();
                }
            })
            .unwrap();
        // Binomial n=3000, p=1/2: 3 sigma is about 82.
        let a = f.served[0].get() as i64;
        let b = f.served[1].get() as i64;
        assert_eq!(a + b, 3000);
        assert!((a - 1500).abs() <= 83, "per-owner share within 3 sigma: {a} vs {b}");
    }

    #[test]
    fn any_node_mode_ignores_ownership_for_routing() {
        let f = fixture();
        // Disable the server-side check by replicating everything onto both
        // nodes: the stub consults `owns`, so make both own the test key.
        let key = b"shared".to_vec();
        let mut m = f.shared.borrow().clone();
        m.set_replication(key.clone(), vec![f.kn_a, f.kn_b]);
        *f.shared.borrow_mut() = m.clone();
        let client_node = f.sim.add_node("client");
        let ctx = NodeCtx::new(&f.sim, client_node);
        let client = Rc::new(
            Client::new(f.rn.node, m, &cfg(64), SplitMix64::new(7)).with_mode(RouteMode::AnyNode),
        );
        let c = client.clone();
        let k2 = key.clone();
        f.sim
            .block_on(client_node, async move {
                for _ in 0..200 {
                    c.get(&ctx, &k2).await.unwrap();
                }
            })
            .unwrap();
        assert!(f.served[0].get() > 0 && f.served[1].get() > 0, "both nodes served");
    }

    #[test]
    fn dead_node_makes_writes_ambiguous_and_reads_unavailable() {
        let f = fixture();
        let key = keys(1000)
            .into_iter()
            .find(|k| f.shared.borrow().primary_owner(k) == f.kn_a)
            .unwrap();
        f.sim.kill_node(f.kn_a);
        let client_node = f.sim.add_node("client");
        let ctx = NodeCtx::new(&f.sim, client_node);
        let client =
            Rc::new(Client::new(f.rn.node, f.shared.borrow().clone(), &cfg(64), SplitMix64::new(9)));
        let c = client.clone();
        let k2 = key.clone();
        let res = f
            .sim
            .block_on(client_node, async move {
                let put = c.put(&ctx, &k2, b"x").await;
                let get = c.get(&ctx, &k2).await;
                (put, get)
            })
            .unwrap();
        assert_eq!(res.0, Err(ClientError::MaybeApplied), "write not blindly resent");
        assert_eq!(res.1, Err(ClientError::Unavailable));
        let stats = *client.stats.borrow();
        // Membership never changed, so the read burned its whole budget:
        // 1 + 3 attempts, 3 refreshes; plus the write's single timeout.
        assert_eq!(stats.refreshes, 3);
        assert_eq!(stats.timeouts, 5);
    }
}
