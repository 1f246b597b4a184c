//! Wire formats. Control-plane payloads are JSON for debuggability; the
//! client data path uses a compact hand-rolled codec. Both are deterministic:
//! all maps serialize in key order.

use serde::{Deserialize, Serialize};

use crate::fabric::NodeId;

pub fn to_json<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("message serializes")
}

pub fn from_json<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Option<T> {
    serde_json::from_slice(bytes).ok()
}

// ---------------------------------------------------------------------------
// Pool-side endpoint
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub enum DpmMsg {
    /// Allocate a fresh log segment for the calling node.
    AllocSegment,
    /// Seal `seg_base` and queue it for merging. `invalidated` carries the
    /// ENTRY addresses direct CAS publishes superseded since the last call
    /// (off-critical-path reconciliation). `want_prealloc` asks for the next
    /// segment in the same round trip.
    EnqueueMerge { seg_base: u64, invalidated: Vec<u64>, want_prealloc: bool },
    /// Report superseded entry addresses without sealing anything.
    Reconcile { invalidated: Vec<u64> },
    /// Merge everything pending for the given nodes; used during planned
    /// reconfiguration and failure recovery. `seal_open` additionally seals
    /// still-open segments (the owner crashed and cannot).
    SyncMerge { kns: Vec<NodeId>, seal_open: bool },
    /// Route the given key through a freshly allocated indirect cell.
    InstallIndirect { key: Vec<u8> },
    /// Restore direct addressing for the key and free its cell.
    RemoveIndirect { key: Vec<u8> },
}

#[derive(Debug, Serialize, Deserialize)]
pub enum DpmResp {
    Segment { base: u64 },
    Enqueued { prealloc: Option<u64> },
    Reconciled,
    SyncDone { merged_segments: u64 },
    CellInstalled { cell: u64 },
    CellRemoved,
    Error { what: String },
}

// ---------------------------------------------------------------------------
// KVS-node control endpoint
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub enum KnCtl {
    /// A segment this node wrote has been merged.
    MergeDone { seg_base: u64 },
    /// Step 2 of reconfiguration: stop serving keys departing under the new
    /// membership, flush and seal pending writes, drop affected cache
    /// entries. The node keeps serving keys it retains.
    HandoffPrepare { membership: MembershipWire },
    /// Steps 4/6: adopt the new membership and resume.
    ApplyOwnership { membership: MembershipWire },
    /// Per-epoch statistics pull.
    CollectStats,
    /// Drop cached entries for the given keys (de-replication prologue).
    InvalidateKeys { keys: Vec<Vec<u8>> },
}

#[derive(Debug, Serialize, Deserialize)]
pub enum KnCtlResp {
    Ok,
    /// Prepare finished: how many sealed segments the node waited to see
    /// merged before handing off.
    Drained { segments: u64 },
    Stats(KnStatsWire),
}

/// Per-epoch digest a KVS node reports: occupancy, top-K key frequencies, a
/// tail summary, and per-key service latency for the top keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnStatsWire {
    pub kn: NodeId,
    pub epoch_units: u64,
    pub busy_units: u64,
    pub ops: u64,
    /// (key, count, avg service latency in units) for the K most frequent.
    pub top_keys: Vec<(Vec<u8>, u64, f64)>,
    /// Number of distinct keys outside the top-K...
    pub tail_distinct: u64,
    /// ...their total op count...
    pub tail_count: u64,
    /// ...and the sum of squared per-key counts (for exact variance).
    pub tail_count_sq: u64,
    pub cache_value_hits: u64,
    pub cache_shortcut_hits: u64,
    pub cache_misses: u64,
}

// ---------------------------------------------------------------------------
// Routing endpoint
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub enum RnMsg {
    GetMembership,
    UpdateMembership { membership: MembershipWire },
}

#[derive(Debug, Serialize, Deserialize)]
pub enum RnResp {
    Membership { membership: MembershipWire },
    Updated,
}

/// Versioned membership snapshot: ring members and per-key replication.
/// Serialized whole; desk-scale memberships are small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipWire {
    pub version: u64,
    pub kns: Vec<NodeId>,
    pub virtual_nodes: u32,
    pub workers_per_kn: u32,
    /// key -> (replication factor, owner set, primary first).
    pub replicated: Vec<(Vec<u8>, u32, Vec<NodeId>)>,
}

// ---------------------------------------------------------------------------
// Control-node endpoint
// ---------------------------------------------------------------------------

/// Liveness is inferred from the per-epoch stats pull (a node that answers
/// CollectStats is alive), so the control node accepts only client pushes.
#[derive(Debug, Serialize, Deserialize)]
pub enum CtlMsg {
    /// Closed-loop clients report their latency samples each epoch.
    ClientLatency { samples_sorted: Vec<u64> },
}

#[derive(Debug, Serialize, Deserialize)]
pub enum CtlResp {
    Ok,
}

// ---------------------------------------------------------------------------
// Client data path (compact binary)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataReq {
    Get { key: Vec<u8> },
    Put { key: Vec<u8>, value: Vec<u8> },
    Delete { key: Vec<u8> },
}

impl DataReq {
    pub fn key(&self) -> &[u8] {
        match self {
            DataReq::Get { key } | DataReq::Put { key, .. } | DataReq::Delete { key } => key,
        }
    }

    pub fn encode(&self, ring_version: u64) -> Vec<u8> {
        let (op, key, value): (u8, &[u8], &[u8]) = match self {
            DataReq::Get { key } => (1, key, &[]),
            DataReq::Put { key, value } => (2, key, value),
            DataReq::Delete { key } => (3, key, &[]),
        };
        let mut out = Vec::with_capacity(11 + key.len() + value.len());
        out.push(op);
        out.extend_from_slice(&ring_version.to_le_bytes());
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key);
        out.extend_from_slice(value);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<(DataReq, u64)> {
        if bytes.len() < 11 {
            return None;
        }
        let op = bytes[0];
        let ring_version = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let key_len = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as usize;
        if bytes.len() < 11 + key_len {
            return None;
        }
        let key = bytes[11..11 + key_len].to_vec();
        let rest = bytes[11 + key_len..].to_vec();
        let req = match op {
            1 => DataReq::Get { key },
            2 => DataReq::Put { key, value: rest },
            3 => DataReq::Delete { key },
            _ => return None,
        };
        Some((req, ring_version))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataResp {
    Value(Vec<u8>),
    NotFound,
    Done,
    /// Ownership check failed; the hint is the server's membership version.
    WrongOwner { version: u64 },
    /// Payload rejected (for example larger than a segment).
    Rejected,
}

impl DataResp {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            DataResp::Value(v) => {
                let mut out = Vec::with_capacity(1 + v.len());
                out.push(0);
                out.extend_from_slice(v);
                out
            }
            DataResp::NotFound => vec![1],
            DataResp::Done => vec![2],
            DataResp::WrongOwner { version } => {
                let mut out = vec![3];
                out.extend_from_slice(&version.to_le_bytes());
                out
            }
            DataResp::Rejected => vec![4],
        }
    }

    pub fn decode(bytes: &[u8]) -> Option<DataResp> {
        match bytes.split_first()? {
            (0, v) => Some(DataResp::Value(v.to_vec())),
            (1, _) => Some(DataResp::NotFound),
            (2, _) => Some(DataResp::Done),
            (3, v) if v.len() == 8 => {
                Some(DataResp::WrongOwner { version: u64::from_le_bytes(v.try_into().unwrap()) })
            }
            (4, _) => Some(DataResp::Rejected),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_codec_round_trips() {
        let reqs = [
            DataReq::Get { key: b"k".to_vec() },
            DataReq::Put { key: b"key".to_vec(), value: vec![0, 1, 2, 255] },
            DataReq::Delete { key: vec![9; 300] },
        ];
        for r in reqs {
            let bytes = r.encode(42);
            let (back, v) = DataReq::decode(&bytes).unwrap();
            assert_eq!(back, r);
            assert_eq!(v, 42);
        }
        for resp in [
            DataResp::Value(vec![1, 2, 3]),
            DataResp::NotFound,
            DataResp::Done,
            DataResp::WrongOwner { version: 7 },
            DataResp::Rejected,
        ] {
            assert_eq!(DataResp::decode(&resp.encode()).unwrap(), resp);
        }
    }

    #[test]
    fn json_round_trip_for_control_messages() {
        let m = DpmMsg::EnqueueMerge { seg_base: 4096, invalidated: vec![1, 2], want_prealloc: true };
        let bytes = to_json(&m);
        let back: DpmMsg = from_json(&bytes).unwrap();
        match back {
            DpmMsg::EnqueueMerge { seg_base, invalidated, want_prealloc } => {
                assert_eq!(seg_base, 4096);
                assert_eq!(invalidated, vec![1, 2]);
                assert!(want_prealloc);
            }
            _ => panic!("wrong variant"),
        }
    }
}
