//! Binary layouts of everything that lives in pool bytes: log entries, index
//! buckets, chain nodes and indirect cells, plus the region map of the pool.
//!
//! All integers are little-endian. Layout invariants:
//! - a log entry is committed iff its seal byte is present and its recorded
//!   lengths are self-consistent; parsing stops at the first uncommitted
//!   entry, so a torn tail is ignored,
//! - buckets and chain nodes share one 128-byte frame: an 8-byte version word
//!   (even = quiescent), an 8-byte chain link, three 32-byte slots,
//! - an empty slot has key_len == 0 (keys are never empty),
//! - indirect cells are single 8-byte words holding the address of the
//!   current committed log entry for a replicated key.

use crate::config::{IndexConfig, PoolConfig};

pub const SEAL: u8 = 0xA5;
pub const ENTRY_HEADER: u64 = 17;

/// Bucket/chain-node frame size. Three 32-byte slots plus version and link
/// words need 112 bytes; the frame is padded to the next 64-byte multiple.
pub const BUCKET_STRIDE: u64 = 128;
pub const SLOTS_PER_BUCKET: usize = 3;
const SLOT0_OFF: u64 = 16;
const SLOT_SIZE: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Value insert/update, applied to the index at merge time.
    Put,
    /// Tombstone, removes the key at merge time.
    Delete,
    /// Value published directly via CAS on an indirect cell; merge skips it.
    DirectPut,
    /// Tombstone published directly via CAS on an indirect cell; readers
    /// finding the cell pointed here report the key absent. Merge skips it.
    DirectDelete,
}

impl EntryKind {
    pub fn code(self) -> u8 {
        match self {
            EntryKind::Put => 1,
            EntryKind::Delete => 2,
            EntryKind::DirectPut => 3,
            EntryKind::DirectDelete => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(EntryKind::Put),
            2 => Some(EntryKind::Delete),
            3 => Some(EntryKind::DirectPut),
            4 => Some(EntryKind::DirectDelete),
            _ => None,
        }
    }

    /// Kinds whose presence at a cell means "key deleted".
    pub fn is_tombstone(self) -> bool {
        matches!(self, EntryKind::Delete | EntryKind::DirectDelete)
    }
}

/// Serialize one log entry: header (key_len, value_len, kind, seq), key,
/// value, seal byte written last.
pub fn encode_entry(key: &[u8], value: &[u8], kind: EntryKind, seq: u64) -> Vec<u8> {
    assert!(!key.is_empty(), "keys are never empty");
    let mut out = Vec::with_capacity(entry_len(key.len() as u64, value.len() as u64) as usize);
    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.push(kind.code());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(value);
    out.push(SEAL);
    out
}

pub fn entry_len(key_len: u64, value_len: u64) -> u64 {
    ENTRY_HEADER + key_len + value_len + 1
}

/// A decoded committed entry within a byte region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryView {
    pub offset: u64,
    pub key_len: u64,
    pub value_len: u64,
    pub kind: EntryKind,
    pub seq: u64,
    pub total_len: u64,
}

impl EntryView {
    pub fn key_off(&self) -> u64 {
        self.offset + ENTRY_HEADER
    }

    pub fn value_off(&self) -> u64 {
        self.key_off() + self.key_len
    }

    pub fn key<'a>(&self, region: &'a [u8]) -> &'a [u8] {
        &region[self.key_off() as usize..(self.key_off() + self.key_len) as usize]
    }

    pub fn value<'a>(&self, region: &'a [u8]) -> &'a [u8] {
        &region[self.value_off() as usize..(self.value_off() + self.value_len) as usize]
    }
}

/// Decode the committed entry at `offset`, or None if the bytes there are not
/// a committed entry (zeroed space, torn header, or missing seal).
pub fn decode_entry(region: &[u8], offset: u64) -> Option<EntryView> {
    let len = region.len() as u64;
    if offset + ENTRY_HEADER > len {
        return None;
    }
    let at = offset as usize;
    let key_len = u32::from_le_bytes(region[at..at + 4].try_into().unwrap()) as u64;
    let value_len = u32::from_le_bytes(region[at + 4..at + 8].try_into().unwrap()) as u64;
    let kind = EntryKind::from_code(region[at + 8])?;
    if key_len == 0 {
        return None;
    }
    let total_len = entry_len(key_len, value_len);
    if offset + total_len > len {
        return None;
    }
    if region[(offset + total_len - 1) as usize] != SEAL {
        return None;
    }
    let seq = u64::from_le_bytes(region[at + 9..at + 17].try_into().unwrap());
    Some(EntryView { offset, key_len, value_len, kind, seq, total_len })
}

/// Walk the committed prefix of a segment image: every committed entry in
/// order, stopping at the first byte run that is not one.
pub fn committed_prefix(region: &[u8]) -> Vec<EntryView> {
    let mut out = Vec::new();
    let mut off = 0u64;
    while let Some(e) = decode_entry(region, off) {
        off += e.total_len;
        out.push(e);
    }
    out
}

// ---------------------------------------------------------------------------
// Bucket frames
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Slot {
    pub fingerprint: u64,
    /// Address of the key bytes inside the committed log entry.
    pub key_locator: u64,
    /// Address of the value bytes, or of the key's indirect cell.
    pub value_addr: u64,
    pub key_len: u32,
    pub value_len: u32,
}

impl Slot {
    pub fn is_empty(&self) -> bool {
        self.key_len == 0
    }

    pub fn encode(&self) -> [u8; 32] {
        let mut b = [0u8; 32];
        b[0..8].copy_from_slice(&self.fingerprint.to_le_bytes());
        b[8..16].copy_from_slice(&self.key_locator.to_le_bytes());
        b[16..24].copy_from_slice(&self.value_addr.to_le_bytes());
        b[24..28].copy_from_slice(&self.key_len.to_le_bytes());
        b[28..32].copy_from_slice(&self.value_len.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Slot {
        Slot {
            fingerprint: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            key_locator: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            value_addr: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            key_len: u32::from_le_bytes(b[24..28].try_into().unwrap()),
            value_len: u32::from_le_bytes(b[28..32].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketFrame {
    pub version: u64,
    pub chain_next: u64,
    pub slots: [Slot; SLOTS_PER_BUCKET],
}

impl BucketFrame {
    pub fn decode(b: &[u8]) -> BucketFrame {
        debug_assert!(b.len() >= BUCKET_STRIDE as usize);
        let mut slots = [Slot::default(); SLOTS_PER_BUCKET];
        for (i, slot) in slots.iter_mut().enumerate() {
            let off = (SLOT0_OFF + i as u64 * SLOT_SIZE) as usize;
            *slot = Slot::decode(&b[off..off + SLOT_SIZE as usize]);
        }
        BucketFrame {
            version: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            chain_next: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            slots,
        }
    }

    pub fn quiescent(&self) -> bool {
        self.version % 2 == 0
    }
}

pub fn version_addr(frame_addr: u64) -> u64 {
    frame_addr
}

pub fn chain_next_addr(frame_addr: u64) -> u64 {
    frame_addr + 8
}

pub fn slot_addr(frame_addr: u64, slot: usize) -> u64 {
    debug_assert!(slot < SLOTS_PER_BUCKET);
    frame_addr + SLOT0_OFF + slot as u64 * SLOT_SIZE
}

// ---------------------------------------------------------------------------
// Pool region map
// ---------------------------------------------------------------------------

/// Address-space plan of the pool. Region order: null guard, bucket array,
/// chain-node region, indirect-cell region, segment arena.
#[derive(Debug, Clone)]
pub struct Layout {
    pub bucket_count: u64,
    pub bucket_base: u64,
    pub chain_base: u64,
    pub chain_capacity: u64,
    pub cell_base: u64,
    pub cell_count: u64,
    pub seg_base: u64,
    pub segment_capacity: u64,
    pub arena_segments: u64,
    pub pool_size: u64,
    /// Upper bound of one entry's on-pool size; one-sided readers of
    /// indirect keys fetch this much (round trips are charged per op, not
    /// per byte).
    pub max_entry_span: u64,
}

impl Layout {
    pub fn compute(
        pool: &PoolConfig,
        index: &IndexConfig,
        max_key_len: u64,
        max_value_len: u64,
    ) -> Layout {
        let bucket_count = index.derived_bucket_count();
        let bucket_base = 64;
        let bucket_bytes = bucket_count * BUCKET_STRIDE;
        let chain_base = bucket_base + bucket_bytes;
        let chain_nodes =
            ((bucket_count as f64 * index.chain_region_factor).ceil() as u64).max(16);
        let chain_bytes = chain_nodes * BUCKET_STRIDE;
        let cell_base = chain_base + chain_bytes;
        let cell_count = index.indirect_cells.max(1);
        let cell_bytes = cell_count * 8;
        let seg_base = (cell_base + cell_bytes).next_multiple_of(BUCKET_STRIDE);
        assert!(
            seg_base + pool.segment_capacity <= pool.pool_size,
            "pool too small for index regions plus one segment"
        );
        let arena_segments = (pool.pool_size - seg_base) / pool.segment_capacity;
        Layout {
            bucket_count,
            bucket_base,
            chain_base,
            chain_capacity: chain_nodes,
            cell_base,
            cell_count,
            seg_base,
            segment_capacity: pool.segment_capacity,
            arena_segments,
            pool_size: pool.pool_size,
            max_entry_span: entry_len(max_key_len, max_value_len),
        }
    }

    pub fn bucket_addr_for_hash(&self, hash: u64) -> u64 {
        self.bucket_base + (hash & (self.bucket_count - 1)) * BUCKET_STRIDE
    }

    pub fn chain_node_addr(&self, i: u64) -> u64 {
        debug_assert!(i < self.chain_capacity);
        self.chain_base + i * BUCKET_STRIDE
    }

    pub fn cell_addr(&self, i: u64) -> u64 {
        debug_assert!(i < self.cell_count);
        self.cell_base + i * 8
    }

    pub fn is_cell_addr(&self, addr: u64) -> bool {
        addr >= self.cell_base && addr < self.cell_base + self.cell_count * 8
    }

    pub fn segment_addr(&self, slot: u64) -> u64 {
        debug_assert!(slot < self.arena_segments);
        self.seg_base + slot * self.segment_capacity
    }

    /// Base address of the segment containing `addr` (must be in the arena).
    pub fn segment_base_of(&self, addr: u64) -> u64 {
        debug_assert!(addr >= self.seg_base);
        let slot = (addr - self.seg_base) / self.segment_capacity;
        self.segment_addr(slot)
    }
}
