//! The attribution tree: per-path statistics cells plus the live-allocation
//! side table that lets a free be billed back to the tag that allocated it.
//!
//! Every mutating operation is safe to call from many threads. Each counter
//! is an independent atomic, so a reader racing with writers may observe
//! skew between counters; once in-flight events drain, all invariants hold
//! exactly.

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering::Relaxed};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError, RwLock};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tag::TagPath;

const SHARDS: usize = 64;

/// Opaque identifier of one allocation, unique among live allocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address(pub u64);

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Opaque thread identifier carried in allocation records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ThreadToken(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("address {0} is already live")]
    DuplicateAddress(Address),
    #[error("address {0} is not live")]
    UnknownAddress(Address),
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("sampling weight must be positive")]
    ZeroWeight,
}

/// Live, cumulative and peak totals for one node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StatCell {
    pub live_bytes: u64,
    pub live_count: u64,
    pub cumulative_bytes: u64,
    pub cumulative_count: u64,
    pub peak_live_bytes: u64,
}

/// Metadata captured for one tracked allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationRecord {
    pub address: Address,
    pub size: u64,
    pub path: TagPath,
    pub thread: ThreadToken,
    pub timestamp: u64,
    /// Sampling multiplier in effect when the record was created.
    pub weight: u64,
    /// Carried through untouched.
    pub flags: u64,
}

impl AllocationRecord {
    /// Bytes this record contributes to its node (`size * weight`).
    pub fn weighted_bytes(&self) -> u64 {
        self.size * self.weight
    }
}

#[derive(Default)]
struct AtomicCell {
    live_bytes: AtomicU64,
    live_count: AtomicU64,
    cumulative_bytes: AtomicU64,
    cumulative_count: AtomicU64,
    peak_live_bytes: AtomicU64,
}

impl AtomicCell {
    fn alloc(&self, bytes: u64, count: u64) {
        self.cumulative_bytes.fetch_add(bytes, Relaxed);
        self.cumulative_count.fetch_add(count, Relaxed);
        self.live_count.fetch_add(count, Relaxed);
        let live = self.live_bytes.fetch_add(bytes, Relaxed) + bytes;
        self.peak_live_bytes.fetch_max(live, Relaxed);
    }

    fn free(&self, bytes: u64, count: u64) {
        self.live_bytes.fetch_sub(bytes, Relaxed);
        self.live_count.fetch_sub(count, Relaxed);
    }

    fn load(&self) -> StatCell {
        StatCell {
            live_bytes: self.live_bytes.load(Relaxed),
            live_count: self.live_count.load(Relaxed),
            cumulative_bytes: self.cumulative_bytes.load(Relaxed),
            cumulative_count: self.cumulative_count.load(Relaxed),
            peak_live_bytes: self.peak_live_bytes.load(Relaxed),
        }
    }
}

struct Node {
    path: TagPath,
    cell: AtomicCell,
}

#[derive(Clone)]
struct LiveEntry {
    size: u64,
    weight: u64,
    thread: ThreadToken,
    timestamp: u64,
    flags: u64,
    node: Arc<Node>,
}

impl LiveEntry {
    fn bytes(&self) -> u64 {
        self.size * self.weight
    }

    fn to_record(&self, address: Address) -> AllocationRecord {
        AllocationRecord {
            address,
            size: self.size,
            path: self.node.path.clone(),
            thread: self.thread,
            timestamp: self.timestamp,
            weight: self.weight,
            flags: self.flags,
        }
    }
}

/// A live record temporarily removed from the table without touching any
/// counter. Used to bridge an in-place reallocation: the old address may be
/// reused by another thread before the new one is known.
pub struct Detached {
    entry: LiveEntry,
}

impl Detached {
    pub fn size(&self) -> u64 {
        self.entry.size
    }

    pub fn weight(&self) -> u64 {
        self.entry.weight
    }

    pub fn path(&self) -> &TagPath {
        &self.entry.node.path
    }
}

impl fmt::Debug for Detached {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Detached")
            .field("size", &self.entry.size)
            .field("weight", &self.entry.weight)
            .field("path", &self.entry.node.path)
            .finish()
    }
}

/// Process-wide counters of an [`AttributionTree`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GlobalTotals {
    pub total_live_bytes: u64,
    pub global_peak_bytes: u64,
    pub unmatched_frees: u64,
}

#[derive(Default)]
struct Globals {
    total_live_bytes: AtomicU64,
    global_peak_bytes: AtomicU64,
    unmatched_frees: AtomicU64,
}

impl Globals {
    fn grow(&self, bytes: u64) {
        let total = self.total_live_bytes.fetch_add(bytes, Relaxed) + bytes;
        self.global_peak_bytes.fetch_max(total, Relaxed);
    }
}

/// Attribution state: one self-cell per tag path plus the live table.
pub struct AttributionTree {
    nodes: RwLock<FxHashMap<TagPath, Arc<Node>>>,
    shards: Box<[Mutex<FxHashMap<Address, LiveEntry>>]>,
    live_records: AtomicUsize,
    globals: Globals,
}

impl Default for AttributionTree {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for AttributionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttributionTree")
            .field("live_records", &self.live_records.load(Relaxed))
            .field("totals", &self.totals())
            .finish()
    }
}

fn shard_of(address: Address) -> usize {
    (address.0.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 58) as usize
}

impl AttributionTree {
    pub fn new() -> Self {
        AttributionTree {
            nodes: RwLock::new(FxHashMap::default()),
            shards: (0..SHARDS)
                .map(|_| Mutex::new(FxHashMap::default()))
                .collect(),
            live_records: AtomicUsize::new(0),
            globals: Globals::default(),
        }
    }

    fn shard(&self, address: Address) -> MutexGuard<'_, FxHashMap<Address, LiveEntry>> {
        self.shards[shard_of(address)]
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
    }

    fn node_for(&self, path: &[crate::tag::TagId]) -> Arc<Node> {
        {
            let nodes = self.nodes.read().unwrap_or_else(PoisonError::into_inner);
            if let Some(node) = nodes.get(path) {
                return Arc::clone(node);
            }
        }
        let mut nodes = self.nodes.write().unwrap_or_else(PoisonError::into_inner);
        let path = TagPath::from_slice_unchecked(path);
        Arc::clone(nodes.entry(path.clone()).or_insert_with(|| {
            Arc::new(Node {
                path,
                cell: AtomicCell::default(),
            })
        }))
    }

    /// Bills `record` to its path and adds it to the live table.
    pub fn record_alloc(&self, record: AllocationRecord) -> Result<(), TreeError> {
        self.alloc_at(
            record.address,
            record.path.segments(),
            record.size,
            record.weight,
            record.thread,
            record.timestamp,
            record.flags,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn alloc_at(
        &self,
        address: Address,
        path: &[crate::tag::TagId],
        size: u64,
        weight: u64,
        thread: ThreadToken,
        timestamp: u64,
        flags: u64,
    ) -> Result<(), TreeError> {
        if size == 0 {
            return Err(TreeError::ZeroSize);
        }
        if weight == 0 {
            return Err(TreeError::ZeroWeight);
        }
        let mut shard = self.shard(address);
        if shard.contains_key(&address) {
            return Err(TreeError::DuplicateAddress(address));
        }
        let node = self.node_for(path);
        let entry = LiveEntry {
            size,
            weight,
            thread,
            timestamp,
            flags,
            node,
        };
        self.apply_alloc(&entry);
        shard.insert(address, entry);
        self.live_records.fetch_add(1, Relaxed);
        Ok(())
    }

    fn apply_alloc(&self, entry: &LiveEntry) {
        let bytes = entry.bytes();
        entry.node.cell.alloc(bytes, entry.weight);
        self.globals.grow(bytes);
    }

    fn apply_free(&self, entry: &LiveEntry) {
        let bytes = entry.bytes();
        entry.node.cell.free(bytes, entry.weight);
        self.globals.total_live_bytes.fetch_sub(bytes, Relaxed);
    }

    /// Releases `address` if it is live. An unknown address only bumps the
    /// `unmatched_frees` counter. Returns whether the address was live.
    pub fn record_free(&self, address: Address) -> bool {
        if self.live_records.load(Relaxed) > 0 {
            let mut shard = self.shard(address);
            if let Some(entry) = shard.remove(&address) {
                self.live_records.fetch_sub(1, Relaxed);
                self.apply_free(&entry);
                return true;
            }
        }
        self.globals.unmatched_frees.fetch_add(1, Relaxed);
        false
    }

    /// Counts the free of a block that was never tracked.
    pub(crate) fn record_free_untracked(&self) {
        self.globals.unmatched_frees.fetch_add(1, Relaxed);
    }

    /// Changes the size of a live allocation in place. Equivalent to a free
    /// followed by an allocation with the same metadata and `new_size`.
    pub fn record_resize(
        &self,
        address: Address,
        new_size: u64,
        timestamp: u64,
    ) -> Result<(), TreeError> {
        if new_size == 0 {
            return Err(TreeError::ZeroSize);
        }
        let mut shard = self.shard(address);
        let entry = shard
            .get_mut(&address)
            .ok_or(TreeError::UnknownAddress(address))?;
        self.apply_free(entry);
        entry.size = new_size;
        entry.timestamp = timestamp;
        self.apply_alloc(entry);
        Ok(())
    }

    /// Removes a live record from the table without adjusting counters.
    pub fn detach(&self, address: Address) -> Option<Detached> {
        if self.live_records.load(Relaxed) == 0 {
            return None;
        }
        let entry = self.shard(address).remove(&address)?;
        self.live_records.fetch_sub(1, Relaxed);
        Some(Detached { entry })
    }

    /// Re-inserts a detached record at `address` with `new_size`, billing the
    /// size change as a resize. On a duplicate address the record is handed
    /// back unchanged.
    pub fn reattach(
        &self,
        detached: Detached,
        address: Address,
        new_size: u64,
        timestamp: u64,
    ) -> Result<(), (TreeError, Detached)> {
        if new_size == 0 {
            return Err((TreeError::ZeroSize, detached));
        }
        let mut shard = self.shard(address);
        if shard.contains_key(&address) {
            return Err((TreeError::DuplicateAddress(address), detached));
        }
        let mut entry = detached.entry;
        self.apply_free(&entry);
        entry.size = new_size;
        entry.timestamp = timestamp;
        self.apply_alloc(&entry);
        shard.insert(address, entry);
        self.live_records.fetch_add(1, Relaxed);
        Ok(())
    }

    /// Puts a detached record back under its original address untouched.
    pub fn restore(&self, detached: Detached, address: Address) -> Result<(), TreeError> {
        let mut shard = self.shard(address);
        if shard.contains_key(&address) {
            // The caller's own address cannot have been reused while it
            // still owned the block, so this is a wiring bug; release it.
            self.apply_free(&detached.entry);
            return Err(TreeError::DuplicateAddress(address));
        }
        shard.insert(address, detached.entry);
        self.live_records.fetch_add(1, Relaxed);
        Ok(())
    }

    /// Bills the free of a detached record.
    pub fn release(&self, detached: Detached) {
        self.apply_free(&detached.entry);
    }

    /// Returns every cell, the live table and the global counters to empty.
    pub fn reset(&self) {
        // Shard locks are always taken before the node map lock.
        let mut guards: Vec<_> = self
            .shards
            .iter()
            .map(|s| s.lock().unwrap_or_else(PoisonError::into_inner))
            .collect();
        let mut nodes = self.nodes.write().unwrap_or_else(PoisonError::into_inner);
        for guard in &mut guards {
            guard.clear();
        }
        nodes.clear();
        self.live_records.store(0, Relaxed);
        self.globals.total_live_bytes.store(0, Relaxed);
        self.globals.global_peak_bytes.store(0, Relaxed);
        self.globals.unmatched_frees.store(0, Relaxed);
    }

    pub fn totals(&self) -> GlobalTotals {
        GlobalTotals {
            total_live_bytes: self.globals.total_live_bytes.load(Relaxed),
            global_peak_bytes: self.globals.global_peak_bytes.load(Relaxed),
            unmatched_frees: self.globals.unmatched_frees.load(Relaxed),
        }
    }

    /// Self cell of `path`, if any event was ever billed to it.
    pub fn cell(&self, path: &TagPath) -> Option<StatCell> {
        let nodes = self.nodes.read().unwrap_or_else(PoisonError::into_inner);
        nodes.get(path).map(|n| n.cell.load())
    }

    /// Every node that ever received an event, in unspecified order.
    pub fn cells(&self) -> Vec<(TagPath, StatCell)> {
        let nodes = self.nodes.read().unwrap_or_else(PoisonError::into_inner);
        nodes
            .values()
            .map(|n| (n.path.clone(), n.cell.load()))
            .collect()
    }

    pub fn is_live(&self, address: Address) -> bool {
        self.shard(address).contains_key(&address)
    }

    pub fn live_record(&self, address: Address) -> Option<AllocationRecord> {
        self.shard(address)
            .get(&address)
            .map(|e| e.to_record(address))
    }

    pub fn live_len(&self) -> usize {
        self.live_records.load(Relaxed)
    }

    /// Copies out the live table. Intended for diagnostics and tests.
    pub fn live_records(&self) -> Vec<AllocationRecord> {
        let mut out = Vec::with_capacity(self.live_len());
        for shard in self.shards.iter() {
            let shard = shard.lock().unwrap_or_else(PoisonError::into_inner);
            out.extend(shard.iter().map(|(a, e)| e.to_record(*a)));
        }
        out
    }
}
