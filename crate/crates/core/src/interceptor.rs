//! The allocation interceptor.
//!
//! A [`Tracker`] owns a tag registry and an attribution tree and turns raw
//! allocation events into billed records. It decides where each event is
//! billed, applies every-Nth sampling, and can be switched on and off at
//! runtime.
//!
//! Billing precedence for an allocation is total:
//!
//! 1. an explicit tag passed with the call, as the single-segment path `/tag`;
//! 2. the calling thread's scope path, when non-empty;
//! 3. the registered [`CallerClassifier`]'s verdict for the callsite token;
//! 4. `/untagged`.
//!
//! Frees are always applied, even while disabled, so memory tracked before a
//! toggle is released truthfully.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::HashMap;
use std::env;
use std::fmt;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::*};
use std::sync::{Arc, Mutex, PoisonError, RwLock};
use std::time::Instant;

use thiserror::Error;

use crate::local::{self, ReentrancyGuard};
use crate::scope::{MismatchKind, ScopeError, StackTicket};
use crate::snapshot::Snapshot;
use crate::tag::{TagError, TagId, TagPath, TagRegistry, MAX_DEPTH};
use crate::tree::{
    Address, AllocationRecord, AttributionTree, Detached, GlobalTotals, StatCell, ThreadToken,
};

pub const SAMPLING_ENV: &str = "MEMATTR_SAMPLING";
pub const ENABLED_ENV: &str = "MEMATTR_ENABLED";

static NEXT_TRACKER_ID: AtomicU64 = AtomicU64::new(1);

/// Monotonic nanosecond source.
pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now_ns(&self) -> u64 {
        (**self).now_ns()
    }
}

/// Nanoseconds since the clock was created.
#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        MonotonicClock {
            origin: Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start: u64) -> Self {
        ManualClock {
            now: AtomicU64::new(start),
        }
    }

    pub fn set(&self, ns: u64) {
        self.now.store(ns, Relaxed);
    }

    pub fn advance(&self, ns: u64) {
        self.now.fetch_add(ns, Relaxed);
    }
}

impl Clock for ManualClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Relaxed)
    }
}

/// Source of the thread identifier stored in allocation records.
pub trait ThreadIdSource: Send + Sync {
    fn current(&self) -> ThreadToken;
}

impl<T: ThreadIdSource + ?Sized> ThreadIdSource for Arc<T> {
    fn current(&self) -> ThreadToken {
        (**self).current()
    }
}

/// Process-unique small integers, one per OS thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct OsThreadIds;

impl ThreadIdSource for OsThreadIds {
    fn current(&self) -> ThreadToken {
        local::current_thread_token()
    }
}

/// Opaque token identifying the code that requested an allocation. How it
/// is derived (return address, stack hash, ...) is up to the hook layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallsiteToken(pub u64);

/// Maps a callsite to a tag when no explicit tag or scope applies.
///
/// Must be deterministic and must not allocate through the tracked path.
pub trait CallerClassifier: Send + Sync {
    fn classify(&self, callsite: CallsiteToken) -> Option<TagId>;
}

impl<F> CallerClassifier for F
where
    F: Fn(CallsiteToken) -> Option<TagId> + Send + Sync,
{
    fn classify(&self, callsite: CallsiteToken) -> Option<TagId> {
        self(callsite)
    }
}

/// Fixed lookup-table classifier.
#[derive(Debug, Clone, Default)]
pub struct TableClassifier {
    table: HashMap<CallsiteToken, TagId>,
}

impl TableClassifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, callsite: CallsiteToken, tag: TagId) -> &mut Self {
        self.table.insert(callsite, tag);
        self
    }
}

impl FromIterator<(CallsiteToken, TagId)> for TableClassifier {
    fn from_iter<I: IntoIterator<Item = (CallsiteToken, TagId)>>(iter: I) -> Self {
        TableClassifier {
            table: iter.into_iter().collect(),
        }
    }
}

impl CallerClassifier for TableClassifier {
    fn classify(&self, callsite: CallsiteToken) -> Option<TagId> {
        self.table.get(&callsite).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("sampling rate must be between 1 and 4294967295, got {0}")]
    InvalidRate(u64),
    #[error("invalid value {value:?} for {var}")]
    InvalidEnv { var: &'static str, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterceptError {
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("the underlying allocator refused {size} bytes")]
    AllocationFailure { size: u64 },
    #[error("address {0} was not returned by traced_alloc")]
    UnknownAddress(Address),
}

/// Runtime switches of a tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterceptorConfig {
    pub enabled: bool,
    /// Track every Nth allocation event per thread, with weight N.
    pub sampling_rate: u64,
}

impl Default for InterceptorConfig {
    fn default() -> Self {
        InterceptorConfig {
            enabled: true,
            sampling_rate: 1,
        }
    }
}

impl InterceptorConfig {
    /// Reads `MEMATTR_SAMPLING` and `MEMATTR_ENABLED`, falling back to the
    /// defaults for unset variables.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_vars(
            env::var(SAMPLING_ENV).ok().as_deref(),
            env::var(ENABLED_ENV).ok().as_deref(),
        )
    }

    pub fn from_vars(sampling: Option<&str>, enabled: Option<&str>) -> Result<Self, ConfigError> {
        let mut config = InterceptorConfig::default();
        if let Some(raw) = sampling {
            let rate: u64 = raw.trim().parse().map_err(|_| ConfigError::InvalidEnv {
                var: SAMPLING_ENV,
                value: raw.to_owned(),
            })?;
            config.sampling_rate = check_rate(rate)?;
        }
        if let Some(raw) = enabled {
            config.enabled = match raw.trim() {
                "1" => true,
                "0" => false,
                _ => {
                    return Err(ConfigError::InvalidEnv {
                        var: ENABLED_ENV,
                        value: raw.to_owned(),
                    })
                }
            };
        }
        Ok(config)
    }
}

fn check_rate(rate: u64) -> Result<u64, ConfigError> {
    if rate == 0 || rate > u64::from(u32::MAX) {
        Err(ConfigError::InvalidRate(rate))
    } else {
        Ok(rate)
    }
}

// Rate in the low 32 bits, change epoch in the high 32 bits. Threads reset
// their sampling counter whenever they observe a new epoch.
fn pack_rate(rate: u64, epoch: u64) -> u64 {
    (epoch << 32) | rate
}

fn unpack_rate(packed: u64) -> (u64, u64) {
    (packed & 0xFFFF_FFFF, packed >> 32)
}

/// Counters for conditions the hook swallows instead of failing the host.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Allocation events for an address that was already live.
    pub duplicate_addresses: u64,
    /// Explicit or classified tags that the registry never issued.
    pub invalid_tags: u64,
    /// Events lost because thread-local state was unavailable.
    pub dropped_events: u64,
    /// Scope guards whose automatic pop was rejected.
    pub scope_mismatches: u64,
}

#[derive(Default)]
struct AtomicDiagnostics {
    duplicate_addresses: AtomicU64,
    invalid_tags: AtomicU64,
    dropped_events: AtomicU64,
    scope_mismatches: AtomicU64,
}

impl AtomicDiagnostics {
    fn load(&self) -> Diagnostics {
        Diagnostics {
            duplicate_addresses: self.duplicate_addresses.load(Relaxed),
            invalid_tags: self.invalid_tags.load(Relaxed),
            dropped_events: self.dropped_events.load(Relaxed),
            scope_mismatches: self.scope_mismatches.load(Relaxed),
        }
    }
}

/// Handle for one open scope. Valid for exactly one pop, on the thread and
/// tracker that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScopeHandle {
    tracker: u64,
    thread: ThreadToken,
    ticket: StackTicket,
}

impl ScopeHandle {
    /// Depth of the scope stack before this scope was opened.
    pub fn depth_at_push(&self) -> usize {
        self.ticket.depth_at_push()
    }
}

/// Pops its scope when dropped, including during unwinding.
pub struct ScopeGuard<'a> {
    tracker: &'a Tracker,
    handle: ScopeHandle,
    _not_send: PhantomData<*const ()>,
}

impl ScopeGuard<'_> {
    pub fn handle(&self) -> ScopeHandle {
        self.handle
    }
}

impl fmt::Debug for ScopeGuard<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScopeGuard")
            .field("handle", &self.handle)
            .finish()
    }
}

impl Drop for ScopeGuard<'_> {
    fn drop(&mut self) {
        if self.tracker.pop_scope(self.handle).is_err() {
            self.tracker.diag.scope_mismatches.fetch_add(1, Relaxed);
        }
    }
}

/// State carried across the underlying reallocation call.
#[derive(Debug)]
pub enum ReallocTicket {
    /// The event was raised from inside the tracker and is ignored.
    Skipped,
    /// The old block was not tracked.
    Untracked,
    /// The old block's record, detached from the live table.
    Tracked(Detached),
}

/// Builder for [`Tracker`].
pub struct TrackerBuilder {
    config: InterceptorConfig,
    clock: Box<dyn Clock>,
    thread_ids: Box<dyn ThreadIdSource>,
    classifier: Option<Arc<dyn CallerClassifier>>,
}

impl Default for TrackerBuilder {
    fn default() -> Self {
        TrackerBuilder {
            config: InterceptorConfig::default(),
            clock: Box::new(MonotonicClock::default()),
            thread_ids: Box::new(OsThreadIds),
            classifier: None,
        }
    }
}

impl TrackerBuilder {
    pub fn config(mut self, config: InterceptorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn enabled(mut self, enabled: bool) -> Self {
        self.config.enabled = enabled;
        self
    }

    pub fn sampling_rate(mut self, rate: u64) -> Self {
        self.config.sampling_rate = rate;
        self
    }

    pub fn clock(mut self, clock: impl Clock + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn thread_ids(mut self, source: impl ThreadIdSource + 'static) -> Self {
        self.thread_ids = Box::new(source);
        self
    }

    pub fn classifier(mut self, classifier: impl CallerClassifier + 'static) -> Self {
        self.classifier = Some(Arc::new(classifier));
        self
    }

    pub fn build(self) -> Result<Tracker, ConfigError> {
        let rate = check_rate(self.config.sampling_rate)?;
        Ok(Tracker {
            id: NEXT_TRACKER_ID.fetch_add(1, Relaxed),
            registry: TagRegistry::new(),
            tree: AttributionTree::new(),
            enabled: AtomicBool::new(self.config.enabled),
            rate: AtomicU64::new(pack_rate(rate, 0)),
            clock: self.clock,
            thread_ids: self.thread_ids,
            has_classifier: AtomicBool::new(self.classifier.is_some()),
            classifier: RwLock::new(self.classifier),
            diag: AtomicDiagnostics::default(),
            shim: Mutex::new(HashMap::new()),
        })
    }
}

/// Routes allocation events into an attribution tree.
pub struct Tracker {
    id: u64,
    registry: TagRegistry,
    tree: AttributionTree,
    enabled: AtomicBool,
    rate: AtomicU64,
    clock: Box<dyn Clock>,
    thread_ids: Box<dyn ThreadIdSource>,
    has_classifier: AtomicBool,
    classifier: RwLock<Option<Arc<dyn CallerClassifier>>>,
    diag: AtomicDiagnostics,
    shim: Mutex<HashMap<Address, Layout>>,
}

impl Default for Tracker {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tracker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tracker")
            .field("id", &self.id)
            .field("enabled", &self.is_enabled())
            .field("sampling_rate", &self.sampling_rate())
            .field("tree", &self.tree)
            .finish()
    }
}

impl Tracker {
    /// Enabled, exact-mode tracker with the default clock.
    pub fn new() -> Self {
        TrackerBuilder::default()
            .build()
            .expect("default configuration is valid")
    }

    pub fn builder() -> TrackerBuilder {
        TrackerBuilder::default()
    }

    /// Tracker configured from `MEMATTR_SAMPLING` / `MEMATTR_ENABLED`.
    pub fn from_env() -> Result<Self, ConfigError> {
        TrackerBuilder::default()
            .config(InterceptorConfig::from_env()?)
            .build()
    }

    pub fn registry(&self) -> &TagRegistry {
        &self.registry
    }

    pub fn intern(&self, name: &str) -> Result<TagId, TagError> {
        let _guard = ReentrancyGuard::enter();
        self.registry.intern(name)
    }

    pub fn set_enabled(&self, enabled: bool) {
        self.enabled.store(enabled, Relaxed);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Relaxed)
    }

    /// Tracks every `rate`-th allocation event per thread from now on. Each
    /// thread's event counter restarts at zero.
    pub fn set_sampling_rate(&self, rate: u64) -> Result<(), ConfigError> {
        let rate = check_rate(rate)?;
        let mut current = self.rate.load(Relaxed);
        loop {
            let (_, epoch) = unpack_rate(current);
            let next = pack_rate(rate, (epoch + 1) & 0xFFFF_FFFF);
            match self
                .rate
                .compare_exchange_weak(current, next, AcqRel, Relaxed)
            {
                Ok(_) => return Ok(()),
                Err(seen) => current = seen,
            }
        }
    }

    pub fn sampling_rate(&self) -> u64 {
        unpack_rate(self.rate.load(Relaxed)).0
    }

    pub fn register_classifier(&self, classifier: impl CallerClassifier + 'static) {
        let _guard = ReentrancyGuard::enter();
        *self
            .classifier
            .write()
            .unwrap_or_else(PoisonError::into_inner) = Some(Arc::new(classifier));
        self.has_classifier.store(true, Release);
    }

    pub fn clear_classifier(&self) {
        let _guard = ReentrancyGuard::enter();
        self.has_classifier.store(false, Release);
        *self
            .classifier
            .write()
            .unwrap_or_else(PoisonError::into_inner) = None;
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diag.load()
    }

    /// Handles a successful allocation. Never fails; problems are counted
    /// in [`Tracker::diagnostics`].
    pub fn on_alloc(
        &self,
        address: Address,
        size: u64,
        flags: u64,
        explicit_tag: Option<TagId>,
        callsite: Option<CallsiteToken>,
    ) {
        if size == 0 || !self.enabled.load(Relaxed) {
            return;
        }
        let Some(_guard) = ReentrancyGuard::enter() else {
            return;
        };
        self.track_alloc(address, size, flags, explicit_tag, callsite);
    }

    // Caller holds the reentrancy guard.
    fn track_alloc(
        &self,
        address: Address,
        size: u64,
        flags: u64,
        explicit_tag: Option<TagId>,
        callsite: Option<CallsiteToken>,
    ) {
        let (rate, epoch) = unpack_rate(self.rate.load(Acquire));
        let mut scope = [TagId::ROOT; MAX_DEPTH];
        let sampled = local::with_slot(self.id, |slot| {
            if slot.rate_epoch != epoch {
                slot.rate_epoch = epoch;
                slot.sample_counter = 0;
            }
            slot.sample_counter += 1;
            if slot.sample_counter % rate != 0 {
                return None;
            }
            let segments = slot.stack.segments();
            scope[..segments.len()].copy_from_slice(segments);
            Some(segments.len())
        });
        let scope_len = match sampled {
            None => {
                self.diag.dropped_events.fetch_add(1, Relaxed);
                return;
            }
            Some(None) => return,
            Some(Some(len)) => len,
        };

        let single;
        let path: &[TagId] = if let Some(tag) = explicit_tag {
            single = [self.checked_tag(tag)];
            strip_root(&single)
        } else if scope_len > 0 {
            &scope[..scope_len]
        } else {
            single = [self.classify(callsite)];
            strip_root(&single)
        };

        let result = self.tree.alloc_at(
            address,
            path,
            size,
            rate,
            self.thread_ids.current(),
            self.clock.now_ns(),
            flags,
        );
        if result.is_err() {
            self.diag.duplicate_addresses.fetch_add(1, Relaxed);
        }
    }

    fn checked_tag(&self, tag: TagId) -> TagId {
        if self.registry.contains(tag) {
            tag
        } else {
            self.diag.invalid_tags.fetch_add(1, Relaxed);
            TagId::UNTAGGED
        }
    }

    fn classify(&self, callsite: Option<CallsiteToken>) -> TagId {
        let Some(token) = callsite else {
            return TagId::UNTAGGED;
        };
        if !self.has_classifier.load(Acquire) {
            return TagId::UNTAGGED;
        }
        let classifier = self
            .classifier
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .clone();
        match classifier.and_then(|c| c.classify(token)) {
            Some(tag) => self.checked_tag(tag),
            None => TagId::UNTAGGED,
        }
    }

    /// Handles a free. Applied regardless of the enabled switch; unknown
    /// addresses are counted as unmatched frees.
    pub fn on_free(&self, address: Address) {
        if self.tree.live_len() == 0 {
            // nothing can match; skip the thread-local guard
            self.tree.record_free_untracked();
            return;
        }
        let Some(_guard) = ReentrancyGuard::enter() else {
            return;
        };
        self.tree.record_free(address);
    }

    /// First half of a reallocation: detaches the old block's record so the
    /// old address can be reused by other threads while the underlying
    /// allocator runs.
    pub fn begin_realloc(&self, old: Address) -> ReallocTicket {
        let Some(_guard) = ReentrancyGuard::enter() else {
            return ReallocTicket::Skipped;
        };
        match self.tree.detach(old) {
            Some(detached) => ReallocTicket::Tracked(detached),
            None => ReallocTicket::Untracked,
        }
    }

    /// Second half of a successful reallocation.
    ///
    /// A tracked block keeps its path, weight and flags and is billed as a
    /// resize while enabled, or released while disabled. An untracked block
    /// counts as an unmatched free followed by a fresh allocation event.
    pub fn finish_realloc(&self, ticket: ReallocTicket, new: Address, new_size: u64) {
        let Some(_guard) = ReentrancyGuard::enter() else {
            return;
        };
        match ticket {
            ReallocTicket::Skipped => {}
            ReallocTicket::Untracked => {
                self.tree.record_free_untracked();
                if new_size > 0 && self.enabled.load(Relaxed) {
                    self.track_alloc(new, new_size, 0, None, None);
                }
            }
            ReallocTicket::Tracked(detached) => {
                if !self.enabled.load(Relaxed) || new_size == 0 {
                    self.tree.release(detached);
                    return;
                }
                let now = self.clock.now_ns();
                if let Err((_, detached)) = self.tree.reattach(detached, new, new_size, now) {
                    self.diag.duplicate_addresses.fetch_add(1, Relaxed);
                    self.tree.release(detached);
                }
            }
        }
    }

    /// Undoes [`Tracker::begin_realloc`] after the underlying allocator
    /// failed; the old block is still owned by the caller.
    pub fn abort_realloc(&self, ticket: ReallocTicket, old: Address) {
        let Some(_guard) = ReentrancyGuard::enter() else {
            return;
        };
        if let ReallocTicket::Tracked(detached) = ticket {
            if self.tree.restore(detached, old).is_err() {
                self.diag.duplicate_addresses.fetch_add(1, Relaxed);
            }
        }
    }

    /// Whole reallocation event, for callers that do not need to bracket a
    /// real allocator call.
    pub fn on_realloc(&self, old: Address, new: Address, new_size: u64) {
        let ticket = self.begin_realloc(old);
        self.finish_realloc(ticket, new, new_size);
    }

    fn owner_token(&self) -> ThreadToken {
        local::current_thread_token()
    }

    fn check_scope_tag(&self, tag: TagId) -> Result<(), ScopeError> {
        if tag == TagId::ROOT || !self.registry.contains(tag) {
            Err(ScopeError::InvalidTag(tag))
        } else {
            Ok(())
        }
    }

    fn with_stack<R>(
        &self,
        f: impl FnOnce(&mut crate::scope::ScopeStack) -> Result<R, ScopeError>,
    ) -> Result<R, ScopeError> {
        let _guard = ReentrancyGuard::enter();
        local::with_slot(self.id, |slot| f(&mut slot.stack))
            .unwrap_or(Err(ScopeError::ThreadStateUnavailable))
    }

    /// Opens a scope: until it is popped, this thread's allocations are
    /// billed to the current path extended by `tag`.
    pub fn push_scope(&self, tag: TagId) -> Result<ScopeHandle, ScopeError> {
        self.check_scope_tag(tag)?;
        let ticket = self.with_stack(|stack| stack.push(tag))?;
        Ok(ScopeHandle {
            tracker: self.id,
            thread: self.owner_token(),
            ticket,
        })
    }

    pub fn pop_scope(&self, handle: ScopeHandle) -> Result<(), ScopeError> {
        if handle.tracker != self.id || handle.thread != self.owner_token() {
            return Err(ScopeError::ScopeMismatch(MismatchKind::WrongOwner));
        }
        self.with_stack(|stack| stack.pop(handle.ticket))
    }

    /// The calling thread's scope path; the root path when no scope is open.
    pub fn current_path(&self) -> TagPath {
        let mut buf = [TagId::ROOT; MAX_DEPTH];
        let len = local::peek_slot(self.id, |slot| {
            let segments = slot.stack.segments();
            buf[..segments.len()].copy_from_slice(segments);
            segments.len()
        })
        .unwrap_or(0);
        TagPath::from_slice_unchecked(&buf[..len])
    }

    /// Makes an empty stack equal to `path`, typically a parent thread's
    /// context. A single pop of the handle empties the stack again.
    pub fn adopt_path(&self, path: &TagPath) -> Result<ScopeHandle, ScopeError> {
        if let Some(&bad) = path
            .segments()
            .iter()
            .find(|&&t| !self.registry.contains(t))
        {
            return Err(ScopeError::InvalidTag(bad));
        }
        let ticket = self.with_stack(|stack| stack.adopt(path))?;
        Ok(ScopeHandle {
            tracker: self.id,
            thread: self.owner_token(),
            ticket,
        })
    }

    /// RAII form of [`Tracker::push_scope`].
    pub fn scope(&self, tag: TagId) -> Result<ScopeGuard<'_>, ScopeError> {
        let handle = self.push_scope(tag)?;
        Ok(ScopeGuard {
            tracker: self,
            handle,
            _not_send: PhantomData,
        })
    }

    /// Interns `name` and opens a scope for it.
    pub fn scope_named(&self, name: &str) -> Result<ScopeGuard<'_>, ScopeError> {
        let tag = self.registry.intern(name)?;
        self.scope(tag)
    }

    /// Runs `action` inside a scope for `tag`. The scope is closed on every
    /// exit path, including a panic unwinding out of `action`.
    pub fn with_scope<R>(&self, tag: TagId, action: impl FnOnce() -> R) -> Result<R, ScopeError> {
        let guard = self.scope(tag)?;
        let out = action();
        drop(guard);
        Ok(out)
    }

    /// Allocates `size` bytes from the system allocator and reports the
    /// event as [`Tracker::on_alloc`] would.
    pub fn traced_alloc(
        &self,
        size: u64,
        explicit_tag: Option<TagId>,
    ) -> Result<Address, InterceptError> {
        if size == 0 {
            return Err(InterceptError::ZeroSize);
        }
        let layout = usize::try_from(size)
            .ok()
            .and_then(|s| Layout::from_size_align(s, 16).ok())
            .ok_or(InterceptError::AllocationFailure { size })?;
        // SAFETY: layout has a non-zero size.
        let ptr = unsafe { System.alloc(layout) };
        if ptr.is_null() {
            return Err(InterceptError::AllocationFailure { size });
        }
        let address = Address(ptr as u64);
        {
            let _guard = ReentrancyGuard::enter();
            self.shim
                .lock()
                .unwrap_or_else(PoisonError::into_inner)
                .insert(address, layout);
        }
        self.on_alloc(address, size, 0, explicit_tag, None);
        Ok(address)
    }

    /// Reports the free, then releases memory obtained from
    /// [`Tracker::traced_alloc`].
    pub fn traced_free(&self, address: Address) -> Result<(), InterceptError> {
        let layout = {
            let _guard = ReentrancyGuard::enter();
            self.shim
                .lock()
                .unwrap_or_else(PoisonError::into_inner)
                .remove(&address)
        }
        .ok_or(InterceptError::UnknownAddress(address))?;
        self.on_free(address);
        // SAFETY: the block came from System.alloc with this layout and was
        // removed from the shim table, so it is freed exactly once.
        unsafe { System.dealloc(address.0 as *mut u8, layout) };
        Ok(())
    }

    /// Captures the current state. The snapshot's own storage is allocated
    /// untracked, so with a global hook attached its eventual release counts
    /// as an unmatched free.
    pub fn snapshot(&self) -> Snapshot {
        let _guard = ReentrancyGuard::enter();
        Snapshot::capture(
            &self.tree,
            &self.registry,
            self.clock.now_ns(),
            self.sampling_rate(),
            self.is_enabled(),
        )
        .expect("billed paths only contain tags issued by this registry")
    }

    /// Clears all statistics and the live table; tags stay interned.
    pub fn reset(&self) {
        let _guard = ReentrancyGuard::enter();
        self.tree.reset();
    }

    pub fn totals(&self) -> GlobalTotals {
        self.tree.totals()
    }

    pub fn cell(&self, path: &TagPath) -> Option<StatCell> {
        let _guard = ReentrancyGuard::enter();
        self.tree.cell(path)
    }

    pub fn live_records(&self) -> Vec<AllocationRecord> {
        let _guard = ReentrancyGuard::enter();
        self.tree.live_records()
    }

    pub fn live_record(&self, address: Address) -> Option<AllocationRecord> {
        let _guard = ReentrancyGuard::enter();
        self.tree.live_record(address)
    }
}

fn strip_root(single: &[TagId; 1]) -> &[TagId] {
    if single[0] == TagId::ROOT {
        &[]
    } else {
        single
    }
}

impl Drop for Tracker {
    fn drop(&mut self) {
        let _guard = ReentrancyGuard::enter();
        let blocks = std::mem::take(self.shim.get_mut().unwrap_or_else(PoisonError::into_inner));
        for (address, layout) in blocks {
            // SAFETY: every shim entry is a live System allocation.
            unsafe { System.dealloc(address.0 as *mut u8, layout) };
        }
        local::retire(self.id);
    }
}
