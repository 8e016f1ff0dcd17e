//! Thread-private state: the reentrancy flag, a stable thread token and the
//! per-tracker scope stack and sampling counter.
//!
//! Everything here must be usable from inside a global allocator, so the
//! thread locals are const-initialized and accessed with `try_with`.

use std::cell::{Cell, RefCell};
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::{Mutex, PoisonError};

use crate::scope::ScopeStack;
use crate::tree::ThreadToken;

static NEXT_THREAD_TOKEN: AtomicU64 = AtomicU64::new(1);

/// Trackers that have been dropped; their slots can be evicted.
static RETIRED: Mutex<Vec<u64>> = Mutex::new(Vec::new());

const SLOT_SOFT_LIMIT: usize = 16;

thread_local! {
    static IN_TRACKER: Cell<bool> = const { Cell::new(false) };
    static THREAD_TOKEN: Cell<u64> = const { Cell::new(0) };
    static SLOTS: RefCell<Vec<ThreadSlot>> = const { RefCell::new(Vec::new()) };
}

pub(crate) struct ThreadSlot {
    tracker: u64,
    pub(crate) stack: ScopeStack,
    pub(crate) sample_counter: u64,
    pub(crate) rate_epoch: u64,
}

/// Marks the current thread as executing tracker code. Allocation events
/// raised while a guard is alive are ignored.
pub struct ReentrancyGuard {
    _not_send: PhantomData<*const ()>,
}

impl ReentrancyGuard {
    /// Returns `None` if the thread is already inside the tracker, or if its
    /// thread-local storage has been torn down.
    pub fn enter() -> Option<ReentrancyGuard> {
        IN_TRACKER
            .try_with(|flag| {
                if flag.replace(true) {
                    None
                } else {
                    Some(ReentrancyGuard {
                        _not_send: PhantomData,
                    })
                }
            })
            .ok()
            .flatten()
    }

    pub fn is_active() -> bool {
        IN_TRACKER.try_with(Cell::get).unwrap_or(true)
    }
}

impl Drop for ReentrancyGuard {
    fn drop(&mut self) {
        let _ = IN_TRACKER.try_with(|flag| flag.set(false));
    }
}

/// Small process-unique token for the calling thread. Never allocates.
pub fn current_thread_token() -> ThreadToken {
    let token = THREAD_TOKEN
        .try_with(|cell| {
            let mut token = cell.get();
            if token == 0 {
                token = NEXT_THREAD_TOKEN.fetch_add(1, Relaxed);
                cell.set(token);
            }
            token
        })
        .unwrap_or(0);
    ThreadToken(token)
}

/// Runs `f` on this thread's slot for `tracker`, creating it if needed.
/// Returns `None` when the slot storage is unavailable (thread teardown or a
/// nested borrow). Callers hold a [`ReentrancyGuard`] so that growing the
/// slot vector does not recurse through an allocation hook.
pub(crate) fn with_slot<R>(tracker: u64, f: impl FnOnce(&mut ThreadSlot) -> R) -> Option<R> {
    SLOTS
        .try_with(|slots| {
            let mut slots = slots.try_borrow_mut().ok()?;
            let idx = match slots.iter().position(|s| s.tracker == tracker) {
                Some(idx) => idx,
                None => {
                    if slots.len() >= SLOT_SOFT_LIMIT {
                        evict_retired(&mut slots);
                    }
                    slots.push(ThreadSlot {
                        tracker,
                        stack: ScopeStack::new(),
                        sample_counter: 0,
                        rate_epoch: 0,
                    });
                    slots.len() - 1
                }
            };
            Some(f(&mut slots[idx]))
        })
        .ok()
        .flatten()
}

/// Like [`with_slot`] but never creates a slot.
pub(crate) fn peek_slot<R>(tracker: u64, f: impl FnOnce(&ThreadSlot) -> R) -> Option<R> {
    SLOTS
        .try_with(|slots| {
            let slots = slots.try_borrow().ok()?;
            slots.iter().find(|s| s.tracker == tracker).map(f)
        })
        .ok()
        .flatten()
}

fn evict_retired(slots: &mut Vec<ThreadSlot>) {
    let retired = RETIRED.lock().unwrap_or_else(PoisonError::into_inner);
    slots.retain(|s| !retired.contains(&s.tracker));
}

pub(crate) fn retire(tracker: u64) {
    RETIRED
        .lock()
        .unwrap_or_else(PoisonError::into_inner)
        .push(tracker);
    let _ = SLOTS.try_with(|slots| {
        if let Ok(mut slots) = slots.try_borrow_mut() {
            slots.retain(|s| s.tracker != tracker);
        }
    });
}
