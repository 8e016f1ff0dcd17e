//! Global allocator adapter.
//!
//! ```no_run
//! use std::alloc::System;
//! use memattr::{Tracker, TrackingAllocator};
//!
//! #[global_allocator]
//! static GLOBAL: TrackingAllocator<System> = TrackingAllocator::new(System);
//!
//! fn main() {
//!     let tracker: &'static Tracker = Box::leak(Box::new(Tracker::new()));
//!     GLOBAL.attach(tracker);
//!     let net = tracker.intern("net").unwrap();
//!     let buf = tracker.with_scope(net, || vec![0u8; 4096]).unwrap();
//!     println!("{}", tracker.snapshot().to_canonical_string());
//!     drop(buf);
//! }
//! ```

use std::alloc::{GlobalAlloc, Layout};
use std::ptr;
use std::sync::atomic::{AtomicPtr, Ordering};

use crate::interceptor::Tracker;
use crate::tree::Address;

/// Wraps an allocator and reports every event to an attached [`Tracker`].
/// With no tracker attached it is a plain pass-through.
pub struct TrackingAllocator<A> {
    inner: A,
    tracker: AtomicPtr<Tracker>,
}

impl<A> TrackingAllocator<A> {
    pub const fn new(inner: A) -> Self {
        TrackingAllocator {
            inner,
            tracker: AtomicPtr::new(ptr::null_mut()),
        }
    }

    pub fn attach(&self, tracker: &'static Tracker) {
        self.tracker
            .store(tracker as *const Tracker as *mut Tracker, Ordering::Release);
    }

    pub fn detach(&self) {
        self.tracker.store(ptr::null_mut(), Ordering::Release);
    }

    pub fn inner(&self) -> &A {
        &self.inner
    }

    fn tracker(&self) -> Option<&'static Tracker> {
        let p = self.tracker.load(Ordering::Acquire);
        // SAFETY: only 'static references are ever stored.
        unsafe { p.as_ref() }
    }
}

unsafe impl<A: GlobalAlloc> GlobalAlloc for TrackingAllocator<A> {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = self.inner.alloc(layout);
        if !p.is_null() {
            if let Some(t) = self.tracker() {
                t.on_alloc(Address(p as u64), layout.size() as u64, 0, None, None);
            }
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = self.inner.alloc_zeroed(layout);
        if !p.is_null() {
            if let Some(t) = self.tracker() {
                t.on_alloc(Address(p as u64), layout.size() as u64, 0, None, None);
            }
        }
        p
    }

    unsafe fn dealloc(&self, p: *mut u8, layout: Layout) {
        // Report first: once released, the address may be handed out again.
        if let Some(t) = self.tracker() {
            t.on_free(Address(p as u64));
        }
        self.inner.dealloc(p, layout);
    }

    unsafe fn realloc(&self, p: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let Some(t) = self.tracker() else {
            return self.inner.realloc(p, layout, new_size);
        };
        let ticket = t.begin_realloc(Address(p as u64));
        let q = self.inner.realloc(p, layout, new_size);
        if q.is_null() {
            t.abort_realloc(ticket, Address(p as u64));
        } else {
            t.finish_realloc(ticket, Address(q as u64), new_size as u64);
        }
        q
    }
}
