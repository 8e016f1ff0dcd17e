//! Per-thread scope stacks.
//!
//! While a scope is open, every allocation the thread makes without an
//! explicit tag is billed to the stack's current path. Stacks are strictly
//! thread-private and start empty on every new thread.

use std::fmt;

use thiserror::Error;

use crate::tag::{TagId, TagPath, MAX_DEPTH};

/// Why a pop was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchKind {
    /// The handle belongs to another thread or another tracker.
    WrongOwner,
    /// The handle's scope was already popped.
    AlreadyPopped,
    /// Scopes opened after this one are still open.
    OutOfOrder,
}

impl fmt::Display for MismatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchKind::WrongOwner => "handle used on a different thread or tracker",
            MismatchKind::AlreadyPopped => "scope already popped",
            MismatchKind::OutOfOrder => "inner scopes are still open",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScopeError {
    #[error("scope depth would exceed {MAX_DEPTH}")]
    DepthExceeded,
    #[error("scope mismatch: {0}")]
    ScopeMismatch(MismatchKind),
    #[error("adopt_path requires an empty scope stack")]
    StackNotEmpty,
    #[error("tag {0} cannot be used as a scope")]
    InvalidTag(TagId),
    #[error(transparent)]
    Tag(#[from] crate::tag::TagError),
    #[error("thread-local scope state is unavailable")]
    ThreadStateUnavailable,
}

/// Identifies which pushes a pop must undo.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackTicket {
    base: u8,
    end: u8,
    generation: u64,
}

impl StackTicket {
    /// Stack depth before the push.
    pub fn depth_at_push(&self) -> usize {
        self.base as usize
    }
}

/// Fixed-capacity LIFO of tag ids. Never allocates.
#[derive(Clone)]
pub struct ScopeStack {
    generations: [u64; MAX_DEPTH],
    segments: [TagId; MAX_DEPTH],
    len: usize,
    next_generation: u64,
}

impl Default for ScopeStack {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for ScopeStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.segments()).finish()
    }
}

impl ScopeStack {
    pub const fn new() -> Self {
        ScopeStack {
            generations: [0; MAX_DEPTH],
            segments: [TagId::ROOT; MAX_DEPTH],
            len: 0,
            // generation 0 is never handed out
            next_generation: 1,
        }
    }

    pub fn depth(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Current path as a slice of segments.
    pub fn segments(&self) -> &[TagId] {
        &self.segments[..self.len]
    }

    pub fn current_path(&self) -> TagPath {
        TagPath::from_slice_unchecked(self.segments())
    }

    fn take_generation(&mut self) -> u64 {
        let generation = self.next_generation;
        self.next_generation += 1;
        generation
    }

    pub fn push(&mut self, tag: TagId) -> Result<StackTicket, ScopeError> {
        if tag == TagId::ROOT {
            return Err(ScopeError::InvalidTag(tag));
        }
        if self.len >= MAX_DEPTH {
            return Err(ScopeError::DepthExceeded);
        }
        let generation = self.take_generation();
        let base = self.len;
        self.generations[base] = generation;
        self.segments[base] = tag;
        self.len += 1;
        Ok(StackTicket {
            base: base as u8,
            end: self.len as u8,
            generation,
        })
    }

    /// Replaces an empty stack with `path`; one pop of the returned ticket
    /// empties it again.
    pub fn adopt(&mut self, path: &TagPath) -> Result<StackTicket, ScopeError> {
        if !self.is_empty() {
            return Err(ScopeError::StackNotEmpty);
        }
        let segments = path.segments();
        if segments.len() > MAX_DEPTH {
            return Err(ScopeError::DepthExceeded);
        }
        if let Some(&bad) = segments.iter().find(|&&t| t == TagId::ROOT) {
            return Err(ScopeError::InvalidTag(bad));
        }
        let generation = self.take_generation();
        for (i, &tag) in segments.iter().enumerate() {
            self.generations[i] = generation;
            self.segments[i] = tag;
        }
        self.len = segments.len();
        Ok(StackTicket {
            base: 0,
            end: self.len as u8,
            generation,
        })
    }

    pub fn pop(&mut self, ticket: StackTicket) -> Result<(), ScopeError> {
        let base = ticket.base as usize;
        let end = ticket.end as usize;
        if ticket.generation == 0 || ticket.generation >= self.next_generation {
            return Err(ScopeError::ScopeMismatch(MismatchKind::WrongOwner));
        }
        if base == end {
            // adopting the root path opens nothing
            return if self.len == base {
                Ok(())
            } else {
                Err(ScopeError::ScopeMismatch(MismatchKind::OutOfOrder))
            };
        }
        if base >= self.len || self.generations[base] != ticket.generation {
            return Err(ScopeError::ScopeMismatch(MismatchKind::AlreadyPopped));
        }
        if self.len != end {
            return Err(ScopeError::ScopeMismatch(MismatchKind::OutOfOrder));
        }
        self.len = base;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOO: TagId = TagId(2);
    const BAR: TagId = TagId(3);

    #[test]
    fn push_pop_round_trip() {
        let mut s = ScopeStack::new();
        let h = s.push(FOO).unwrap();
        assert_eq!(s.segments(), &[FOO]);
        let h2 = s.push(BAR).unwrap();
        assert_eq!(s.segments(), &[FOO, BAR]);
        s.pop(h2).unwrap();
        s.pop(h).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.current_path(), TagPath::root());
    }

    #[test]
    fn depth_limit() {
        let mut s = ScopeStack::new();
        for _ in 0..MAX_DEPTH {
            s.push(FOO).unwrap();
        }
        assert_eq!(s.push(FOO), Err(ScopeError::DepthExceeded));
        assert_eq!(s.depth(), MAX_DEPTH);
    }

    #[test]
    fn out_of_order_and_double_pop() {
        let mut s = ScopeStack::new();
        let a = s.push(FOO).unwrap();
        let b = s.push(BAR).unwrap();
        assert_eq!(
            s.pop(a),
            Err(ScopeError::ScopeMismatch(MismatchKind::OutOfOrder))
        );
        s.pop(b).unwrap();
        assert_eq!(
            s.pop(b),
            Err(ScopeError::ScopeMismatch(MismatchKind::AlreadyPopped))
        );
        s.pop(a).unwrap();
        assert_eq!(
            s.pop(a),
            Err(ScopeError::ScopeMismatch(MismatchKind::AlreadyPopped))
        );
    }

    #[test]
    fn stale_handle_after_slot_reuse() {
        let mut s = ScopeStack::new();
        let a = s.push(FOO).unwrap();
        s.pop(a).unwrap();
        let _b = s.push(FOO).unwrap();
        assert_eq!(
            s.pop(a),
            Err(ScopeError::ScopeMismatch(MismatchKind::AlreadyPopped))
        );
        assert_eq!(s.depth(), 1);
    }

    #[test]
    fn adopt() {
        let mut s = ScopeStack::new();
        let path = TagPath::new(vec![FOO, BAR]).unwrap();
        let h = s.adopt(&path).unwrap();
        assert_eq!(s.current_path(), path);
        let inner = s.push(FOO).unwrap();
        assert_eq!(
            s.pop(h),
            Err(ScopeError::ScopeMismatch(MismatchKind::OutOfOrder))
        );
        s.pop(inner).unwrap();
        s.pop(h).unwrap();
        assert!(s.is_empty());
        s.push(FOO).unwrap();
        assert_eq!(s.adopt(&path), Err(ScopeError::StackNotEmpty));
    }

    #[test]
    fn root_tag_rejected() {
        let mut s = ScopeStack::new();
        assert_eq!(
            s.push(TagId::ROOT),
            Err(ScopeError::InvalidTag(TagId::ROOT))
        );
    }

    #[test]
    fn foreign_ticket() {
        let mut a = ScopeStack::new();
        let mut b = ScopeStack::new();
        b.push(FOO).unwrap();
        let t = b.push(FOO).unwrap();
        assert_eq!(
            a.pop(t),
            Err(ScopeError::ScopeMismatch(MismatchKind::WrongOwner))
        );
    }
}
