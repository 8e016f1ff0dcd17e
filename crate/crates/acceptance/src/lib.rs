//! Test support for memattr: a shadow model of the attribution rules, seeded
//! workload scripts, and a driver that replays scripts against a real
//! [`Tracker`].

pub mod oracle;
pub mod script;

use std::collections::HashMap;

use memattr::{Address, CallsiteToken, ManualClock, ScopeHandle, Snapshot, TagId, Tracker};

use oracle::Expected;
use script::{classify, Event, Script, CLASSIFIED_NAMES};

/// A tracker with the script classifier registered.
pub fn scripted_tracker(rate: u64) -> Tracker {
    let tracker = Tracker::builder()
        .sampling_rate(rate)
        .clock(ManualClock::new(0))
        .build()
        .expect("valid rate");
    let ids: Vec<TagId> = CLASSIFIED_NAMES
        .iter()
        .map(|n| tracker.intern(n).unwrap())
        .collect();
    tracker.register_classifier(move |c: CallsiteToken| {
        let name = classify(c.0)?;
        let i = CLASSIFIED_NAMES.iter().position(|n| *n == name)?;
        Some(ids[i])
    });
    tracker
}

/// Replays script events on the calling thread.
pub struct Driver<'a> {
    tracker: &'a Tracker,
    handles: Vec<ScopeHandle>,
    ids: HashMap<String, TagId>,
}

impl<'a> Driver<'a> {
    pub fn new(tracker: &'a Tracker) -> Self {
        Driver {
            tracker,
            handles: Vec::new(),
            ids: HashMap::new(),
        }
    }

    fn id(&mut self, name: &str) -> TagId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.tracker.intern(name).expect("valid tag name");
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn apply(&mut self, event: &Event) {
        let t = self.tracker;
        match event {
            Event::Alloc {
                addr,
                size,
                flags,
                tag,
                callsite,
            } => {
                let tag = tag.as_deref().map(|n| self.id(n));
                t.on_alloc(
                    Address(*addr),
                    *size,
                    *flags,
                    tag,
                    callsite.map(CallsiteToken),
                );
            }
            Event::Free { addr } => t.on_free(Address(*addr)),
            Event::Realloc { old, new, size } => t.on_realloc(Address(*old), Address(*new), *size),
            Event::Push(name) => {
                let id = self.id(name);
                self.handles.push(t.push_scope(id).expect("push"));
            }
            Event::Pop => {
                let h = self.handles.pop().expect("pop without push");
                t.pop_scope(h).expect("pop");
            }
            Event::SetEnabled(on) => t.set_enabled(*on),
            Event::SetRate(n) => t.set_sampling_rate(*n).expect("valid rate"),
        }
    }

    pub fn run(&mut self, events: &[Event]) {
        for e in events {
            self.apply(e);
        }
    }

    /// Pops every scope this driver opened.
    pub fn unwind(&mut self) {
        while let Some(h) = self.handles.pop() {
            self.tracker.pop_scope(h).expect("unwind");
        }
    }
}

/// Runs `script` on a fresh tracker and returns it with its snapshot.
pub fn replay(script: &Script) -> (Tracker, Snapshot) {
    let tracker = scripted_tracker(script.initial_rate);
    let mut d = Driver::new(&tracker);
    d.run(&script.events);
    d.unwind();
    let snap = tracker.snapshot();
    (tracker, snap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakCheck {
    Exact,
    /// At least the model's peak and at most `upper`.
    Within {
        upper: u64,
    },
}

/// Compares a tracker and its snapshot against the model. Returns the first
/// few differences.
pub fn compare(
    tracker: &Tracker,
    snap: &Snapshot,
    want: &Expected,
    peak: PeakCheck,
) -> Result<(), String> {
    let mut diffs = Vec::new();
    let h = &snap.header;
    if h.total_live_bytes != want.total_live_bytes {
        diffs.push(format!(
            "total_live_bytes {} != {}",
            h.total_live_bytes, want.total_live_bytes
        ));
    }
    if h.unmatched_frees != want.unmatched_frees {
        diffs.push(format!(
            "unmatched_frees {} != {}",
            h.unmatched_frees, want.unmatched_frees
        ));
    }
    match peak {
        PeakCheck::Exact if h.global_peak_bytes != want.global_peak_bytes => diffs.push(format!(
            "global_peak_bytes {} != {}",
            h.global_peak_bytes, want.global_peak_bytes
        )),
        PeakCheck::Within { upper }
            if h.global_peak_bytes < want.global_peak_bytes || h.global_peak_bytes > upper =>
        {
            diffs.push(format!(
                "global_peak_bytes {} outside [{}, {upper}]",
                h.global_peak_bytes, want.global_peak_bytes
            ))
        }
        _ => {}
    }

    let got: Vec<&str> = snap.nodes().iter().map(|n| n.path.as_str()).collect();
    let exp: Vec<&str> = want.cells.keys().map(String::as_str).collect();
    if got != exp {
        diffs.push(format!("node paths {got:?} != {exp:?}"));
    }
    for n in snap.nodes() {
        if let Some(c) = want.cells.get(&n.path) {
            let g = n.cell;
            let same = g.live_bytes == c.live_bytes
                && g.live_count == c.live_count
                && g.cumulative_bytes == c.cumulative_bytes
                && g.cumulative_count == c.cumulative_count
                && g.peak_live_bytes == c.peak_live_bytes;
            if !same {
                diffs.push(format!("{}: {:?} != {:?}", n.path, g, c));
            }
        }
    }

    let records = tracker.live_records();
    if records.len() != want.live.len() {
        diffs.push(format!(
            "live records {} != {}",
            records.len(),
            want.live.len()
        ));
    }
    for r in records {
        let path = tracker
            .registry()
            .canonical_path_string(&r.path)
            .unwrap_or_default();
        match want.live.get(&r.address.0) {
            Some(b)
                if b.path == path
                    && b.size == r.size
                    && b.weight == r.weight
                    && b.flags == r.flags => {}
            other => diffs.push(format!(
                "record {:#x} {path} size={} weight={} flags={} != {other:?}",
                r.address.0, r.size, r.weight, r.flags
            )),
        }
    }

    if diffs.is_empty() {
        Ok(())
    } else {
        diffs.truncate(8);
        Err(diffs.join("\n"))
    }
}

/// Total live bytes, the sum of self live bytes, the sum over live records
/// and the root rollup must all agree.
pub fn conservation(tracker: &Tracker, snap: &Snapshot) -> Result<(), String> {
    let total = snap.header.total_live_bytes;
    let self_sum = snap.sum_live_bytes();
    let record_sum: u64 = tracker
        .live_records()
        .iter()
        .map(|r| r.weighted_bytes())
        .sum();
    let root = snap.rollup("/").live_bytes;
    if total == self_sum && self_sum == record_sum && record_sum == root {
        Ok(())
    } else {
        Err(format!(
            "total={total} self_sum={self_sum} records={record_sum} root_rollup={root}"
        ))
    }
}
