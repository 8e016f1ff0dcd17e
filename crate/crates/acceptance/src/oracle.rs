//! Shadow model of the attribution rules.
//!
//! Deliberately naive: paths are plain strings, every billing step is
//! appended to a log, and all statistics are computed afterwards by one
//! linear scan over that log. It shares no code with the library.

use std::collections::{BTreeMap, HashMap};

use crate::script::{Event, Script};

/// The five per-path counters, in snapshot order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cell {
    pub live_bytes: u64,
    pub live_count: u64,
    pub cumulative_bytes: u64,
    pub cumulative_count: u64,
    pub peak_live_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveBlock {
    pub path: String,
    pub size: u64,
    pub weight: u64,
    pub flags: u64,
}

#[derive(Debug, Clone)]
enum Step {
    Bill {
        path: String,
        bytes: u64,
        count: u64,
    },
    Release {
        path: String,
        bytes: u64,
        count: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Expected {
    pub cells: BTreeMap<String, Cell>,
    pub total_live_bytes: u64,
    pub global_peak_bytes: u64,
    pub unmatched_frees: u64,
    pub live: HashMap<u64, LiveBlock>,
}

pub struct Oracle {
    classify: fn(u64) -> Option<&'static str>,
    enabled: bool,
    rate: u64,
    counter: u64,
    scope: Vec<String>,
    live: HashMap<u64, LiveBlock>,
    log: Vec<Step>,
    unmatched: u64,
}

impl Oracle {
    pub fn new(rate: u64, classify: fn(u64) -> Option<&'static str>) -> Self {
        Oracle {
            classify,
            enabled: true,
            rate,
            counter: 0,
            scope: Vec::new(),
            live: HashMap::new(),
            log: Vec::new(),
            unmatched: 0,
        }
    }

    pub fn run(script: &Script, classify: fn(u64) -> Option<&'static str>) -> Expected {
        let mut o = Oracle::new(script.initial_rate, classify);
        for e in &script.events {
            o.apply(e);
        }
        o.expected()
    }

    pub fn apply(&mut self, event: &Event) {
        match event {
            Event::Alloc {
                addr,
                size,
                flags,
                tag,
                callsite,
            } => self.alloc(*addr, *size, *flags, tag.as_deref(), *callsite),
            Event::Free { addr } => self.free(*addr),
            Event::Realloc { old, new, size } => self.realloc(*old, *new, *size),
            Event::Push(name) => self.scope.push(name.clone()),
            Event::Pop => {
                self.scope.pop();
            }
            Event::SetEnabled(on) => self.enabled = *on,
            Event::SetRate(n) => {
                self.rate = *n;
                self.counter = 0;
            }
        }
    }

    fn path_for(&self, tag: Option<&str>, callsite: Option<u64>) -> String {
        if let Some(t) = tag {
            return format!("/{t}");
        }
        if !self.scope.is_empty() {
            return format!("/{}", self.scope.join("/"));
        }
        match callsite.and_then(self.classify) {
            Some(name) => format!("/{name}"),
            None => "/untagged".to_owned(),
        }
    }

    fn alloc(
        &mut self,
        addr: u64,
        size: u64,
        flags: u64,
        tag: Option<&str>,
        callsite: Option<u64>,
    ) {
        if !self.enabled || size == 0 {
            return;
        }
        self.counter += 1;
        if !self.counter.is_multiple_of(self.rate) {
            return;
        }
        let path = self.path_for(tag, callsite);
        let weight = self.rate;
        self.log.push(Step::Bill {
            path: path.clone(),
            bytes: size * weight,
            count: weight,
        });
        self.live.insert(
            addr,
            LiveBlock {
                path,
                size,
                weight,
                flags,
            },
        );
    }

    fn release(&mut self, block: &LiveBlock) {
        self.log.push(Step::Release {
            path: block.path.clone(),
            bytes: block.size * block.weight,
            count: block.weight,
        });
    }

    fn free(&mut self, addr: u64) {
        match self.live.remove(&addr) {
            Some(block) => self.release(&block),
            None => self.unmatched += 1,
        }
    }

    fn realloc(&mut self, old: u64, new: u64, size: u64) {
        match self.live.remove(&old) {
            Some(mut block) => {
                self.release(&block);
                if self.enabled && size > 0 {
                    block.size = size;
                    self.log.push(Step::Bill {
                        path: block.path.clone(),
                        bytes: size * block.weight,
                        count: block.weight,
                    });
                    self.live.insert(new, block);
                }
            }
            None => {
                self.unmatched += 1;
                self.alloc(new, size, 0, None, None);
            }
        }
    }

    /// Replays the billing log from the start.
    pub fn expected(&self) -> Expected {
        let mut cells: BTreeMap<String, Cell> = BTreeMap::new();
        let mut total = 0u64;
        let mut peak = 0u64;
        for step in &self.log {
            match step {
                Step::Bill { path, bytes, count } => {
                    let c = cells.entry(path.clone()).or_default();
                    c.live_bytes += bytes;
                    c.live_count += count;
                    c.cumulative_bytes += bytes;
                    c.cumulative_count += count;
                    c.peak_live_bytes = c.peak_live_bytes.max(c.live_bytes);
                    total += bytes;
                    peak = peak.max(total);
                }
                Step::Release { path, bytes, count } => {
                    let c = cells.get_mut(path).expect("release of unbilled path");
                    c.live_bytes -= bytes;
                    c.live_count -= count;
                    total -= bytes;
                }
            }
        }
        Expected {
            cells,
            total_live_bytes: total,
            global_peak_bytes: peak,
            unmatched_frees: self.unmatched,
            live: self.live.clone(),
        }
    }
}

/// Combines the models of threads that touched disjoint paths and
/// addresses. The global peak of the merge is only known up to bounds, so
/// the result carries the largest single-thread peak.
pub fn merge_disjoint(parts: &[Expected]) -> Expected {
    let mut out = Expected::default();
    for p in parts {
        for (path, cell) in &p.cells {
            assert!(
                out.cells.insert(path.clone(), *cell).is_none(),
                "threads share path {path}"
            );
        }
        out.live.extend(p.live.iter().map(|(a, b)| (*a, b.clone())));
        out.total_live_bytes += p.total_live_bytes;
        out.unmatched_frees += p.unmatched_frees;
        out.global_peak_bytes = out.global_peak_bytes.max(p.global_peak_bytes);
    }
    out
}
