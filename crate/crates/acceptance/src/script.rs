//! Seeded allocation workloads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scope and explicit-tag names used by single-threaded scripts.
pub const NAMES: [&str; 8] = ["net", "db", "ui", "gfx", "io", "cache", "audio", "log"];

/// Callsite classification shared by the model and the tracker under test.
pub fn classify(callsite: u64) -> Option<&'static str> {
    match callsite % 4 {
        0 => Some("net"),
        1 => Some("db"),
        2 => Some("codec"),
        _ => None,
    }
}

pub const CLASSIFIED_NAMES: [&str; 3] = ["net", "db", "codec"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Alloc {
        addr: u64,
        size: u64,
        flags: u64,
        tag: Option<String>,
        callsite: Option<u64>,
    },
    Free {
        addr: u64,
    },
    Realloc {
        old: u64,
        new: u64,
        size: u64,
    },
    Push(String),
    Pop,
    SetEnabled(bool),
    SetRate(u64),
}

#[derive(Debug, Clone)]
pub struct Script {
    pub initial_rate: u64,
    pub events: Vec<Event>,
}

impl Script {
    pub fn alloc_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Alloc { .. }))
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub max_events: usize,
    pub toggles: bool,
    pub rate_changes: bool,
    pub initial_rate: u64,
    /// Every address the script touches lies in `addr_base..addr_base + 2^32`.
    pub addr_base: u64,
    pub scope_names: Vec<String>,
    pub tag_names: Vec<String>,
    /// Opened first and never closed by the script.
    pub root_scope: Option<String>,
    pub max_size: u64,
}

impl GenConfig {
    pub fn single_thread(max_events: usize) -> Self {
        let names: Vec<String> = NAMES.iter().map(|s| s.to_string()).collect();
        GenConfig {
            max_events,
            toggles: true,
            rate_changes: true,
            initial_rate: 1,
            addr_base: 1 << 40,
            scope_names: names.clone(),
            tag_names: names,
            root_scope: None,
            max_size: 1 << 16,
        }
    }

    /// Thread `t` of a concurrent run: disjoint addresses and names, no
    /// toggles or rate changes.
    pub fn worker(t: usize, max_events: usize, rate: u64) -> Self {
        GenConfig {
            max_events,
            toggles: false,
            rate_changes: false,
            initial_rate: rate,
            addr_base: (t as u64 + 2) << 40,
            scope_names: (0..4).map(|i| format!("t{t}s{i}")).collect(),
            tag_names: (0..2).map(|i| format!("t{t}x{i}")).collect(),
            root_scope: Some(format!("t{t}")),
            max_size: 1 << 14,
        }
    }
}

pub fn generate(seed: u64, cfg: &GenConfig) -> Script {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(1..=cfg.max_events);
    let mut events = Vec::with_capacity(len + 1);
    let mut owned: Vec<u64> = Vec::new();
    let mut next_addr = cfg.addr_base + 16;
    // addresses the host owned before the script started
    let mut foreign = cfg.addr_base + (1 << 31);
    let mut depth = 0usize;
    let min_depth = usize::from(cfg.root_scope.is_some());
    if let Some(root) = &cfg.root_scope {
        events.push(Event::Push(root.clone()));
        depth = 1;
    }
    let mut fresh = |rng: &mut ChaCha8Rng| {
        next_addr += 16 * rng.random_range(1..4u64);
        next_addr
    };
    let size = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.05) {
            rng.random_range(1..=cfg.max_size)
        } else {
            rng.random_range(1..=256)
        }
    };

    while events.len() < len {
        let roll = rng.random_range(0..100u32);
        let ev = match roll {
            0..=39 => {
                let addr = fresh(&mut rng);
                owned.push(addr);
                Event::Alloc {
                    addr,
                    size: size(&mut rng),
                    flags: rng.random_range(0..4),
                    tag: rng
                        .random_bool(0.1)
                        .then(|| cfg.tag_names[rng.random_range(0..cfg.tag_names.len())].clone()),
                    callsite: rng.random_bool(0.5).then(|| rng.random_range(0..16)),
                }
            }
            40..=64 if !owned.is_empty() => {
                let i = rng.random_range(0..owned.len());
                Event::Free {
                    addr: owned.swap_remove(i),
                }
            }
            65..=66 => {
                foreign += 16;
                Event::Free { addr: foreign }
            }
            67..=74 if !owned.is_empty() => {
                let i = rng.random_range(0..owned.len());
                let old = owned[i];
                let new = if rng.random_bool(0.3) {
                    old
                } else {
                    fresh(&mut rng)
                };
                owned[i] = new;
                Event::Realloc {
                    old,
                    new,
                    size: size(&mut rng),
                }
            }
            75..=76 => {
                foreign += 16;
                let new = fresh(&mut rng);
                owned.push(new);
                Event::Realloc {
                    old: foreign,
                    new,
                    size: size(&mut rng),
                }
            }
            77..=86 if depth < memattr::MAX_DEPTH => {
                depth += 1;
                Event::Push(cfg.scope_names[rng.random_range(0..cfg.scope_names.len())].clone())
            }
            87..=95 if depth > min_depth => {
                depth -= 1;
                Event::Pop
            }
            96..=98 if cfg.toggles => Event::SetEnabled(rng.random_bool(0.6)),
            99 if cfg.rate_changes => Event::SetRate([1, 1, 2, 3, 4, 8][rng.random_range(0..6)]),
            _ => continue,
        };
        events.push(ev);
    }
    Script {
        initial_rate: cfg.initial_rate,
        events,
    }
}

/// Frees every block the script left owned, in address order.
pub fn drain_events(script: &Script) -> Vec<Event> {
    let mut owned = std::collections::BTreeSet::new();
    for e in &script.events {
        match e {
            Event::Alloc { addr, .. } => {
                owned.insert(*addr);
            }
            Event::Free { addr } => {
                owned.remove(addr);
            }
            Event::Realloc { old, new, .. } => {
                owned.remove(old);
                owned.insert(*new);
            }
            _ => {}
        }
    }
    owned.into_iter().map(|addr| Event::Free { addr }).collect()
}
