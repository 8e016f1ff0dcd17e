//! Tracks a small workload through the global allocator and writes the
//! snapshot to the path given on the command line (stdout by default).
//!
//!     cargo run -p memattr --example write_snapshot -- out.json
//!     cargo run -p memattr-cli -- report out.json

use std::alloc::System;
use std::collections::HashMap;

use memattr::{Tracker, TrackingAllocator};

#[global_allocator]
static GLOBAL: TrackingAllocator<System> = TrackingAllocator::new(System);

fn main() {
    let tracker: &'static Tracker = Box::leak(Box::new(Tracker::from_env().expect("config")));
    GLOBAL.attach(tracker);

    let cache: HashMap<u32, Vec<u8>> = {
        let _g = tracker.scope_named("cache").unwrap();
        (0..256).map(|i| (i, vec![0u8; 512])).collect()
    };
    let requests: Vec<String> = {
        let _net = tracker.scope_named("net").unwrap();
        let _http = tracker.scope_named("http").unwrap();
        (0..100)
            .map(|i| format!("GET /item/{i} HTTP/1.1"))
            .collect()
    };
    {
        let _g = tracker.scope_named("scratch").unwrap();
        let tmp = vec![1u64; 10_000];
        std::hint::black_box(&tmp);
    }

    let snap = tracker.snapshot();
    GLOBAL.detach();
    let text = snap.to_canonical_string();
    match std::env::args().nth(1) {
        Some(path) => std::fs::write(path, text).expect("write snapshot"),
        None => print!("{text}"),
    }
    drop((cache, requests));
}
