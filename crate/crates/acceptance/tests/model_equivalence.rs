use memattr::{diff, Snapshot};
use memattr_acceptance::oracle::Oracle;
use memattr_acceptance::script::{classify, drain_events, generate, Event, GenConfig, Script};
use memattr_acceptance::{compare, conservation, replay, scripted_tracker, Driver, PeakCheck};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tracker_matches_model(seed in any::<u64>(), rate in prop::sample::select(vec![1u64, 1, 2, 3, 8])) {
        let mut cfg = GenConfig::single_thread(2000);
        cfg.initial_rate = rate;
        let script = generate(seed, &cfg);
        let (tracker, snap) = replay(&script);
        let want = Oracle::run(&script, classify);
        prop_assert_eq!(compare(&tracker, &snap, &want, PeakCheck::Exact), Ok(()));
        prop_assert_eq!(conservation(&tracker, &snap), Ok(()));
    }

    #[test]
    fn draining_leaves_nothing_live(seed in any::<u64>()) {
        let script = generate(seed, &GenConfig::single_thread(1000));
        let tracker = scripted_tracker(script.initial_rate);
        let mut d = Driver::new(&tracker);
        d.run(&script.events);
        d.run(&drain_events(&script));
        let snap = tracker.snapshot();
        prop_assert_eq!(snap.header.total_live_bytes, 0);
        prop_assert!(snap.nodes().iter().all(|n| n.cell.live_bytes == 0 && n.cell.live_count == 0));
        prop_assert!(tracker.live_records().is_empty());
    }

    #[test]
    fn free_order_does_not_matter(seed in any::<u64>(), shuffle in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut cfg = GenConfig::single_thread(800);
        cfg.toggles = false;
        let script = generate(seed, &cfg);
        let mut frees = drain_events(&script);
        let forward = run_with_tail(&script, &frees);
        frees.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle));
        let shuffled = run_with_tail(&script, &frees);
        prop_assert!(diff(&forward, &shuffled).is_all_zero());
        prop_assert_eq!(forward.header.total_live_bytes, shuffled.header.total_live_bytes);
    }
}

fn run_with_tail(script: &Script, tail: &[Event]) -> Snapshot {
    let tracker = scripted_tracker(script.initial_rate);
    let mut d = Driver::new(&tracker);
    d.run(&script.events);
    d.run(tail);
    d.unwind();
    tracker.snapshot()
}

#[test]
fn model_agrees_on_a_fixed_script() {
    let script = Script {
        initial_rate: 1,
        events: vec![
            Event::Alloc {
                addr: 16,
                size: 100,
                flags: 0,
                tag: None,
                callsite: Some(0),
            },
            Event::Push("ui".into()),
            Event::Alloc {
                addr: 32,
                size: 40,
                flags: 1,
                tag: None,
                callsite: Some(1),
            },
            Event::Alloc {
                addr: 48,
                size: 8,
                flags: 0,
                tag: Some("db".into()),
                callsite: None,
            },
            Event::Pop,
            Event::Realloc {
                old: 32,
                new: 64,
                size: 80,
            },
            Event::Free { addr: 999 },
            Event::Free { addr: 16 },
            Event::Alloc {
                addr: 80,
                size: 5,
                flags: 0,
                tag: None,
                callsite: Some(3),
            },
        ],
    };
    let want = Oracle::run(&script, classify);
    let cell = |p: &str| want.cells[p];
    assert_eq!(cell("/net").live_bytes, 0);
    assert_eq!(cell("/net").peak_live_bytes, 100);
    assert_eq!(cell("/ui").live_bytes, 80);
    assert_eq!(cell("/ui").cumulative_bytes, 120);
    assert_eq!(cell("/ui").cumulative_count, 2);
    assert_eq!(cell("/db").live_bytes, 8);
    assert_eq!(cell("/untagged").live_bytes, 5);
    assert_eq!(want.unmatched_frees, 1);
    assert_eq!(want.global_peak_bytes, 188);
    let (tracker, snap) = replay(&script);
    assert_eq!(compare(&tracker, &snap, &want, PeakCheck::Exact), Ok(()));
}
