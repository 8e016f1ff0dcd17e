//! Memory attribution: bill every tracked allocation to a hierarchical tag
//! and query per-tag live, cumulative and peak usage at runtime.
//!
//! The pieces, bottom-up:
//!
//! - [`tag`]: tag names, interning and `/a/b` paths;
//! - [`tree`]: per-path statistics and the live-allocation side table;
//! - [`scope`]: per-thread scope stacks;
//! - [`interceptor`]: the [`Tracker`], which routes allocation events through
//!   billing precedence, sampling and the enable switch;
//! - [`hook`]: a `GlobalAlloc` adapter feeding a tracker;
//! - [`snapshot`] and [`query`]: immutable snapshots, their canonical file
//!   format, rollups, top-N, diffs, budgets and drain checks.

pub mod hook;
pub mod interceptor;
mod local;
pub mod query;
pub mod scope;
pub mod snapshot;
pub mod tag;
pub mod tree;

pub use hook::TrackingAllocator;
pub use interceptor::{
    CallerClassifier, CallsiteToken, Clock, ConfigError, Diagnostics, InterceptError,
    InterceptorConfig, ManualClock, MonotonicClock, OsThreadIds, ReallocTicket, ScopeGuard,
    ScopeHandle, TableClassifier, ThreadIdSource, Tracker, TrackerBuilder,
};
pub use local::{current_thread_token, ReentrancyGuard};
pub use query::{
    check_budgets, diff, rollup, rollup_all, top_n, verify_drained, Budget, BudgetError, BudgetSet,
    DeltaCell, DrainError, DrainFailure, Exceedance, Execution, QueryError, RankKey, RankMode,
    Ranked, RollupCell, SnapshotDiff,
};
pub use scope::{MismatchKind, ScopeError, ScopeStack};
pub use snapshot::{NodeStats, Snapshot, SnapshotError, SnapshotHeader};
pub use tag::{TagError, TagId, TagName, TagPath, TagRegistry, MAX_DEPTH};
pub use tree::{
    Address, AllocationRecord, AttributionTree, GlobalTotals, StatCell, ThreadToken, TreeError,
};
