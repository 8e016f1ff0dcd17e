//! Queries over snapshots: subtree rollups, top-N rankings, diffs, budget
//! checks and drain verification.
//!
//! All functions are pure over immutable snapshots. Batch operations accept
//! an [`Execution`] mode; with the `parallel` feature they fan out over
//! rayon, otherwise both modes run sequentially. Results never depend on the
//! mode.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, Neg, Sub};
use std::str::FromStr;

use thiserror::Error;

use crate::snapshot::Snapshot;
use crate::tag::{path_str_depth, path_str_within, split_path, validate_path_str, TagError};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How batch queries are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Data-parallel over rayon; sequential when the `parallel` feature is off.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("n must be at least 1")]
    InvalidN,
    #[error(transparent)]
    Path(#[from] TagError),
}

/// Live and cumulative totals summed over a subtree. Peaks are not additive
/// and are not rolled up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RollupCell {
    pub live_bytes: u64,
    pub live_count: u64,
    pub cumulative_bytes: u64,
    pub cumulative_count: u64,
}

impl Add for RollupCell {
    type Output = RollupCell;

    fn add(self, o: RollupCell) -> RollupCell {
        RollupCell {
            live_bytes: self.live_bytes + o.live_bytes,
            live_count: self.live_count + o.live_count,
            cumulative_bytes: self.cumulative_bytes + o.cumulative_bytes,
            cumulative_count: self.cumulative_count + o.cumulative_count,
        }
    }
}

impl From<&crate::tree::StatCell> for RollupCell {
    fn from(c: &crate::tree::StatCell) -> Self {
        RollupCell {
            live_bytes: c.live_bytes,
            live_count: c.live_count,
            cumulative_bytes: c.cumulative_bytes,
            cumulative_count: c.cumulative_count,
        }
    }
}

/// Range of node indices whose paths start with `prefix`.
fn prefix_range(snapshot: &Snapshot, prefix: &str) -> std::ops::Range<usize> {
    let nodes = snapshot.nodes();
    let start = nodes.partition_point(|n| n.path.as_str() < prefix);
    let len = nodes[start..].partition_point(|n| n.path.starts_with(prefix));
    start..start + len
}

/// Sums self cells of `path` and every descendant. Absent paths roll up to
/// zeros.
pub fn rollup(snapshot: &Snapshot, path: &str) -> RollupCell {
    if path == "/" {
        return snapshot
            .nodes()
            .iter()
            .fold(RollupCell::default(), |acc, n| acc + (&n.cell).into());
    }
    let mut total = snapshot
        .node(path)
        .map(|n| RollupCell::from(&n.cell))
        .unwrap_or_default();
    let prefix = format!("{path}/");
    for n in &snapshot.nodes()[prefix_range(snapshot, &prefix)] {
        total = total + (&n.cell).into();
    }
    total
}

impl Snapshot {
    pub fn rollup(&self, path: &str) -> RollupCell {
        rollup(self, path)
    }
}

fn ancestors(path: &str) -> impl Iterator<Item = &str> {
    // "/" followed by every proper prefix ending before a '/', then the path.
    let cuts = path
        .char_indices()
        .skip(1)
        .filter(|&(_, c)| c == '/')
        .map(|(i, _)| i);
    std::iter::once("/")
        .chain(cuts.map(move |i| &path[..i]))
        .chain((path != "/").then_some(path))
}

type Partial<'a> = HashMap<&'a str, RollupCell>;

fn accumulate<'a>(map: &mut Partial<'a>, node: &'a crate::snapshot::NodeStats) {
    let cell = RollupCell::from(&node.cell);
    for anc in ancestors(&node.path) {
        let slot = map.entry(anc).or_default();
        *slot = *slot + cell;
    }
}

#[cfg(feature = "parallel")]
fn merge<'a>(a: Partial<'a>, b: Partial<'a>) -> Partial<'a> {
    let (mut big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    for (k, v) in small {
        let slot = big.entry(k).or_default();
        *slot = *slot + v;
    }
    big
}

/// Rollups of every node, every implicit ancestor and `/`.
pub fn rollup_all(snapshot: &Snapshot, exec: Execution) -> BTreeMap<String, RollupCell> {
    let partial: Partial<'_> = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => snapshot
            .nodes()
            .par_chunks(1024)
            .fold(HashMap::new, |mut acc, chunk| {
                for node in chunk {
                    accumulate(&mut acc, node);
                }
                acc
            })
            .reduce(HashMap::new, merge),
        _ => {
            let mut map = HashMap::with_capacity(snapshot.nodes().len() * 2);
            for node in snapshot.nodes() {
                accumulate(&mut map, node);
            }
            map
        }
    };
    let mut out: BTreeMap<String, RollupCell> = partial
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
    out.entry("/".to_owned()).or_default();
    out
}

/// Which counter a ranking or diff orders by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankKey {
    #[default]
    Live,
    Cumulative,
}

impl RankKey {
    fn of(self, cell: &RollupCell) -> u64 {
        match self {
            RankKey::Live => cell.live_bytes,
            RankKey::Cumulative => cell.cumulative_bytes,
        }
    }
}

impl FromStr for RankKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(RankKey::Live),
            "cumulative" => Ok(RankKey::Cumulative),
            other => Err(format!(
                "unknown key {other:?} (expected live or cumulative)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankMode {
    /// Rank every node by its own counters.
    #[default]
    SelfOnly,
    /// Rank the top-level subtrees by their rollups.
    Rollup,
}

impl FromStr for RankMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "self" => Ok(RankMode::SelfOnly),
            "rollup" => Ok(RankMode::Rollup),
            other => Err(format!("unknown mode {other:?} (expected self or rollup)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranked {
    pub path: String,
    pub value: u64,
}

/// Largest `n` entries by `key`, descending, ties by ascending path.
///
/// In rollup mode only depth-1 subtrees are ranked, so entries never overlap.
pub fn top_n(
    snapshot: &Snapshot,
    n: usize,
    key: RankKey,
    mode: RankMode,
) -> Result<Vec<Ranked>, QueryError> {
    if n == 0 {
        return Err(QueryError::InvalidN);
    }
    let mut ranked: Vec<Ranked> = match mode {
        RankMode::SelfOnly => snapshot
            .nodes()
            .iter()
            .map(|node| Ranked {
                path: node.path.clone(),
                value: key.of(&(&node.cell).into()),
            })
            .collect(),
        RankMode::Rollup => {
            let mut tops: BTreeMap<&str, RollupCell> = BTreeMap::new();
            for node in snapshot.nodes() {
                if node.path == "/" {
                    continue;
                }
                let end = node.path[1..].find('/').map_or(node.path.len(), |i| i + 1);
                let slot = tops.entry(&node.path[..end]).or_default();
                *slot = *slot + (&node.cell).into();
            }
            tops.into_iter()
                .map(|(path, cell)| Ranked {
                    path: path.to_owned(),
                    value: key.of(&cell),
                })
                .collect()
        }
    };
    ranked.sort_by(|a, b| b.value.cmp(&a.value).then_with(|| a.path.cmp(&b.path)));
    ranked.truncate(n);
    Ok(ranked)
}

/// Signed after-minus-before change of one path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct DeltaCell {
    pub live_bytes: i128,
    pub live_count: i128,
    pub cumulative_bytes: i128,
    pub cumulative_count: i128,
}

impl DeltaCell {
    pub fn is_zero(&self) -> bool {
        *self == DeltaCell::default()
    }

    pub fn by_key(&self, key: RankKey) -> i128 {
        match key {
            RankKey::Live => self.live_bytes,
            RankKey::Cumulative => self.cumulative_bytes,
        }
    }
}

impl Add for DeltaCell {
    type Output = DeltaCell;

    fn add(self, o: DeltaCell) -> DeltaCell {
        DeltaCell {
            live_bytes: self.live_bytes + o.live_bytes,
            live_count: self.live_count + o.live_count,
            cumulative_bytes: self.cumulative_bytes + o.cumulative_bytes,
            cumulative_count: self.cumulative_count + o.cumulative_count,
        }
    }
}

impl Neg for DeltaCell {
    type Output = DeltaCell;

    fn neg(self) -> DeltaCell {
        DeltaCell {
            live_bytes: -self.live_bytes,
            live_count: -self.live_count,
            cumulative_bytes: -self.cumulative_bytes,
            cumulative_count: -self.cumulative_count,
        }
    }
}

impl Sub for RollupCell {
    type Output = DeltaCell;

    fn sub(self, o: RollupCell) -> DeltaCell {
        DeltaCell {
            live_bytes: self.live_bytes as i128 - o.live_bytes as i128,
            live_count: self.live_count as i128 - o.live_count as i128,
            cumulative_bytes: self.cumulative_bytes as i128 - o.cumulative_bytes as i128,
            cumulative_count: self.cumulative_count as i128 - o.cumulative_count as i128,
        }
    }
}

/// Per-path deltas over the union of both snapshots' paths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SnapshotDiff {
    entries: BTreeMap<String, DeltaCell>,
}

impl SnapshotDiff {
    /// Delta for `path`; paths in neither snapshot are all zeros.
    pub fn get(&self, path: &str) -> DeltaCell {
        self.entries.get(path).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DeltaCell)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.entries.values().all(DeltaCell::is_zero)
    }

    /// Non-zero deltas on `key`, largest first, ties by path.
    pub fn ranked(&self, key: RankKey) -> Vec<(&str, i128)> {
        let mut rows: Vec<(&str, i128)> = self
            .iter()
            .map(|(p, d)| (p, d.by_key(key)))
            .filter(|&(_, d)| d != 0)
            .collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        rows
    }
}

/// After-minus-before on live and cumulative fields of every path's self
/// cell. Peaks are not diffed.
pub fn diff(before: &Snapshot, after: &Snapshot) -> SnapshotDiff {
    let zero = RollupCell::default();
    let (bs, as_) = (before.nodes(), after.nodes());
    let (mut i, mut j) = (0, 0);
    let mut entries = BTreeMap::new();
    while i < bs.len() || j < as_.len() {
        let order = match (bs.get(i), as_.get(j)) {
            (Some(x), Some(y)) => x.path.cmp(&y.path),
            (Some(_), None) => std::cmp::Ordering::Less,
            _ => std::cmp::Ordering::Greater,
        };
        let (path, delta) = match order {
            std::cmp::Ordering::Equal => {
                let (x, y) = (&bs[i], &as_[j]);
                i += 1;
                j += 1;
                (
                    &x.path,
                    RollupCell::from(&y.cell) - RollupCell::from(&x.cell),
                )
            }
            std::cmp::Ordering::Less => {
                i += 1;
                (&bs[i - 1].path, zero - RollupCell::from(&bs[i - 1].cell))
            }
            std::cmp::Ordering::Greater => {
                j += 1;
                (&as_[j - 1].path, RollupCell::from(&as_[j - 1].cell) - zero)
            }
        };
        entries.insert(path.clone(), delta);
    }
    SnapshotDiff { entries }
}

/// A byte quota on the rolled-up live bytes of one path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Budget {
    pub path: String,
    pub max_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BudgetError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Path(#[from] TagError),
}

/// Budgets keyed by canonical path; setting a path twice replaces the limit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BudgetSet {
    limits: BTreeMap<String, u64>,
}

impl BudgetSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_budget(&mut self, path: &str, max_bytes: u64) -> Result<(), BudgetError> {
        validate_path_str(path)?;
        self.limits.insert(path.to_owned(), max_bytes);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<u64> {
        self.limits.get(path).copied()
    }

    pub fn len(&self) -> usize {
        self.limits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.limits.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Budget> + '_ {
        self.limits.iter().map(|(p, &m)| Budget {
            path: p.clone(),
            max_bytes: m,
        })
    }

    /// Parses `path<TAB>max_bytes` lines. Blank lines and lines starting
    /// with `#` are skipped; a path listed twice is an error.
    pub fn parse(text: &str) -> Result<Self, BudgetError> {
        let mut set = BudgetSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |reason: String| BudgetError::Parse { line, reason };
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let (path, max) = raw
                .split_once('\t')
                .ok_or_else(|| err("expected path<TAB>max_bytes".to_owned()))?;
            split_path(path).map_err(|e| err(e.to_string()))?;
            let max: u64 = max
                .parse()
                .map_err(|_| err(format!("invalid byte limit {max:?}")))?;
            if set.limits.insert(path.to_owned(), max).is_some() {
                return Err(err(format!("duplicate budget for {path}")));
            }
        }
        Ok(set)
    }
}

impl fmt::Display for BudgetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (p, m) in &self.limits {
            writeln!(f, "{p}\t{m}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exceedance {
    pub path: String,
    pub limit: u64,
    pub actual: u64,
    pub overshoot: u64,
}

/// Every budget whose rolled-up live bytes strictly exceed its limit, by
/// overshoot descending then path ascending.
pub fn check_budgets(snapshot: &Snapshot, budgets: &BudgetSet, exec: Execution) -> Vec<Exceedance> {
    let check = |(path, &limit): (&String, &u64)| {
        let actual = rollup(snapshot, path).live_bytes;
        (actual > limit).then(|| Exceedance {
            path: path.clone(),
            limit,
            actual,
            overshoot: actual - limit,
        })
    };
    let mut out: Vec<Exceedance> = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => budgets.limits.par_iter().filter_map(check).collect(),
        _ => budgets.limits.iter().filter_map(check).collect(),
    };
    out.sort_by(|a, b| {
        b.overshoot
            .cmp(&a.overshoot)
            .then_with(|| a.path.cmp(&b.path))
    });
    out
}

/// Outstanding allocations under a path that was expected to be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("drain failure: {live_bytes} live bytes in {live_count} allocations")]
pub struct DrainFailure {
    pub live_bytes: u64,
    pub live_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DrainError {
    #[error(transparent)]
    Failure(#[from] DrainFailure),
    #[error(transparent)]
    Path(#[from] TagError),
}

/// Succeeds iff nothing is live anywhere under `path`.
pub fn verify_drained(snapshot: &Snapshot, path: &str) -> Result<(), DrainError> {
    validate_path_str(path)?;
    let r = rollup(snapshot, path);
    if r.live_bytes == 0 && r.live_count == 0 {
        Ok(())
    } else {
        Err(DrainFailure {
            live_bytes: r.live_bytes,
            live_count: r.live_count,
        }
        .into())
    }
}

/// Number of `/`-separated segments; exposed for report rendering.
pub fn depth_of(path: &str) -> usize {
    path_str_depth(path)
}

/// True if `path` lies within the subtree rooted at `ancestor`.
pub fn is_within(path: &str, ancestor: &str) -> bool {
    path_str_within(path, ancestor)
}
