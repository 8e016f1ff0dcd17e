//! Immutable point-in-time copies of the attribution tree and their
//! canonical on-disk form.
//!
//! The file format is a JSON document with a fixed key order, two-space
//! indentation, LF line endings and a trailing newline. Two serializations
//! of the same snapshot are byte-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tag::{validate_path_str, TagError, TagRegistry};
use crate::tree::{AttributionTree, StatCell};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("malformed snapshot: {0}")]
    MalformedSnapshot(String),
}

fn malformed(reason: impl Into<String>) -> SnapshotError {
    SnapshotError::MalformedSnapshot(reason.into())
}

/// Global metadata carried by a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub taken_at_ns: u64,
    pub sampling_rate: u64,
    pub enabled: bool,
    pub total_live_bytes: u64,
    pub global_peak_bytes: u64,
    pub unmatched_frees: u64,
}

/// Self statistics of one path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeStats {
    pub path: String,
    pub cell: StatCell,
}

/// Point-in-time attribution tree. Nodes are strictly sorted by path string
/// and only include paths that ever received an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub header: SnapshotHeader,
    nodes: Vec<NodeStats>,
}

impl Snapshot {
    /// Builds a snapshot, checking that node paths are valid, sorted and
    /// unique and that the sampling rate is positive.
    pub fn new(header: SnapshotHeader, nodes: Vec<NodeStats>) -> Result<Self, SnapshotError> {
        if header.sampling_rate == 0 {
            return Err(malformed("sampling_rate must be at least 1"));
        }
        for node in &nodes {
            validate_path_str(&node.path).map_err(|e| malformed(e.to_string()))?;
        }
        for pair in nodes.windows(2) {
            if pair[0].path >= pair[1].path {
                return Err(malformed(format!(
                    "nodes not strictly sorted: {:?} then {:?}",
                    pair[0].path, pair[1].path
                )));
            }
        }
        Ok(Snapshot { header, nodes })
    }

    /// Copies the current state of `tree`, rendering paths through `registry`.
    pub fn capture(
        tree: &AttributionTree,
        registry: &TagRegistry,
        taken_at_ns: u64,
        sampling_rate: u64,
        enabled: bool,
    ) -> Result<Self, TagError> {
        let mut nodes = tree
            .cells()
            .into_iter()
            .map(|(path, cell)| {
                Ok(NodeStats {
                    path: registry.canonical_path_string(&path)?,
                    cell,
                })
            })
            .collect::<Result<Vec<_>, TagError>>()?;
        nodes.sort_unstable_by(|a, b| a.path.cmp(&b.path));
        let totals = tree.totals();
        Ok(Snapshot {
            header: SnapshotHeader {
                taken_at_ns,
                sampling_rate,
                enabled,
                total_live_bytes: totals.total_live_bytes,
                global_peak_bytes: totals.global_peak_bytes,
                unmatched_frees: totals.unmatched_frees,
            },
            nodes,
        })
    }

    pub fn nodes(&self) -> &[NodeStats] {
        &self.nodes
    }

    pub fn node(&self, path: &str) -> Option<&NodeStats> {
        self.nodes
            .binary_search_by(|n| n.path.as_str().cmp(path))
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of every node's self live bytes.
    pub fn sum_live_bytes(&self) -> u64 {
        self.nodes.iter().map(|n| n.cell.live_bytes).sum()
    }

    /// Canonical byte form.
    pub fn serialize(&self) -> Vec<u8> {
        let doc = SnapshotDoc::from(self);
        let mut out = serde_json::to_vec_pretty(&doc).expect("snapshot documents always encode");
        out.push(b'\n');
        out
    }

    pub fn to_canonical_string(&self) -> String {
        String::from_utf8(self.serialize()).expect("serde_json emits UTF-8")
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let doc: SnapshotDoc =
            serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
        if doc.version != FORMAT_VERSION {
            return Err(malformed(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                doc.version
            )));
        }
        let header = SnapshotHeader {
            taken_at_ns: doc.taken_at_ns,
            sampling_rate: doc.sampling_rate,
            enabled: doc.enabled,
            total_live_bytes: doc.total_live_bytes,
            global_peak_bytes: doc.global_peak_bytes,
            unmatched_frees: doc.unmatched_frees,
        };
        let nodes = doc
            .nodes
            .into_iter()
            .map(|n| NodeStats {
                path: n.path,
                cell: StatCell {
                    live_bytes: n.live_bytes,
                    live_count: n.live_count,
                    cumulative_bytes: n.cumulative_bytes,
                    cumulative_count: n.cumulative_count,
                    peak_live_bytes: n.peak_live_bytes,
                },
            })
            .collect();
        Snapshot::new(header, nodes)
    }
}

// Field order here is the on-disk key order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotDoc {
    version: u64,
    taken_at_ns: u64,
    sampling_rate: u64,
    enabled: bool,
    total_live_bytes: u64,
    global_peak_bytes: u64,
    unmatched_frees: u64,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    path: String,
    live_bytes: u64,
    live_count: u64,
    cumulative_bytes: u64,
    cumulative_count: u64,
    peak_live_bytes: u64,
}

impl From<&Snapshot> for SnapshotDoc {
    fn from(s: &Snapshot) -> Self {
        let h = &s.header;
        SnapshotDoc {
            version: FORMAT_VERSION,
            taken_at_ns: h.taken_at_ns,
            sampling_rate: h.sampling_rate,
            enabled: h.enabled,
            total_live_bytes: h.total_live_bytes,
            global_peak_bytes: h.global_peak_bytes,
            unmatched_frees: h.unmatched_frees,
            nodes: s
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    path: n.path.clone(),
                    live_bytes: n.cell.live_bytes,
                    live_count: n.cell.live_count,
                    cumulative_bytes: n.cell.cumulative_bytes,
                    cumulative_count: n.cell.cumulative_count,
                    peak_live_bytes: n.cell.peak_live_bytes,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> SnapshotHeader {
        SnapshotHeader {
            taken_at_ns: 42,
            sampling_rate: 1,
            enabled: true,
            total_live_bytes: 100,
            global_peak_bytes: 150,
            unmatched_frees: 0,
        }
    }

    fn node(path: &str, live: u64) -> NodeStats {
        NodeStats {
            path: path.to_owned(),
            cell: StatCell {
                live_bytes: live,
                live_count: 1,
                cumulative_bytes: live,
                cumulative_count: 1,
                peak_live_bytes: live,
            },
        }
    }

    #[test]
    fn exact_layout() {
        let s = Snapshot::new(header(), vec![node("/net", 100)]).unwrap();
        let expected = "{\n  \"version\": 1,\n  \"taken_at_ns\": 42,\n  \"sampling_rate\": 1,\n  \"enabled\": true,\n  \"total_live_bytes\": 100,\n  \"global_peak_bytes\": 150,\n  \"unmatched_frees\": 0,\n  \"nodes\": [\n    {\n      \"path\": \"/net\",\n      \"live_bytes\": 100,\n      \"live_count\": 1,\n      \"cumulative_bytes\": 100,\n      \"cumulative_count\": 1,\n      \"peak_live_bytes\": 100\n    }\n  ]\n}\n";
        assert_eq!(s.to_canonical_string(), expected);
        assert_eq!(Snapshot::deserialize(expected.as_bytes()).unwrap(), s);
    }

    #[test]
    fn empty_layout() {
        let s = Snapshot::new(header(), vec![]).unwrap();
        assert!(s.to_canonical_string().ends_with("\"nodes\": []\n}\n"));
        assert_eq!(Snapshot::deserialize(&s.serialize()).unwrap(), s);
    }

    #[test]
    fn rejects_unsorted_and_duplicates() {
        assert!(Snapshot::new(header(), vec![node("/b", 1), node("/a", 1)]).is_err());
        assert!(Snapshot::new(header(), vec![node("/a", 1), node("/a", 1)]).is_err());
        assert!(Snapshot::new(header(), vec![node("a", 1)]).is_err());
        let mut h = header();
        h.sampling_rate = 0;
        assert!(Snapshot::new(h, vec![]).is_err());
    }

    #[test]
    fn node_lookup() {
        let s = Snapshot::new(header(), vec![node("/a", 1), node("/a/b", 2)]).unwrap();
        assert_eq!(s.node("/a/b").unwrap().cell.live_bytes, 2);
        assert!(s.node("/zzz").is_none());
        assert_eq!(s.sum_live_bytes(), 3);
    }
}
