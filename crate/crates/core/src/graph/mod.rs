//! Event streams: ingestion, validation, chronological splits and
//! temporal-neighbor lookup.

mod csv;
mod neighbors;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::csv::{
    ingest_csv, ingest_node_features, load_dataset, parse_events, write_csv, write_dataset,
    write_node_features, EVENTS_FILE, NODE_FEATURES_FILE,
};
pub use neighbors::{Cutoff, NeighborEntry, NeighborIndex};
pub use split::{chronological_split, inductive_split, SplitMode, SplitPlan};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub src: NodeId,
    pub dst: NodeId,
    pub time: f64,
    pub edge_feat: Vec<f64>,
    pub label: Option<bool>,
    /// Position in the chronologically sorted stream.
    pub idx: usize,
}

impl Event {
    pub fn touches(&self, node: NodeId) -> bool {
        self.src == node || self.dst == node
    }
}

/// A validated, chronologically sorted event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    events: Vec<Event>,
    num_nodes: usize,
    node_feat: Tensor,
    edge_dim: usize,
    unique_times: Vec<f64>,
}

impl EventStream {
    /// Sorts `events` stably by time, reassigns `idx`, and validates every
    /// invariant. `node_feat` may have zero columns (no node features).
    pub fn new(
        mut events: Vec<Event>,
        num_nodes: usize,
        node_feat: Option<Tensor>,
    ) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::EmptyStream);
        }
        let edge_dim = events[0].edge_feat.len();
        for (pos, e) in events.iter().enumerate() {
            if !(e.time >= 0.0) || !e.time.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "event {pos} has invalid time {}",
                    e.time
                )));
            }
            if e.edge_feat.len() != edge_dim {
                return Err(Error::Dimension(format!(
                    "event {pos} has {} edge features, expected {edge_dim}",
                    e.edge_feat.len()
                )));
            }
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(Error::InvalidInput(format!(
                    "event {pos} references a node outside 0..{num_nodes}"
                )));
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        for (i, e) in events.iter_mut().enumerate() {
            e.idx = i;
        }
        let node_feat = match node_feat {
            Some(f) => {
                if f.rows() != num_nodes {
                    return Err(Error::Dimension(format!(
                        "node feature matrix has {} rows for {num_nodes} nodes",
                        f.rows()
                    )));
                }
                f
            }
            None => Tensor::zeros(num_nodes, 0),
        };
        let mut unique_times: Vec<f64> = events.iter().map(|e| e.time).collect();
        unique_times.dedup();
        Ok(Self {
            events,
            num_nodes,
            node_feat,
            edge_dim,
            unique_times,
        })
    }

    /// Number of nodes implied by the largest id in `events`.
    pub fn from_events(events: Vec<Event>) -> Result<Self> {
        let num_nodes = events
            .iter()
            .map(|e| e.src.max(e.dst) + 1)
            .max()
            .unwrap_or(0);
        Self::new(events, num_nodes, None)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_feat
    }

    /// `(d_x, m)`
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.node_feat.cols(), self.edge_dim)
    }

    pub fn unique_times(&self) -> &[f64] {
        &self.unique_times
    }

    /// Distinct event times `≤ t`.
    pub fn unique_times_until(&self, t: f64) -> &[f64] {
        let n = self.unique_times.partition_point(|&u| u <= t);
        &self.unique_times[..n]
    }

    /// Events with `time ≤ t`, in stream order.
    pub fn prefix_until(&self, t: f64) -> &[Event] {
        let n = self.events.partition_point(|e| e.time <= t);
        &self.events[..n]
    }

    /// Events grouped by distinct timestamp, in order.
    pub fn timestamp_groups(events: &[Event]) -> impl Iterator<Item = &[Event]> {
        events.chunk_by(|a, b| a.time == b.time)
    }

    /// True when sources and destinations form disjoint node sets.
    pub fn is_bipartite(&self) -> bool {
        let mut role = vec![0u8; self.num_nodes];
        for e in &self.events {
            role[e.src] |= 1;
            role[e.dst] |= 2;
        }
        role.iter().all(|&r| r != 3)
    }

    /// Sorted distinct destination ids.
    pub fn destinations(&self) -> Vec<NodeId> {
        let mut seen = vec![false; self.num_nodes];
        for e in &self.events {
            seen[e.dst] = true;
        }
        (0..self.num_nodes).filter(|&n| seen[n]).collect()
    }

    /// A copy without the event at `idx` (indices re-assigned).
    pub fn without_event(&self, idx: usize) -> Result<Self> {
        let events: Vec<Event> = self
            .events
            .iter()
            .filter(|e| e.idx != idx)
            .cloned()
            .collect();
        Self::new(events, self.num_nodes, Some(self.node_feat.clone()))
    }

    /// The stream truncated to its first `n` events.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(
            self.events[..n.min(self.len())].to_vec(),
            self.num_nodes,
            Some(self.node_feat.clone()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ev(src: NodeId, dst: NodeId, time: f64) -> Event {
        Event {
            src,
            dst,
            time,
            edge_feat: vec![],
            label: None,
            idx: 0,
        }
    }

    #[test]
    fn stable_sort_reassigns_indices() {
        let s =
            EventStream::from_events(vec![ev(0, 1, 2.0), ev(1, 2, 1.0), ev(2, 0, 1.0)]).unwrap();
        let order: Vec<_> = s.events().iter().map(|e| (e.src, e.idx)).collect();
        assert_eq!(order, vec![(1, 0), (2, 1), (0, 2)]);
        assert_eq!(s.unique_times(), &[1.0, 2.0]);
        assert_eq!(s.num_nodes(), 3);
    }

    #[test]
    fn empty_stream_is_rejected() {
        assert!(matches!(
            EventStream::from_events(vec![]),
            Err(Error::EmptyStream)
        ));
    }

    #[test]
    fn bipartite_detection() {
        let s = EventStream::from_events(vec![ev(0, 2, 1.0), ev(1, 3, 2.0)]).unwrap();
        assert!(s.is_bipartite());
        let s = EventStream::from_events(vec![ev(0, 1, 1.0), ev(1, 2, 2.0)]).unwrap();
        assert!(!s.is_bipartite());
    }

    #[test]
    fn timestamp_groups_split_on_time() {
        let s =
            EventStream::from_events(vec![ev(0, 1, 1.0), ev(1, 2, 1.0), ev(0, 2, 3.0)]).unwrap();
        let sizes: Vec<_> = EventStream::timestamp_groups(s.events())
            .map(<[Event]>::len)
            .collect();
        assert_eq!(sizes, vec![2, 1]);
    }
}
