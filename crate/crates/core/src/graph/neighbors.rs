use super::{Event, EventStream, NodeId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborEntry {
    pub neighbor: NodeId,
    pub event_idx: usize,
    pub time: f64,
}

/// Which past events a lookup at time `t` may see.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cutoff {
    /// `time < t`
    Before(f64),
    /// `time ≤ t`
    Through(f64),
}

impl Cutoff {
    pub fn time(self) -> f64 {
        match self {
            Cutoff::Before(t) | Cutoff::Through(t) => t,
        }
    }
}

/// Per-node incident events in ascending time; every event appears in the
/// lists of both endpoints (once for self-loops).
#[derive(Clone, Debug, Default)]
pub struct NeighborIndex {
    lists: Vec<Vec<NeighborEntry>>,
}

impl NeighborIndex {
    pub fn build(stream: &EventStream) -> Self {
        Self::build_filtered(stream, |_| true)
    }

    pub fn build_filtered(stream: &EventStream, keep: impl Fn(&Event) -> bool) -> Self {
        let mut lists = vec![Vec::new(); stream.num_nodes()];
        for e in stream.events().iter().filter(|e| keep(e)) {
            lists[e.src].push(NeighborEntry {
                neighbor: e.dst,
                event_idx: e.idx,
                time: e.time,
            });
            if e.dst != e.src {
                lists[e.dst].push(NeighborEntry {
                    neighbor: e.src,
                    event_idx: e.idx,
                    time: e.time,
                });
            }
        }
        Self { lists }
    }

    pub fn num_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn incident(&self, node: NodeId) -> &[NeighborEntry] {
        &self.lists[node]
    }

    /// Up to `k` entries visible under `cutoff`, most recent first.
    pub fn recent(&self, node: NodeId, cutoff: Cutoff, k: usize) -> Vec<NeighborEntry> {
        let list = &self.lists[node];
        let end = match cutoff {
            Cutoff::Before(t) => list.partition_point(|e| e.time < t),
            Cutoff::Through(t) => list.partition_point(|e| e.time <= t),
        };
        let start = end.saturating_sub(k);
        list[start..end].iter().rev().copied().collect()
    }

    /// Up to `k` entries with `time < t`, most recent first.
    pub fn recent_neighbors(&self, node: NodeId, t: f64, k: usize) -> Vec<NeighborEntry> {
        self.recent(node, Cutoff::Before(t), k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Event;
    use proptest::prelude::*;

    fn ev(src: NodeId, dst: NodeId, time: f64) -> Event {
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
    fn most_recent_first() {
        let s =
            EventStream::from_events(vec![ev(0, 1, 1.0), ev(0, 2, 2.0), ev(3, 0, 3.0)]).unwrap();
        let idx = NeighborIndex::build(&s);
        let times: Vec<f64> = idx
            .recent_neighbors(0, 3.5, 2)
            .iter()
            .map(|e| e.time)
            .collect();
        assert_eq!(times, vec![3.0, 2.0]);
        assert!(idx.recent_neighbors(0, 0.5, 2).is_empty());
        assert_eq!(idx.recent_neighbors(1, 10.0, 20).len(), 1);
        assert_eq!(idx.recent(0, Cutoff::Through(3.0), 5).len(), 3);
        assert_eq!(idx.recent(0, Cutoff::Before(3.0), 5).len(), 2);
    }

    #[test]
    fn events_are_symmetric() {
        let s = EventStream::from_events(vec![ev(0, 1, 1.0)]).unwrap();
        let idx = NeighborIndex::build(&s);
        assert_eq!(idx.incident(0)[0].neighbor, 1);
        assert_eq!(idx.incident(1)[0].neighbor, 0);
    }

    proptest! {
        #[test]
        fn lookups_are_causal(
            raw in prop::collection::vec((0usize..6, 0usize..6, 0u32..20), 1..60),
            t in 0.0f64..22.0,
            k in 1usize..8,
        ) {
            let events = raw.iter().map(|&(a, b, tt)| ev(a, b, f64::from(tt))).collect();
            let s = EventStream::from_events(events).unwrap();
            let idx = NeighborIndex::build(&s);
            for node in 0..s.num_nodes() {
                let got = idx.recent_neighbors(node, t, k);
                prop_assert!(got.len() <= k);
                prop_assert!(got.iter().all(|e| e.time < t));
                prop_assert!(got.windows(2).all(|w| w[0].time >= w[1].time));
                let visible = idx.incident(node).iter().filter(|e| e.time < t).count();
                prop_assert_eq!(got.len(), visible.min(k));
            }
        }
    }
}
