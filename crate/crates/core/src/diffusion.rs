//! Explicit temporal-walk kernels. These are oracle-scale reference
//! implementations; the production path never materializes |V|×|V| matrices.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Event, EventStream, NodeId};
use crate::tensor::Tensor;

pub const MAX_ORACLE_NODES: usize = 64;
pub const MAX_ENUMERATED_EVENTS: usize = 20;

/// How an event `(i, j)` contributes to the transition matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `T(i, j)` only.
    Directed,
    /// `T(i, j)` and `T(j, i)`; a self-loop counts once.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub t: f64,
    pub m: Tensor,
}

impl TransitionMatrix {
    /// Sums unit weights of `events`, which must all share one timestamp.
    pub fn from_events(events: &[Event], num_nodes: usize, direction: Direction) -> Result<Self> {
        Self::weighted(events, num_nodes, direction, |_| 1.0)
    }

    pub fn weighted(
        events: &[Event],
        num_nodes: usize,
        direction: Direction,
        weight: impl Fn(&Event) -> f64,
    ) -> Result<Self> {
        let t = events
            .first()
            .map(|e| e.time)
            .ok_or_else(|| Error::InvalidInput("no events".into()))?;
        let mut m = Tensor::zeros(num_nodes, num_nodes);
        for e in events {
            if e.time != t {
                return Err(Error::InvalidInput(format!(
                    "events at {t} and {} in one transition matrix",
                    e.time
                )));
            }
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(Error::Dimension(format!("node outside 0..{num_nodes}")));
            }
            let w = weight(e);
            m.set(e.src, e.dst, m.get(e.src, e.dst) + w);
            if direction == Direction::Symmetric && e.src != e.dst {
                m.set(e.dst, e.src, m.get(e.dst, e.src) + w);
            }
        }
        Ok(Self { t, m })
    }
}

/// `A^(0..=K)` with `A^(0) = I`.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkKernel {
    a: Vec<Tensor>,
    last_time: Option<f64>,
}

impl WalkKernel {
    pub fn new(num_nodes: usize, depth: usize) -> Self {
        assert!(depth >= 1, "kernel depth must be at least 1");
        let mut a = vec![Tensor::identity(num_nodes)];
        a.extend((0..depth).map(|_| Tensor::zeros(num_nodes, num_nodes)));
        Self { a, last_time: None }
    }

    pub fn depth(&self) -> usize {
        self.a.len() - 1
    }

    pub fn last_time(&self) -> Option<f64> {
        self.last_time
    }

    pub fn matrix(&self, level: usize) -> &Tensor {
        &self.a[level]
    }

    /// Folds in one distinct timestamp, deepest level first so each level
    /// reads the pre-update matrix one below it.
    pub fn update(&mut self, tr: &TransitionMatrix) -> Result<()> {
        if let Some(last) = self.last_time {
            if tr.t <= last {
                return Err(Error::OutOfOrder { last, got: tr.t });
            }
        }
        let n = self.a[0].rows();
        if tr.m.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "transition {:?} for kernel over {n} nodes",
                tr.m.shape()
            )));
        }
        for l in (1..self.a.len()).rev() {
            let step = self.a[l - 1].matmul(&tr.m);
            self.a[l].add_assign(&step);
        }
        self.last_time = Some(tr.t);
        Ok(())
    }

    /// Iterates `update` over every distinct timestamp `≤ t`.
    pub fn from_stream(
        stream: &EventStream,
        t: f64,
        depth: usize,
        direction: Direction,
    ) -> Result<Self> {
        let mut k = Self::new(stream.num_nodes(), depth);
        for group in EventStream::timestamp_groups(stream.prefix_until(t)) {
            k.update(&TransitionMatrix::from_events(
                group,
                stream.num_nodes(),
                direction,
            )?)?;
        }
        Ok(k)
    }
}

pub fn kernel_update(kernel: &mut WalkKernel, tr: &TransitionMatrix) -> Result<()> {
    kernel.update(tr)
}

/// `Σ_{τ1<…<τℓ ≤ t} T_τ1 ⋯ T_τℓ`, summed literally over ordered subsets of
/// the distinct event times.
pub fn closed_form_kernel(
    stream: &EventStream,
    t: f64,
    depth: usize,
    direction: Direction,
) -> Result<Tensor> {
    if depth == 0 {
        return Err(Error::InvalidInput("depth must be at least 1".into()));
    }
    let n = stream.num_nodes();
    if n > MAX_ORACLE_NODES {
        return Err(Error::GuardExceeded(format!(
            "{n} nodes exceeds the oracle limit of {MAX_ORACLE_NODES}"
        )));
    }
    let ts: Vec<Tensor> = EventStream::timestamp_groups(stream.prefix_until(t))
        .map(|g| TransitionMatrix::from_events(g, n, direction).map(|tr| tr.m))
        .collect::<Result<_>>()?;
    let mut total = Tensor::zeros(n, n);
    if ts.len() < depth {
        return Ok(total);
    }
    let mut pick: Vec<usize> = (0..depth).collect();
    loop {
        let mut prod = ts[pick[0]].clone();
        for &p in &pick[1..] {
            prod = prod.matmul(&ts[p]);
        }
        total.add_assign(&prod);
        // Advance to the next combination in lexicographic order.
        let mut i = depth;
        while i > 0 && pick[i - 1] == ts.len() - depth + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return Ok(total);
        }
        pick[i - 1] += 1;
        for k in i..depth {
            pick[k] = pick[k - 1] + 1;
        }
    }
}

/// Counts length-`depth` walks `from → … → to` whose step times are strictly
/// increasing event times `≤ t`.
pub fn enumerate_walks(
    stream: &EventStream,
    t: f64,
    depth: usize,
    from: NodeId,
    to: NodeId,
    direction: Direction,
) -> Result<u64> {
    let events = stream.prefix_until(t);
    if events.len() > MAX_ENUMERATED_EVENTS {
        return Err(Error::GuardExceeded(format!(
            "{} events exceeds the enumeration limit of {MAX_ENUMERATED_EVENTS}",
            events.len()
        )));
    }
    // Each event becomes one or two directed steps.
    let mut steps: Vec<(NodeId, NodeId, f64)> = Vec::new();
    for e in events {
        steps.push((e.src, e.dst, e.time));
        if direction == Direction::Symmetric && e.src != e.dst {
            steps.push((e.dst, e.src, e.time));
        }
    }
    fn walk(
        steps: &[(NodeId, NodeId, f64)],
        at: NodeId,
        after: f64,
        left: usize,
        to: NodeId,
    ) -> u64 {
        if left == 0 {
            return u64::from(at == to);
        }
        steps
            .iter()
            .filter(|&&(a, _, time)| a == at && time > after)
            .map(|&(_, b, time)| walk(steps, b, time, left - 1, to))
            .sum()
    }
    Ok(walk(&steps, from, f64::NEG_INFINITY, depth, to))
}

pub fn matrix_to_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(m: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn stream(events: Vec<Event>, n: usize) -> EventStream {
        EventStream::new(events, n, None).unwrap()
    }

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;

    #[test]
    fn base_case_is_the_first_transition() {
        let s = stream(vec![ev(A, B, 1.0)], 3);
        let k = WalkKernel::from_stream(&s, 1.0, 1, Direction::Directed).unwrap();
        assert_eq!(k.matrix(1).get(A, B), 1.0);
        assert_eq!(k.matrix(1).sum(), 1.0);
        assert_eq!(k.matrix(0), &Tensor::identity(3));
    }

    #[test]
    fn chain_order_matters() {
        let fwd = stream(vec![ev(A, B, 1.0), ev(B, C, 2.0)], 3);
        let rev = stream(vec![ev(B, C, 1.0), ev(A, B, 2.0)], 3);
        for dir in [Direction::Directed, Direction::Symmetric] {
            let k = WalkKernel::from_stream(&fwd, 2.0, 2, dir).unwrap();
            assert_eq!(k.matrix(2).get(A, C), 1.0);
            let k = WalkKernel::from_stream(&rev, 2.0, 2, dir).unwrap();
            assert_eq!(k.matrix(2).get(A, C), 0.0);
        }
        assert_eq!(
            enumerate_walks(&fwd, 2.0, 2, A, C, Direction::Directed).unwrap(),
            1
        );
        assert_eq!(
            enumerate_walks(&fwd, 2.0, 1, A, C, Direction::Directed).unwrap(),
            0
        );
    }

    #[test]
    fn duplicate_edges_double_the_count() {
        let s = stream(vec![ev(A, B, 1.0), ev(A, B, 1.0), ev(B, C, 2.0)], 3);
        assert_eq!(
            enumerate_walks(&s, 2.0, 2, A, C, Direction::Directed).unwrap(),
            2
        );
        let k = WalkKernel::from_stream(&s, 2.0, 2, Direction::Directed).unwrap();
        assert_eq!(k.matrix(2).get(A, C), 2.0);
    }

    #[test]
    fn same_timestamp_events_never_chain() {
        let s = stream(vec![ev(A, B, 1.0), ev(B, C, 1.0)], 3);
        assert_eq!(
            closed_form_kernel(&s, 1.0, 2, Direction::Directed).unwrap(),
            Tensor::zeros(3, 3)
        );
        let k = WalkKernel::from_stream(&s, 1.0, 2, Direction::Directed).unwrap();
        assert_eq!(k.matrix(2), &Tensor::zeros(3, 3));
    }

    #[test]
    fn depth_one_is_the_sum_of_transitions() {
        let s = stream(vec![ev(A, B, 1.0), ev(B, C, 2.0), ev(A, B, 3.0)], 3);
        let one = closed_form_kernel(&s, 3.0, 1, Direction::Directed).unwrap();
        assert_eq!(one.get(A, B), 2.0);
        assert_eq!(one.get(B, C), 1.0);
        assert_eq!(one.sum(), 3.0);
    }

    #[test]
    fn stale_timestamp_is_rejected() {
        let mut k = WalkKernel::new(2, 1);
        let tr = TransitionMatrix::from_events(&[ev(0, 1, 2.0)], 2, Direction::Directed).unwrap();
        k.update(&tr).unwrap();
        assert!(matches!(k.update(&tr), Err(Error::OutOfOrder { .. })));
        let wrong = TransitionMatrix::from_events(&[ev(0, 1, 3.0)], 3, Direction::Directed);
        assert!(k.update(&wrong.unwrap()).is_err());
    }

    #[test]
    fn guards() {
        let big = stream((0..21).map(|i| ev(0, 1, i as f64)).collect(), 2);
        assert!(matches!(
            enumerate_walks(&big, 100.0, 2, 0, 1, Direction::Directed),
            Err(Error::GuardExceeded(_))
        ));
        let wide = stream(vec![ev(0, 64, 1.0)], 65);
        assert!(closed_form_kernel(&wide, 1.0, 1, Direction::Directed).is_err());
    }

    #[test]
    fn csv_export() {
        assert_eq!(matrix_to_csv(&Tensor::identity(2)), "1,0\n0,1\n");
    }

    proptest! {
        #[test]
        fn recursion_expansion_and_enumeration_agree(
            raw in prop::collection::vec((0usize..5, 0usize..5, 0u32..8), 1..12),
            depth in 1usize..4,
            symmetric in any::<bool>(),
        ) {
            let dir = if symmetric { Direction::Symmetric } else { Direction::Directed };
            let s = stream(raw.iter().map(|&(a, b, t)| ev(a, b, f64::from(t))).collect(), 5);
            let t = f64::from(raw.iter().map(|r| r.2).max().unwrap());
            let k = WalkKernel::from_stream(&s, t, depth, dir).unwrap();
            for l in 1..=depth {
                let cf = closed_form_kernel(&s, t, l, dir).unwrap();
                prop_assert_eq!(k.matrix(l), &cf);
                if s.unique_times().len() < l {
                    prop_assert_eq!(cf.sum(), 0.0);
                }
                for i in 0..5 {
                    for j in 0..5 {
                        let count = enumerate_walks(&s, t, l, i, j, dir).unwrap();
                        prop_assert_eq!(cf.get(i, j), count as f64);
                    }
                }
            }
        }
    }
}
