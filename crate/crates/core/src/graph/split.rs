use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Event, EventStream, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Transductive,
    Inductive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_end_idx: usize,
    pub val_end_idx: usize,
    pub new_node_set: BTreeSet<NodeId>,
    pub mode: SplitMode,
}

impl SplitPlan {
    pub fn is_new(&self, node: NodeId) -> bool {
        self.new_node_set.contains(&node)
    }

    /// Training events after masking out the withheld nodes.
    pub fn train_events<'a>(&self, stream: &'a EventStream) -> Vec<&'a Event> {
        stream.events()[..self.train_end_idx]
            .iter()
            .filter(|e| !self.is_new(e.src) && !self.is_new(e.dst))
            .collect()
    }

    pub fn val_range(&self) -> std::ops::Range<usize> {
        self.train_end_idx..self.val_end_idx
    }

    pub fn test_range(&self, len: usize) -> std::ops::Range<usize> {
        self.val_end_idx..len
    }
}

fn boundaries(n: usize, train_frac: f64, val_frac: f64) -> Result<(usize, usize)> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "fractions ({train_frac}, {val_frac}) must be positive and sum below 1"
        )));
    }
    // The nudge keeps products like 0.85 * 100 from flooring to 84.
    let at = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let train_end = at(train_frac).min(n);
    let val_end = at(train_frac + val_frac).min(n);
    if train_end == 0 {
        return Err(Error::InvalidSplit(format!(
            "train fraction {train_frac} leaves no training events"
        )));
    }
    Ok((train_end, val_end))
}

pub fn chronological_split(
    stream: &EventStream,
    train_frac: f64,
    val_frac: f64,
) -> Result<SplitPlan> {
    let (train_end_idx, val_end_idx) = boundaries(stream.len(), train_frac, val_frac)?;
    Ok(SplitPlan {
        train_end_idx,
        val_end_idx,
        new_node_set: BTreeSet::new(),
        mode: SplitMode::Transductive,
    })
}

pub fn inductive_split(
    stream: &EventStream,
    train_frac: f64,
    val_frac: f64,
    new_node_frac: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if !(new_node_frac > 0.0 && new_node_frac < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "new-node fraction {new_node_frac} must lie in (0, 1)"
        )));
    }
    let (train_end_idx, val_end_idx) = boundaries(stream.len(), train_frac, val_frac)?;
    let n = stream.num_nodes();
    let count = (new_node_frac * n as f64 + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let new_node_set: BTreeSet<NodeId> = sample(&mut rng, n, count).into_iter().collect();
    let plan = SplitPlan {
        train_end_idx,
        val_end_idx,
        new_node_set,
        mode: SplitMode::Inductive,
    };
    if plan.train_events(stream).is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(plan)
}
