//! Loss and gradient of one training batch, and a central-difference verifier.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::autodiff::{GradientSet, Tape, Var};
use crate::error::Result;
use crate::graph::Event;
use crate::network::{Context, Mode, Model};
use crate::params::ParamId;
use crate::trainer::{link_loss, node_loss, LinkBatch};

/// What a checked loss is computed over.
#[derive(Clone, Debug)]
pub enum Batch {
    Link(LinkBatch),
    /// Labeled events for the node-classification loss.
    Node(Vec<Event>),
}

impl From<LinkBatch> for Batch {
    fn from(b: LinkBatch) -> Self {
        Batch::Link(b)
    }
}

/// Records the batch loss. The value is read off the same tape a plain
/// forward would build.
pub fn forward_with_tape<'p>(
    model: &'p Model,
    ctx: &Context<'_>,
    batch: &Batch,
    mode: Mode,
) -> Result<(f64, Tape<'p>, Var)> {
    let mut tape = Tape::new(model.params());
    let loss = match batch {
        Batch::Link(b) => link_loss(model, &mut tape, ctx, b, mode)?,
        Batch::Node(events) => {
            let labeled: Vec<&Event> = events.iter().filter(|e| e.label.is_some()).collect();
            node_loss(model, &mut tape, ctx, &labeled, mode)?
        }
    };
    Ok((tape.scalar(loss), tape, loss))
}

pub fn batch_loss(model: &Model, ctx: &Context<'_>, batch: &Batch, mode: Mode) -> Result<f64> {
    Ok(forward_with_tape(model, ctx, batch, mode)?.0)
}

/// Gradient of the batch loss with the entering state held constant.
pub fn batch_gradients(
    model: &Model,
    ctx: &Context<'_>,
    batch: &Batch,
    mode: Mode,
) -> Result<GradientSet> {
    let (_, mut tape, loss) = forward_with_tape(model, ctx, batch, mode)?;
    tape.backward(loss)
}

#[derive(Clone, Debug)]
pub enum Selector {
    All,
    /// Every scalar of the parameters in this group (see [`Model::param_group`]).
    Group(String),
    /// Every scalar of one named parameter.
    Name(String),
    /// At most `per_tensor` evenly spaced scalars of every parameter.
    Strided {
        per_tensor: usize,
    },
}

impl Selector {
    fn indices(&self, name: &str, len: usize) -> Vec<usize> {
        match self {
            Selector::All => (0..len).collect(),
            Selector::Group(g) if Model::param_group(name) == g => (0..len).collect(),
            Selector::Name(n) if n == name => (0..len).collect(),
            Selector::Strided { per_tensor } if len > 0 => {
                let k = (*per_tensor).min(len).max(1);
                let mut v: Vec<usize> = (0..k).map(|i| i * len / k).collect();
                v.dedup();
                v
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupCheck {
    pub max_rel_error: f64,
    pub scalars: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub groups: BTreeMap<String, GroupCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with `(L(θ+ε) − L(θ−ε)) / 2ε` for every
/// selected scalar. Parameters are checked in parallel; each worker owns a
/// copy of the model.
pub fn finite_diff_check(
    model: &Model,
    ctx: &Context<'_>,
    batch: &Batch,
    mode: Mode,
    eps: f64,
    which: &Selector,
) -> Result<CheckReport> {
    let grads = batch_gradients(model, ctx, batch, mode)?;
    let work: Vec<(ParamId, String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|(id, name, t)| (id, name.to_string(), which.indices(name, t.len())))
        .filter(|w| !w.2.is_empty())
        .collect();
    let results: Vec<Result<(String, f64, usize)>> = work
        .par_iter()
        .map(|(id, name, idx)| {
            let mut m = model.clone();
            let mut worst: f64 = 0.0;
            for &i in idx {
                let orig = m.params().get(*id).data()[i];
                m.params_mut().get_mut(*id).data_mut()[i] = orig + eps;
                let up = batch_loss(&m, ctx, batch, mode)?;
                m.params_mut().get_mut(*id).data_mut()[i] = orig - eps;
                let down = batch_loss(&m, ctx, batch, mode)?;
                m.params_mut().get_mut(*id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                worst = worst.max(relative_error(grads.get(*id).data()[i], numeric));
            }
            Ok((name.clone(), worst, idx.len()))
        })
        .collect();
    let mut report = CheckReport::default();
    for r in results {
        let (name, worst, n) = r?;
        let g = report
            .groups
            .entry(Model::param_group(&name).to_string())
            .or_default();
        g.max_rel_error = g.max_rel_error.max(worst);
        g.scalars += n;
        report.max_rel_error = report.max_rel_error.max(worst);
    }
    Ok(report)
}
