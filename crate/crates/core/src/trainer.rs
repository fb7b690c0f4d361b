//! Negative-sampled BCE training with Adam, early stopping and run history.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_term, GradientSet, Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_link, evaluate_node, splitmix, EvalOptions, NegativeSampler, Setting, Strategy,
};
use crate::graph::{Event, EventStream, NeighborIndex, NodeId, SplitPlan};
use crate::network::{Ablation, Context, Mode, Model, ModelConfig, Query};
use crate::params::ParamStore;
use crate::retentive::RetentiveCore;
use crate::tensor::Tensor;

/// `−[y ln p + (1−y) ln(1−p)]` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(p: f64, y: bool) -> f64 {
    bce_term(p, if y { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LinkPrediction,
    NodeClassification,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "link_prediction" | "link" => Ok(Self::LinkPrediction),
            "node_classification" | "node" => Ok(Self::NodeClassification),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub task: Task,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub time_dim: usize,
    pub neighbors: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            lr: 1e-4,
            batch_size: 200,
            patience: 10,
            max_epochs: 50,
            seed: 0,
            dropout: m.dropout,
            task: Task::LinkPrediction,
            layers: m.layers,
            heads: m.heads,
            dim: m.dim,
            time_dim: m.time_dim,
            neighbors: m.neighbors,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key; used by the file parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "time_dim" => self.time_dim = num(key, value)?,
            "neighbors" => self.neighbors = num(key, value)?,
            "task" => self.task = value.parse()?,
            _ => match key.strip_prefix("ablation.") {
                Some(flag) => {
                    let on: bool = num(key, value)?;
                    self.ablation.set(flag, on)?;
                }
                None => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Model hyperparameters matched to the feature widths of `stream`.
    pub fn model_config(&self, stream: &EventStream) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            time_dim: self.time_dim,
            neighbors: self.neighbors,
            dropout: self.dropout,
            seed: self.seed,
            ablation: self.ablation,
            ..ModelConfig::default()
        }
        .for_stream(stream)
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    /// One bias-corrected update. Fails without touching anything when a
    /// gradient is NaN.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter() {
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::NanGradient(params.name(id).to_string()));
            }
            if g.shape() != params.get(id).shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape for {}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// A training batch: positives plus one negative destination each.
#[derive(Clone, Debug)]
pub struct LinkBatch {
    pub events: Vec<Event>,
    pub negatives: Vec<(NodeId, NodeId)>,
}

impl LinkBatch {
    /// One negative per positive, keyed on the event index.
    pub fn sample(sampler: &NegativeSampler, events: &[Event]) -> Self {
        let empty = HashSet::new();
        let negatives = events
            .iter()
            .map(|e| sampler.sample(e, &empty, e.idx as u64))
            .collect();
        Self {
            events: events.to_vec(),
            negatives,
        }
    }
}

/// Mean BCE over `[positives; negatives]`, all scored from the pre-batch state.
pub fn link_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    ctx: &Context<'_>,
    batch: &LinkBatch,
    mode: Mode,
) -> Result<Var> {
    let b = batch.events.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut queries = Vec::with_capacity(4 * b);
    for e in &batch.events {
        queries.push(Query::before(e.src, e.time));
    }
    for e in &batch.events {
        queries.push(Query::before(e.dst, e.time));
    }
    for (e, &(nu, _)) in batch.events.iter().zip(&batch.negatives) {
        queries.push(Query::before(nu, e.time));
    }
    for (e, &(_, nv)) in batch.events.iter().zip(&batch.negatives) {
        queries.push(Query::before(nv, e.time));
    }
    let fwd = model.forward(tape, ctx, &queries, mode)?;
    let rows = |k: usize| (k * b..(k + 1) * b).collect::<Vec<_>>();
    let hu = tape.gather_rows(fwd.h, rows(0));
    let hv = tape.gather_rows(fwd.h, rows(1));
    let hnu = tape.gather_rows(fwd.h, rows(2));
    let hnv = tape.gather_rows(fwd.h, rows(3));
    let pos = model.predict_link(tape, hu, hv);
    let neg = model.predict_link(tape, hnu, hnv);
    let p = tape.concat_rows(&[pos, neg]);
    let labels = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
    let loss = tape.bce(p, labels);
    tape.check_finite()?;
    Ok(loss)
}

/// Mean BCE of `classify_node` on the sources of labeled events.
pub fn node_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    ctx: &Context<'_>,
    labeled: &[&Event],
    mode: Mode,
) -> Result<Var> {
    if labeled.is_empty() {
        return Err(Error::InvalidInput("no labeled events in batch".into()));
    }
    let queries: Vec<Query> = labeled
        .iter()
        .map(|e| Query::before(e.src, e.time))
        .collect();
    let fwd = model.forward(tape, ctx, &queries, mode)?;
    let p = model.classify_node(tape, fwd.h);
    let labels = labeled
        .iter()
        .map(|e| if e.label == Some(true) { 1.0 } else { 0.0 })
        .collect();
    let loss = tape.bce(p, labels);
    tape.check_finite()?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
}

/// Seed for anything drawn in batch `batch` of epoch `epoch`.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    splitmix(seed ^ splitmix(((epoch as u64) << 32) ^ batch as u64))
}

/// One chronological pass over the training events: score each batch from
/// the state left by earlier batches, take an Adam step, then commit.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut Adam,
    stream: &EventStream,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let train: Vec<Event> = plan.train_events(stream).into_iter().cloned().collect();
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let index = if plan.new_node_set.is_empty() {
        NeighborIndex::build(stream)
    } else {
        NeighborIndex::build_filtered(stream, |e| !plan.is_new(e.src) && !plan.is_new(e.dst))
    };
    let mut core = model.new_core(stream.num_nodes());
    train_on(model, opt, &mut core, stream, &index, &train, cfg, epoch)
}

/// [`train_epoch`] over an explicit event list and a caller-owned core.
#[allow(clippy::too_many_arguments)]
pub fn train_on(
    model: &mut Model,
    opt: &mut Adam,
    core: &mut RetentiveCore,
    stream: &EventStream,
    index: &NeighborIndex,
    events: &[Event],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    core.reset();
    let sampler = NegativeSampler::new(
        Strategy::Random,
        stream,
        &[],
        batch_seed(cfg.seed, epoch, usize::MAX),
    );
    let mut total = 0.0;
    let mut batches = 0;
    for (bi, chunk) in events.chunks(cfg.batch_size).enumerate() {
        let seed = batch_seed(cfg.seed, epoch, bi);
        let grads = {
            let ctx = Context {
                stream,
                index,
                core,
            };
            let mut tape = Tape::new(model.params());
            let loss = match cfg.task {
                Task::LinkPrediction => {
                    let batch = LinkBatch::sample(&sampler, chunk);
                    Some(link_loss(
                        model,
                        &mut tape,
                        &ctx,
                        &batch,
                        Mode::Train { seed },
                    )?)
                }
                Task::NodeClassification => {
                    let labeled: Vec<&Event> = chunk.iter().filter(|e| e.label.is_some()).collect();
                    if labeled.is_empty() {
                        None
                    } else {
                        Some(node_loss(
                            model,
                            &mut tape,
                            &ctx,
                            &labeled,
                            Mode::Train { seed },
                        )?)
                    }
                }
            };
            match loss {
                Some(l) => {
                    total += tape.scalar(l);
                    batches += 1;
                    Some(tape.backward(l)?)
                }
                None => None,
            }
        };
        if let Some(g) = grads {
            opt.step(model.params_mut(), &g, cfg.lr)?;
        }
        model.commit_events(core, stream, index, chunk)?;
    }
    if batches == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(EpochStats {
        mean_loss: total / batches as f64,
        batches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ap: f64,
    pub val_auc: f64,
    pub wall_ms: u64,
}

pub fn history_jsonl(records: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, metric: f64) -> Verdict {
        if metric > self.best {
            self.best = metric;
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best: Model,
    /// 1-based epoch of `best`; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Validation AP and AUC on the transductive validation slice.
pub fn validate(
    model: &Model,
    stream: &EventStream,
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let r = match cfg.task {
        Task::LinkPrediction => {
            let opts = EvalOptions {
                setting: Setting::Transductive,
                strategy: Strategy::Random,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
            };
            evaluate_link(model, stream, plan, plan.val_range(), &opts)?
        }
        Task::NodeClassification => evaluate_node(
            model,
            stream,
            plan,
            plan.val_range(),
            cfg.batch_size,
            cfg.seed,
        )?,
    };
    Ok((r.ap, r.roc_auc))
}

pub fn fit(
    stream: &EventStream,
    plan: &SplitPlan,
    model: Model,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    fit_observed(stream, plan, model, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_observed(
    stream: &EventStream,
    plan: &SplitPlan,
    mut model: Model,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    let mut opt = Adam::new(model.params());
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let stats = train_epoch(&mut model, &mut opt, stream, plan, cfg, epoch)?;
        let (val_ap, val_auc) = validate(&model, stream, plan, cfg)?;
        let rec = EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            val_ap,
            val_auc,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        observe(&rec);
        history.push(rec);
        let metric = match cfg.task {
            Task::LinkPrediction => val_ap,
            Task::NodeClassification => val_auc,
        };
        match stopper.update(metric) {
            Verdict::Improved => {
                best = model.clone();
                best_epoch = Some(epoch);
            }
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    Ok(FitResult {
        best,
        best_epoch,
        history,
    })
}
