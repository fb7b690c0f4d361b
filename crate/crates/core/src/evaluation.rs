//! Ranking metrics, negative sampling and chronological evaluation sweeps.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{Event, EventStream, NeighborIndex, NodeId, SplitMode, SplitPlan};
use crate::network::{Context, Mode, Model, Query};

/// Precision-recall area over the score-descending ranking; ties keep input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Mann–Whitney ROC-AUC: ordered positive/negative pairs plus half the ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let p = labels.iter().filter(|&&y| y).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::DegenerateClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Historical,
    Inductive,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnd" | "random" => Ok(Self::Random),
            "hist" | "historical" => Ok(Self::Historical),
            "ind" | "inductive" => Ok(Self::Inductive),
            _ => Err(Error::InvalidInput(format!(
                "unknown negative sampling strategy {s:?}"
            ))),
        }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent generator for one `(seed, position)` pair.
pub fn position_rng(seed: u64, position: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(position)))
}

/// Chooses one negative pair per positive. History grows through `observe`.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    strategy: Strategy,
    seed: u64,
    num_nodes: usize,
    /// Destination side for bipartite streams, every node otherwise.
    candidates: Vec<NodeId>,
    train_pairs: HashSet<(NodeId, NodeId)>,
    seen: HashSet<(NodeId, NodeId)>,
    seen_order: Vec<(NodeId, NodeId)>,
    by_source: HashMap<NodeId, Vec<NodeId>>,
    /// Pairs first seen after training (inductive candidates).
    fresh: Vec<(NodeId, NodeId)>,
}

impl NegativeSampler {
    /// `train` are the training events; they seed the history.
    pub fn new(strategy: Strategy, stream: &EventStream, train: &[Event], seed: u64) -> Self {
        let candidates = if stream.is_bipartite() {
            stream.destinations()
        } else {
            (0..stream.num_nodes()).collect()
        };
        let mut s = Self {
            strategy,
            seed,
            num_nodes: stream.num_nodes(),
            candidates,
            train_pairs: train.iter().map(|e| (e.src, e.dst)).collect(),
            seen: HashSet::new(),
            seen_order: Vec::new(),
            by_source: HashMap::new(),
            fresh: Vec::new(),
        };
        for e in train {
            s.observe(e);
        }
        s
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Adds `e` to the history once it has been scored.
    pub fn observe(&mut self, e: &Event) {
        let pair = (e.src, e.dst);
        if self.seen.insert(pair) {
            self.seen_order.push(pair);
            self.by_source.entry(e.src).or_default().push(e.dst);
            if !self.train_pairs.contains(&pair) {
                self.fresh.push(pair);
            }
        }
    }

    /// A negative `(u', v⁻)` for `positive`, never a pair in `current`
    /// (the positives sharing its timestamp) and never the positive itself.
    pub fn sample(
        &self,
        positive: &Event,
        current: &HashSet<(NodeId, NodeId)>,
        position: u64,
    ) -> (NodeId, NodeId) {
        let mut rng = position_rng(self.seed, position);
        let u = positive.src;
        let ok = |p: &(NodeId, NodeId)| *p != (positive.src, positive.dst) && !current.contains(p);
        match self.strategy {
            Strategy::Random => {}
            Strategy::Historical => {
                if let Some(dsts) = self.by_source.get(&u) {
                    let pool: Vec<NodeId> = dsts.iter().copied().filter(|&w| ok(&(u, w))).collect();
                    if !pool.is_empty() {
                        return (u, pool[rng.gen_range(0..pool.len())]);
                    }
                }
                if let Some(p) = pick(&self.seen_order, &ok, &mut rng) {
                    return p;
                }
            }
            Strategy::Inductive => {
                if let Some(p) = pick(&self.fresh, &ok, &mut rng) {
                    return p;
                }
            }
        }
        (u, self.random_destination(positive.dst, &mut rng))
    }

    fn random_destination(&self, avoid: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
        let pool: &[NodeId] = &self.candidates;
        let usable = pool.iter().filter(|&&n| n != avoid).count();
        if usable == 0 {
            // Only the positive's own destination exists on this side.
            let others = self.num_nodes.saturating_sub(1);
            if others == 0 {
                return avoid;
            }
            let k = rng.gen_range(0..others);
            return if k >= avoid { k + 1 } else { k };
        }
        let k = rng.gen_range(0..usable);
        pool.iter()
            .copied()
            .filter(|&n| n != avoid)
            .nth(k)
            .expect("k < usable")
    }
}

fn pick(
    pairs: &[(NodeId, NodeId)],
    ok: &dyn Fn(&(NodeId, NodeId)) -> bool,
    rng: &mut ChaCha8Rng,
) -> Option<(NodeId, NodeId)> {
    if pairs.is_empty() {
        return None;
    }
    // Rejection first; fall back to an exact scan when most pairs are excluded.
    for _ in 0..8 {
        let p = pairs[rng.gen_range(0..pairs.len())];
        if ok(&p) {
            return Some(p);
        }
    }
    let pool: Vec<_> = pairs.iter().copied().filter(|p| ok(p)).collect();
    (!pool.is_empty()).then(|| pool[rng.gen_range(0..pool.len())])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Transductive,
    Inductive,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trans" | "transductive" => Ok(Self::Transductive),
            "ind" | "inductive" => Ok(Self::Inductive),
            _ => Err(Error::InvalidInput(format!(
                "unknown evaluation setting {s:?}"
            ))),
        }
    }
}

impl From<SplitMode> for Setting {
    fn from(m: SplitMode) -> Self {
        match m {
            SplitMode::Transductive => Self::Transductive,
            SplitMode::Inductive => Self::Inductive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub setting: Setting,
    pub strategy: Option<Strategy>,
    pub ap: f64,
    pub roc_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auprc: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Hex SHA-256 of the model configuration.
pub fn config_hash(model: &Model) -> String {
    let json = serde_json::to_string(model.config()).expect("config serializes");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub setting: Setting,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            setting: Setting::Transductive,
            strategy: Strategy::Random,
            batch_size: 200,
            seed: 0,
        }
    }
}

/// Rebuilds states from scratch by committing `events` in batches.
pub fn replay(
    model: &Model,
    core: &mut crate::retentive::RetentiveCore,
    stream: &EventStream,
    index: &NeighborIndex,
    events: &[Event],
    batch_size: usize,
) -> Result<()> {
    core.reset();
    for batch in events.chunks(batch_size.max(1)) {
        model.commit_events(core, stream, index, batch)?;
    }
    Ok(())
}

/// Scores `(u, v)` pairs at times `t` from the current states.
pub fn score_pairs(
    model: &Model,
    ctx: &Context<'_>,
    pairs: &[(NodeId, NodeId, f64)],
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new(model.params());
    let mut queries: Vec<Query> = pairs.iter().map(|&(u, _, t)| Query::before(u, t)).collect();
    queries.extend(pairs.iter().map(|&(_, v, t)| Query::before(v, t)));
    let fwd = model.forward(&mut tape, ctx, &queries, Mode::Eval)?;
    let b = pairs.len();
    let hu = tape.gather_rows(fwd.h, (0..b).collect());
    let hv = tape.gather_rows(fwd.h, (b..2 * b).collect());
    let p = model.predict_link(&mut tape, hu, hv);
    tape.check_finite()?;
    Ok(tape.value(p).data().to_vec())
}

/// Chronological link-prediction sweep over `range`: every positive and its
/// negative are scored from states built strictly before the batch, then the
/// batch is committed.
pub fn evaluate_link(
    model: &Model,
    stream: &EventStream,
    plan: &SplitPlan,
    range: Range<usize>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let index = NeighborIndex::build(stream);
    let mut core = model.new_core(stream.num_nodes());
    let events = stream.events();
    replay(
        model,
        &mut core,
        stream,
        &index,
        &events[..range.start],
        opts.batch_size,
    )?;

    let train: Vec<Event> = plan.train_events(stream).into_iter().cloned().collect();
    let mut sampler = NegativeSampler::new(opts.strategy, stream, &train, opts.seed);
    let restrict = opts.setting == Setting::Inductive;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for batch in events[range].chunks(opts.batch_size.max(1)) {
        let mut current: HashMap<u64, HashSet<(NodeId, NodeId)>> = HashMap::new();
        for e in batch {
            current
                .entry(e.time.to_bits())
                .or_default()
                .insert((e.src, e.dst));
        }
        let mut pairs = Vec::new();
        for e in batch {
            if restrict && !(plan.is_new(e.src) || plan.is_new(e.dst)) {
                continue;
            }
            let (nu, nv) = sampler.sample(e, &current[&e.time.to_bits()], e.idx as u64);
            pairs.push((e.src, e.dst, e.time));
            pairs.push((nu, nv, e.time));
        }
        let ctx = Context {
            stream,
            index: &index,
            core: &core,
        };
        let s = score_pairs(model, &ctx, &pairs)?;
        for (k, v) in s.into_iter().enumerate() {
            scores.push(v);
            labels.push(k % 2 == 0);
        }
        for e in batch {
            sampler.observe(e);
        }
        model.commit_events(&mut core, stream, &index, batch)?;
    }
    if scores.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(MetricReport {
        setting: opts.setting,
        strategy: Some(opts.strategy),
        ap: average_precision(&scores, &labels)?,
        roc_auc: roc_auc(&scores, &labels)?,
        auprc: None,
        n: scores.len(),
        seed: opts.seed,
        config_hash: config_hash(model),
    })
}

/// Class-0 probabilities for the source of every labeled event in `range`,
/// scored before the event's batch is committed.
pub fn node_scores(
    model: &Model,
    stream: &EventStream,
    range: Range<usize>,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let index = NeighborIndex::build(stream);
    let mut core = model.new_core(stream.num_nodes());
    let events = stream.events();
    replay(
        model,
        &mut core,
        stream,
        &index,
        &events[..range.start],
        batch_size,
    )?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for batch in events[range].chunks(batch_size.max(1)) {
        let labeled: Vec<&Event> = batch.iter().filter(|e| e.label.is_some()).collect();
        if !labeled.is_empty() {
            let ctx = Context {
                stream,
                index: &index,
                core: &core,
            };
            let mut tape = Tape::new(model.params());
            let queries: Vec<Query> = labeled
                .iter()
                .map(|e| Query::before(e.src, e.time))
                .collect();
            let fwd = model.forward(&mut tape, &ctx, &queries, Mode::Eval)?;
            let p = model.classify_node(&mut tape, fwd.h);
            let pv = tape.value(p);
            for (r, e) in labeled.iter().enumerate() {
                scores.push(pv.get(r, 0));
                labels.push(e.label == Some(true));
            }
        }
        model.commit_events(&mut core, stream, &index, batch)?;
    }
    Ok((scores, labels))
}

pub fn evaluate_node(
    model: &Model,
    stream: &EventStream,
    plan: &SplitPlan,
    range: Range<usize>,
    batch_size: usize,
    seed: u64,
) -> Result<MetricReport> {
    let (scores, labels) = node_scores(model, stream, range, batch_size)?;
    if scores.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let auc = roc_auc(&scores, &labels)?;
    let ap = average_precision(&scores, &labels)?;
    Ok(MetricReport {
        setting: plan.mode.into(),
        strategy: None,
        ap,
        roc_auc: auc,
        auprc: Some(ap),
        n: scores.len(),
        seed,
        config_hash: config_hash(model),
    })
}
