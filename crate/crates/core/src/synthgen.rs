//! Seeded synthetic event streams and the scaling benchmark.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::evaluation::{NegativeSampler, Strategy};
use crate::graph::{Event, EventStream, NeighborIndex};
use crate::network::{Context, Mode, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{link_loss, Adam, LinkBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Periodic,
    Bursty,
    Chain,
    Uniform,
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(Self::Periodic),
            "bursty" => Ok(Self::Bursty),
            "chain" => Ok(Self::Chain),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::InvalidInput(format!("unknown pattern {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub pattern: Pattern,
    pub num_nodes: usize,
    pub num_events: usize,
    /// Number of recurring pairs (periodic); `0` pairs every node once.
    pub pairs: usize,
    pub period: f64,
    /// Uniform timing noise, as a fraction of the period.
    pub jitter: f64,
    /// Mean events per burst (bursty).
    pub burst_size: f64,
    pub bipartite: bool,
    pub seed: u64,
    pub node_dim: usize,
    pub edge_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::Periodic,
            num_nodes: 200,
            num_events: 5000,
            pairs: 0,
            period: 100.0,
            jitter: 0.02,
            burst_size: 8.0,
            bipartite: false,
            seed: 0,
            node_dim: 0,
            edge_dim: 0,
        }
    }
}

impl SynthSpec {
    pub fn new(pattern: Pattern, num_nodes: usize, num_events: usize, seed: u64) -> Self {
        Self {
            pattern,
            num_nodes,
            num_events,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.num_events == 0 {
            return bad("num_events must be at least 1");
        }
        if self.num_nodes < 2 && self.pattern != Pattern::Chain {
            return bad("at least two nodes are needed");
        }
        if !(self.period > 0.0) || !(0.0..0.5).contains(&self.jitter) || !(self.burst_size >= 1.0) {
            return bad("period, jitter or burst size out of range");
        }
        Ok(())
    }
}

/// Generates the stream described by `spec`.
pub fn generate(spec: &SynthSpec) -> Result<EventStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let raw = match spec.pattern {
        Pattern::Periodic => periodic(spec, &mut rng),
        Pattern::Bursty => bursty(spec, &mut rng),
        Pattern::Chain => chain(spec),
        Pattern::Uniform => uniform(spec, &mut rng),
    };
    let events = raw
        .into_iter()
        .map(|(src, dst, time)| Event {
            src,
            dst,
            time,
            edge_feat: (0..spec.edge_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            label: None,
            idx: 0,
        })
        .collect();
    let num_nodes = match spec.pattern {
        Pattern::Chain => spec.num_nodes.max(2),
        _ => spec.num_nodes,
    };
    let feat = (spec.node_dim > 0).then(|| {
        let data = (0..num_nodes * spec.node_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(num_nodes, spec.node_dim, data)
    });
    EventStream::new(events, num_nodes, feat)
}

/// Sources and destinations drawn from disjoint halves when bipartite.
fn endpoints(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let n = spec.num_nodes;
    if spec.bipartite {
        let half = n / 2;
        (rng.gen_range(0..half), rng.gen_range(half..n))
    } else {
        let u = rng.gen_range(0..n);
        let mut v = rng.gen_range(0..n - 1);
        if v >= u {
            v += 1;
        }
        (u, v)
    }
}

/// A fixed pair set; pair `p` fires at `phase_p + k·period` plus jitter.
fn periodic(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
    let n = spec.num_nodes;
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> = if spec.bipartite {
        let half = n / 2;
        let mut right: Vec<usize> = (half..n).collect();
        right.shuffle(rng);
        let mut left: Vec<usize> = (0..half).collect();
        left.shuffle(rng);
        left.into_iter().zip(right).collect()
    } else {
        nodes.chunks_exact(2).map(|c| (c[0], c[1])).collect()
    };
    if spec.pairs > 0 {
        while pairs.len() < spec.pairs {
            let (u, v) = endpoints(spec, rng);
            if !pairs.contains(&(u, v)) {
                pairs.push((u, v));
            }
        }
        pairs.truncate(spec.pairs);
    }
    let phases: Vec<f64> = pairs
        .iter()
        .map(|_| rng.gen_range(0.0..spec.period))
        .collect();
    let mut out = Vec::with_capacity(spec.num_events);
    for k in 0.. {
        for (p, &(u, v)) in pairs.iter().enumerate() {
            if out.len() == spec.num_events {
                return out;
            }
            let noise = rng.gen_range(-spec.jitter..=spec.jitter) * spec.period;
            let t = (phases[p] + k as f64 * spec.period + noise).max(0.0);
            out.push((u, v, t));
        }
    }
    unreachable!()
}

/// Bursts of one repeated pair with short exponential gaps, separated by
/// longer exponential gaps.
fn bursty(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(spec.num_events);
    let mut t = 0.0;
    let exp = |rng: &mut ChaCha8Rng, mean: f64| -mean * (1.0 - rng.gen::<f64>()).ln();
    while out.len() < spec.num_events {
        t += exp(rng, spec.period);
        let (u, v) = endpoints(spec, rng);
        let size = 1 + (exp(rng, spec.burst_size - 1.0).floor() as usize);
        let mut s = t;
        for _ in 0..size.min(spec.num_events - out.len()) {
            out.push((u, v, s));
            s += exp(rng, spec.period * 0.01);
        }
    }
    out
}

/// A time-respecting path `0 → 1 → … → n−1`, one hop per unit time; capped
/// at `num_events` hops.
fn chain(spec: &SynthSpec) -> Vec<(usize, usize, f64)> {
    let hops = (spec.num_nodes.max(2) - 1).min(spec.num_events);
    (0..hops).map(|i| (i, i + 1, (i + 1) as f64)).collect()
}

fn uniform(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
    let horizon = spec.num_events as f64;
    (0..spec.num_events)
        .map(|_| {
            let (u, v) = endpoints(spec, rng);
            (u, v, rng.gen_range(0.0..horizon))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub events: usize,
    pub nodes: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

impl ScalingRow {
    pub fn total_ms(&self) -> f64 {
        self.forward_ms + self.backward_ms
    }
}

/// Wall time of one training pass over `stream`: forward covers scoring and
/// state commits, backward covers the reverse sweep and the optimizer step.
pub fn time_pass(model: &Model, stream: &EventStream, batch_size: usize) -> Result<(f64, f64)> {
    let mut model = model.clone();
    let index = NeighborIndex::build(stream);
    let mut core = model.new_core(stream.num_nodes());
    let mut opt = Adam::new(model.params());
    let sampler = NegativeSampler::new(Strategy::Random, stream, &[], model.config().seed);
    let (mut fwd, mut bwd) = (0.0, 0.0);
    for (bi, chunk) in stream.events().chunks(batch_size.max(1)).enumerate() {
        let batch = LinkBatch::sample(&sampler, chunk);
        let start = Instant::now();
        let mut tape = Tape::new(model.params());
        let ctx = Context {
            stream,
            index: &index,
            core: &core,
        };
        let loss = link_loss(
            &model,
            &mut tape,
            &ctx,
            &batch,
            Mode::Train { seed: bi as u64 },
        )?;
        let mid = Instant::now();
        let grads = tape.backward(loss)?;
        drop(tape);
        opt.step(model.params_mut(), &grads, 1e-4)?;
        let after = Instant::now();
        model.commit_events(&mut core, stream, &index, chunk)?;
        let end = Instant::now();
        fwd += (mid - start).as_secs_f64() + (end - after).as_secs_f64();
        bwd += (after - mid).as_secs_f64();
    }
    Ok((fwd * 1e3, bwd * 1e3))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-size medians of forward and backward time over `repeats` runs, after
/// one discarded warm-up run. Streams are uniform random pairs.
pub fn scaling_suite(
    sizes: &[usize],
    nodes: usize,
    config: &ModelConfig,
    batch_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("sizes must be ascending".into()));
    }
    let model = Model::new(config.clone())?;
    let mut rows = Vec::new();
    for &events in sizes {
        let stream = generate(&SynthSpec::new(Pattern::Uniform, nodes, events, seed))?;
        time_pass(&model, &stream, batch_size)?;
        let mut f = Vec::new();
        let mut b = Vec::new();
        for _ in 0..repeats.max(1) {
            let (fw, bw) = time_pass(&model, &stream, batch_size)?;
            f.push(fw);
            b.push(bw);
        }
        rows.push(ScalingRow {
            events,
            nodes,
            forward_ms: median(f),
            backward_ms: median(b),
        });
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut s = String::from("events,nodes,forward_ms,backward_ms\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.3},{:.3}\n",
            r.events, r.nodes, r.forward_ms, r.backward_ms
        ));
    }
    s
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn power_law_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn chain_fixture() {
        let s = generate(&SynthSpec::new(Pattern::Chain, 3, 10, 0)).unwrap();
        let got: Vec<_> = s.events().iter().map(|e| (e.src, e.dst, e.time)).collect();
        assert_eq!(got, [(0, 1, 1.0), (1, 2, 2.0)]);
    }

    #[test]
    fn periodic_pairs_recur_at_the_period() {
        let spec = SynthSpec {
            pairs: 5,
            period: 1.0,
            ..SynthSpec::new(Pattern::Periodic, 20, 50, 4)
        };
        let s = generate(&spec).unwrap();
        let mut times: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for e in s.events() {
            times.entry((e.src, e.dst)).or_default().push(e.time);
        }
        assert_eq!(times.len(), 5);
        for t in times.values() {
            assert_eq!(t.len(), 10);
            for w in t.windows(2) {
                assert!((w[1] - w[0] - 1.0).abs() <= 2.0 * spec.jitter + 1e-12);
            }
        }
    }

    #[test]
    fn generators_are_seeded() {
        for pattern in [Pattern::Periodic, Pattern::Bursty, Pattern::Uniform] {
            let spec = SynthSpec {
                edge_dim: 2,
                node_dim: 3,
                ..SynthSpec::new(pattern, 30, 300, 9)
            };
            let a = generate(&spec).unwrap();
            assert_eq!(a.len(), 300);
            assert_eq!(a.events(), generate(&spec).unwrap().events());
            let other = generate(&SynthSpec {
                seed: 10,
                ..spec.clone()
            })
            .unwrap();
            assert_ne!(a.events(), other.events());
        }
    }

    #[test]
    fn bipartite_streams_keep_sides() {
        for pattern in [Pattern::Periodic, Pattern::Bursty, Pattern::Uniform] {
            let spec = SynthSpec {
                bipartite: true,
                ..SynthSpec::new(pattern, 40, 400, 1)
            };
            let s = generate(&spec).unwrap();
            assert!(s.is_bipartite());
            assert!(s.events().iter().all(|e| e.src < 20 && e.dst >= 20));
        }
    }

    #[test]
    fn exponent_fit() {
        let xs = [1.0, 10.0, 100.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.1)).collect();
        assert!((power_law_exponent(&xs, &ys) - 1.1).abs() < 1e-12);
        assert!(scaling_csv(&[]).starts_with("events,nodes,forward_ms,backward_ms"));
    }
}
