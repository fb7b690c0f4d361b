//! Per-node retentive states: gated fusion of short-term injections and
//! layer-wise propagation along current events.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_similarity, pow_alpha};
use crate::error::{Error, Result};
use crate::graph::{Event, NodeId};
use crate::tensor::{sigmoid, softplus, softplus_inverse, Tensor};

/// Unconstrained decay and gate parameters of one (layer, head).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub lambda_raw: f64,
    pub alpha_raw: f64,
    pub gamma_raw: f64,
    pub delta_raw: f64,
}

impl Default for DecayParams {
    fn default() -> Self {
        Self {
            lambda_raw: softplus_inverse(1.0),
            alpha_raw: 0.0,
            gamma_raw: 0.0,
            delta_raw: softplus_inverse(1.0),
        }
    }
}

impl DecayParams {
    pub fn lambda(&self) -> f64 {
        softplus(self.lambda_raw)
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_raw)
    }

    pub fn gamma(&self) -> f64 {
        sigmoid(self.gamma_raw)
    }

    pub fn delta(&self) -> f64 {
        softplus(self.delta_raw)
    }
}

/// `exp(-λ · log(1+Δt)^α)`
pub fn temporal_factor(lambda: f64, alpha: f64, dt: f64) -> f64 {
    (-lambda * pow_alpha(dt.ln_1p(), alpha)).exp()
}

/// `σ(cos(q, k)) · exp(-λ · log(1+Δt)^α)`; a zero-norm vector has similarity 0.
pub fn decay_weight(params: &DecayParams, q: &[f64], k: &[f64], dt: f64) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::Dimension(format!(
            "query length {} vs key length {}",
            q.len(),
            k.len()
        )));
    }
    if q.iter().chain(k).any(|v| v.is_nan()) || dt.is_nan() {
        return Err(Error::InvalidInput("NaN in decay weight input".into()));
    }
    if dt < 0.0 {
        return Err(Error::InvalidInput(format!("negative elapsed time {dt}")));
    }
    Ok(sigmoid(cosine_similarity(q, k)) * temporal_factor(params.lambda(), params.alpha(), dt))
}

/// Propagation attenuation at depth `level`: `exp(-level · δ · log(1+Δt))`.
pub fn psi(level: usize, delta: f64, dt: f64) -> f64 {
    (-(level as f64) * delta * dt.ln_1p()).exp()
}

/// `w / max(Σ|w|, 1)`
pub fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let denom = w.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    w.iter().map(|v| v / denom).collect()
}

/// `Σ_e ω̃_e · k_eᵀ v_e` over the rows of `keys` and `values`.
pub fn short_term_injection(omega: &[f64], keys: &Tensor, values: &Tensor) -> Result<Tensor> {
    if keys.rows() != omega.len() || values.rows() != omega.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} keys and {} values",
            omega.len(),
            keys.rows(),
            values.rows()
        )));
    }
    let w = normalize_weights(omega);
    Ok(weighted_outer_sum(&w, keys, values))
}

/// `Σ_e k_eᵀ v_e` with unit weights.
pub fn flat_aggregation(keys: &Tensor, values: &Tensor) -> Result<Tensor> {
    if keys.rows() != values.rows() {
        return Err(Error::Dimension(format!(
            "{} keys vs {} values",
            keys.rows(),
            values.rows()
        )));
    }
    Ok(weighted_outer_sum(&vec![1.0; keys.rows()], keys, values))
}

fn weighted_outer_sum(w: &[f64], keys: &Tensor, values: &Tensor) -> Tensor {
    let (dk, dv) = (keys.cols(), values.cols());
    let mut out = Tensor::zeros(dk, dv);
    for (e, &we) in w.iter().enumerate() {
        let (k, v) = (keys.row(e), values.row(e));
        for (a, &ka) in k.iter().enumerate() {
            let s = we * ka;
            for (o, &vb) in out.row_mut(a).iter_mut().zip(v) {
                *o += s * vb;
            }
        }
    }
    out
}

/// `γ·S_prev + (1-γ)·Δ̃`
pub fn gated_update(prev: &Tensor, injection: &Tensor, gamma: f64) -> Tensor {
    let mut out = prev.scaled(gamma);
    out.axpy(1.0 - gamma, injection);
    out
}

/// `q S / √d`
pub fn readout(state: &Tensor, q: &[f64], d: usize) -> Result<Vec<f64>> {
    if state.rows() != q.len() {
        return Err(Error::Dimension(format!(
            "query length {} for a {:?} state",
            q.len(),
            state.shape()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; state.cols()];
    for (r, &qr) in q.iter().enumerate() {
        for (o, &s) in out.iter_mut().zip(state.row(r)) {
            *o += qr * s;
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// Rescales `data` in place so its Frobenius norm is at most `max_norm`.
pub fn clip_frobenius(data: &mut [f64], max_norm: f64) {
    let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Closed-form state after a node's own update sequence: the `r`-th of `n`
/// injections is weighted by `γ^(n-r) · (1-γ)`.
pub fn closed_form_state(history: &[Tensor], gamma: f64) -> Result<Tensor> {
    const MAX_TERMS: usize = 50;
    if history.len() > MAX_TERMS {
        return Err(Error::GuardExceeded(format!(
            "{} terms exceeds {MAX_TERMS}",
            history.len()
        )));
    }
    let Some(first) = history.first() else {
        return Err(Error::InvalidInput(
            "empty history has no shape; the state is zero".into(),
        ));
    };
    let n = history.len();
    let mut out = Tensor::zeros(first.rows(), first.cols());
    for (r, inj) in history.iter().enumerate() {
        let retained: f64 = (r + 1..n).map(|_| gamma).product();
        out.axpy(retained * (1.0 - gamma), inj);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub steps: usize,
    pub max_ratio: f64,
}

/// Checks `‖S_n‖_F ≤ (1-γⁿ)·M` for every `(n, ‖S_n‖_F)` sample. A relative
/// slack of 1e-12 absorbs rounding when the bound is met with equality.
pub fn check_bound(samples: &[(u64, f64)], gamma: f64, m: f64) -> Result<BoundReport> {
    let mut max_ratio = 0.0f64;
    for (step, &(n, norm)) in samples.iter().enumerate() {
        let bound = (1.0 - gamma.powi(n.min(i32::MAX as u64) as i32)) * m;
        if norm > bound * (1.0 + 1e-12) {
            return Err(Error::BoundViolation { step, norm, bound });
        }
        if bound > 0.0 {
            max_ratio = max_ratio.max(norm / bound);
        }
    }
    Ok(BoundReport {
        steps: samples.len(),
        max_ratio,
    })
}

/// State-fusion coefficients `S ← a·S + b·Δ̃`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gate {
    /// `a = γ`, `b = 1-γ` from the per-(layer, head) gates.
    Learned,
    Fixed {
        a: f64,
        b: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreOptions {
    pub gate: Gate,
    pub propagate: bool,
    pub normalize_psi: bool,
    /// Frobenius clip applied to every injection before fusion.
    pub clip: Option<f64>,
}

impl Default for CoreOptions {
    fn default() -> Self {
        Self {
            gate: Gate::Learned,
            propagate: true,
            normalize_psi: true,
            clip: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoreShape {
    pub num_nodes: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
}

impl CoreShape {
    pub fn mat_len(&self) -> usize {
        self.d_h * self.d_h
    }

    /// Values per node: every (layer, head) matrix back to back.
    pub fn block_len(&self) -> usize {
        self.layers * self.heads * self.mat_len()
    }

    pub fn offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.heads + head) * self.mat_len()
    }
}

/// Gates and propagation rates indexed `layer * heads + head`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Coefficients {
    pub fn uniform(shape: &CoreShape, gamma: f64, delta: f64) -> Self {
        let n = shape.layers * shape.heads;
        Self {
            gamma: vec![gamma; n],
            delta: vec![delta; n],
        }
    }

    pub fn from_params(params: &[DecayParams]) -> Self {
        Self {
            gamma: params.iter().map(DecayParams::gamma).collect(),
            delta: params.iter().map(DecayParams::delta).collect(),
        }
    }
}

/// Pre-timestamp copies of the states that act as propagation sources.
struct Snapshot {
    blocks: BTreeMap<NodeId, (Vec<f64>, f64)>,
}

/// Single-writer state machine holding every node's matrices. Nodes that
/// were never updated hold implicit zero states.
#[derive(Clone, Debug)]
pub struct RetentiveCore {
    shape: CoreShape,
    options: CoreOptions,
    blocks: Vec<Option<Vec<f64>>>,
    last_update: Vec<Option<f64>>,
    updates: Vec<u64>,
    clock: Option<f64>,
    zeros: Vec<f64>,
}

impl RetentiveCore {
    pub fn new(shape: CoreShape, options: CoreOptions) -> Self {
        Self {
            shape,
            options,
            blocks: vec![None; shape.num_nodes],
            last_update: vec![None; shape.num_nodes],
            updates: vec![0; shape.num_nodes],
            clock: None,
            zeros: vec![0.0; shape.mat_len()],
        }
    }

    pub fn shape(&self) -> &CoreShape {
        &self.shape
    }

    pub fn options(&self) -> &CoreOptions {
        &self.options
    }

    pub fn reset(&mut self) {
        self.blocks.iter_mut().for_each(|b| *b = None);
        self.last_update.iter_mut().for_each(|t| *t = None);
        self.updates.iter_mut().for_each(|n| *n = 0);
        self.clock = None;
    }

    pub fn clock(&self) -> Option<f64> {
        self.clock
    }

    /// Row-major `d_h × d_h` state of `(node, layer, head)`.
    pub fn state(&self, node: NodeId, layer: usize, head: usize) -> &[f64] {
        match &self.blocks[node] {
            Some(b) => {
                let o = self.shape.offset(layer, head);
                &b[o..o + self.shape.mat_len()]
            }
            None => &self.zeros,
        }
    }

    pub fn state_tensor(&self, node: NodeId, layer: usize, head: usize) -> Tensor {
        Tensor::from_vec(
            self.shape.d_h,
            self.shape.d_h,
            self.state(node, layer, head).to_vec(),
        )
    }

    pub fn last_update(&self, node: NodeId) -> Option<f64> {
        self.last_update[node]
    }

    /// How many times `node` has been fused (its own timeline length).
    pub fn updates(&self, node: NodeId) -> u64 {
        self.updates[node]
    }

    /// Fuses `injections` (one full block per node) at time `t`, then
    /// propagates from depth `K` down to 2 along `events`, reading source
    /// states as they were before this call.
    ///
    /// A timestamp split across two calls is accepted; the second call sees
    /// the first call's states with zero elapsed time.
    pub fn commit(
        &mut self,
        t: f64,
        events: &[Event],
        injections: &[(NodeId, Vec<f64>)],
        coeffs: &Coefficients,
    ) -> Result<()> {
        if let Some(last) = self.clock {
            if t < last {
                return Err(Error::OutOfOrder { last, got: t });
            }
        }
        let lh = self.shape.layers * self.shape.heads;
        if coeffs.gamma.len() != lh || coeffs.delta.len() != lh {
            return Err(Error::Dimension(format!(
                "coefficients for {lh} (layer, head) pairs expected"
            )));
        }
        for e in events {
            if e.time != t {
                return Err(Error::InvalidInput(format!(
                    "event at {} committed at {t}",
                    e.time
                )));
            }
        }
        let snapshot =
            (self.options.propagate && self.shape.layers > 1).then(|| self.snapshot(events));

        for (node, block) in injections {
            self.fuse(*node, block, coeffs)?;
        }
        if let Some(snapshot) = snapshot {
            for level in (1..self.shape.layers).rev() {
                self.topo_propagate(level, t, events, &snapshot, coeffs);
            }
        }
        for (node, _) in injections {
            self.last_update[*node] = Some(t);
            self.updates[*node] += 1;
        }
        self.clock = Some(t);
        Ok(())
    }

    fn snapshot(&self, events: &[Event]) -> Snapshot {
        let mut blocks = BTreeMap::new();
        for e in events {
            for n in [e.src, e.dst] {
                if let (Some(b), Some(t)) = (&self.blocks[n], self.last_update[n]) {
                    blocks.entry(n).or_insert_with(|| (b.clone(), t));
                }
            }
        }
        Snapshot { blocks }
    }

    fn block_mut(&mut self, node: NodeId) -> &mut Vec<f64> {
        let len = self.shape.block_len();
        self.blocks[node].get_or_insert_with(|| vec![0.0; len])
    }

    fn fuse(&mut self, node: NodeId, injection: &[f64], coeffs: &Coefficients) -> Result<()> {
        let shape = self.shape;
        if injection.len() != shape.block_len() {
            return Err(Error::Dimension(format!(
                "injection of length {} for block length {}",
                injection.len(),
                shape.block_len()
            )));
        }
        let (gate, clip) = (self.options.gate, self.options.clip);
        let block = self.block_mut(node);
        let ml = shape.mat_len();
        for lh in 0..shape.layers * shape.heads {
            let (a, b) = match gate {
                Gate::Learned => (coeffs.gamma[lh], 1.0 - coeffs.gamma[lh]),
                Gate::Fixed { a, b } => (a, b),
            };
            let range = lh * ml..(lh + 1) * ml;
            let mut inj = injection[range.clone()].to_vec();
            if let Some(m) = clip {
                clip_frobenius(&mut inj, m);
            }
            for (s, d) in block[range].iter_mut().zip(&inj) {
                *s = a * *s + b * d;
            }
        }
        Ok(())
    }

    /// `S^{j,level} += Σ ψ̃ S^{i,level-1}` over each event's counterparty
    /// `i` (both directions; self-loops once). Sources without history hold
    /// zero state and are left out of the normalizer.
    fn topo_propagate(
        &mut self,
        level: usize,
        t: f64,
        events: &[Event],
        snap: &Snapshot,
        coeffs: &Coefficients,
    ) {
        let shape = self.shape;
        let ml = shape.mat_len();
        let mut incoming: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for e in events {
            incoming.entry(e.dst).or_default().push(e.src);
            if e.src != e.dst {
                incoming.entry(e.src).or_default().push(e.dst);
            }
        }
        for (target, sources) in incoming {
            let live: Vec<&(Vec<f64>, f64)> =
                sources.iter().filter_map(|s| snap.blocks.get(s)).collect();
            if live.is_empty() {
                continue;
            }
            for head in 0..shape.heads {
                let lh = level * shape.heads + head;
                let mut w: Vec<f64> = live
                    .iter()
                    .map(|(_, tu)| psi(level + 1, coeffs.delta[lh], t - tu))
                    .collect();
                if self.options.normalize_psi {
                    let denom = w.iter().sum::<f64>().max(1.0);
                    w.iter_mut().for_each(|v| *v /= denom);
                }
                let src_off = shape.offset(level - 1, head);
                let dst_off = shape.offset(level, head);
                let block = self.block_mut(target);
                for ((src, _), &wi) in live.iter().zip(&w) {
                    for (d, s) in block[dst_off..dst_off + ml]
                        .iter_mut()
                        .zip(&src[src_off..src_off + ml])
                    {
                        *d += wi * s;
                    }
                }
            }
        }
    }

    /// `node,layer,head,row,col,value` for every nonzero-history state.
    pub fn export_csv(&self) -> String {
        let mut out = String::from("node,layer,head,row,col,value\n");
        for (node, block) in self.blocks.iter().enumerate() {
            let Some(block) = block else { continue };
            for layer in 0..self.shape.layers {
                for head in 0..self.shape.heads {
                    let o = self.shape.offset(layer, head);
                    for (k, v) in block[o..o + self.shape.mat_len()].iter().enumerate() {
                        let (r, c) = (k / self.shape.d_h, k % self.shape.d_h);
                        let _ = writeln!(out, "{node},{layer},{head},{r},{c},{v}");
                    }
                }
            }
        }
        out
    }
}

/// Long-format CSV of the decay curves of every `(layer, head)`:
/// `retention` is `γ^m` over update steps, `temporal` the time factor over
/// `dt_grid`, and `psi` the propagation factor per level over `dt_grid`.
/// `params` is indexed `layer * heads + head`.
pub fn decay_curves_csv(
    params: &[DecayParams],
    heads: usize,
    max_steps: usize,
    dt_grid: &[f64],
    levels: usize,
) -> String {
    let mut out = String::from("layer,head,gamma,lambda,alpha,delta,curve,level,x,value\n");
    for (i, p) in params.iter().enumerate() {
        let (l, h) = (i / heads, i % heads);
        let (g, lam, a, d) = (p.gamma(), p.lambda(), p.alpha(), p.delta());
        let mut row = |curve: &str, level: usize, x: f64, v: f64| {
            out.push_str(&format!(
                "{l},{h},{g},{lam},{a},{d},{curve},{level},{x},{v}\n"
            ));
        };
        for m in 0..=max_steps {
            row("retention", 0, m as f64, g.powi(m as i32));
        }
        for &dt in dt_grid {
            row("temporal", 0, dt, temporal_factor(lam, a, dt));
        }
        for level in 1..=levels {
            for &dt in dt_grid {
                row("psi", level, dt, psi(level, d, dt));
            }
        }
    }
    out
}
