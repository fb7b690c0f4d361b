//! The layered model: input projection, time/edge augmentation, multi-head
//! retentive readouts, layer norm, feed-forward refinement and task heads.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Cutoff, Event, EventStream, NeighborIndex, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::retentive::{Coefficients, CoreOptions, CoreShape, DecayParams, Gate, RetentiveCore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Runtime switches for the four ablated variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_decay: bool,
    pub no_diffusion: bool,
    pub no_state: bool,
    pub no_block: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["no_decay", "no_diffusion", "no_state", "no_block"];

    pub fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        match flag.replace('-', "_").as_str() {
            "no_decay" => self.no_decay = on,
            "no_diffusion" => self.no_diffusion = on,
            "no_state" => self.no_state = on,
            "no_block" => self.no_block = on,
            _ => return Err(Error::UnknownFlag(flag.to_string())),
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::FLAGS
            .iter()
            .zip([
                self.no_decay,
                self.no_diffusion,
                self.no_state,
                self.no_block,
            ])
            .filter(|(_, v)| *v)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

/// Builds a variant from flag names such as `no_decay` or `no-state`.
pub fn ablation_config(flags: &[&str]) -> Result<Ablation> {
    let mut a = Ablation::default();
    for f in flags {
        a.set(f, true)?;
    }
    Ok(a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub neighbors: usize,
    pub dropout: f64,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Frobenius clip on injections before fusion.
    pub clip: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 2,
            layers: 2,
            time_dim: 16,
            neighbors: 20,
            dropout: 0.1,
            node_dim: 0,
            edge_dim: 0,
            classes: 1,
            seed: 0,
            ablation: Ablation::default(),
            clip: None,
        }
    }
}

impl ModelConfig {
    pub fn d_h(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    /// Shared width of padded edge features and time encodings.
    pub fn edge_width(&self) -> usize {
        self.edge_dim.max(self.time_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.time_dim == 0 {
            return bad("dim, heads, layers and time_dim must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.neighbors == 0 {
            return bad("neighbors must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.classes == 0 {
            return bad("classes must be at least 1".into());
        }
        Ok(())
    }

    /// Matches the feature widths of `stream`.
    pub fn for_stream(mut self, stream: &EventStream) -> Self {
        let (dx, m) = stream.feature_dims();
        self.node_dim = dx;
        self.edge_dim = m;
        self
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    w2: ParamId,
    lambda: Vec<ParamId>,
    alpha: Vec<ParamId>,
    gamma: Vec<ParamId>,
    delta: Vec<ParamId>,
}

#[derive(Clone, Debug)]
struct Ids {
    w_in: Option<ParamId>,
    b_in: ParamId,
    w_te: ParamId,
    w_e: ParamId,
    layers: Vec<LayerIds>,
    link_w1: ParamId,
    link_b1: ParamId,
    link_w2: ParamId,
    link_b2: ParamId,
    w_cls: ParamId,
}

/// A query for the embedding of `node` given the events visible under `cutoff`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub node: NodeId,
    pub cutoff: Cutoff,
}

impl Query {
    pub fn before(node: NodeId, t: f64) -> Self {
        Self {
            node,
            cutoff: Cutoff::Before(t),
        }
    }

    pub fn through(node: NodeId, t: f64) -> Self {
        Self {
            node,
            cutoff: Cutoff::Through(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, masks drawn from this seed.
    Train {
        seed: u64,
    },
    Eval,
}

/// Everything a forward pass reads besides the parameters.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub stream: &'a EventStream,
    pub index: &'a NeighborIndex,
    pub core: &'a RetentiveCore,
}

struct LayerTrace {
    keys: Var,
    values: Var,
    /// Normalized weights per head; `None` for the flat variant.
    omega: Vec<Option<Var>>,
}

pub struct Forward {
    /// `B × d` final residual stream.
    pub h: Var,
    offsets: Vec<usize>,
    /// Event time of every neighbor row.
    row_times: Vec<f64>,
    query_times: Vec<f64>,
    layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
    )
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (d, dt, w) = (config.dim, config.time_dim, config.edge_width());
        let w_in =
            (config.node_dim > 0).then(|| p.add("input.w", xavier(&mut rng, config.node_dim, d)));
        let b_in = p.add("input.b", xavier(&mut rng, 1, d));
        let freqs = (0..dt)
            .map(|i| 10f64.powf(-2.0 * i as f64 / dt as f64))
            .collect();
        let w_te = p.add("time.w", Tensor::row_vector(freqs));
        let w_e = p.add("edge.w", xavier(&mut rng, w, d));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let wq = p.add(name("wq"), xavier(&mut rng, d, d));
            let wk = p.add(name("wk"), xavier(&mut rng, d, d));
            let wv = p.add(name("wv"), xavier(&mut rng, d, d));
            let ln1_g = p.add(name("ln1.gain"), Tensor::filled(1, d, 1.0));
            let ln1_b = p.add(name("ln1.bias"), Tensor::zeros(1, d));
            let ln2_g = p.add(name("ln2.gain"), Tensor::filled(1, d, 1.0));
            let ln2_b = p.add(name("ln2.bias"), Tensor::zeros(1, d));
            let w1 = p.add(name("ffn.w1"), xavier(&mut rng, d, config.ffn_dim()));
            let w2 = p.add(name("ffn.w2"), xavier(&mut rng, config.ffn_dim(), d));
            let init = DecayParams::default();
            let mut per_head = |field: &str, v: f64| -> Vec<ParamId> {
                (0..config.heads)
                    .map(|h| p.add(format!("layer{l}.head{h}.{field}"), Tensor::scalar(v)))
                    .collect()
            };
            let lambda = per_head("lambda_raw", init.lambda_raw);
            let alpha = per_head("alpha_raw", init.alpha_raw);
            let gamma = per_head("gamma_raw", init.gamma_raw);
            let delta = per_head("delta_raw", init.delta_raw);
            layers.push(LayerIds {
                wq,
                wk,
                wv,
                ln1_g,
                ln1_b,
                ln2_g,
                ln2_b,
                w1,
                w2,
                lambda,
                alpha,
                gamma,
                delta,
            });
        }
        let link_w1 = p.add("link.w1", xavier(&mut rng, 2 * d, d));
        let link_b1 = p.add("link.b1", Tensor::zeros(1, d));
        let link_w2 = p.add("link.w2", xavier(&mut rng, d, 1));
        let link_b2 = p.add("link.b2", Tensor::zeros(1, 1));
        let w_cls = p.add("node.w", xavier(&mut rng, d, config.classes));
        let ids = Ids {
            w_in,
            b_in,
            w_te,
            w_e,
            layers,
            link_w1,
            link_b1,
            link_w2,
            link_b2,
            w_cls,
        };
        Ok(Self {
            config,
            params: p,
            ids,
        })
    }

    /// Rebuilds a model from a config and a full set of named tensors.
    pub fn from_parts(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {} parameters",
                tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}",
                    t.shape()
                )));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.config.ablation = ablation;
    }

    pub fn decay_params(&self, layer: usize, head: usize) -> DecayParams {
        let ids = &self.ids.layers[layer];
        let v = |id: ParamId| self.params.get(id).item();
        DecayParams {
            lambda_raw: v(ids.lambda[head]),
            alpha_raw: v(ids.alpha[head]),
            gamma_raw: v(ids.gamma[head]),
            delta_raw: v(ids.delta[head]),
        }
    }

    /// Decay parameters indexed `layer * heads + head`.
    pub fn all_decay_params(&self) -> Vec<DecayParams> {
        (0..self.config.layers)
            .flat_map(|l| (0..self.config.heads).map(move |h| (l, h)))
            .map(|(l, h)| self.decay_params(l, h))
            .collect()
    }

    pub fn coefficients(&self) -> Coefficients {
        Coefficients::from_params(&self.all_decay_params())
    }

    pub fn core_shape(&self, num_nodes: usize) -> CoreShape {
        CoreShape {
            num_nodes,
            layers: self.config.layers,
            heads: self.config.heads,
            d_h: self.config.d_h(),
        }
    }

    /// Core options implied by the ablation flags. The flat variant keeps an
    /// unweighted running sum (`a = b = 1`) of current-event outer products.
    pub fn core_options(&self) -> CoreOptions {
        let a = self.config.ablation;
        if a.no_block {
            return CoreOptions {
                gate: Gate::Fixed { a: 1.0, b: 1.0 },
                propagate: false,
                normalize_psi: true,
                clip: None,
            };
        }
        CoreOptions {
            gate: if a.no_state {
                Gate::Fixed { a: 0.0, b: 1.0 }
            } else {
                Gate::Learned
            },
            propagate: !a.no_diffusion,
            normalize_psi: true,
            clip: self.config.clip,
        }
    }

    pub fn new_core(&self, num_nodes: usize) -> RetentiveCore {
        RetentiveCore::new(self.core_shape(num_nodes), self.core_options())
    }

    /// Parameter groups for gradient reporting, e.g. `wq` or `lambda_raw`.
    pub fn param_group(name: &str) -> &str {
        let last = name.rsplit('.').next().unwrap_or(name);
        match name.split('.').next() {
            Some("input") => "input",
            Some("time") => "time",
            Some("edge") => "edge",
            Some("link") => "link",
            Some("node") => "node",
            _ if name.contains(".ln") => "layer_norm",
            _ if name.contains(".ffn") => "ffn",
            _ => last,
        }
    }

    /// Batched forward pass: one `d`-wide embedding per query.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        ctx: &Context<'_>,
        queries: &[Query],
        mode: Mode,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let (d, dh, heads) = (cfg.dim, cfg.d_h(), cfg.heads);
        let abl = cfg.ablation;
        let mut dropout_rng = match mode {
            Mode::Train { seed } if cfg.dropout > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        for q in queries {
            if q.node >= ctx.stream.num_nodes() {
                return Err(Error::InvalidInput(format!("unknown node {}", q.node)));
            }
        }

        // Neighbor rows, grouped by query.
        let mut offsets = vec![0];
        let mut seg = Vec::new();
        let mut nbr_nodes = Vec::new();
        let mut row_times = Vec::new();
        let mut elapsed = Vec::new();
        let mut edge_rows = Vec::new();
        let query_times: Vec<f64> = queries.iter().map(|q| q.cutoff.time()).collect();
        for (b, q) in queries.iter().enumerate() {
            let t = q.cutoff.time();
            for e in ctx.index.recent(q.node, q.cutoff, cfg.neighbors) {
                seg.push(b);
                nbr_nodes.push(e.neighbor);
                row_times.push(e.time);
                elapsed.push(t - e.time);
                edge_rows.push(e.event_idx);
            }
            offsets.push(seg.len());
        }
        let n = seg.len();
        let log_dt: Vec<f64> = elapsed.iter().map(|v| v.ln_1p()).collect();

        // Edge augmentation φ̃ = (φ_e + φ_t) W_e, both padded to a shared width.
        let width = cfg.edge_width();
        let dt_col = tape.constant(Tensor::from_vec(n, 1, elapsed));
        let w_te = tape.param(self.ids.w_te);
        let phase = tape.matmul(dt_col, w_te);
        let mut phi = tape.cos(phase);
        if width > cfg.time_dim {
            let pad = tape.constant(Tensor::zeros(n, width - cfg.time_dim));
            phi = tape.concat_cols(&[phi, pad]);
        }
        if cfg.edge_dim > 0 {
            let mut fe = Tensor::zeros(n, width);
            for (r, &idx) in edge_rows.iter().enumerate() {
                fe.row_mut(r)[..cfg.edge_dim].copy_from_slice(&ctx.stream.events()[idx].edge_feat);
            }
            let fe = tape.constant(fe);
            phi = tape.add(phi, fe);
        }
        let w_e = tape.param(self.ids.w_e);
        let phi_tilde = tape.matmul(phi, w_e);
        // Shared key/value input: the neighbor's input projection plus φ̃.
        let nbr_in = self.input_projection(tape, ctx.stream, &nbr_nodes);
        let kv_in = tape.add(nbr_in, phi_tilde);

        let targets: Vec<NodeId> = queries.iter().map(|q| q.node).collect();
        let mut x = self.input_projection(tape, ctx.stream, &targets);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);

        for (l, ids) in self.ids.layers.iter().enumerate() {
            let (wq, wk, wv) = (tape.param(ids.wq), tape.param(ids.wk), tape.param(ids.wv));
            let q_all = tape.matmul(x, wq);
            let k_all = tape.matmul(kv_in, wk);
            let v_all = tape.matmul(kv_in, wv);
            let mut head_out = Vec::with_capacity(heads);
            let mut omegas = Vec::with_capacity(heads);
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q_all, c0, c1);
                let states = (!abl.no_state).then(|| {
                    let mut m = Tensor::zeros(queries.len(), dh * dh);
                    for (b, q) in queries.iter().enumerate() {
                        m.row_mut(b).copy_from_slice(ctx.core.state(q.node, l, h));
                    }
                    m
                });
                if abl.no_block {
                    let read = tape.row_matvec(
                        qh,
                        states.unwrap_or_else(|| Tensor::zeros(queries.len(), dh * dh)),
                    );
                    head_out.push(tape.scale(read, inv_sqrt_d));
                    omegas.push(None);
                    continue;
                }
                let kh = tape.slice_cols(k_all, c0, c1);
                let vh = tape.slice_cols(v_all, c0, c1);
                let q_rows = tape.gather_rows(qh, seg.clone());
                let cos = tape.rows_cosine(kh, q_rows);
                let mut omega = tape.sigmoid(cos);
                if !abl.no_decay {
                    let (lr, ar) = (tape.param(ids.lambda[h]), tape.param(ids.alpha[h]));
                    let decay = tape.temporal_decay(log_dt.clone(), lr, ar);
                    omega = tape.mul(omega, decay);
                }
                let omega = tape.segment_normalize(omega, offsets.clone());
                let score = tape.rows_dot(q_rows, kh);
                let coef = tape.mul(omega, score);
                let weighted = tape.mul_col(vh, coef);
                let injected = tape.segment_sum(weighted, offsets.clone());
                let g = match states {
                    None => injected,
                    Some(m) => {
                        let gamma_raw = tape.param(ids.gamma[h]);
                        let gamma = tape.sigmoid(gamma_raw);
                        let keep = tape.affine(gamma, -1.0, 1.0);
                        let read = tape.row_matvec(qh, m);
                        let retained = tape.mul_scalar(read, gamma);
                        let fresh = tape.mul_scalar(injected, keep);
                        tape.add(retained, fresh)
                    }
                };
                head_out.push(tape.scale(g, inv_sqrt_d));
                omegas.push(Some(omega));
            }
            x = self.block_forward(tape, l, x, &head_out, dropout_rng.as_mut());
            layers.push(LayerTrace {
                keys: k_all,
                values: v_all,
                omega: omegas,
            });
        }
        Ok(Forward {
            h: x,
            offsets,
            row_times,
            query_times,
            layers,
        })
    }

    /// `Z = X + LN(Concat(heads))`, then `X' = Z + GELU(LN(Z) W_1) W_2`.
    /// Dropout hits the concatenated heads and the hidden activation when
    /// `rng` is given.
    pub fn block_forward(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        x: Var,
        head_out: &[Var],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let ids = &self.ids.layers[layer];
        let rate = self.config.dropout;
        let mut cat = if head_out.len() == 1 {
            head_out[0]
        } else {
            tape.concat_cols(head_out)
        };
        assert_eq!(
            tape.value(cat).cols(),
            self.config.dim,
            "head outputs must concatenate to the model width"
        );
        if let Some(r) = rng.as_deref_mut() {
            cat = apply_dropout(tape, cat, rate, r);
        }
        let (g1, b1) = (tape.param(ids.ln1_g), tape.param(ids.ln1_b));
        let normed = tape.layer_norm(cat, g1, b1, LN_EPS);
        let z = tape.add(x, normed);
        let (g2, b2) = (tape.param(ids.ln2_g), tape.param(ids.ln2_b));
        let zn = tape.layer_norm(z, g2, b2, LN_EPS);
        let w1 = tape.param(ids.w1);
        let pre = tape.matmul(zn, w1);
        let mut hidden = tape.gelu(pre);
        if let Some(r) = rng {
            hidden = apply_dropout(tape, hidden, rate, r);
        }
        let w2 = tape.param(ids.w2);
        let ffn = tape.matmul(hidden, w2);
        tape.add(z, ffn)
    }

    /// `X^(1) = x W_in + b_in`; featureless nodes get the bias alone.
    fn input_projection(&self, tape: &mut Tape<'_>, stream: &EventStream, nodes: &[NodeId]) -> Var {
        let d = self.config.dim;
        let b_in = tape.param(self.ids.b_in);
        let base = match self.ids.w_in {
            Some(w_in) => {
                let feats = stream.node_features();
                let mut x = Tensor::zeros(nodes.len(), feats.cols());
                for (r, &node) in nodes.iter().enumerate() {
                    x.row_mut(r).copy_from_slice(feats.row(node));
                }
                let x = tape.constant(x);
                let w = tape.param(w_in);
                tape.matmul(x, w)
            }
            None => tape.constant(Tensor::zeros(nodes.len(), d)),
        };
        tape.add_row(base, b_in)
    }

    /// `σ(MLP([h_u, h_v]))` with a `2d → d → 1` GELU network.
    pub fn predict_link(&self, tape: &mut Tape<'_>, hu: Var, hv: Var) -> Var {
        let cat = tape.concat_cols(&[hu, hv]);
        let (w1, b1) = (tape.param(self.ids.link_w1), tape.param(self.ids.link_b1));
        let pre = tape.matmul(cat, w1);
        let pre = tape.add_row(pre, b1);
        let hidden = tape.gelu(pre);
        let (w2, b2) = (tape.param(self.ids.link_w2), tape.param(self.ids.link_b2));
        let logit = tape.matmul(hidden, w2);
        let logit = tape.add_row(logit, b2);
        tape.sigmoid(logit)
    }

    /// `σ(h W_cls)`, one probability per class.
    pub fn classify_node(&self, tape: &mut Tape<'_>, h: Var) -> Var {
        let w = tape.param(self.ids.w_cls);
        let logits = tape.matmul(h, w);
        tape.sigmoid(logits)
    }

    /// Injection blocks (every layer and head) for each query of `fwd`.
    fn injections(&self, tape: &Tape<'_>, fwd: &Forward) -> Vec<Vec<f64>> {
        let cfg = &self.config;
        let (dh, heads) = (cfg.d_h(), cfg.heads);
        let shape = self.core_shape(0);
        let nq = fwd.offsets.len() - 1;
        let mut out = vec![vec![0.0; shape.block_len()]; nq];
        for (l, trace) in fwd.layers.iter().enumerate() {
            let (keys, values) = (tape.value(trace.keys), tape.value(trace.values));
            for h in 0..heads {
                let weights = trace.omega[h].map(|w| tape.value(w).data());
                let o = shape.offset(l, h);
                for (b, block) in out.iter_mut().enumerate() {
                    let mat = &mut block[o..o + dh * dh];
                    for r in fwd.offsets[b]..fwd.offsets[b + 1] {
                        let w = match weights {
                            Some(w) => w[r],
                            // Flat variant: each event enters once, when it is current.
                            None if fwd.row_times[r] == fwd.query_times[b] => 1.0,
                            None => continue,
                        };
                        let k = &keys.row(r)[h * dh..(h + 1) * dh];
                        let v = &values.row(r)[h * dh..(h + 1) * dh];
                        for (i, &ki) in k.iter().enumerate() {
                            let s = w * ki;
                            for (m, &vj) in mat[i * dh..(i + 1) * dh].iter_mut().zip(v) {
                                *m += s * vj;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Advances `core` over `events` (chronological). Injections for the
    /// whole slice are computed against the state at entry; fusion and
    /// propagation then run once per distinct timestamp.
    pub fn commit_events(
        &self,
        core: &mut RetentiveCore,
        stream: &EventStream,
        index: &NeighborIndex,
        events: &[Event],
    ) -> Result<()> {
        if events.is_empty() || self.config.ablation.no_state {
            // Without persistence the queries never read the state.
            return Ok(());
        }
        let mut slot: HashMap<(u64, NodeId), usize> = HashMap::new();
        let mut queries = Vec::new();
        for e in events {
            for node in [e.src, e.dst] {
                slot.entry((e.time.to_bits(), node)).or_insert_with(|| {
                    queries.push(Query::through(node, e.time));
                    queries.len() - 1
                });
            }
        }
        let blocks = {
            let ctx = Context {
                stream,
                index,
                core,
            };
            let mut tape = Tape::new(&self.params);
            let fwd = self.forward(&mut tape, &ctx, &queries, Mode::Eval)?;
            tape.check_finite()?;
            self.injections(&tape, &fwd)
        };
        let coeffs = self.coefficients();
        let mut blocks: Vec<Option<Vec<f64>>> = blocks.into_iter().map(Some).collect();
        for group in EventStream::timestamp_groups(events) {
            let t = group[0].time;
            let mut inj = Vec::new();
            for e in group {
                for node in [e.src, e.dst] {
                    if let Some(b) = blocks[slot[&(t.to_bits(), node)]].take() {
                        inj.push((node, b));
                    }
                }
            }
            inj.sort_by_key(|(node, _)| *node);
            core.commit(t, group, &inj, &coeffs)?;
        }
        Ok(())
    }

    /// Evaluation-mode embedding of `node` from events strictly before `t`.
    pub fn embed(&self, ctx: &Context<'_>, node: NodeId, t: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, ctx, &[Query::before(node, t)], Mode::Eval)?;
        Ok(tape.value(fwd.h).data().to_vec())
    }
}

fn apply_dropout(tape: &mut Tape<'_>, a: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(a).len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.dropout(a, mask)
}

/// Mean of the `heads` equal-width chunks of `h`.
pub fn mean_pool_heads(h: &[f64], heads: usize) -> Vec<f64> {
    let w = h.len() / heads;
    (0..w)
        .map(|i| (0..heads).map(|k| h[k * w + i]).sum::<f64>() / heads as f64)
        .collect()
}

/// `cos(Δt · w)` elementwise.
pub fn time_encode(dt: f64, w_te: &[f64]) -> Vec<f64> {
    w_te.iter().map(|w| (dt * w).cos()).collect()
}

/// `(φ_e + φ_t) W_e` after zero-padding both to the row count of `w_e`.
pub fn fuse_edge(phi_e: &[f64], phi_t: &[f64], w_e: &Tensor) -> Result<Vec<f64>> {
    let width = w_e.rows();
    if phi_e.len() > width || phi_t.len() > width {
        return Err(Error::Dimension(format!(
            "features wider than the fuser's {width} rows"
        )));
    }
    let mut sum = vec![0.0; width];
    for (i, v) in phi_e.iter().enumerate() {
        sum[i] += v;
    }
    for (i, v) in phi_t.iter().enumerate() {
        sum[i] += v;
    }
    Ok(Tensor::row_vector(sum).matmul(w_e).into_vec())
}

/// `(K + φ̃ W_K, V + φ̃ W_V)`
pub fn augment_kv(
    k: &Tensor,
    v: &Tensor,
    phi: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let pk = phi.matmul(w_k);
    let pv = phi.matmul(w_v);
    if pk.shape() != k.shape() || pv.shape() != v.shape() {
        return Err(Error::Dimension("augmentation shape mismatch".into()));
    }
    Ok((k.add(&pk), v.add(&pv)))
}
