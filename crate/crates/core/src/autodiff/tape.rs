//! Reverse-mode differentiation over a recorded sequence of tensor
//! primitives.
//!
//! Every primitive evaluates eagerly when recorded, so a forward pass that
//! never calls [`Tape::backward`] is the plain forward pass.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gelu, gelu_derivative, gemm, sigmoid, softplus, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Exp,
    Cos,
    Gelu,
    Log1p,
    Softplus,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Cos => "cos",
            Unary::Gelu => "gelu",
            Unary::Log1p => "log1p",
            Unary::Softplus => "softplus",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Cos => x.cos(),
            Unary::Gelu => gelu(x),
            Unary::Log1p => x.ln_1p(),
            Unary::Softplus => softplus(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Cos => -x.sin(),
            Unary::Gelu => gelu_derivative(x),
            Unary::Log1p => 1.0 / (1.0 + x),
            Unary::Softplus => sigmoid(x),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Const,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    /// `aᵀ · b`
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SumRows(Var),
    MeanOf(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    RowCosine(Var, Var),
    TemporalDecay {
        log_dt: Vec<f64>,
        lambda_raw: Var,
        alpha_raw: Var,
    },
    NormalizeAbsSum(Var),
    Dropout(Var, Vec<f64>),
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    RowsCosine(Var, Var),
    RowsDot(Var, Var),
    SegmentNormalize(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    /// Row `b` of the input times the constant `k×k` matrix stored in row `b`.
    RowMatVec(Var, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::MatMul(..) | Op::MatMulNT(..) | Op::MatMulTN(..) => "matmul",
            Op::Add(..) | Op::AddRow(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) | Op::MulCol(..) | Op::MulScalar(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Unary(_, u) => u.name(),
            Op::ConcatCols(_) | Op::ConcatRows(_) => "concat",
            Op::SliceCols(..) => "slice",
            Op::SumRows(_) => "sum",
            Op::MeanOf(_) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RowCosine(..) => "cosine",
            Op::TemporalDecay { .. } => "temporal_decay",
            Op::NormalizeAbsSum(_) => "normalize",
            Op::Dropout(..) => "dropout",
            Op::Bce { .. } => "bce",
            Op::GatherRows(..) => "gather",
            Op::RowsCosine(..) => "cosine",
            Op::RowsDot(..) | Op::RowMatVec(..) => "matmul",
            Op::SegmentNormalize(..) => "normalize",
            Op::SegmentSum(..) => "sum",
        }
    }
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One adjoint per entry of a [`ParamStore`], zero where the loss does not
/// depend on the parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    /// `self = a·self + b·other`
    pub fn combine(&mut self, a: f64, other: &GradientSet, b: f64) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.scale_in_place(a);
            g.axpy(b, o);
        }
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    first_non_finite: Option<&'static str>,
    consumed: bool,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
            first_non_finite: None,
            consumed: false,
        }
    }

    /// Drops every recorded node so the allocation can be reused.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.iter_mut().for_each(|v| *v = None);
        self.first_non_finite = None;
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    #[inline]
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Name of the first primitive that produced a non-finite value.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(false, av, true, bv, 1.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.cols(), bv.cols());
        gemm(true, av, false, bv, 1.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulTN(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "add_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Scales row `i` of `a (n×m)` by `col[i]` (`col` is `n×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!((av.rows(), 1), cv.shape(), "mul_col shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    /// `a * s` for a `1×1` tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).scaled(sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, f), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log1p)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice out of range");
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Column sums: `n×m → 1×m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Elementwise mean of same-shaped values.
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        out.scale_in_place(1.0 / parts.len() as f64);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::MeanOf(parts.to_vec()), rg)
    }

    /// Row-wise layer normalization with affine gain and bias (`1×m`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let m = xv.cols();
        assert_eq!(gv.shape(), (1, m), "layer_norm gain shape");
        assert_eq!(bv.shape(), (1, m), "layer_norm bias shape");
        let mut out = Tensor::zeros(xv.rows(), m);
        for r in 0..xv.rows() {
            let (mean, inv_std) = row_moments(xv.row(r), eps);
            let orow = out.row_mut(r);
            for c in 0..m {
                orow[c] = (xv.row(r)[c] - mean) * inv_std * gv.data()[c] + bv.data()[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, eps }, rg)
    }

    /// Cosine similarity of every row of `a (n×k)` with `q (1×k)`, as `n×1`.
    /// Zero-norm operands give similarity 0.
    pub fn row_cosine(&mut self, a: Var, q: Var) -> Var {
        let (av, qv) = (self.value(a), self.value(q));
        assert_eq!(av.cols(), qv.cols(), "row_cosine width mismatch");
        let qn = norm(qv.data());
        let mut out = Tensor::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            out.data_mut()[r] = cosine(av.row(r), qv.data(), qn);
        }
        let rg = self.rg(a) || self.rg(q);
        self.push(out, Op::RowCosine(a, q), rg)
    }

    /// `exp(−softplus(λ_raw) · L^σ(α_raw))` for each constant `L ≥ 0`, as `n×1`.
    pub fn temporal_decay(&mut self, log_dt: Vec<f64>, lambda_raw: Var, alpha_raw: Var) -> Var {
        let lambda = softplus(self.scalar(lambda_raw));
        let alpha = sigmoid(self.scalar(alpha_raw));
        let data: Vec<f64> = log_dt
            .iter()
            .map(|&l| (-lambda * pow_alpha(l, alpha)).exp())
            .collect();
        let out = Tensor::from_vec(data.len(), 1, data);
        let rg = self.rg(lambda_raw) || self.rg(alpha_raw);
        self.push(
            out,
            Op::TemporalDecay {
                log_dt,
                lambda_raw,
                alpha_raw,
            },
            rg,
        )
    }

    /// `w / max(Σ|w|, 1)`
    pub fn normalize_abs_sum(&mut self, w: Var) -> Var {
        let wv = self.value(w);
        let s: f64 = wv.data().iter().map(|x| x.abs()).sum();
        let out = if s > 1.0 {
            wv.scaled(1.0 / s)
        } else {
            wv.clone()
        };
        let rg = self.rg(w);
        self.push(out, Op::NormalizeAbsSum(w), rg)
    }

    /// Multiplies by a precomputed mask (entries 0 or `1/(1−p)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), mask.len(), "dropout mask size");
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    /// Mean binary cross-entropy of probabilities `p (n×1)` against labels,
    /// with `p` clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce(&mut self, p: Var, labels: Vec<f64>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), labels.len(), "bce label count");
        let n = labels.len().max(1) as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| bce_term(p, y))
            .sum();
        let rg = self.rg(p);
        self.push(Tensor::scalar(total / n), Op::Bce { p, labels }, rg)
    }

    /// Rows of `a` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let k = av.cols();
        let mut out = Tensor::zeros(idx.len(), k);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx), rg)
    }

    /// Row-by-row cosine similarity of two `n×k` matrices, as `n×1`.
    pub fn rows_cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "rows_cosine shape mismatch");
        let data = (0..av.rows())
            .map(|r| cosine(av.row(r), bv.row(r), norm(bv.row(r))))
            .collect();
        let out = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowsCosine(a, b), rg)
    }

    /// Row-by-row dot product of two `n×k` matrices, as `n×1`.
    pub fn rows_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "rows_dot shape mismatch");
        let data = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
        let out = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowsDot(a, b), rg)
    }

    /// `w / max(Σ|w|, 1)` within each segment `offsets[s]..offsets[s+1]`.
    pub fn segment_normalize(&mut self, w: Var, offsets: Vec<usize>) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.cols(), 1, "segment_normalize expects a column");
        assert_eq!(
            offsets.last().copied(),
            Some(wv.rows()),
            "segment offsets must cover the input"
        );
        let mut out = wv.clone();
        for s in offsets.windows(2) {
            let seg = &mut out.data_mut()[s[0]..s[1]];
            let total: f64 = seg.iter().map(|x| x.abs()).sum();
            if total > 1.0 {
                seg.iter_mut().for_each(|x| *x /= total);
            }
        }
        let rg = self.rg(w);
        self.push(out, Op::SegmentNormalize(w, offsets), rg)
    }

    /// Sums the rows of each segment, giving one row per segment.
    pub fn segment_sum(&mut self, a: Var, offsets: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(
            offsets.last().copied(),
            Some(av.rows()),
            "segment offsets must cover the input"
        );
        let mut out = Tensor::zeros(offsets.len() - 1, av.cols());
        for (b, s) in offsets.windows(2).enumerate() {
            for r in s[0]..s[1] {
                for (o, x) in out.row_mut(b).iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SegmentSum(a, offsets), rg)
    }

    /// `out_b = q_b · M_b` where row `b` of `mats` holds a row-major `k×k` matrix.
    pub fn row_matvec(&mut self, q: Var, mats: Tensor) -> Var {
        let qv = self.value(q);
        let k = qv.cols();
        assert_eq!(mats.shape(), (qv.rows(), k * k), "row_matvec matrix shape");
        let mut out = Tensor::zeros(qv.rows(), k);
        for b in 0..qv.rows() {
            let m = mats.row(b);
            let orow = out.row_mut(b);
            for (i, &qi) in qv.row(b).iter().enumerate() {
                if qi == 0.0 {
                    continue;
                }
                for (o, &mij) in orow.iter_mut().zip(&m[i * k..(i + 1) * k]) {
                    *o += qi * mij;
                }
            }
        }
        let rg = self.rg(q);
        self.push(out, Op::RowMatVec(q, mats), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<GradientSet> {
        self.backward_seeded(output, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an arbitrary adjoint for `output`.
    pub fn backward_seeded(&mut self, output: Var, seed: Tensor) -> Result<GradientSet> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        assert_eq!(
            self.value(output).shape(),
            seed.shape(),
            "seed shape mismatch"
        );
        grads[output.0] = Some(seed);
        let mut result = GradientSet::zeros_like(self.store);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        result: &mut GradientSet,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Param(id) => result.grads[id.0].add_assign(&g),
            Op::Const => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let mut ga = Tensor::zeros(g.rows(), bv.rows());
                    gemm(false, &g, true, bv, 1.0, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let mut gb = Tensor::zeros(av.cols(), g.cols());
                    gemm(true, av, false, &g, 1.0, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                if self.rg(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let mut gb = Tensor::zeros(g.cols(), av.cols());
                    gemm(true, &g, false, av, 1.0, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulTN(a, b) => {
                // C = Aᵀ B: dA = B Gᵀ, dB = A G
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let mut ga = Tensor::zeros(bv.rows(), g.rows());
                    gemm(false, bv, true, &g, 1.0, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, self.value(*a).matmul(&g));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.scaled(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, hadamard(&g, self.value(*b)));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, hadamard(&g, self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *row, gr);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.rg(*col) {
                    let data = (0..g.rows()).map(|r| dot(g.row(r), av.row(r))).collect();
                    accumulate(grads, *col, Tensor::from_vec(g.rows(), 1, data));
                }
                if self.rg(*a) {
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let s = cv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::MulScalar(a, s) => {
                if self.rg(*s) {
                    let d = dot(g.data(), self.value(*a).data());
                    accumulate(grads, *s, Tensor::scalar(d));
                }
                if self.rg(*a) {
                    accumulate(grads, *a, g.scaled(self.value(*s).item()));
                }
            }
            Op::Affine(a, scale) => accumulate(grads, *a, g.scaled(*scale)),
            Op::Unary(a, f) => {
                let (xv, yv) = (self.value(*a), node.value.as_ref().expect("unary value"));
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(gi, (&x, &y))| gi * f.derivative(x, y))
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.rg(p) {
                        let gp =
                            Tensor::from_vec(pv.rows(), pv.cols(), g.data()[off..off + n].to_vec());
                        accumulate(grads, p, gp);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    ga.row_mut(r).copy_from_slice(g.data());
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanOf(parts) => {
                let gs = g.scaled(1.0 / parts.len() as f64);
                for &p in parts {
                    if self.rg(p) {
                        accumulate(grads, p, gs.clone());
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let m = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), m);
                let mut ggain = Tensor::zeros(1, m);
                let mut gbias = Tensor::zeros(1, m);
                for r in 0..xv.rows() {
                    let (mean, inv_std) = row_moments(xv.row(r), *eps);
                    let xhat: Vec<f64> = xv.row(r).iter().map(|v| (v - mean) * inv_std).collect();
                    let grow = g.row(r);
                    let dxhat: Vec<f64> = grow.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    for c in 0..m {
                        ggain.data_mut()[c] += grow[c] * xhat[c];
                        gbias.data_mut()[c] += grow[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                    let mean_dx = dot(&dxhat, &xhat) / m as f64;
                    let out = gx.row_mut(r);
                    for c in 0..m {
                        out[c] = inv_std * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, gx);
                }
                if self.rg(*gain) {
                    accumulate(grads, *gain, ggain);
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, gbias);
                }
            }
            Op::RowCosine(a, q) => {
                let (av, qv) = (self.value(*a), self.value(*q));
                let cv = node.value.as_ref().expect("cosine value");
                let qn = norm(qv.data());
                let k = qv.cols();
                let mut ga = Tensor::zeros(av.rows(), k);
                let mut gq = Tensor::zeros(1, k);
                for r in 0..av.rows() {
                    let an = norm(av.row(r));
                    if an == 0.0 || qn == 0.0 {
                        continue;
                    }
                    let gr = g.data()[r];
                    let c = cv.data()[r];
                    let inv = 1.0 / (an * qn);
                    let arow = av.row(r);
                    let garow = ga.row_mut(r);
                    for j in 0..k {
                        garow[j] = gr * (qv.data()[j] * inv - c * arow[j] / (an * an));
                        gq.data_mut()[j] += gr * (arow[j] * inv - c * qv.data()[j] / (qn * qn));
                    }
                }
                if self.rg(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.rg(*q) {
                    accumulate(grads, *q, gq);
                }
            }
            Op::TemporalDecay {
                log_dt,
                lambda_raw,
                alpha_raw,
            } => {
                let lr = self.scalar(*lambda_raw);
                let ar = self.scalar(*alpha_raw);
                let (lambda, alpha) = (softplus(lr), sigmoid(ar));
                let fv = node.value.as_ref().expect("decay value");
                let mut dl = 0.0;
                let mut da = 0.0;
                for ((&l, &f), &gi) in log_dt.iter().zip(fv.data()).zip(g.data()) {
                    if l <= 0.0 {
                        continue;
                    }
                    let la = pow_alpha(l, alpha);
                    dl += gi * f * (-la);
                    da += gi * f * (-lambda * la * l.ln());
                }
                if self.rg(*lambda_raw) {
                    accumulate(grads, *lambda_raw, Tensor::scalar(dl * sigmoid(lr)));
                }
                if self.rg(*alpha_raw) {
                    accumulate(
                        grads,
                        *alpha_raw,
                        Tensor::scalar(da * alpha * (1.0 - alpha)),
                    );
                }
            }
            Op::NormalizeAbsSum(w) => {
                let wv = self.value(*w);
                let s: f64 = wv.data().iter().map(|x| x.abs()).sum();
                if s > 1.0 {
                    let gw = dot(g.data(), wv.data()) / (s * s);
                    let data = g
                        .data()
                        .iter()
                        .zip(wv.data())
                        .map(|(gi, wi)| gi / s - wi.signum() * gw)
                        .collect();
                    accumulate(grads, *w, Tensor::from_vec(wv.rows(), wv.cols(), data));
                } else {
                    accumulate(grads, *w, g);
                }
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let n = labels.len().max(1) as f64;
                let scale = g.item() / n;
                let data = pv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| scale * bce_derivative(p, y))
                    .collect();
                accumulate(grads, *p, Tensor::from_vec(pv.rows(), pv.cols(), data));
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RowsCosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cv = node.value.as_ref().expect("cosine value");
                let k = av.cols();
                let mut ga = Tensor::zeros(av.rows(), k);
                let mut gb = Tensor::zeros(av.rows(), k);
                for r in 0..av.rows() {
                    let (ar, br) = (av.row(r), bv.row(r));
                    let (an, bn) = (norm(ar), norm(br));
                    if an == 0.0 || bn == 0.0 {
                        continue;
                    }
                    let (gr, c, inv) = (g.data()[r], cv.data()[r], 1.0 / (an * bn));
                    for j in 0..k {
                        ga.row_mut(r)[j] = gr * (br[j] * inv - c * ar[j] / (an * an));
                        gb.row_mut(r)[j] = gr * (ar[j] * inv - c * br[j] / (bn * bn));
                    }
                }
                if self.rg(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::RowsDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scaled = |m: &Tensor| {
                    let mut out = m.clone();
                    for r in 0..out.rows() {
                        let s = g.data()[r];
                        out.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    out
                };
                if self.rg(*a) {
                    accumulate(grads, *a, scaled(bv));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, scaled(av));
                }
            }
            Op::SegmentNormalize(w, offsets) => {
                let wv = self.value(*w);
                let mut gw = g.clone();
                for s in offsets.windows(2) {
                    let (ws, gs) = (&wv.data()[s[0]..s[1]], &g.data()[s[0]..s[1]]);
                    let total: f64 = ws.iter().map(|x| x.abs()).sum();
                    if total > 1.0 {
                        let cross = dot(gs, ws) / (total * total);
                        for (j, o) in gw.data_mut()[s[0]..s[1]].iter_mut().enumerate() {
                            *o = gs[j] / total - ws[j].signum() * cross;
                        }
                    }
                }
                accumulate(grads, *w, gw);
            }
            Op::SegmentSum(a, offsets) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (b, s) in offsets.windows(2).enumerate() {
                    for r in s[0]..s[1] {
                        ga.row_mut(r).copy_from_slice(g.row(b));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RowMatVec(q, mats) => {
                let k = g.cols();
                let mut gq = Tensor::zeros(g.rows(), k);
                for b in 0..g.rows() {
                    let m = mats.row(b);
                    let grow = g.row(b);
                    for (i, o) in gq.row_mut(b).iter_mut().enumerate() {
                        *o = dot(grow, &m[i * k..(i + 1) * k]);
                    }
                }
                accumulate(grads, *q, gq);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn cosine(a: &[f64], q: &[f64], qn: f64) -> f64 {
    let an = norm(a);
    if an == 0.0 || qn == 0.0 {
        0.0
    } else {
        dot(a, q) / (an * qn)
    }
}

/// Cosine similarity with the zero-norm convention (similarity 0).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b, norm(b))
}

/// `l^α` with `0^α = 0`.
#[inline]
pub(crate) fn pow_alpha(l: f64, alpha: f64) -> f64 {
    if l <= 0.0 {
        0.0
    } else {
        l.powf(alpha)
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) const BCE_CLAMP: f64 = 1e-7;

#[inline]
pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[inline]
fn bce_derivative(p: f64, y: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    /// Central-difference gradient of `f` with respect to every entry of `id`.
    fn numeric_grad(store: &ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Tensor {
        let mut s = store.clone();
        let base = store.get(id).clone();
        let mut out = Tensor::zeros(base.rows(), base.cols());
        let h = 1e-6;
        for k in 0..base.len() {
            s.get_mut(id).data_mut()[k] = base.data()[k] + h;
            let up = f(&s);
            s.get_mut(id).data_mut()[k] = base.data()[k] - h;
            let down = f(&s);
            s.get_mut(id).data_mut()[k] = base.data()[k];
            out.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out
    }

    fn assert_grads_match(store: &ParamStore, ids: &[ParamId], f: &dyn Fn(&mut Tape) -> Var) {
        let mut tape = Tape::new(store);
        let out = f(&mut tape);
        let grads = tape.backward(out).unwrap();
        for &id in ids {
            let num = numeric_grad(store, id, &|s| {
                let mut t = Tape::new(s);
                let o = f(&mut t);
                t.scalar(o)
            });
            let diff = grads.get(id).max_abs_diff(&num);
            assert!(
                diff < 1e-6,
                "{}: analytic {:?} numeric {:?}",
                store.name(id),
                grads.get(id),
                num
            );
        }
    }

    #[test]
    fn linear_bce_hand_derivative() {
        // y = σ(w·x), target 1, x = 1, w = 0 → dL/dw = σ(0) − 1 = −0.5
        let (store, ids) = store_with(&[("w", Tensor::scalar(0.0))]);
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let x = tape.constant(Tensor::scalar(1.0));
        let logit = tape.matmul(x, w);
        let p = tape.sigmoid(logit);
        let loss = tape.bce(p, vec![1.0]);
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert!((g.get(ids[0]).item() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn second_backward_is_rejected() {
        let (store, ids) = store_with(&[("w", Tensor::scalar(1.0))]);
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let y = tape.exp(w);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let (store, ids) = store_with(&[("a", Tensor::scalar(2.0)), ("b", Tensor::scalar(3.0))]);
        let mut tape = Tape::new(&store);
        let a = tape.param(ids[0]);
        let _b = tape.param(ids[1]);
        let y = tape.exp(a);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(ids[1]).item(), 0.0);
    }

    #[test]
    fn non_finite_value_names_its_op() {
        let (store, ids) = store_with(&[("a", Tensor::scalar(1000.0))]);
        let mut tape = Tape::new(&store);
        let a = tape.param(ids[0]);
        let e = tape.exp(a);
        let _ = tape.cos(e);
        assert_eq!(tape.non_finite_op(), Some("exp"));
        assert!(matches!(
            tape.check_finite(),
            Err(Error::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn matmul_family_gradients() {
        let (store, ids) = store_with(&[
            (
                "a",
                Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![0.7, 0.1, -0.4]]),
            ),
            (
                "b",
                Tensor::from_rows(&[vec![1.1, 0.2], vec![-0.3, 0.8], vec![0.5, -0.6]]),
            ),
            (
                "c",
                Tensor::from_rows(&[vec![0.9, -0.2, 0.4], vec![0.1, 0.3, -0.7]]),
            ),
        ]);
        assert_grads_match(&store, &ids, &|t| {
            let (a, b, c) = (t.param(ids[0]), t.param(ids[1]), t.param(ids[2]));
            let ab = t.matmul(a, b); // 2×2
            let act = t.matmul_nt(a, c); // 2×2
            let atc = t.matmul_tn(a, c); // 3×3
            let s1 = t.mul(ab, act);
            let s1 = t.sum_rows(s1);
            let s2 = t.sum_rows(atc);
            let s2 = t.gelu(s2);
            let s1 = t.concat_cols(&[s1, s2]);
            let s = t.sum_rows(s1);
            let w = t.constant(Tensor::filled(5, 1, 1.0));
            t.matmul(s, w)
        });
    }

    #[test]
    fn fused_primitive_gradients() {
        let (store, ids) = store_with(&[
            (
                "x",
                Tensor::from_rows(&[vec![0.3, -1.2, 0.5, 2.0], vec![0.7, 0.1, -0.4, 0.0]]),
            ),
            ("g", Tensor::row_vector(vec![1.1, 0.9, -0.5, 0.3])),
            ("b", Tensor::row_vector(vec![0.1, -0.2, 0.0, 0.4])),
            ("q", Tensor::row_vector(vec![0.2, 0.5, -0.9, 1.0])),
            ("lr", Tensor::scalar(0.3)),
            ("ar", Tensor::scalar(-0.2)),
            ("s", Tensor::scalar(1.7)),
        ]);
        assert_grads_match(&store, &ids, &|t| {
            let x = t.param(ids[0]);
            let (gain, bias) = (t.param(ids[1]), t.param(ids[2]));
            let ln = t.layer_norm(x, gain, bias, 1e-5);
            let q = t.param(ids[3]);
            let cos = t.row_cosine(ln, q);
            let sig = t.sigmoid(cos);
            let (lr, ar) = (t.param(ids[4]), t.param(ids[5]));
            let decay = t.temporal_decay(vec![0.0, 1.3], lr, ar);
            let w = t.mul(sig, decay);
            let w = t.affine(w, 3.0, 0.2);
            let w = t.normalize_abs_sum(w);
            let rows = t.mul_col(ln, w);
            let s = t.param(ids[6]);
            let rows = t.mul_scalar(rows, s);
            let summed = t.sum_rows(rows);
            let sl = t.slice_cols(summed, 1, 3);
            let sl = t.softplus(sl);
            let sl = t.log1p(sl);
            let c = t.cos(sl);
            let m = t.mean_of(&[c, sl]);
            let p = t.sigmoid(m);
            let p = t.concat_rows(&[p]);
            let pt = t.constant(Tensor::row_vector(vec![0.0, 0.0]));
            let p = t.add_row(p, pt);
            let mix = t.constant(Tensor::from_rows(&[vec![0.9, 0.3], vec![-0.2, 1.0]]));
            let p = t.matmul_nt(mix, p);
            t.bce(p, vec![1.0, 0.0])
        });
    }

    #[test]
    fn segment_primitive_gradients() {
        let (store, ids) = store_with(&[
            (
                "x",
                Tensor::from_rows(&[
                    vec![0.3, -1.2, 0.5],
                    vec![0.7, 0.1, -0.4],
                    vec![-0.6, 0.8, 0.2],
                ]),
            ),
            (
                "q",
                Tensor::from_rows(&[vec![0.2, 0.5, -0.9], vec![1.0, -0.3, 0.4]]),
            ),
            ("w", Tensor::from_vec(5, 1, vec![0.9, 1.4, -0.2, 0.3, 0.6])),
        ]);
        let mats = Tensor::from_rows(&[
            vec![0.5, -0.1, 0.2, 0.0, 1.1, -0.7, 0.3, 0.3, 0.9],
            vec![-0.4, 0.6, 0.1, 0.8, -0.2, 0.5, 0.0, 0.7, -1.0],
        ]);
        assert_grads_match(&store, &ids, &|t| {
            let x = t.param(ids[0]);
            let q = t.param(ids[1]);
            let w = t.param(ids[2]);
            let seg = vec![0, 3, 5];
            let rows = t.gather_rows(x, vec![0, 2, 2, 1, 0]);
            let qx = t.gather_rows(q, vec![0, 0, 0, 1, 1]);
            let cos = t.rows_cosine(rows, qx);
            let score = t.rows_dot(qx, rows);
            let wn = t.segment_normalize(w, seg.clone());
            let c = t.mul(wn, score);
            let c = t.add(c, cos);
            let weighted = t.mul_col(rows, c);
            let summed = t.segment_sum(weighted, seg);
            let state = t.row_matvec(q, mats.clone());
            let out = t.add(summed, state);
            let p = t.sigmoid(out);
            let p = t.slice_cols(p, 0, 1);
            t.bce(p, vec![1.0, 0.0])
        });
    }

    #[test]
    fn layer_norm_of_constant_row_returns_bias() {
        let (store, ids) = store_with(&[("b", Tensor::row_vector(vec![0.5, -1.0, 2.0]))]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::row_vector(vec![4.0, 4.0, 4.0]));
        let g = tape.constant(Tensor::row_vector(vec![1.0, 1.0, 1.0]));
        let b = tape.param(ids[0]);
        let y = tape.layer_norm(x, g, b, 1e-5);
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn gradients_are_linear_in_the_seed() {
        let (store, ids) = store_with(&[("w", Tensor::row_vector(vec![0.4, -0.3]))]);
        let build = |t: &mut Tape| {
            let w = t.param(ids[0]);
            let a = t.gelu(w);
            let b = t.exp(w);
            let a = t.sum_rows(a);
            let ones = t.constant(Tensor::from_vec(2, 1, vec![1.0, 1.0]));
            let l1 = t.matmul(a, ones);
            let b2 = t.matmul(b, ones);
            (l1, b2)
        };
        let mut t1 = Tape::new(&store);
        let (l1, _) = build(&mut t1);
        let g1 = t1.backward(l1).unwrap();
        let mut t2 = Tape::new(&store);
        let (_, l2) = build(&mut t2);
        let g2 = t2.backward(l2).unwrap();
        let mut t3 = Tape::new(&store);
        let (l1, l2) = build(&mut t3);
        let a = t3.scale(l1, 2.5);
        let b = t3.scale(l2, -0.75);
        let total = t3.add(a, b);
        let g3 = t3.backward(total).unwrap();
        let mut expected = g1.clone();
        expected.combine(2.5, &g2, -0.75);
        assert!(g3.get(ids[0]).max_abs_diff(expected.get(ids[0])) < 1e-12);
    }
}
