//! Define-by-run reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameter leaves copy
//! their value out of a [`ParamStore`]; [`Graph::backward`] accumulates
//! gradients back into the store for trainable parameters only.

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How gradients reach the raw incidence scores in [`Graph::hyper_aggregate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidenceGrad {
    /// Members are weighted by a softmax of their raw scores; exact gradient.
    #[default]
    ScoreWeighted,
    /// Plain mean over members; gradient passed straight through the binary mask.
    StraightThrough,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Tensor, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    AvgPool(Var, usize),
    Unfold(Var),
    Reshape(Var),
    AffineCols(Var, Vec<f64>),
    HyperAggregate {
        x: Var,
        raw: Var,
        /// Normalised member weights, `N×M`.
        alpha: Tensor,
        /// Entries through which score gradients flow.
        grad_mask: Tensor,
    },
    RowNormalize(Var, Vec<f64>),
    PairwiseSqDist(Var, Var),
    /// Fused `softmax(q·kᵀ·scale)·v`; keeps only the weight matrix.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        weights: Tensor,
        scale: f64,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sqrt(..) => "sqrt",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::AvgPool(..) => "avg_pool",
            Op::Unfold(..) => "unfold",
            Op::Reshape(..) => "reshape",
            Op::AffineCols(..) => "affine_cols",
            Op::HyperAggregate { .. } => "hyper_aggregate",
            Op::RowNormalize(..) => "row_normalize",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::Attention { .. } => "attention",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

const SQRT_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attach a human-readable label used in non-finite diagnostics.
    pub fn label(&mut self, v: Var, label: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(label.into());
        v
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), p.trainable);
        self.label(v, p.name.clone())
    }

    /// Copy of `v`'s value with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `softmax(q·kᵀ·scale)·v` as one node. Same values as composing
    /// transpose, matmul, scale and softmax, with far fewer `L×L` buffers.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let mut weights = self.value(q).matmul_t(self.value(k))?;
        for x in weights.data_mut() {
            *x *= scale;
        }
        softmax_rows_in_place(&mut weights);
        let out = weights.matmul(self.value(v))?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, weights, scale }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + row` with `row` (1×m) broadcast over the rows of `a` (n×m).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += rv.data()[i % c];
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a · s` with `s` a 1×1 tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("mul_scalar", self.value(a).shape(), sv.shape()));
        }
        let k = sv.data()[0];
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    /// `a + s` with `s` a 1×1 tensor.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("add_scalar", self.value(a).shape(), sv.shape()));
        }
        let k = sv.data()[0];
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::AddScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// `sqrt(a + 1e-12)`, elementwise.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| (x + SQRT_EPS).max(0.0).sqrt());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows_tensor(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row_slice(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                out.set(i, j, (v - mu) * is);
            }
        }
        let rg = self.rg(&[a]);
        let normed = out.clone();
        self.push(out, Op::LayerNormRows(a, normed, inv_std), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::vstack(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", &[rows, cols], t.shape()));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                for j in 0..t.cols() {
                    out.set(i, off + j, t.get(i, j));
                }
            }
            off += t.cols();
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Non-overlapping window mean along rows; output has `floor(N/window)` rows.
    pub fn avg_pool(&mut self, a: Var, window: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = (x.rows(), x.cols());
        if window == 0 || n < window {
            return Err(Error::ScaleTooCoarse { len: n, window });
        }
        let out_n = n / window;
        let mut out = Tensor::zeros(out_n, d);
        for t in 0..out_n {
            for c in 0..d {
                let s: f64 = (0..window).map(|k| x.get(t * window + k, c)).sum();
                out.set(t, c, s / window as f64);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AvgPool(a, window), rg))
    }

    /// Gather each non-overlapping window of rows into one row: `N×D → floor(N/w)×(w·D)`.
    pub fn unfold(&mut self, a: Var, window: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = (x.rows(), x.cols());
        if window == 0 || n < window {
            return Err(Error::ScaleTooCoarse { len: n, window });
        }
        let out_n = n / window;
        let out = Tensor::new(vec![out_n, window * d], x.data()[..out_n * window * d].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Unfold(a), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(rows, cols)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `out[r,c] = x[r,c]·scale[c] + shift[c]` with constant `scale`, `shift`.
    pub fn affine_cols(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape("affine_cols", x.shape(), &[scale.len()]));
        }
        let mut out = x.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o * scale[i % c] + shift[i % c];
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AffineCols(a, scale.to_vec()), rg))
    }

    /// Hyperedge aggregation over a binary incidence `mask` (N×M).
    ///
    /// Row `i` of the output is a weighted mean of the node rows of `x` (N×D)
    /// incident to hyperedge `i`. Empty hyperedges yield a zero row.
    pub fn hyper_aggregate(
        &mut self,
        x: Var,
        raw: Var,
        mask: &Tensor,
        mode: IncidenceGrad,
    ) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(raw));
        let (n, m) = (rv.rows(), rv.cols());
        if xv.rows() != n || mask.shape() != rv.shape() {
            return Err(Error::shape("hyper_aggregate", xv.shape(), rv.shape()));
        }
        let mut alpha = Tensor::zeros(n, m);
        for e in 0..m {
            let members: Vec<usize> = (0..n).filter(|&j| mask.get(j, e) > 0.5).collect();
            if members.is_empty() {
                continue;
            }
            match mode {
                IncidenceGrad::StraightThrough => {
                    let w = 1.0 / members.len() as f64;
                    for &j in &members {
                        alpha.set(j, e, w);
                    }
                }
                IncidenceGrad::ScoreWeighted => {
                    let top = members
                        .iter()
                        .map(|&j| rv.get(j, e))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let ws: Vec<f64> = members.iter().map(|&j| (rv.get(j, e) - top).exp()).collect();
                    let z: f64 = ws.iter().sum();
                    for (&j, w) in members.iter().zip(ws) {
                        alpha.set(j, e, w / z);
                    }
                }
            }
        }
        let out = alpha.t_matmul(xv)?;
        let rg = self.rg(&[x, raw]);
        Ok(self.push(
            out,
            Op::HyperAggregate {
                x,
                raw,
                alpha,
                grad_mask: mask.clone(),
            },
            rg,
        ))
    }

    /// `x / ||x||` per row.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        let c = x.cols();
        for i in 0..x.rows() {
            let nrm = (x.row_slice(i).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            norms.push(nrm);
            for j in 0..c {
                out.set(i, j, x.get(i, j) / nrm);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowNormalize(a, norms), rg)
    }

    /// `out[i,j] = ||a_i − b_j||²`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("pairwise_sq_dist", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                let d: f64 = av
                    .row_slice(i)
                    .iter()
                    .zip(bv.row_slice(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out.set(i, j, d);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::PairwiseSqDist(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// First node (in creation order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| {
                let name = n
                    .label
                    .clone()
                    .unwrap_or_else(|| n.op.name().to_string());
                (i, name)
            })
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((index, node)) => Err(Error::NonFinite { node, index }),
            None => Ok(()),
        }
    }

    /// Reverse pass from the scalar `loss`, accumulating into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1, 1]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let emit = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    emit(*a, g.matmul_t(val(*b))?, &mut grads);
                    emit(*b, val(*a).t_matmul(&g)?, &mut grads);
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone(), &mut grads);
                    emit(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    emit(*a, g.clone(), &mut grads);
                    emit(*b, g.map(|x| -x), &mut grads);
                }
                Op::Mul(a, b) => {
                    emit(*a, g.zip_map(val(*b), |x, y| x * y)?, &mut grads);
                    emit(*b, g.zip_map(val(*a), |x, y| x * y)?, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut gr = Tensor::zeros(1, c);
                    for (k, v) in g.data().iter().enumerate() {
                        gr.data_mut()[k % c] += v;
                    }
                    emit(*a, g, &mut grads);
                    emit(*row, gr, &mut grads);
                }
                Op::MulScalar(a, s) => {
                    let k = val(*s).data()[0];
                    let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    emit(*a, g.map(|x| x * k), &mut grads);
                    emit(*s, Tensor::scalar(gs), &mut grads);
                }
                Op::AddScalar(a, s) => {
                    let gs = g.sum();
                    emit(*a, g, &mut grads);
                    emit(*s, Tensor::scalar(gs), &mut grads);
                }
                Op::Scale(a, c) => emit(*a, g.map(|x| x * c), &mut grads),
                Op::Offset(a) => emit(*a, g, &mut grads),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                    emit(*a, ga, &mut grads);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    emit(*a, ga, &mut grads);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(val(*a), |g, x| g * gelu_grad(x))?;
                    emit(*a, ga, &mut grads);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, |g, y| g / (2.0 * y))?;
                    emit(*a, ga, &mut grads);
                }
                Op::Transpose(a) => emit(*a, g.transpose(), &mut grads),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row_slice(r).iter().zip(y.row_slice(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    emit(*a, ga, &mut grads);
                }
                Op::LayerNormRows(a, xhat, inv_std) => {
                    let (r, c) = (xhat.rows(), xhat.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gr = g.row_slice(i);
                        let xr = xhat.row_slice(i);
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            ga.set(i, j, inv_std[i] * (gr[j] - mg - xr[j] * mgx));
                        }
                    }
                    emit(*a, ga, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).rows();
                        emit(p, g.slice_rows(off, off + n), &mut grads);
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = (val(p).rows(), val(p).cols());
                        let mut gp = Tensor::zeros(rows, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                gp.set(i, j, g.get(i, off + j));
                            }
                        }
                        emit(p, gp, &mut grads);
                        off += cols;
                    }
                }
                Op::AvgPool(a, w) => {
                    let x = val(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for t in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = g.get(t, c) / *w as f64;
                            for k in 0..*w {
                                ga.set(t * w + k, c, v);
                            }
                        }
                    }
                    emit(*a, ga, &mut grads);
                }
                Op::Unfold(a) => {
                    let x = val(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    ga.data_mut()[..g.len()].copy_from_slice(g.data());
                    emit(*a, ga, &mut grads);
                }
                Op::Reshape(a) => {
                    let x = val(*a);
                    emit(*a, g.reshape(x.rows(), x.cols())?, &mut grads);
                }
                Op::AffineCols(a, scale) => {
                    let c = g.cols();
                    let mut ga = g;
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= scale[k % c];
                    }
                    emit(*a, ga, &mut grads);
                }
                Op::HyperAggregate {
                    x,
                    raw,
                    alpha,
                    grad_mask,
                } => {
                    // d out_e / d x_j = alpha[j,e];
                    // d out_e / d raw[j,e] = alpha[j,e] · (x_j − out_e)
                    emit(*x, alpha.matmul(&g)?, &mut grads);
                    let xv = val(*x);
                    let out = &node.value;
                    let (n, m) = (alpha.rows(), alpha.cols());
                    let mut gr = Tensor::zeros(n, m);
                    for e in 0..m {
                        let ge = g.row_slice(e);
                        let oe = out.row_slice(e);
                        for j in 0..n {
                            let a = alpha.get(j, e);
                            if a == 0.0 || grad_mask.get(j, e) < 0.5 {
                                continue;
                            }
                            let s: f64 = ge
                                .iter()
                                .zip(xv.row_slice(j).iter().zip(oe))
                                .map(|(g, (xj, o))| g * (xj - o))
                                .sum();
                            gr.set(j, e, a * s);
                        }
                    }
                    emit(*raw, gr, &mut grads);
                }
                Op::RowNormalize(a, norms) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = g.row_slice(i).iter().zip(y.row_slice(i)).map(|(a, b)| a * b).sum();
                        for j in 0..y.cols() {
                            ga.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / norms[i]);
                        }
                    }
                    emit(*a, ga, &mut grads);
                }
                Op::Attention { q, k, v, weights, scale } => {
                    emit(*v, weights.t_matmul(&g)?, &mut grads);
                    // reuse the buffer: dW, then dLogits in place
                    let mut gs = g.matmul_t(val(*v))?;
                    let c = weights.cols();
                    for r in 0..weights.rows() {
                        let wr = weights.row_slice(r);
                        let row = &mut gs.data_mut()[r * c..(r + 1) * c];
                        let dot: f64 = row.iter().zip(wr).map(|(a, b)| a * b).sum();
                        for (x, w) in row.iter_mut().zip(wr) {
                            *x = w * (*x - dot) * scale;
                        }
                    }
                    emit(*q, gs.matmul(val(*k))?, &mut grads);
                    emit(*k, gs.t_matmul(val(*q))?, &mut grads);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let gij = 2.0 * g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            for d in 0..av.cols() {
                                let diff = av.get(i, d) - bv.get(j, d);
                                ga.data_mut()[i * av.cols() + d] += gij * diff;
                                gb.data_mut()[j * bv.cols() + d] -= gij * diff;
                            }
                        }
                    }
                    emit(*a, ga, &mut grads);
                    emit(*b, gb, &mut grads);
                }
                Op::Sum(a) => {
                    let x = val(*a);
                    emit(*a, Tensor::filled(x.rows(), x.cols(), g.data()[0]), &mut grads);
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let v = g.data()[0] / x.len() as f64;
                    emit(*a, Tensor::filled(x.rows(), x.cols(), v), &mut grads);
                }
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable row softmax on a plain tensor.
pub fn softmax_rows_tensor(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    softmax_rows_in_place(&mut out);
    out
}

fn softmax_rows_in_place(out: &mut Tensor) {
    let c = out.cols();
    for r in 0..out.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}
