//! Computation record for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it saved
//! for the backward pass. [`Graph::backward`] walks the nodes once, in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes created before it.

use std::collections::HashMap;

use super::ops::{attend_head, check_attention_shapes, gelu, gelu_grad, layer_norm_forward, log_softmax_row};
use super::{matmul_a_bt_into, matmul_at_b_into, Gradients, ParamId, ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Boolean `[rows × cols]` mask; `true` marks a key a query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_allowed(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask of {} entries for {rows}x{cols}",
                allowed.len()
            )));
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(rows: usize, cols: usize) -> Self {
        let allowed = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| j <= i))
            .collect();
        Self { rows, cols, allowed }
    }

    /// Every query sees exactly the keys flagged valid.
    pub fn key_padding(rows: usize, key_valid: &[bool]) -> Self {
        let cols = key_valid.len();
        let allowed = (0..rows).flat_map(|_| key_valid.iter().copied()).collect();
        Self { rows, cols, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        // per head, row-major [tq × tk]
        weights: Vec<Vec<f64>>,
    },
    Nll {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    WeightedSum(NodeId, Vec<f64>),
    Scale(NodeId, f64),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed ops over a read-only parameter set.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, node);
        node
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds vector `b[d]` to every row of `x[T × d]`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (_, d) = vx.require_matrix("add_row input")?;
        if vb.len() != d {
            return Err(Error::shape(format!("row bias of {} for width {d}", vb.len())));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let fwd = layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            fwd.out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized: fwd.normalized,
                inv_std: fwd.inv_std,
            },
        ))
    }

    /// Gathers rows of `table[V × d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (v, d) = t.require_matrix("embedding table")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidInput(format!("token id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.require_matrix("concat_rows part")?;
            if c != d {
                return Err(Error::shape(format!("concat_rows widths {c} vs {d}")));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, d, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Multi-head scaled dot-product attention: the width is split into
    /// `heads` contiguous column blocks, each attended independently.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        check_attention_shapes(vq, vk, vv, heads, mask)?;
        let (tq, d) = (vq.rows(), vq.cols());
        let width = d / heads;
        let mut out = vec![0.0; tq * d];
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            weights.push(attend_head(vq, vk, vv, h * width, width, mask, &mut out)?);
        }
        let out = Tensor::matrix(tq, d, out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, weights }))
    }

    /// Per-head `[tq × tk]` weights saved by an attention node.
    pub fn attention_weights(&self, node: NodeId) -> Option<&[Vec<f64>]> {
        match &self.nodes[node.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// `Σ_t w_t · (−log softmax(logits_t)[targets_t])`; rows with zero weight
    /// contribute nothing.
    pub fn nll(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId> {
        let l = self.value(logits);
        let (t, v) = l.require_matrix("logits")?;
        if targets.len() != t || weights.len() != t {
            return Err(Error::shape(format!(
                "{} targets / {} weights for {t} logit rows",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for i in 0..t {
            let ls = log_softmax_row(l.row(i));
            if weights[i] != 0.0 {
                if targets[i] >= v {
                    return Err(Error::InvalidInput(format!(
                        "target {} outside vocabulary of {v}",
                        targets[i]
                    )));
                }
                total -= weights[i] * ls[targets[i]];
            }
            for (p, x) in probs[i * v..(i + 1) * v].iter_mut().zip(&ls) {
                *p = x.exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Mean cross-entropy over positions whose target differs from `ignore`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], ignore: usize) -> Result<NodeId> {
        let count = targets.iter().filter(|&&t| t != ignore).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let w: Vec<f64> = targets
            .iter()
            .map(|&t| if t == ignore { 0.0 } else { 1.0 / count as f64 })
            .collect();
        self.nll(logits, targets, &w)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(Error::shape("weighted_sum weight length"));
        }
        let s = v.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale(factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let data = self.value(x).data().to_vec();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Back-propagates from the scalar node `output`, returning parameter
    /// gradients.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar of shape {:?}",
                out_val.shape()
            )));
        }
        if !out_val.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", out_val.item())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out_val.shape(), 1.0));
        let mut result = Gradients::new(self.params.len());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => result.add_to(*pid, &g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = (va.rows(), va.cols());
                    let n = vb.cols();
                    let mut ga = vec![0.0; m * k];
                    matmul_a_bt_into(g.data(), vb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_at_b_into(va.data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, ga)?);
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, gb)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(x, b) => {
                    let d = g.cols();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let bshape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::new(bshape, gb)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let mut gx = g;
                    for (o, &xv) in gx.data_mut().iter_mut().zip(vx.data()) {
                        *o *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let vg = self.value(*gain);
                    let (t, d) = (g.rows(), g.cols());
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    let mut gx = vec![0.0; t * d];
                    let mut dn = vec![0.0; d];
                    for i in 0..t {
                        let gy = g.row(i);
                        let n = &normalized[i * d..(i + 1) * d];
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for j in 0..d {
                            ggain[j] += gy[j] * n[j];
                            gbias[j] += gy[j];
                            dn[j] = gy[j] * vg.data()[j];
                            sum_dn += dn[j];
                            sum_dn_n += dn[j] * n[j];
                        }
                        let scale = inv_std[i] / d as f64;
                        for j in 0..d {
                            gx[i * d + j] = scale * (d as f64 * dn[j] - sum_dn - n[j] * sum_dn_n);
                        }
                    }
                    let gshape = vg.shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *gain, Tensor::new(gshape, ggain)?);
                    accumulate(&mut grads, *bias, Tensor::new(bshape, gbias)?);
                    accumulate(&mut grads, *x, Tensor::matrix(t, d, gx)?);
                }
                Op::Embedding { table, ids } => {
                    let vt = self.value(*table);
                    let mut gt = Tensor::zeros(vt.shape());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::ConcatRows(parts) => {
                    let d = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let slice = g.data()[offset * d..(offset + r) * d].to_vec();
                        accumulate(&mut grads, p, Tensor::matrix(r, d, slice)?);
                        offset += r;
                    }
                }
                Op::Attention { q, k, v, heads, weights } => {
                    let (gq, gk, gv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *heads,
                        weights,
                        &g,
                    )?;
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Nll {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let upstream = g.item();
                    let vl = self.value(*logits);
                    let (t, vsize) = (vl.rows(), vl.cols());
                    let mut gl = vec![0.0; t * vsize];
                    for i in 0..t {
                        let w = weights[i];
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut gl[i * vsize..(i + 1) * vsize];
                        for (o, p) in row.iter_mut().zip(&probs[i * vsize..(i + 1) * vsize]) {
                            *o = upstream * w * p;
                        }
                        row[targets[i]] -= upstream * w;
                    }
                    accumulate(&mut grads, *logits, Tensor::matrix(t, vsize, gl)?);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&shape, g.item()));
                }
                Op::WeightedSum(x, w) => {
                    let shape = self.value(*x).shape().to_vec();
                    let up = g.item();
                    let data = w.iter().map(|wi| wi * up).collect();
                    accumulate(&mut grads, *x, Tensor::new(shape, data)?);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::new(shape, g.into_data())?);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.scale(*c);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(result)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    weights: &[Vec<f64>],
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (tq, d) = (q.rows(), q.cols());
    let tk = k.rows();
    let width = d / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let mut gq = vec![0.0; tq * d];
    let mut gk = vec![0.0; tk * d];
    let mut gv = vec![0.0; tk * d];
    let mut ga = vec![0.0; tk];
    for (h, w) in weights.iter().enumerate() {
        let off = h * width;
        for i in 0..tq {
            let go = &g.data()[i * d + off..i * d + off + width];
            let wrow = &w[i * tk..(i + 1) * tk];
            // dA_ij = dO_i · V_j ; dV_j += A_ij dO_i
            let mut dot_aw = 0.0;
            for j in 0..tk {
                let vj = &v.data()[j * d + off..j * d + off + width];
                ga[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot_aw += ga[j] * wrow[j];
                let a = wrow[j];
                if a != 0.0 {
                    for (o, x) in gv[j * d + off..j * d + off + width].iter_mut().zip(go) {
                        *o += a * x;
                    }
                }
            }
            let qi = &q.data()[i * d + off..i * d + off + width];
            for j in 0..tk {
                let ds = wrow[j] * (ga[j] - dot_aw) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k.data()[j * d + off..j * d + off + width];
                for (o, x) in gq[i * d + off..i * d + off + width].iter_mut().zip(kj) {
                    *o += ds * x;
                }
                for (o, x) in gk[j * d + off..j * d + off + width].iter_mut().zip(qi) {
                    *o += ds * x;
                }
            }
        }
    }
    Ok((
        Tensor::matrix(tq, d, gq)?,
        Tensor::matrix(tk, d, gk)?,
        Tensor::matrix(tk, d, gv)?,
    ))
}
