//! Forward kernels shared by the graph ops and the standalone functions.

use super::graph::AttentionMask;
use super::{dot, Tensor};
use crate::error::{Error, Result};

pub(crate) const MASK_PENALTY: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// In-place softmax of a score row. Masked entries get the additive penalty
/// before normalization and are then set to exactly zero.
pub(crate) fn masked_softmax_row(scores: &mut [f64], allowed: Option<&[bool]>, row: usize) -> Result<()> {
    if let Some(allowed) = allowed {
        if !allowed.iter().any(|&a| a) {
            return Err(Error::InvalidMask { row });
        }
        for (s, &a) in scores.iter_mut().zip(allowed) {
            if !a {
                *s += MASK_PENALTY;
            }
        }
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    if let Some(allowed) = allowed {
        for (s, &a) in scores.iter_mut().zip(allowed) {
            if !a {
                *s = 0.0;
            }
        }
    }
    Ok(())
}

/// Attention for one head over column block `[offset, offset + width)` of
/// q/k/v. Returns the `[tq × tk]` weights and writes the head output into
/// the same column block of `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    offset: usize,
    width: usize,
    mask: Option<&AttentionMask>,
    out: &mut [f64],
) -> Result<Vec<f64>> {
    let tq = q.rows();
    let tk = k.rows();
    let dq = q.cols();
    let dv = v.cols();
    let scale = 1.0 / (width as f64).sqrt();
    let mut weights = vec![0.0; tq * tk];
    for i in 0..tq {
        let qi = &q.data()[i * dq + offset..i * dq + offset + width];
        let row = &mut weights[i * tk..(i + 1) * tk];
        for (j, w) in row.iter_mut().enumerate() {
            let kj = &k.data()[j * dq + offset..j * dq + offset + width];
            *w = dot(qi, kj) * scale;
        }
        masked_softmax_row(row, mask.map(|m| m.row(i)), i)?;
        let out_row = &mut out[i * dv + offset..i * dv + offset + width];
        for (j, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let vj = &v.data()[j * dv + offset..j * dv + offset + width];
            for (o, x) in out_row.iter_mut().zip(vj) {
                *o += w * x;
            }
        }
    }
    Ok(weights)
}

pub(crate) fn check_attention_shapes(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<()> {
    let (tq, d) = q.require_matrix("attention queries")?;
    let (tk, dk) = k.require_matrix("attention keys")?;
    let (tv, dv) = v.require_matrix("attention values")?;
    if d == 0 || d != dk || d != dv || tk != tv || tk == 0 {
        return Err(Error::shape(format!(
            "attention shapes q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} not divisible into {heads} heads")));
    }
    if let Some(m) = mask {
        if m.rows() != tq || m.cols() != tk {
            return Err(Error::shape(format!(
                "mask {}x{} does not match scores {tq}x{tk}",
                m.rows(),
                m.cols()
            )));
        }
    }
    Ok(())
}

/// Single-head scaled dot-product attention. Returns `(output, weights)`.
pub fn scaled_dot_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor, Tensor)> {
    check_attention_shapes(queries, keys, values, 1, mask)?;
    let (tq, d) = (queries.rows(), queries.cols());
    let mut out = vec![0.0; tq * d];
    let weights = attend_head(queries, keys, values, 0, d, mask, &mut out)?;
    Ok((Tensor::matrix(tq, d, out)?, Tensor::matrix(tq, keys.rows(), weights)?))
}

pub(crate) struct LayerNormForward {
    pub out: Tensor,
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<LayerNormForward> {
    let (t, d) = x.require_matrix("layer_norm input")?;
    if d < 2 {
        return Err(Error::shape(format!("layer_norm needs width >= 2, got {d}")));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!(
            "layer_norm gain/bias length {}/{} != width {d}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; t * d];
    let mut normalized = vec![0.0; t * d];
    let mut inv_std = vec![0.0; t];
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let n = (row[j] - mean) * inv;
            normalized[i * d + j] = n;
            out[i * d + j] = n * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormForward {
        out: Tensor::matrix(t, d, out)?,
        normalized,
        inv_std,
    })
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, epsilon: f64) -> Result<Tensor> {
    Ok(layer_norm_forward(x, gain, bias, epsilon)?.out)
}

/// Mean negative log-likelihood over positions whose target is not
/// `ignore_index`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize], ignore_index: usize) -> Result<f64> {
    let (t, v) = logits.require_matrix("logits")?;
    if targets.len() != t {
        return Err(Error::shape(format!("{} targets for {t} logit rows", targets.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &y) in targets.iter().enumerate() {
        if y == ignore_index {
            continue;
        }
        if y >= v {
            return Err(Error::InvalidInput(format!("target {y} outside vocabulary of {v}")));
        }
        total -= log_softmax_row(logits.row(i))[y];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / count as f64)
}
