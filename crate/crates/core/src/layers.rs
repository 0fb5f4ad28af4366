//! Named building blocks shared by the encoder and decoder. A block owns the
//! parameters `"{name}.w"`, `"{name}.b"` (linear) or `"{name}.g"`,
//! `"{name}.b"` (layer norm).

use rand::Rng;

use crate::error::Result;
use crate::tensor::{AttentionMask, Graph, NodeId, ParamGroup, ParameterSet};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn init_linear<R: Rng>(
    ps: &mut ParameterSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    group: ParamGroup,
    rng: &mut R,
) -> Result<()> {
    ps.xavier(format!("{name}.w"), fan_in, fan_out, group, rng)?;
    ps.constant(format!("{name}.b"), &[fan_out], 0.0, group)?;
    Ok(())
}

pub(crate) fn init_layer_norm(ps: &mut ParameterSet, name: &str, d: usize, group: ParamGroup) -> Result<()> {
    ps.constant(format!("{name}.g"), &[d], 1.0, group)?;
    ps.constant(format!("{name}.b"), &[d], 0.0, group)?;
    Ok(())
}

/// Query, key, value and output projections of one attention block.
pub(crate) fn init_attention<R: Rng>(ps: &mut ParameterSet, name: &str, d: usize, group: ParamGroup, rng: &mut R) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{name}.{p}"), d, d, group, rng)?;
    }
    Ok(())
}

pub(crate) fn init_ffn<R: Rng>(ps: &mut ParameterSet, name: &str, d: usize, hidden: usize, group: ParamGroup, rng: &mut R) -> Result<()> {
    init_linear(ps, &format!("{name}.fc1"), d, hidden, group, rng)?;
    init_linear(ps, &format!("{name}.fc2"), hidden, d, group, rng)
}

pub(crate) fn linear(g: &mut Graph<'_>, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param_named(&format!("{name}.w"))?;
    let b = g.param_named(&format!("{name}.b"))?;
    g.linear(x, w, b)
}

pub(crate) fn layer_norm(g: &mut Graph<'_>, name: &str, x: NodeId) -> Result<NodeId> {
    let gain = g.param_named(&format!("{name}.g"))?;
    let bias = g.param_named(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Projected multi-head attention of `queries` over `memory`. Returns the
/// output projection and the attention node (for its weights).
pub(crate) fn attention(
    g: &mut Graph<'_>,
    name: &str,
    queries: NodeId,
    memory: NodeId,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<(NodeId, NodeId)> {
    let q = linear(g, &format!("{name}.q"), queries)?;
    let k = linear(g, &format!("{name}.k"), memory)?;
    let v = linear(g, &format!("{name}.v"), memory)?;
    let att = g.attention(q, k, v, heads, mask)?;
    let out = linear(g, &format!("{name}.o"), att)?;
    Ok((out, att))
}

pub(crate) fn ffn(g: &mut Graph<'_>, name: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, &format!("{name}.fc2"), h)
}
