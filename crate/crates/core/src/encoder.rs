//! Cross-modal encoder: a visual stream over region features, a language
//! stream over the retrieved-caption context, and cross-modal layers in
//! which each stream attends to the other.
//!
//! All sublayers are post-norm: `x ← LN(x + f(x))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention, ffn, init_attention, init_ffn, init_layer_norm, init_linear, layer_norm, linear};
use crate::tensor::{AttentionMask, Graph, NodeId, ParamGroup, ParameterSet, Tensor};
use crate::text::TokenContext;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub language_layers: usize,
    pub visual_layers: usize,
    pub cross_layers: usize,
    pub ffn_hidden: usize,
    /// Width of one region feature vector.
    pub region_dim: usize,
    pub vocab_size: usize,
    /// Rows of the position table; contexts may not be longer.
    pub max_text_len: usize,
    /// Rows of the segment table; later captions share the last row.
    pub max_segments: usize,
    #[serde(default)]
    pub box_geometry: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            language_layers: 2,
            visual_layers: 2,
            cross_layers: 2,
            ffn_hidden: 128,
            region_dim: 32,
            vocab_size: 1000,
            max_text_len: crate::text::DEFAULT_MAX_CONTEXT_LEN,
            max_segments: 8,
            box_geometry: false,
        }
    }
}

impl EncoderConfig {
    /// `Error::Config` listing every problem, if any.
    pub fn check(&self) -> Result<()> {
        let issues = validate_config(self);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Every violated invariant; empty when the configuration is usable.
pub fn validate_config(config: &EncoderConfig) -> Vec<String> {
    let mut issues = Vec::new();
    let positive = [
        ("hidden", config.hidden),
        ("heads", config.heads),
        ("language_layers", config.language_layers),
        ("visual_layers", config.visual_layers),
        ("cross_layers", config.cross_layers),
        ("ffn_hidden", config.ffn_hidden),
        ("region_dim", config.region_dim),
        ("max_segments", config.max_segments),
    ];
    for (name, value) in positive {
        if value == 0 {
            issues.push(format!("encoder {name} must be at least 1"));
        }
    }
    if config.heads > 0 && config.hidden % config.heads != 0 {
        issues.push(format!(
            "encoder hidden size {} is not divisible by {} heads",
            config.hidden, config.heads
        ));
    }
    if config.hidden == 1 {
        issues.push("encoder hidden size must be at least 2 for layer norm".into());
    }
    if config.vocab_size <= crate::text::NUM_RESERVED {
        issues.push(format!(
            "encoder vocab_size {} leaves no room beyond the reserved tokens",
            config.vocab_size
        ));
    }
    if config.max_text_len < 2 {
        issues.push("encoder max_text_len must hold at least [CLS, SEP]".into());
    }
    issues
}

/// The model's view of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures {
    /// `[N × d_v]`
    pub features: Tensor,
    /// Optional normalized `[N × 4]` box geometry.
    pub boxes: Option<Tensor>,
    blacked_out: bool,
}

impl RegionFeatures {
    pub fn new(features: Tensor) -> Result<Self> {
        features.require_matrix("region features")?;
        Ok(Self {
            features,
            boxes: None,
            blacked_out: false,
        })
    }

    pub fn with_boxes(mut self, boxes: Tensor) -> Result<Self> {
        let (n, c) = boxes.require_matrix("box geometry")?;
        if n != self.num_regions() || c != 4 {
            return Err(Error::shape(format!(
                "box geometry {n}x{c} for {} regions",
                self.num_regions()
            )));
        }
        self.boxes = Some(boxes);
        Ok(self)
    }

    /// Same shape, every value exactly zero.
    pub fn blacked_out(&self) -> Self {
        Self {
            features: Tensor::zeros(self.features.shape()),
            boxes: self.boxes.as_ref().map(|b| Tensor::zeros(b.shape())),
            blacked_out: true,
        }
    }

    pub fn is_blacked_out(&self) -> bool {
        self.blacked_out
    }

    pub fn num_regions(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Encoder outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[N × d]`
    pub visual: Tensor,
    /// `[|L| × d]`, one row per context position including padding.
    pub textual: Tensor,
    /// `false` at padded textual positions.
    pub text_valid: Vec<bool>,
}

impl EncoderOutput {
    pub fn visual_len(&self) -> usize {
        self.visual.rows()
    }

    pub fn text_len(&self) -> usize {
        self.textual.rows()
    }

    /// Places both blocks in `g` as constants.
    pub fn to_nodes(&self, g: &mut Graph<'_>) -> EncodedNodes {
        EncodedNodes {
            visual: g.input(self.visual.clone()),
            textual: g.input(self.textual.clone()),
            text_valid: self.text_valid.clone(),
        }
    }
}

/// Encoder outputs inside a graph, for end-to-end gradients.
#[derive(Debug, Clone)]
pub struct EncodedNodes {
    pub visual: NodeId,
    pub textual: NodeId,
    pub text_valid: Vec<bool>,
}

impl EncodedNodes {
    pub fn to_output(&self, g: &Graph<'_>) -> EncoderOutput {
        EncoderOutput {
            visual: g.value(self.visual).clone(),
            textual: g.value(self.textual).clone(),
            text_valid: self.text_valid.clone(),
        }
    }
}

/// Adds every encoder parameter to `ps` under the `enc.` prefix.
pub fn init_params<R: Rng>(ps: &mut ParameterSet, config: &EncoderConfig, rng: &mut R) -> Result<()> {
    config.check()?;
    let d = config.hidden;
    let grp = ParamGroup::Encoder;
    init_linear(ps, "enc.vis_proj", config.region_dim, d, grp, rng)?;
    init_layer_norm(ps, "enc.vis_ln", d, grp)?;
    if config.box_geometry {
        init_linear(ps, "enc.box_proj", 4, d, grp, rng)?;
        init_layer_norm(ps, "enc.box_ln", d, grp)?;
    }
    ps.normal("enc.tok_emb", &[config.vocab_size, d], 0.02, grp, rng)?;
    ps.normal("enc.pos_emb", &[config.max_text_len, d], 0.02, grp, rng)?;
    ps.normal("enc.seg_emb", &[config.max_segments, d], 0.02, grp, rng)?;
    init_layer_norm(ps, "enc.emb_ln", d, grp)?;
    for (stream, count) in [("lang", config.language_layers), ("vis", config.visual_layers)] {
        for i in 0..count {
            let p = format!("enc.{stream}{i}");
            init_attention(ps, &format!("{p}.att"), d, grp, rng)?;
            init_layer_norm(ps, &format!("{p}.ln1"), d, grp)?;
            init_ffn(ps, &format!("{p}.ffn"), d, config.ffn_hidden, grp, rng)?;
            init_layer_norm(ps, &format!("{p}.ln2"), d, grp)?;
        }
    }
    for i in 0..config.cross_layers {
        let p = format!("enc.x{i}");
        for side in ["l", "v"] {
            init_attention(ps, &format!("{p}.{side}.cross"), d, grp, rng)?;
            init_layer_norm(ps, &format!("{p}.{side}.ln1"), d, grp)?;
            init_ffn(ps, &format!("{p}.{side}.ffn"), d, config.ffn_hidden, grp, rng)?;
            init_layer_norm(ps, &format!("{p}.{side}.ln2"), d, grp)?;
        }
    }
    Ok(())
}

fn residual_norm(g: &mut Graph<'_>, ln: &str, x: NodeId, update: NodeId) -> Result<NodeId> {
    let s = g.add(x, update)?;
    layer_norm(g, ln, s)
}

fn ffn_sublayer(g: &mut Graph<'_>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let f = ffn(g, &format!("{prefix}.ffn"), x)?;
    residual_norm(g, &format!("{prefix}.ln2"), x, f)
}

fn self_layer(g: &mut Graph<'_>, prefix: &str, x: NodeId, heads: usize, mask: Option<&AttentionMask>) -> Result<NodeId> {
    let (a, _) = attention(g, &format!("{prefix}.att"), x, x, heads, mask)?;
    let h = residual_norm(g, &format!("{prefix}.ln1"), x, a)?;
    ffn_sublayer(g, prefix, h)
}

/// Builds the encoder forward pass inside `g`.
pub fn encode_graph(
    g: &mut Graph<'_>,
    config: &EncoderConfig,
    regions: &RegionFeatures,
    context: &TokenContext,
) -> Result<EncodedNodes> {
    let (n, dv) = regions.features.require_matrix("region features")?;
    if dv != config.region_dim {
        return Err(Error::shape(format!(
            "region features have width {dv}, encoder expects {}",
            config.region_dim
        )));
    }
    if n == 0 {
        return Err(Error::shape("no regions"));
    }
    let t = context.padded_len();
    if t == 0 || t > config.max_text_len {
        return Err(Error::shape(format!(
            "context length {t} outside 1..={}",
            config.max_text_len
        )));
    }
    if let Some(&bad) = context.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "context token {bad} outside encoder vocabulary of {}",
            config.vocab_size
        )));
    }

    // Visual stream input.
    let feats = g.input(regions.features.clone());
    let v = linear(g, "enc.vis_proj", feats)?;
    let mut v = layer_norm(g, "enc.vis_ln", v)?;
    if config.box_geometry {
        let boxes = regions
            .boxes
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("encoder expects box geometry".into()))?;
        let b = g.input(boxes.clone());
        let b = linear(g, "enc.box_proj", b)?;
        let b = layer_norm(g, "enc.box_ln", b)?;
        let sum = g.add(v, b)?;
        v = g.scale(sum, 0.5);
    }

    // Language stream input: token + absolute position + segment.
    let tok = g.param_named("enc.tok_emb")?;
    let pos = g.param_named("enc.pos_emb")?;
    let seg = g.param_named("enc.seg_emb")?;
    let positions: Vec<usize> = (0..t).collect();
    let segments: Vec<usize> = context
        .segment_ids()
        .into_iter()
        .map(|s| s.min(config.max_segments - 1))
        .collect();
    let te = g.embedding(tok, &context.ids)?;
    let pe = g.embedding(pos, &positions)?;
    let se = g.embedding(seg, &segments)?;
    let l = g.add(te, pe)?;
    let l = g.add(l, se)?;
    let mut l = layer_norm(g, "enc.emb_ln", l)?;

    let valid = context.valid_mask();
    let text_self_mask = AttentionMask::key_padding(t, &valid);
    let vis_to_text_mask = AttentionMask::key_padding(n, &valid);

    for i in 0..config.language_layers {
        l = self_layer(g, &format!("enc.lang{i}"), l, config.heads, Some(&text_self_mask))?;
    }
    for i in 0..config.visual_layers {
        v = self_layer(g, &format!("enc.vis{i}"), v, config.heads, None)?;
    }
    for i in 0..config.cross_layers {
        let p = format!("enc.x{i}");
        let (l_att, _) = attention(g, &format!("{p}.l.cross"), l, v, config.heads, None)?;
        let (v_att, _) = attention(g, &format!("{p}.v.cross"), v, l, config.heads, Some(&vis_to_text_mask))?;
        let l1 = residual_norm(g, &format!("{p}.l.ln1"), l, l_att)?;
        let v1 = residual_norm(g, &format!("{p}.v.ln1"), v, v_att)?;
        l = ffn_sublayer(g, &format!("{p}.l"), l1)?;
        v = ffn_sublayer(g, &format!("{p}.v"), v1)?;
    }
    Ok(EncodedNodes {
        visual: v,
        textual: l,
        text_valid: valid,
    })
}

/// Inference-only encoding.
pub fn encode(
    regions: &RegionFeatures,
    context: &TokenContext,
    params: &ParameterSet,
    config: &EncoderConfig,
) -> Result<EncoderOutput> {
    let mut g = Graph::new(params);
    let nodes = encode_graph(&mut g, config, regions, context)?;
    Ok(nodes.to_output(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode_context, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            hidden: 32,
            heads: 4,
            language_layers: 1,
            visual_layers: 1,
            cross_layers: 1,
            ffn_hidden: 48,
            region_dim: 32,
            vocab_size: 40,
            max_text_len: 16,
            max_segments: 4,
            box_geometry: false,
        }
    }

    #[test]
    fn config_findings() {
        assert!(validate_config(&tiny()).is_empty());
        let c = EncoderConfig {
            hidden: 30,
            ..tiny()
        };
        assert!(validate_config(&c)[0].contains("divisible"));
        let c = EncoderConfig {
            cross_layers: 0,
            ..tiny()
        };
        assert!(validate_config(&c)[0].contains("cross_layers"));
        let c = EncoderConfig {
            hidden: 30,
            cross_layers: 0,
            ..tiny()
        };
        assert_eq!(validate_config(&c).len(), 2);
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParameterSet::new();
        init_params(&mut ps, &cfg, &mut rng).unwrap();
        let feats: Vec<f64> = (0..8 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let regions = RegionFeatures::new(Tensor::matrix(8, 32, feats).unwrap()).unwrap();
        let vocab = Vocabulary::build(&["a red cube", "two blue balls"], 1).unwrap();
        let ctx = encode_context(&["a red cube", "two blue balls"], &vocab, 16).unwrap();
        let out = encode(&regions, &ctx, &ps, &cfg).unwrap();
        assert_eq!(out.visual.shape(), &[8, 32]);
        assert_eq!(out.textual.shape(), &[16, 32]);
        assert_eq!(out, encode(&regions, &ctx, &ps, &cfg).unwrap());

        let dark = regions.blacked_out();
        assert!(dark.is_blacked_out());
        assert!(dark.features.data().iter().all(|&x| x == 0.0));
        let out = encode(&dark, &ctx, &ps, &cfg).unwrap();
        assert!(out.visual.is_finite() && out.textual.is_finite());

        let wrong = RegionFeatures::new(Tensor::zeros(&[8, 31])).unwrap();
        assert!(matches!(encode(&wrong, &ctx, &ps, &cfg), Err(Error::Shape(_))));
    }
}
