//! Pre-norm autoregressive decoder. Each layer applies causal
//! self-attention, then cross-attention over `[visual ; textual]` encoder
//! rows under one joint softmax, then a feed-forward block.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedNodes, EncoderOutput};
use crate::error::{Error, Result};
use crate::layers::{attention, ffn, init_attention, init_ffn, init_layer_norm, init_linear, layer_norm, linear};
use crate::tensor::{log_softmax_row, AttentionMask, Graph, NodeId, ParamGroup, ParameterSet};
use crate::text::{BOS, EOS};

pub const DEFAULT_BEAM_WIDTH: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    /// Generated tokens per caption, EOS included, BOS excluded.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            layers: 4,
            ffn_hidden: 128,
            vocab_size: 1000,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl DecoderConfig {
    pub fn check(&self) -> Result<()> {
        let issues = validate_config(self);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

pub fn validate_config(config: &DecoderConfig) -> Vec<String> {
    let mut issues = Vec::new();
    for (name, value) in [
        ("hidden", config.hidden),
        ("heads", config.heads),
        ("layers", config.layers),
        ("ffn_hidden", config.ffn_hidden),
        ("max_len", config.max_len),
    ] {
        if value == 0 {
            issues.push(format!("decoder {name} must be at least 1"));
        }
    }
    if config.heads > 0 && config.hidden % config.heads != 0 {
        issues.push(format!(
            "decoder hidden size {} is not divisible by {} heads",
            config.hidden, config.heads
        ));
    }
    if config.hidden == 1 {
        issues.push("decoder hidden size must be at least 2 for layer norm".into());
    }
    if config.vocab_size < 2 {
        issues.push(format!("decoder vocab_size {} < 2", config.vocab_size));
    }
    issues
}

/// A generated caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionHypothesis {
    /// `BOS` followed by the generated tokens.
    pub tokens: Vec<usize>,
    /// Summed log-probability of the generated tokens.
    pub log_prob: f64,
    pub finished: bool,
}

impl CaptionHypothesis {
    /// Generated tokens without BOS or the trailing EOS.
    pub fn words(&self) -> &[usize] {
        let body = &self.tokens[1..];
        match body.last() {
            Some(&EOS) => &body[..body.len() - 1],
            _ => body,
        }
    }
}

/// Higher score first; equal scores put the lexicographically smaller
/// token sequence first.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

/// Cross-attention weights of one generated caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    #[serde(default)]
    pub image_id: String,
    pub visual_len: usize,
    pub text_len: usize,
    /// `weights[layer][head][step]` is a distribution over the
    /// `visual_len + text_len` encoder rows.
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionRecord {
    pub fn num_steps(&self) -> usize {
        self.weights.first().and_then(|l| l.first()).map_or(0, Vec::len)
    }
}

/// Per layer, per head: the newest position's cross-attention weights.
pub type StepAttention = Vec<Vec<Vec<f64>>>;

pub fn init_params<R: Rng>(ps: &mut ParameterSet, config: &DecoderConfig, rng: &mut R) -> Result<()> {
    config.check()?;
    let d = config.hidden;
    let grp = ParamGroup::Decoder;
    ps.normal("dec.tok_emb", &[config.vocab_size, d], 0.02, grp, rng)?;
    ps.normal("dec.pos_emb", &[config.max_len, d], 0.02, grp, rng)?;
    for i in 0..config.layers {
        let p = format!("dec.l{i}");
        init_layer_norm(ps, &format!("{p}.ln1"), d, grp)?;
        init_attention(ps, &format!("{p}.self"), d, grp, rng)?;
        init_layer_norm(ps, &format!("{p}.ln2"), d, grp)?;
        init_attention(ps, &format!("{p}.cross"), d, grp, rng)?;
        init_layer_norm(ps, &format!("{p}.ln3"), d, grp)?;
        init_ffn(ps, &format!("{p}.ffn"), d, config.ffn_hidden, grp, rng)?;
    }
    init_layer_norm(ps, "dec.ln_f", d, grp)?;
    init_linear(ps, "dec.head", d, config.vocab_size, grp, rng)
}

/// Logits for every input position plus each layer's cross-attention node.
#[derive(Debug, Clone)]
pub struct DecoderForward {
    /// `[T × |V|]`
    pub logits: NodeId,
    pub cross_attention: Vec<NodeId>,
}

/// Runs the decoder over `inputs` (starting with BOS) inside `g`.
pub fn decoder_graph(
    g: &mut Graph<'_>,
    config: &DecoderConfig,
    memory: &EncodedNodes,
    inputs: &[usize],
) -> Result<DecoderForward> {
    let t = inputs.len();
    if t == 0 {
        return Err(Error::InvalidInput("decoder input is empty".into()));
    }
    if t > config.max_len {
        return Err(Error::InvalidInput(format!(
            "decoder prefix of {t} tokens exceeds max length {}",
            config.max_len
        )));
    }
    if let Some(&bad) = inputs.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token {bad} outside decoder vocabulary of {}",
            config.vocab_size
        )));
    }
    let n = g.value(memory.visual).rows();
    if g.value(memory.textual).rows() != memory.text_valid.len() {
        return Err(Error::shape("textual block and its padding mask differ in length"));
    }
    let mem = g.concat_rows(&[memory.visual, memory.textual])?;
    let mut mem_valid = vec![true; n];
    mem_valid.extend_from_slice(&memory.text_valid);
    let cross_mask = AttentionMask::key_padding(t, &mem_valid);
    let causal = AttentionMask::causal(t, t);

    let tok = g.param_named("dec.tok_emb")?;
    let pos = g.param_named("dec.pos_emb")?;
    let positions: Vec<usize> = (0..t).collect();
    let te = g.embedding(tok, inputs)?;
    let pe = g.embedding(pos, &positions)?;
    let mut x = g.add(te, pe)?;
    let mut cross_attention = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let p = format!("dec.l{i}");
        let a = layer_norm(g, &format!("{p}.ln1"), x)?;
        let (sa, _) = attention(g, &format!("{p}.self"), a, a, config.heads, Some(&causal))?;
        x = g.add(x, sa)?;
        let b = layer_norm(g, &format!("{p}.ln2"), x)?;
        let (ca, weights) = attention(g, &format!("{p}.cross"), b, mem, config.heads, Some(&cross_mask))?;
        cross_attention.push(weights);
        x = g.add(x, ca)?;
        let c = layer_norm(g, &format!("{p}.ln3"), x)?;
        let f = ffn(g, &format!("{p}.ffn"), c)?;
        x = g.add(x, f)?;
    }
    let x = layer_norm(g, "dec.ln_f", x)?;
    let logits = linear(g, "dec.head", x)?;
    Ok(DecoderForward {
        logits,
        cross_attention,
    })
}

/// `Σ_i w_i · (−log P(tokens[i+1] | tokens[..=i]))` for a sequence starting
/// with BOS. `weights` has one entry per predicted token.
pub fn sequence_nll_graph(
    g: &mut Graph<'_>,
    config: &DecoderConfig,
    memory: &EncodedNodes,
    tokens: &[usize],
    weights: &[f64],
) -> Result<NodeId> {
    if tokens.len() < 2 || tokens[0] != BOS {
        return Err(Error::InvalidInput(
            "sequence must start with BOS and contain at least one predicted token".into(),
        ));
    }
    let fwd = decoder_graph(g, config, memory, &tokens[..tokens.len() - 1])?;
    g.nll(fwd.logits, &tokens[1..], weights)
}

/// Mean per-step negative log-likelihood of `target` (`BOS … EOS`).
pub fn teacher_forced_loss_graph(
    g: &mut Graph<'_>,
    config: &DecoderConfig,
    memory: &EncodedNodes,
    target: &[usize],
) -> Result<NodeId> {
    check_target(target)?;
    let steps = target.len() - 1;
    sequence_nll_graph(g, config, memory, target, &vec![1.0 / steps as f64; steps])
}

fn check_target(target: &[usize]) -> Result<()> {
    if target.len() < 2 {
        return Err(Error::InvalidInput("target must contain BOS and EOS".into()));
    }
    if target[0] != BOS || target[target.len() - 1] != EOS {
        return Err(Error::InvalidInput("target must start with BOS and end with EOS".into()));
    }
    Ok(())
}

pub fn teacher_forced_loss(
    encoder_out: &EncoderOutput,
    target: &[usize],
    params: &ParameterSet,
    config: &DecoderConfig,
) -> Result<f64> {
    let mut g = Graph::new(params);
    let mem = encoder_out.to_nodes(&mut g);
    let loss = teacher_forced_loss_graph(&mut g, config, &mem, target)?;
    Ok(g.value(loss).item())
}

/// Logits for the token after `prefix`, and optionally the newest
/// position's cross-attention weights.
pub fn decode_step(
    prefix: &[usize],
    encoder_out: &EncoderOutput,
    params: &ParameterSet,
    config: &DecoderConfig,
    record_attention: bool,
) -> Result<(Vec<f64>, Option<StepAttention>)> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::InvalidInput("prefix must start with BOS".into()));
    }
    let mut g = Graph::new(params);
    let mem = encoder_out.to_nodes(&mut g);
    let fwd = decoder_graph(&mut g, config, &mem, prefix)?;
    let logits = g.value(fwd.logits);
    let last = logits.row(logits.rows() - 1).to_vec();
    let attention = record_attention.then(|| {
        let t = prefix.len() - 1;
        fwd.cross_attention
            .iter()
            .map(|&node| {
                let heads = g.attention_weights(node).expect("cross-attention node");
                let cols = encoder_out.visual_len() + encoder_out.text_len();
                heads.iter().map(|w| w[t * cols..(t + 1) * cols].to_vec()).collect()
            })
            .collect()
    });
    Ok((last, attention))
}

/// Cross-attention weights for every generated step of `hyp`, from one
/// forward pass (causality makes this equal to recording step by step).
pub fn attention_record(
    encoder_out: &EncoderOutput,
    hyp: &CaptionHypothesis,
    params: &ParameterSet,
    config: &DecoderConfig,
) -> Result<AttentionRecord> {
    if hyp.tokens.len() < 2 {
        return Err(Error::InvalidInput("hypothesis has no generated tokens".into()));
    }
    let mut g = Graph::new(params);
    let mem = encoder_out.to_nodes(&mut g);
    let inputs = &hyp.tokens[..hyp.tokens.len() - 1];
    let fwd = decoder_graph(&mut g, config, &mem, inputs)?;
    let cols = encoder_out.visual_len() + encoder_out.text_len();
    let weights = fwd
        .cross_attention
        .iter()
        .map(|&node| {
            g.attention_weights(node)
                .expect("cross-attention node")
                .iter()
                .map(|w| w.chunks(cols).map(<[f64]>::to_vec).collect())
                .collect()
        })
        .collect();
    Ok(AttentionRecord {
        image_id: String::new(),
        visual_len: encoder_out.visual_len(),
        text_len: encoder_out.text_len(),
        weights,
    })
}

fn check_max_len(max_len: usize, config: &DecoderConfig) -> Result<()> {
    if max_len == 0 || max_len > config.max_len {
        return Err(Error::InvalidInput(format!(
            "max_len {max_len} outside 1..={}",
            config.max_len
        )));
    }
    Ok(())
}

/// Index of the largest value; ties go to the smaller index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(
    encoder_out: &EncoderOutput,
    params: &ParameterSet,
    config: &DecoderConfig,
    max_len: usize,
) -> Result<CaptionHypothesis> {
    check_max_len(max_len, config)?;
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let (logits, _) = decode_step(&tokens, encoder_out, params, config, false)?;
        let lp = log_softmax_row(&logits);
        let next = argmax(&lp);
        tokens.push(next);
        log_prob += lp[next];
        if next == EOS {
            break;
        }
    }
    Ok(CaptionHypothesis {
        tokens,
        log_prob,
        finished: true,
    })
}

/// Beam search over summed log-probabilities without length normalization.
/// Each step keeps the best `beam_width` extensions; those ending in EOS
/// retire to the finished pool. The result is never worse than greedy
/// decoding.
pub fn beam_search(
    encoder_out: &EncoderOutput,
    params: &ParameterSet,
    config: &DecoderConfig,
    beam_width: usize,
    max_len: usize,
) -> Result<CaptionHypothesis> {
    if beam_width == 0 {
        return Err(Error::InvalidInput("beam_width must be at least 1".into()));
    }
    check_max_len(max_len, config)?;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
    for step in 0..max_len {
        let mut candidates = Vec::with_capacity(live.len() * config.vocab_size);
        for (tokens, score) in &live {
            let (logits, _) = decode_step(tokens, encoder_out, params, config, false)?;
            for (v, lp) in log_softmax_row(&logits).into_iter().enumerate() {
                let mut ext = tokens.clone();
                ext.push(v);
                candidates.push((ext, score + lp));
            }
        }
        candidates.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        candidates.truncate(beam_width);
        live.clear();
        for (tokens, score) in candidates {
            if tokens.last() == Some(&EOS) || step + 1 == max_len {
                done.push((tokens, score));
            } else {
                live.push((tokens, score));
            }
        }
        // Scores only fall as sequences grow.
        let best_done = done.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done > best_live {
            break;
        }
    }
    done.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
    let (tokens, log_prob) = done.swap_remove(0);
    let beam = CaptionHypothesis {
        tokens,
        log_prob,
        finished: true,
    };
    if beam_width == 1 {
        return Ok(beam);
    }
    let greedy = greedy_decode(encoder_out, params, config, max_len)?;
    if rank(greedy.log_prob, &greedy.tokens, beam.log_prob, &beam.tokens) == Ordering::Less {
        Ok(greedy)
    } else {
        Ok(beam)
    }
}

/// Draws each token from the softmax of the logits (inverse CDF on a
/// seeded stream).
pub fn sample_sequence(
    encoder_out: &EncoderOutput,
    params: &ParameterSet,
    config: &DecoderConfig,
    seed: u64,
    max_len: usize,
) -> Result<CaptionHypothesis> {
    check_max_len(max_len, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let (logits, _) = decode_step(&tokens, encoder_out, params, config, false)?;
        let lp = log_softmax_row(&logits);
        let next = sample_index(&lp, rng.random::<f64>());
        tokens.push(next);
        log_prob += lp[next];
        if next == EOS {
            break;
        }
    }
    Ok(CaptionHypothesis {
        tokens,
        log_prob,
        finished: true,
    })
}

/// Inverse-CDF draw from a distribution given as log-probabilities.
pub fn sample_index(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}
